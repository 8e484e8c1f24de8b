//! Feature-file container (`.acft`).
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ACFT"
//! 4       2     version (1)
//! 6       1     float dtype code (1 = f32)
//! 7       1     reserved (0)
//! 8       4     grid height h
//! 12      4     grid width w
//! 16      4     embedding width d
//! 20      4     original image height (0 = unknown)
//! 24      4     original image width  (0 = unknown)
//! 28      2     patch size (0 = unknown)
//! 30      2     image id length L
//! 32      L     image id, UTF-8
//! 32+L    2     section count S
//! ...     36·S  section table, one entry per section:
//!                 u16 kind, u8 element code, u8 rank,
//!                 4 × u32 extents (unused = 0),
//!                 u64 payload offset from file start, u64 payload bytes
//! ...           payloads, back to back in table order
//! ```
//!
//! Section kinds: 1 features `f32 [h·w, d]`, 2 attention `f32 [heads, h·w]`,
//! 3 labels `u8 [H, W]`, 4 region embeddings `f32 [r, e]`, 5 region
//! metadata `u32 [r, 3]` (concept id, pixel count, source), 6 class
//! embeddings `f32 [classes, e]`. Element codes: 1 f32, 2 u8, 3 u32.
//! Pixel rows are in row-major spatial order with the origin at the top
//! left. Readers skip sections with unknown kinds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::labelmap::LabelMap;
use crate::classifier::{RegionEmbedding, RegionSource};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ACFT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
const FIXED_HEADER: u64 = 32;
const TABLE_ENTRY: u64 = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum SectionKind {
    Features = 1,
    Attention = 2,
    Labels = 3,
    RegionEmbeddings = 4,
    RegionMeta = 5,
    ClassEmbeddings = 6,
}

impl SectionKind {
    fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            1 => Self::Features,
            2 => Self::Attention,
            3 => Self::Labels,
            4 => Self::RegionEmbeddings,
            5 => Self::RegionMeta,
            6 => Self::ClassEmbeddings,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Features => "features",
            Self::Attention => "attention",
            Self::Labels => "labels",
            Self::RegionEmbeddings => "region-embeddings",
            Self::RegionMeta => "region-meta",
            Self::ClassEmbeddings => "class-embeddings",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ElementCode {
    F32 = 1,
    U8 = 2,
    U32 = 3,
}

impl ElementCode {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Self::F32,
            2 => Self::U8,
            3 => Self::U32,
            _ => return None,
        })
    }

    pub fn size(self) -> u64 {
        match self {
            Self::F32 | Self::U32 => 4,
            Self::U8 => 1,
        }
    }
}

/// One row of the section table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionEntry {
    pub kind: u16,
    pub element: u8,
    pub extents: Vec<u32>,
    pub offset: u64,
    pub byte_len: u64,
}

impl SectionEntry {
    pub fn known_kind(&self) -> Option<SectionKind> {
        SectionKind::from_code(self.kind)
    }

    fn label(&self) -> String {
        self.known_kind()
            .map_or_else(|| format!("section {}", self.kind), |k| k.name().to_string())
    }
}

/// Pixel embeddings of one image plus the optional side data the
/// extractor can attach.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub id: String,
    /// `(height, width)` of the patch grid.
    pub grid: (usize, usize),
    /// `n×d` embeddings, `n = height·width`, row-major, origin top-left.
    pub features: Tensor<f64>,
    /// `heads×n` class-token attention from the last layer.
    pub attention: Option<Tensor<f64>>,
    pub original_size: Option<(usize, usize)>,
    pub patch_size: Option<u16>,
    pub labels: Option<LabelMap>,
    pub regions: Vec<RegionEmbedding>,
    pub class_embeddings: Option<Tensor<f64>>,
}

impl FeatureMap {
    pub fn new(id: impl Into<String>, grid: (usize, usize), features: Tensor<f64>) -> Self {
        Self {
            id: id.into(),
            grid,
            features,
            attention: None,
            original_size: None,
            patch_size: None,
            labels: None,
            regions: Vec::new(),
            class_embeddings: None,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Resolution that inference upsamples to: the original image size
    /// when known, the grid otherwise.
    pub fn target_size(&self) -> (usize, usize) {
        self.original_size.unwrap_or(self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixel_count();
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return Err(FormatError::malformed(
                "feature map",
                format!("{:?} features for a {}x{} grid", self.features.shape(), self.grid.0, self.grid.1),
            )
            .into());
        }
        if let Some(a) = &self.attention {
            if a.cols() != n {
                return Err(FormatError::malformed("attention", format!("{} columns for {n} pixels", a.cols())).into());
            }
        }
        if let Some(e) = self.regions.first() {
            let dim = e.embedding.len();
            if self.regions.iter().any(|r| r.embedding.len() != dim) {
                return Err(FormatError::malformed("region embeddings", "ragged embedding widths").into());
            }
        }
        Ok(())
    }
}

fn dims_u32(extents: &[usize]) -> Result<Vec<u32>> {
    extents
        .iter()
        .map(|&e| {
            u32::try_from(e).map_err(|_| FormatError::malformed("extent", format!("{e} does not fit in u32")).into())
        })
        .collect()
}

struct PendingSection {
    kind: SectionKind,
    element: ElementCode,
    extents: Vec<u32>,
    payload: Vec<u8>,
}

fn f32_payload(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn pending_sections(map: &FeatureMap) -> Result<Vec<PendingSection>> {
    let mut out = vec![PendingSection {
        kind: SectionKind::Features,
        element: ElementCode::F32,
        extents: dims_u32(&[map.features.rows(), map.features.cols()])?,
        payload: f32_payload(map.features.data()),
    }];
    if let Some(a) = &map.attention {
        out.push(PendingSection {
            kind: SectionKind::Attention,
            element: ElementCode::F32,
            extents: dims_u32(&[a.rows(), a.cols()])?,
            payload: f32_payload(a.data()),
        });
    }
    if let Some(l) = &map.labels {
        out.push(PendingSection {
            kind: SectionKind::Labels,
            element: ElementCode::U8,
            extents: dims_u32(&[l.height, l.width])?,
            payload: l.data.clone(),
        });
    }
    if !map.regions.is_empty() {
        let r = map.regions.len();
        let e = map.regions[0].embedding.len();
        let flat: Vec<f64> = map.regions.iter().flat_map(|x| x.embedding.iter().copied()).collect();
        out.push(PendingSection {
            kind: SectionKind::RegionEmbeddings,
            element: ElementCode::F32,
            extents: dims_u32(&[r, e])?,
            payload: f32_payload(&flat),
        });
        let mut meta = Vec::with_capacity(r * 12);
        for reg in &map.regions {
            for v in [reg.concept as u32, reg.pixel_count as u32, reg.source.code()] {
                meta.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(PendingSection {
            kind: SectionKind::RegionMeta,
            element: ElementCode::U32,
            extents: dims_u32(&[r, 3])?,
            payload: meta,
        });
    }
    if let Some(c) = &map.class_embeddings {
        out.push(PendingSection {
            kind: SectionKind::ClassEmbeddings,
            element: ElementCode::F32,
            extents: dims_u32(&[c.rows(), c.cols()])?,
            payload: f32_payload(c.data()),
        });
    }
    Ok(out)
}

/// Serializes a feature map. Values are narrowed to f32.
pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    map.validate()?;
    let id = map.id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| FormatError::malformed("image id", "longer than 65535 bytes"))?;
    let sections = pending_sections(map)?;
    let (oh, ow) = map.original_size.unwrap_or((0, 0));
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.write_u16::<LE>(VERSION).unwrap();
    buf.write_u8(DTYPE_F32).unwrap();
    buf.write_u8(0).unwrap();
    for v in dims_u32(&[map.grid.0, map.grid.1, map.dim(), oh, ow])? {
        buf.write_u32::<LE>(v).unwrap();
    }
    buf.write_u16::<LE>(map.patch_size.unwrap_or(0)).unwrap();
    buf.write_u16::<LE>(id_len).unwrap();
    buf.extend_from_slice(id);
    buf.write_u16::<LE>(sections.len() as u16).unwrap();
    let mut offset = buf.len() as u64 + TABLE_ENTRY * sections.len() as u64;
    for s in &sections {
        buf.write_u16::<LE>(s.kind as u16).unwrap();
        buf.write_u8(s.element as u8).unwrap();
        buf.write_u8(s.extents.len() as u8).unwrap();
        for i in 0..4 {
            buf.write_u32::<LE>(s.extents.get(i).copied().unwrap_or(0)).unwrap();
        }
        buf.write_u64::<LE>(offset).unwrap();
        buf.write_u64::<LE>(s.payload.len() as u64).unwrap();
        offset += s.payload.len() as u64;
    }
    for s in &sections {
        buf.extend_from_slice(&s.payload);
    }
    Ok(buf)
}

pub fn write_feature_file(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_map(map)?;
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| FormatError::io(path, e))?;
    w.flush().map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

/// Parsed header and section table.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHeader {
    pub version: u16,
    pub dtype: u8,
    pub grid: (usize, usize),
    pub dim: usize,
    pub original_size: Option<(usize, usize)>,
    pub patch_size: Option<u16>,
    pub id: String,
    pub sections: Vec<SectionEntry>,
}

impl FeatureHeader {
    pub fn section(&self, kind: SectionKind) -> Option<&SectionEntry> {
        self.sections.iter().find(|s| s.kind == kind as u16)
    }
}

fn truncated(section: &str, offset: u64, needed: u64, available: u64) -> FormatError {
    FormatError::Truncated {
        section: section.to_string(),
        offset,
        needed,
        available,
    }
}

fn read_header<R: Read>(r: &mut R, file_len: u64) -> Result<FeatureHeader> {
    let short = |e: std::io::Error| -> FormatError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            truncated("header", 0, FIXED_HEADER, file_len)
        } else {
            FormatError::malformed("header", e.to_string())
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.read_u16::<LE>().map_err(short)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let dtype = r.read_u8().map_err(short)?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(dtype).into());
    }
    let _reserved = r.read_u8().map_err(short)?;
    let mut dims = [0u32; 5];
    for d in &mut dims {
        *d = r.read_u32::<LE>().map_err(short)?;
    }
    let patch = r.read_u16::<LE>().map_err(short)?;
    let id_len = r.read_u16::<LE>().map_err(short)? as u64;
    let mut id = vec![0u8; id_len as usize];
    r.read_exact(&mut id)
        .map_err(|_| truncated("image id", FIXED_HEADER, id_len, file_len))?;
    let id = String::from_utf8(id).map_err(|e| FormatError::malformed("image id", e.to_string()))?;
    let table_start = FIXED_HEADER + id_len;
    let count = r
        .read_u16::<LE>()
        .map_err(|_| truncated("section table", table_start, 2, file_len))?;
    let mut sections = Vec::with_capacity(count as usize);
    for i in 0..count as u64 {
        let entry_off = table_start + 2 + i * TABLE_ENTRY;
        let mut raw = [0u8; TABLE_ENTRY as usize];
        r.read_exact(&mut raw)
            .map_err(|_| truncated("section table", entry_off, TABLE_ENTRY, file_len))?;
        let mut c = &raw[..];
        let kind = c.read_u16::<LE>().unwrap();
        let element = c.read_u8().unwrap();
        let rank = c.read_u8().unwrap() as usize;
        let mut ext = [0u32; 4];
        for e in &mut ext {
            *e = c.read_u32::<LE>().unwrap();
        }
        let offset = c.read_u64::<LE>().unwrap();
        let byte_len = c.read_u64::<LE>().unwrap();
        if rank > 4 {
            return Err(FormatError::malformed("section table", format!("rank {rank} > 4")).into());
        }
        sections.push(SectionEntry {
            kind,
            element,
            extents: ext[..rank].to_vec(),
            offset,
            byte_len,
        });
    }
    let opt = |h: u32, w: u32| if h == 0 && w == 0 { None } else { Some((h as usize, w as usize)) };
    Ok(FeatureHeader {
        version,
        dtype,
        grid: (dims[0] as usize, dims[1] as usize),
        dim: dims[2] as usize,
        original_size: opt(dims[3], dims[4]),
        patch_size: (patch != 0).then_some(patch),
        id,
        sections,
    })
}

/// Open feature file: header parsed, payloads read on demand.
pub struct FeatureFile<R> {
    reader: R,
    len: u64,
    pub header: FeatureHeader,
}

impl FeatureFile<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
        let len = file.metadata().map_err(|e| FormatError::io(path, e))?.len();
        Self::from_reader(BufReader::new(file), len)
    }
}

impl<'b> FeatureFile<std::io::Cursor<&'b [u8]>> {
    pub fn from_bytes(bytes: &'b [u8]) -> Result<Self> {
        Self::from_reader(std::io::Cursor::new(bytes), bytes.len() as u64)
    }
}

impl<R: Read + Seek> FeatureFile<R> {
    pub fn from_reader(mut reader: R, len: u64) -> Result<Self> {
        let header = read_header(&mut reader, len)?;
        Ok(Self { reader, len, header })
    }

    fn raw(&mut self, entry: &SectionEntry) -> Result<Vec<u8>> {
        let label = entry.label();
        let element = ElementCode::from_code(entry.element)
            .ok_or_else(|| FormatError::malformed(&label, format!("unknown element code {}", entry.element)))?;
        let count: u64 = entry.extents.iter().map(|&e| e as u64).product();
        if count * element.size() != entry.byte_len {
            return Err(FormatError::malformed(
                &label,
                format!("extents {:?} disagree with {} payload bytes", entry.extents, entry.byte_len),
            )
            .into());
        }
        let end = entry.offset.checked_add(entry.byte_len);
        if end.map_or(true, |e| e > self.len) {
            return Err(truncated(&label, entry.offset, entry.byte_len, self.len).into());
        }
        self.reader
            .seek(SeekFrom::Start(entry.offset))
            .map_err(|e| FormatError::malformed(&label, e.to_string()))?;
        let mut buf = vec![0u8; entry.byte_len as usize];
        self.reader
            .read_exact(&mut buf)
            .map_err(|_| truncated(&label, entry.offset, entry.byte_len, self.len))?;
        Ok(buf)
    }

    fn entry(&self, kind: SectionKind) -> Option<SectionEntry> {
        self.header.section(kind).cloned()
    }

    fn f32_matrix(&mut self, kind: SectionKind) -> Result<Option<Tensor<f64>>> {
        let Some(entry) = self.entry(kind) else { return Ok(None) };
        if entry.element != ElementCode::F32 as u8 || entry.extents.len() != 2 {
            return Err(FormatError::malformed(kind.name(), "expected a rank-2 f32 section").into());
        }
        let raw = self.raw(&entry)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::from_rows(entry.extents[0] as usize, entry.extents[1] as usize, data)
            .map_err(|e| FormatError::malformed(kind.name(), e.to_string()))?;
        Ok(Some(t))
    }

    pub fn read_features(&mut self) -> Result<Tensor<f64>> {
        let t = self
            .f32_matrix(SectionKind::Features)?
            .ok_or_else(|| FormatError::malformed("feature file", "no features section"))?;
        let (h, w) = self.header.grid;
        if t.rows() != h * w || t.cols() != self.header.dim {
            return Err(FormatError::malformed(
                "features",
                format!("shape {:?} vs header grid {h}x{w}, width {}", t.shape(), self.header.dim),
            )
            .into());
        }
        Ok(t)
    }

    pub fn read_attention(&mut self) -> Result<Option<Tensor<f64>>> {
        self.f32_matrix(SectionKind::Attention)
    }

    pub fn read_class_embeddings(&mut self) -> Result<Option<Tensor<f64>>> {
        self.f32_matrix(SectionKind::ClassEmbeddings)
    }

    pub fn read_labels(&mut self) -> Result<Option<LabelMap>> {
        let Some(entry) = self.entry(SectionKind::Labels) else { return Ok(None) };
        if entry.element != ElementCode::U8 as u8 || entry.extents.len() != 2 {
            return Err(FormatError::malformed("labels", "expected a rank-2 u8 section").into());
        }
        let data = self.raw(&entry)?;
        Ok(Some(LabelMap {
            height: entry.extents[0] as usize,
            width: entry.extents[1] as usize,
            data,
        }))
    }

    pub fn read_regions(&mut self) -> Result<Vec<RegionEmbedding>> {
        let Some(emb) = self.f32_matrix(SectionKind::RegionEmbeddings)? else { return Ok(Vec::new()) };
        let entry = self
            .entry(SectionKind::RegionMeta)
            .ok_or_else(|| FormatError::malformed("region-embeddings", "missing region-meta section"))?;
        if entry.element != ElementCode::U32 as u8 || entry.extents != [emb.rows() as u32, 3] {
            return Err(FormatError::malformed("region-meta", format!("extents {:?}", entry.extents)).into());
        }
        let raw = self.raw(&entry)?;
        let meta: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        (0..emb.rows())
            .map(|r| {
                let source = RegionSource::from_code(meta[r * 3 + 2])
                    .ok_or_else(|| FormatError::malformed("region-meta", format!("source code {}", meta[r * 3 + 2])))?;
                Ok(RegionEmbedding {
                    concept: meta[r * 3] as usize,
                    pixel_count: meta[r * 3 + 1] as usize,
                    source,
                    embedding: emb.row(r).to_vec(),
                    foreground_score: None,
                })
            })
            .collect()
    }

    pub fn file_len(&self) -> u64 {
        self.len
    }

    pub fn into_feature_map(mut self) -> Result<FeatureMap> {
        let features = self.read_features()?;
        let map = FeatureMap {
            id: self.header.id.clone(),
            grid: self.header.grid,
            features,
            attention: self.read_attention()?,
            original_size: self.header.original_size,
            patch_size: self.header.patch_size,
            labels: self.read_labels()?,
            regions: self.read_regions()?,
            class_embeddings: self.read_class_embeddings()?,
        };
        map.validate()?;
        Ok(map)
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    FeatureFile::open(path)?.into_feature_map()
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    FeatureFile::from_bytes(bytes)?.into_feature_map()
}

/// Payload bytes a features section of `n` rows and width `d` occupies.
pub fn feature_section_bytes(n: usize, d: usize) -> u64 {
    (n * d) as u64 * ElementCode::F32.size()
}
