//! Dataset manifests.
//!
//! A manifest is a UTF-8 text file, one record per line:
//!
//! ```text
//! acseg-manifest 1
//! class 0 background
//! class 1 aeroplane
//! ignore 255
//! remap 94 12
//! file train/000001.acft
//! ```
//!
//! The first line is the format tag. `class` names a label index,
//! `ignore` sets the label excluded from evaluation, `remap` maps a source
//! label to an evaluation label (used for the 27-class COCO-Stuff subset),
//! and `file` lists a feature file relative to the manifest's directory.
//! Blank lines and lines starting with `#` are ignored.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::feature_file::{read_feature_file, FeatureMap};
use crate::error::{FormatError, Result};

pub const MANIFEST_TAG: &str = "acseg-manifest 1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub classes: BTreeMap<u32, String>,
    pub ignore_index: Option<u8>,
    pub remap: BTreeMap<u32, u32>,
    pub files: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == MANIFEST_TAG => {}
            other => {
                return Err(FormatError::malformed(
                    "manifest",
                    format!("expected '{MANIFEST_TAG}', found {:?}", other.map(|(_, l)| l)),
                )
                .into())
            }
        }
        let mut m = Manifest::default();
        for (no, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| FormatError::malformed(format!("manifest line {}", no + 1), reason.to_string());
            let (key, rest) = line.split_once(char::is_whitespace).ok_or_else(|| bad("missing value"))?;
            let rest = rest.trim();
            match key {
                "class" => {
                    let (idx, name) = rest.split_once(char::is_whitespace).ok_or_else(|| bad("class needs index and name"))?;
                    let idx = idx.parse().map_err(|_| bad("class index"))?;
                    m.classes.insert(idx, name.trim().to_string());
                }
                "ignore" => m.ignore_index = Some(rest.parse().map_err(|_| bad("ignore index"))?),
                "remap" => {
                    let (a, b) = rest.split_once(char::is_whitespace).ok_or_else(|| bad("remap needs two labels"))?;
                    m.remap.insert(a.parse().map_err(|_| bad("remap source"))?, b.trim().parse().map_err(|_| bad("remap target"))?);
                }
                "file" => m.files.push(PathBuf::from(rest)),
                other => return Err(bad(&format!("unknown record '{other}'")).into()),
            }
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{MANIFEST_TAG}\n");
        for (i, name) in &self.classes {
            writeln!(s, "class {i} {name}").unwrap();
        }
        if let Some(ig) = self.ignore_index {
            writeln!(s, "ignore {ig}").unwrap();
        }
        for (a, b) in &self.remap {
            writeln!(s, "remap {a} {b}").unwrap();
        }
        for f in &self.files {
            writeln!(s, "file {}", f.display()).unwrap();
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| FormatError::io(path, e))?;
        Ok(())
    }

    /// Applies the remap table to a label; unmapped labels pass through.
    pub fn remap_label(&self, label: u8) -> u8 {
        match self.remap.get(&(label as u32)) {
            Some(&t) => t as u8,
            None if self.remap.is_empty() => label,
            None => self.ignore_index.unwrap_or(super::labelmap::DEFAULT_IGNORE),
        }
    }
}

/// Random access to a collection of feature maps.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Cow<'_, FeatureMap>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FeatureSource for [FeatureMap] {
    fn len(&self) -> usize {
        <[FeatureMap]>::len(self)
    }

    fn load(&self, index: usize) -> Result<Cow<'_, FeatureMap>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl FeatureSource for Vec<FeatureMap> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<Cow<'_, FeatureMap>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Feature files listed in a manifest, read from disk one at a time.
#[derive(Clone, Debug)]
pub struct ManifestDataset {
    pub manifest: Manifest,
    pub root: PathBuf,
}

impl ManifestDataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = Manifest::read(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, root })
    }

    pub fn path(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.files[index])
    }
}

impl FeatureSource for ManifestDataset {
    fn len(&self) -> usize {
        self.manifest.files.len()
    }

    fn load(&self, index: usize) -> Result<Cow<'_, FeatureMap>> {
        Ok(Cow::Owned(read_feature_file(self.path(index))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let text = "acseg-manifest 1\n# comment\nclass 0 background\nclass 3 potted plant\nignore 255\nremap 94 12\n\nfile a/b.acft\nfile c.acft\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.classes[&3], "potted plant");
        assert_eq!(m.ignore_index, Some(255));
        assert_eq!(m.files.len(), 2);
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert_eq!(m.remap_label(94), 12);
        assert_eq!(m.remap_label(5), 255);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Manifest::parse("file x").is_err());
        assert!(Manifest::parse("acseg-manifest 1\nbogus 1").is_err());
        assert!(Manifest::parse("acseg-manifest 1\nclass x y").is_err());
    }
}
