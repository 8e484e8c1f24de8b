//! 8-bit label maps.
//!
//! Raw grid files (`.lbl`): magic `"ACLB"`, `u16` version 1, `u16`
//! reserved, `u32` height, `u32` width (little-endian), then
//! `height·width` label bytes in row-major order. Label maps can also be
//! exported as 8-bit grayscale PNG where the gray level is the label.

use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};

pub const LABEL_MAGIC: [u8; 4] = *b"ACLB";
pub const LABEL_VERSION: u16 = 1;
/// Conventional "not evaluated" label.
pub const DEFAULT_IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FormatError::malformed(
                "label map",
                format!("{} labels for {height}x{width}", data.len()),
            )
            .into());
        }
        Ok(Self { height, width, data })
    }

    /// Builds a label map from concept indices; indices must fit in a byte.
    pub fn from_indices(height: usize, width: usize, labels: &[usize]) -> Result<Self> {
        let data = labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| FormatError::malformed("label map", format!("label {l} > 255"))))
            .collect::<std::result::Result<Vec<u8>, _>>()?;
        Self::new(height, width, data)
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len());
        out.extend_from_slice(&LABEL_MAGIC);
        out.extend_from_slice(&LABEL_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(FormatError::Truncated {
                section: "label header".into(),
                offset: 0,
                needed: 16,
                available: bytes.len() as u64,
            }
            .into());
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != LABEL_MAGIC {
            return Err(FormatError::BadMagic {
                expected: LABEL_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != LABEL_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < h * w {
            return Err(FormatError::Truncated {
                section: "labels".into(),
                offset: 16,
                needed: (h * w) as u64,
                available: bytes.len() as u64,
            }
            .into());
        }
        Self::new(h, w, body[..h * w].to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| FormatError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| FormatError::malformed("label map", "buffer size mismatch"))?;
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| FormatError::malformed("png export", e.to_string()))?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| FormatError::malformed("png import", e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    /// Reads `.lbl` or `.png` by extension.
    pub fn read_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Self::read_png(path),
            _ => Self::read(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_and_truncation() {
        let m = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        let bytes = m.encode();
        assert_eq!(bytes.len(), 22);
        assert_eq!(LabelMap::decode(&bytes).unwrap(), m);
        assert!(LabelMap::decode(&bytes[..20]).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        assert!(LabelMap::from_indices(1, 1, &[256]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = LabelMap::new(3, 2, vec![0, 7, 7, 1, 255, 3]).unwrap();
        m.write_png(&p).unwrap();
        assert_eq!(LabelMap::read_any(&p).unwrap(), m);
    }
}
