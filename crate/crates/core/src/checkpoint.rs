//! Generator checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "ACGP"  u16 version (1)  u16 flags (bit 0: optimizer state follows)
//! u32 config length, config as JSON
//! u32 tensor count
//! per tensor: u16 name length, name, u8 rank, rank × u32 extents, f64 values
//! if bit 0: u64 step, u32 length + optimizer config JSON,
//!           per tensor: u8 decay flag, f64 first moments, f64 second moments
//! ```
//!
//! Tensors appear in canonical parameter order and are matched by name on
//! load.

use std::fs;
use std::path::Path;

use crate::acg::{AcgConfig, AcgParams};
use crate::error::{Error, FormatError, Result};
use crate::optim::{AdamW, AdamWConfig, AdamWState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ACGP";
pub const CHECKPOINT_VERSION: u16 = 1;
const FLAG_OPTIMIZER: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AcgParams,
    pub optimizer: Option<AdamW>,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let flags = if ckpt.optimizer.is_some() { FLAG_OPTIMIZER } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    let config = serde_json::to_vec(&p.config).map_err(|e| FormatError::malformed("checkpoint config", e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = p.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, _), t) in p.names().iter().zip(&tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        if opt.state.first.len() != tensors.len() {
            return Err(Error::Config("optimizer state does not match the parameters".into()));
        }
        out.extend_from_slice(&opt.state.step.to_le_bytes());
        let oc = serde_json::to_vec(&opt.config).map_err(|e| FormatError::malformed("optimizer config", e.to_string()))?;
        out.extend_from_slice(&(oc.len() as u32).to_le_bytes());
        out.extend_from_slice(&oc);
        for i in 0..tensors.len() {
            out.push(u8::from(opt.decay[i]));
            put_f64s(&mut out, opt.state.first[i].data());
            put_f64s(&mut out, opt.state.second[i].data());
        }
    }
    Ok(out)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                section: section.to_string(),
                offset: self.pos as u64,
                needed: n as u64,
                available: (self.bytes.len() - self.pos) as u64,
            }
            .into());
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u8(&mut self, s: &str) -> Result<u8> {
        Ok(self.take(1, s)?[0])
    }

    fn u16(&mut self, s: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, s)?.try_into().unwrap()))
    }

    fn u32(&mut self, s: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, s)?.try_into().unwrap()))
    }

    fn u64(&mut self, s: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, s)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, s: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, s)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "header")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = cur.u16("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let flags = cur.u16("header")?;
    let len = cur.u32("config")? as usize;
    let config: AcgConfig = serde_json::from_slice(cur.take(len, "config")?)
        .map_err(|e| FormatError::malformed("checkpoint config", e.to_string()))?;
    config.validate()?;
    // a freshly initialized model supplies names and shapes
    let mut params = AcgParams::init(config)?;
    let names = params.names();
    let count = cur.u32("tensor table")? as usize;
    if count != names.len() {
        return Err(FormatError::malformed("checkpoint", format!("{count} tensors, expected {}", names.len())).into());
    }
    let mut shapes = Vec::with_capacity(count);
    for ((expected, _), slot) in names.iter().zip(params.tensors_mut()) {
        let nlen = cur.u16("tensor name")? as usize;
        let name = String::from_utf8(cur.take(nlen, "tensor name")?.to_vec())
            .map_err(|_| FormatError::malformed("tensor name", "not UTF-8"))?;
        if &name != expected {
            return Err(FormatError::malformed("checkpoint", format!("found tensor '{name}', expected '{expected}'")).into());
        }
        let rank = cur.u8(&name)? as usize;
        let shape = (0..rank).map(|_| Ok(cur.u32(&name)? as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Dimension(format!("{name}: stored shape {shape:?}, expected {:?}", slot.shape())));
        }
        let n = shape.iter().product();
        *slot = Tensor::new(shape.clone(), cur.f64s(n, &name)?)?;
        shapes.push(shape);
    }
    params.validate()?;
    let optimizer = if flags & FLAG_OPTIMIZER != 0 {
        let step = cur.u64("optimizer")?;
        let len = cur.u32("optimizer")? as usize;
        let config: AdamWConfig = serde_json::from_slice(cur.take(len, "optimizer")?)
            .map_err(|e| FormatError::malformed("optimizer config", e.to_string()))?;
        let mut decay = Vec::with_capacity(count);
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for shape in &shapes {
            let n = shape.iter().product();
            decay.push(cur.u8("optimizer")? != 0);
            first.push(Tensor::new(shape.clone(), cur.f64s(n, "optimizer")?)?);
            second.push(Tensor::new(shape.clone(), cur.f64s(n, "optimizer")?)?);
        }
        Some(AdamW {
            config,
            decay,
            state: AdamWState { step, first, second },
        })
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(FormatError::malformed("checkpoint", format!("{} trailing bytes", bytes.len() - cur.pos)).into());
    }
    Ok(Checkpoint { params, optimizer })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = AcgParams::init(AcgConfig::new(3, 8, 2).with_seed(5)).unwrap();
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &refs, vec![true; refs.len()]).unwrap();
        opt.state.step = 7;
        opt.state.first[3].data_mut()[0] = 0.25;
        Checkpoint {
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
        let bare = Checkpoint {
            optimizer: None,
            ..c
        };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&bare).unwrap()).unwrap(), bare);
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
