//! Model files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic     8 bytes  "AUGSHUF\0"
//! version   u32      1
//! hdr_len   u32
//! header    hdr_len bytes of UTF-8 JSON: {"config": ArchConfig, "normalization": ... | null}
//! count     u32      number of arrays
//! count times:
//!   name_len u32, name (UTF-8), rank u32, rank x u32 dims,
//!   prod(dims) x f32 little-endian values
//! ```
//!
//! Arrays are written in parameter-visit order and include the BN running
//! statistics. Loading requires every array of the rebuilt model to be
//! present with the stored shape.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{ArchConfig, Model};
use crate::params::Parameters;

pub const MAGIC: &[u8; 8] = b"AUGSHUF\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ArchConfig,
    pub normalization: Option<Normalization>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &Model<f32>, normalization: Option<Normalization>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        normalization,
    })?;
    let mut arrays = Vec::new();
    model.visit(&mut |p| arrays.push((p.name, p.shape, p.data.to_vec())));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, arrays.len())?;
    for (name, shape, data) in arrays {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len())?;
        for d in shape {
            put_u32(&mut out, d)?;
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "truncated model file at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Model<f32>, Header)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported model file version {version}"
        )));
    }
    let hdr_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(hdr_len)?)?;
    let count = r.u32()?;
    let mut arrays = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("array too large".into()))?,
            )?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.insert(name, (shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut model = Model::<f32>::build(header.config.clone(), 0)?;
    let mut failure = None;
    model.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match arrays.remove(&p.name) {
            Some((shape, data)) if shape == p.shape => p.data.copy_from_slice(&data),
            Some((shape, _)) => {
                failure = Some(Error::Format(format!(
                    "{}: stored shape {shape:?}, expected {:?}",
                    p.name, p.shape
                )))
            }
            None => failure = Some(Error::Format(format!("missing array {}", p.name))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array {extra}")));
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model<f32>, normalization: Option<Normalization>) -> Result<()> {
    fs::write(path, encode(model, normalization)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, Header)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Width;
    use crate::tensor::Tensor;

    fn model() -> Model<f32> {
        let mut m = Model::build(ArchConfig::aug(Width::Half, 10), 3).unwrap();
        m.stem_norm.running_mean[0] = 0.25;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let norm = Normalization {
            mean: [0.1, 0.2, 0.3],
            std: [0.5, 0.5, 0.5],
        };
        let bytes = encode(&m, Some(norm)).unwrap();
        let (back, header) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.normalization, Some(norm));
        let x = Tensor::from_fn([1, 3, 32, 32], |[_, c, y, x]| (c + y * x) as f32 / 100.0);
        assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&model(), None).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }
}
