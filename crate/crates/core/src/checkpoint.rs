//! Model checkpoints.
//!
//! Layout (integers little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 8 | magic `EETCKPT\0` |
//! | 8  | 4 | format version, `u32` = 1 |
//! | 12 | 4 | config length `H` |
//! | 16 | H | model config, UTF-8 JSON |
//! | 16+H | 4 | tensor count `N` |
//!
//! Then `N` tensors, each: `u32` name length, UTF-8 name, `u32` rank, one
//! `u32` per dimension, then the `f64` values row-major. Feature
//! standardization, when present, is stored as the tensors
//! `standardize.mean` and `standardize.scale`.

use std::fs;
use std::path::Path;

use crate::error::{EetError, Result};
use crate::model::{EetConfig, EetParams};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::Standardizer;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"EETCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const MEAN: &str = "standardize.mean";
const SCALE: &str = "standardize.scale";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EetParams,
    pub standardizer: Option<Standardizer>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(EetError::Truncated {
                path: self.path.to_path_buf(),
                record,
            });
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, record: usize) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().expect("4 bytes")) as usize)
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| EetError::contract(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(self.model.config()).expect("config serializes");
        let mut tensors: Vec<(&str, &Tensor)> = self.model.params().iter().collect();
        let stats;
        if let Some(z) = &self.standardizer {
            stats = [
                Tensor::new(vec![z.mean.len()], z.mean.clone())?,
                Tensor::new(vec![z.scale.len()], z.scale.clone())?,
            ];
            tensors.push((MEAN, &stats[0]));
            tensors.push((SCALE, &stats[1]));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        push_u32(&mut out, config.len())?;
        out.extend_from_slice(&config);
        push_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                push_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `path` only labels errors. Truncation reports the
    /// index of the tensor being read.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| EetError::CorruptHeader {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(EetError::BadMagic {
                path: path.to_path_buf(),
                expected: "checkpoint",
            });
        }
        let mut r = Reader { bytes, at: 8, path };
        let version = r
            .u32(0)
            .map_err(|_| corrupt("header ends before the version field".into()))?
            as u32;
        if version != CHECKPOINT_VERSION {
            return Err(EetError::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header = (|| {
            let len = r.u32(0)?;
            r.take(len, 0)
        })()
        .map_err(|_| corrupt("config block runs past end of file".into()))?;
        let config: EetConfig = serde_json::from_slice(header)
            .map_err(|e| corrupt(format!("config is not valid: {e}")))?;
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        let count = r
            .u32(0)
            .map_err(|_| corrupt("missing tensor count".into()))?;
        let mut params = ParamSet::new();
        let (mut mean, mut scale) = (None, None);
        for i in 0..count {
            let name_len = r.u32(i)?;
            let name = std::str::from_utf8(r.take(name_len, i)?)
                .map_err(|_| {
                    EetError::Parse(format!("{}: tensor {i} name is not UTF-8", path.display()))
                })?
                .to_string();
            let rank = r.u32(i)?;
            if rank > 8 {
                return Err(EetError::Parse(format!(
                    "{}: tensor {name} has rank {rank}",
                    path.display()
                )));
            }
            let shape = (0..rank).map(|_| r.u32(i)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| {
                    EetError::Parse(format!("{}: tensor {name} is too large", path.display()))
                })?;
            let data = r
                .take(numel, i)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.as_str() {
                MEAN => mean = Some(t.into_data()),
                SCALE => scale = Some(t.into_data()),
                _ => params.insert(name, t),
            }
        }
        if r.at != bytes.len() {
            return Err(EetError::Parse(format!(
                "{}: {} trailing bytes",
                path.display(),
                bytes.len() - r.at
            )));
        }
        let standardizer = match (mean, scale) {
            (Some(mean), Some(scale)) if mean.len() == scale.len() => {
                Some(Standardizer { mean, scale })
            }
            (None, None) => None,
            _ => {
                return Err(EetError::Parse(format!(
                    "{}: incomplete standardization tensors",
                    path.display()
                )))
            }
        };
        Ok(Self {
            model: EetParams::from_parts(config, params)?,
            standardizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| EetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EetError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;

    fn sample() -> Checkpoint {
        let mut config = EetConfig::toy(AttentionVariant::Divided);
        config.seed = 11;
        let mut model = EetParams::init(&config).unwrap();
        // Make the zero-initialized tensors non-trivial too.
        for (_, t) in model.params_mut().iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += (i as f64 * 0.37).sin() * 1e-3;
            }
        }
        Checkpoint {
            model,
            standardizer: Some(Standardizer {
                mean: vec![0.1, -2.5, 1.0 / 3.0],
                scale: vec![1.0, 0.7, 3.0],
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let plain = Checkpoint {
            standardizer: None,
            ..ck
        };
        let back = Checkpoint::from_bytes(&plain.to_bytes().unwrap(), Path::new("m")).unwrap();
        assert_eq!(back, plain);
    }

    #[test]
    fn damaged_files_fail_distinctly() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("m");
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(EetError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(EetError::Version { found: 7, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(EetError::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..20], p),
            Err(EetError::CorruptHeader { .. })
        ));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
