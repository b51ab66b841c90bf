//! Binary checkpoints: `"LLEB"`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LLEB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberHeader {
    pub seed: u64,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub seed: u64,
    pub members: Vec<MemberHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub method: String,
    pub architecture: crate::nets::Architecture,
    /// Snapshot of the experiment configuration as TOML.
    pub config: String,
    pub runs: Vec<RunHeader>,
}

impl Header {
    fn metas(&self) -> impl Iterator<Item = &TensorMeta> {
        self.runs
            .iter()
            .flat_map(|r| r.members.iter())
            .flat_map(|m| m.tensors.iter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    /// All tensors, in the order the header lists them.
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let metas: Vec<&TensorMeta> = self.header.metas().collect();
        if metas.len() != self.tensors.len()
            || metas
                .iter()
                .zip(&self.tensors)
                .any(|(m, t)| m.shape != t.shape())
        {
            return Err(Error::Format(
                "checkpoint header does not describe its tensors".into(),
            ));
        }
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!(
                "checkpoint of {} bytes has no header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(format!(
                "expected \"LLEB\", found {:?}",
                &bytes[..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[16..];
        if rest.len() < hlen {
            return Err(Error::Truncated("checkpoint header cut short".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])?;
        let mut payload = &rest[hlen..];
        let mut tensors = Vec::new();
        for meta in header.metas() {
            let n: usize = meta.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(Error::Truncated(format!(
                    "payload ends inside tensor {}",
                    meta.name
                )));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[8 * n..];
            tensors.push(Tensor::new(meta.shape.clone(), data)?);
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len()
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Architecture;

    fn sample() -> Checkpoint {
        let a = Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::vector(vec![std::f64::consts::PI]);
        Checkpoint {
            header: Header {
                method: "default".into(),
                architecture: Architecture::two_moons_mlp(4, 0.1),
                config: String::new(),
                runs: vec![RunHeader {
                    seed: 0,
                    members: vec![MemberHeader {
                        seed: 0,
                        tensors: vec![
                            TensorMeta {
                                name: "a".into(),
                                shape: vec![2, 2],
                            },
                            TensorMeta {
                                name: "b".into(),
                                shape: vec![1],
                            },
                        ],
                    }],
                }],
            },
            tensors: vec![a, b],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        for (x, y) in c.tensors.iter().zip(&back.tensors) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(back.header, c.header);
    }

    #[test]
    fn bad_magic_truncation_and_version() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::BadMagic(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(Error::VersionMismatch {
                expected: 1,
                found: 9
            })
        ));
    }
}
