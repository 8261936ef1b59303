//! Binary weights file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SLOTMOCO"
//! version  u32
//! config   8 × u64  d_model n_layers n_heads d_ff max_len vocab_size n_segments dropout_prob(f64 bits)
//! count    u64
//! count × { name_len u32, name utf-8, rank u32, dims rank × u64, data Π(dims) × f64 }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::Parameters;

pub const MAGIC: &[u8; 8] = b"SLOTMOCO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub config: EncoderConfig,
    pub arrays: Vec<NamedArray>,
}

impl WeightsFile {
    pub fn new(config: EncoderConfig) -> Self {
        WeightsFile {
            config,
            arrays: Vec::new(),
        }
    }

    pub fn push_params(&mut self, prefix: &str, params: &impl Parameters) {
        for t in params.tensors() {
            self.arrays.push(NamedArray {
                name: format!("{prefix}{}", t.name),
                shape: t.shape,
                data: t.data.to_vec(),
            });
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn array_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.arrays
            .iter()
            .map(|a| (a.name.clone(), (a.shape.clone(), a.data.clone())))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            c.d_model as u64,
            c.n_layers as u64,
            c.n_heads as u64,
            c.d_ff as u64,
            c.max_len as u64,
            c.vocab_size as u64,
            c.n_segments as u64,
            c.dropout_prob.to_bits(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Weights("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let mut field = || -> Result<usize> { Ok(r.u64()? as usize) };
        let d_model = field()?;
        let n_layers = field()?;
        let n_heads = field()?;
        let d_ff = field()?;
        let max_len = field()?;
        let vocab_size = field()?;
        let n_segments = field()?;
        let dropout_prob = f64::from_bits(r.u64()?);
        let config = EncoderConfig {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_len,
            vocab_size,
            n_segments,
            dropout_prob,
        };
        let count = r.u64()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Weights("array name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Weights(format!("array {name:?} is too large")))?;
            if numel > r.remaining() / 8 {
                return Err(Error::Weights(format!("array {name:?} is truncated")));
            }
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push(NamedArray { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Weights(format!("{} trailing bytes", r.remaining())));
        }
        Ok(WeightsFile { config, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing weights {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading weights {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Weights(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_weights(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let mut file = WeightsFile::new(params.config);
    file.push_params("", params);
    file.save(path)
}

/// Loads encoder weights; with `expected` set, the header must match it.
pub fn load_weights(path: impl AsRef<Path>, expected: Option<&EncoderConfig>) -> Result<EncoderParams> {
    let file = WeightsFile::load(path)?;
    if let Some(expected) = expected {
        if *expected != file.config {
            return Err(Error::Shape(format!(
                "weights header config {:?} does not match requested {:?}",
                file.config, expected
            )));
        }
    }
    file.config.validate()?;
    let mut params = EncoderParams::zeros(file.config);
    params.assign_from("", &file.array_map())?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 12,
            vocab_size: 9,
            n_segments: 2,
            dropout_prob: 0.3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = EncoderParams::init(config(), 42).unwrap();
        save_weights(&params, &path).unwrap();
        assert_eq!(load_weights(&path, Some(&config())).unwrap(), params);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut file = WeightsFile::new(config());
        file.push_params("", &EncoderParams::init(config(), 1).unwrap());
        let bytes = file.to_bytes();
        for cut in [4, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(WeightsFile::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightsFile::from_bytes(&bad).is_err());
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&EncoderParams::init(config(), 1).unwrap(), &path).unwrap();
        let other = EncoderConfig { d_model: 16, ..config() };
        assert!(matches!(load_weights(&path, Some(&other)), Err(Error::Shape(_))));
    }

    #[test]
    fn array_shape_mismatch_is_rejected() {
        let mut file = WeightsFile::new(config());
        file.push_params("", &EncoderParams::init(config(), 1).unwrap());
        file.arrays[0].shape = vec![3, 24];
        let mut params = EncoderParams::zeros(config());
        assert!(params.assign_from("", &file.array_map()).is_err());
    }
}
