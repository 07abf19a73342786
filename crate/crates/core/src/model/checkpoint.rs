//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CDCKPT\0\0" | u32 version | u32 len | config text
//! u32 n_params
//! per param: u32 len | name | u8 dtype | u32 ndim | u64 dims.. | u64 nbytes | data
//! ```
//!
//! Loading rejects anything that does not match the stored config exactly.

use std::path::Path;

use super::{param_shapes, Model, ModelConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CDCKPT\0\0";
const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_kv().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&((p.value.len() * T::DTYPE.size()) as u64).to_le_bytes());
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kv = KeyValues::parse(&r.string("config")?)?;
    let base = ModelConfig::desk(1);
    let config = ModelConfig::from_kv(&kv, &base).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let expected = param_shapes(&config);
    let n = r.u32("parameter count")? as usize;
    if n != expected.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} parameters, file has {n}",
            expected.len()
        )));
    }
    let mut model = Model::<T>::new(config, 0)?;
    for (name, shape) in expected {
        let got = r.string("parameter name")?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected parameter `{name}`, found `{got}`")));
        }
        let tag = r.take(1, "dtype")?[0];
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` stored as {d}, requested {}",
                    T::DTYPE
                )))
            }
            None => return Err(Error::Checkpoint(format!("`{name}` has unknown dtype tag {tag}"))),
        }
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u64("dim")? as usize);
        }
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {dims:?}, config expects {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let nbytes = r.u64("byte length")? as usize;
        if nbytes != numel * T::DTYPE.size() {
            return Err(Error::Checkpoint(format!("`{name}` byte length {nbytes} is inconsistent")));
        }
        let raw = r.take(nbytes, &name)?;
        let data: Vec<T> = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        let value = Tensor::new(&shape, data)?;
        if !value.is_finite() {
            return Err(Error::Checkpoint(format!("`{name}` contains non-finite values")));
        }
        model.params.set_value(&name, value)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::SolverConfig;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 4,
            n_heads: 2,
            vocab_size: 7,
            max_seq_len: 5,
            ode_replaces: (1, 2),
            solver: SolverConfig::dopri5(1e-4, 1e-7),
            ..ModelConfig::desk(7)
        };
        Model::new(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back: Model<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, &path).unwrap();
        assert_eq!(load::<f32>(&path).unwrap().params.checksum(|_| true), m.params.checksum(|_| true));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes::<f32>(&magic).is_err());
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_shape_mismatch_with_config() {
        let m = model();
        let mut bytes = to_bytes(&m);
        let cfg = m.config.to_kv().to_text();
        let patched = cfg.replace("arch = hybrid", "arch = baseline");
        assert_eq!(patched.len(), cfg.len() + 2);
        let start = 16;
        bytes.splice(start..start + cfg.len(), patched.bytes());
        bytes[12..16].copy_from_slice(&(patched.len() as u32).to_le_bytes());
        assert!(from_bytes::<f32>(&bytes).is_err());
    }
}
