//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"MTRKCKPT"
//! version u32 (= 1)
//! cfg_len u64, then cfg_len bytes of JSON PredictorConfig
//! count   u32 parameters, each:
//!   name_len u32, name bytes (UTF-8)
//!   ndim u32, ndim × u64 extents
//!   prod(extents) × f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::predictor::{Predictor, PredictorConfig};

const MAGIC: &[u8; 8] = b"MTRKCKPT";
const VERSION: u32 = 1;

pub fn to_bytes(model: &Predictor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Predictor> {
    let mut r = Reader(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u64()? as usize;
    let config: PredictorConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut model = Predictor::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!("{count} parameters, model expects {}", model.params().len())));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model.params().by_name(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if model.params().get(id).tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?} does not match the config")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.set_param(&name, &data)?;
    }
    if !r.0.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.0.len())));
    }
    Ok(model)
}

/// Write via a temporary sibling file and rename, so readers never see a
/// partial checkpoint.
pub fn save(model: &Predictor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&to_bytes(model)?).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<Predictor> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Predictor {
        let cfg = PredictorConfig { d_model: 8, layers: 1, heads: 2, ..PredictorConfig::desk() };
        let mut m = Predictor::new(cfg, 5).unwrap();
        m.randomize(6, 0.5);
        m
    }

    #[test]
    fn roundtrip_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("m.ckpt");
        save(&m, &p).unwrap();
        assert_eq!(load(&p).unwrap(), m);
        assert_eq!(to_bytes(&load(&p).unwrap()).unwrap(), fs::read(&p).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
