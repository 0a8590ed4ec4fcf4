//! Parameter checkpoint file: little-endian binary, magic `DTTCKPT1`,
//! then a u32 count, then per parameter: u32 name length, UTF-8 name,
//! u32 rank, u32 dims, float32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DTTCKPT1";

pub fn save_params<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        if !p.value.all_finite() {
            return Err(Error::data(format!("non-finite values in parameter {name}")));
        }
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all parameters from a checkpoint file.
pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let count = r.read_u32("parameter count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u32("name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: r.offset,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.read_u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(r.read_4("payload")?));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Load checkpoint values into an existing store. The checkpoint must cover
/// exactly the store's parameter set with matching shapes; optimizer moments
/// are reset.
pub fn load_params<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let loaded = read_params(path)?;
    if loaded.len() != store.len() {
        return Err(Error::data(format!(
            "checkpoint {} has {} parameters, model wants {}",
            path.display(),
            loaded.len(),
            store.len()
        )));
    }
    for (name, value) in loaded {
        let p = store.get(&name).ok_or_else(|| {
            Error::data(format!("checkpoint parameter {name} not in model"))
        })?;
        if p.value.shape() != value.shape() {
            return Err(Error::data(format!(
                "checkpoint shape {:?} vs model {:?} for {name}",
                value.shape(),
                p.value.shape()
            )));
        }
        store.set_value(&name, value.cast());
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_4(&mut self, what: &str) -> Result<[u8; 4]> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(b)
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.read_4(what)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", Tensor::from_fn(&[3, 2], |i| i as f32 * 0.25 - 1.0));
        store.insert("b", Tensor::scalar(42.5f32));
        save_params(&store, &path).unwrap();

        let mut store2 = ParamStore::<f32>::new();
        store2.insert("a.w", Tensor::zeros(&[3, 2]));
        store2.insert("b", Tensor::zeros(&[1]));
        load_params(&mut store2, &path).unwrap();
        assert_eq!(store2.value("a.w").data(), store.value("a.w").data());
        assert_eq!(store2.value("b").item(), 42.5);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::from_fn(&[4], |i| i as f32));
        save_params(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_params(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[4]));
        save_params(&store, &path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.insert("w", Tensor::zeros(&[5]));
        assert!(load_params(&mut other, &path).is_err());
    }
}
