//! Binary parameter checkpoints.
//!
//! Layout: the ASCII magic `EVIDR1`, then one entry per parameter in
//! sorted-name order (`u32` name length, UTF-8 name, `u8` rank, one `u32`
//! per dimension, `f32` values row-major), then a `u32` CRC32 of every byte
//! between the magic and the checksum. All integers and floats are
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::matrix::Matrix;
use super::params::ParameterStore;

pub const MAGIC: &[u8; 6] = b"EVIDR1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not an EVIDR1 checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn encode(store: &ParameterStore<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    for (name, p) in store.iter() {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.push(p.dims.len() as u8);
        for &d in &p.dims {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(MAGIC.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore<f32>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Malformed("missing checksum".into()));
    }
    let payload = &bytes[MAGIC.len()..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let mut store = ParameterStore::new(0);
    while r.pos < payload.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        if rank == 0 || rank > 2 {
            return Err(CheckpointError::Malformed(format!("{name}: unsupported rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        store
            .insert(&name, dims, Matrix::from_vec(rows, cols, data))
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    Ok(store)
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save(store: &ParameterStore<f32>, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp-ckpt");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&encode(store)).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<ParameterStore<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new(5);
        s.init_parameters(&[("b.weight".into(), vec![3, 2]), ("a.bias".into(), vec![2])]).unwrap();
        s
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParameterStore::<f32>::new(0);
        s.insert("w", vec![2], Matrix::from_vec(1, 2, vec![1.0, -2.5])).unwrap();
        let bytes = encode(&s);
        let mut expect = b"EVIDR1".to_vec();
        let mut payload = vec![1, 0, 0, 0, b'w', 1, 2, 0, 0, 0];
        payload.extend_from_slice(&1.0f32.to_le_bytes());
        payload.extend_from_slice(&(-2.5f32).to_le_bytes());
        expect.extend_from_slice(&payload);
        expect.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn roundtrip_preserves_values_and_order() {
        let s = store();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.get("b.weight"), s.get("b.weight"));
        assert_eq!(back.parameter("a.bias").unwrap().dims, vec![2]);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a.bias", "b.weight"]);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&store());
        for i in MAGIC.len()..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(decode(&bad).is_err(), "flip at {i} accepted");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn save_and_load_through_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = store();
        save(&s, &path).unwrap();
        assert_eq!(load(&path).unwrap().get("b.weight"), s.get("b.weight"));
    }
}
