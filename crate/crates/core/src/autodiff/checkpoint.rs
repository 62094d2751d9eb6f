//! Flat checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"RDCK"
//! version u32 (= 1)
//! count   u32
//! count × record:
//!     name_len u32, name (UTF-8, name_len bytes)
//!     ndim     u32, dims (u64 × ndim)
//!     data     f64 × product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParamStore, Parameter};
use super::{Result, TensorError};

const MAGIC: &[u8; 4] = b"RDCK";
const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in &p.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TensorError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<Parameter>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?
            .to_owned();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(Parameter { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err)?;
    write_checkpoint(store, std::io::BufWriter::new(f))
}

/// Loads into an existing model, requiring identical names and shapes.
pub fn load_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::open(path).map_err(io_err)?;
    let records = read_checkpoint(std::io::BufReader::new(f))?;
    restore(store, records)
}

pub(crate) fn restore(store: &mut ParamStore, records: Vec<Parameter>) -> Result<()> {
    if records.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store
            .id(&rec.name)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown tensor `{}`", rec.name)))?;
        let p = store.get_mut(id);
        if p.shape != rec.shape {
            return Err(TensorError::Checkpoint(format!(
                "`{}`: checkpoint shape {:?}, model shape {:?}",
                rec.name, rec.shape, p.shape
            )));
        }
        p.data = rec.data;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap();
        s.insert("b", &[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        let recs = read_checkpoint(&bytes[..]).unwrap();
        let mut t = store();
        for (_, p) in t.clone().iter() {
            let id = t.id(&p.name).unwrap();
            t.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        restore(&mut t, recs).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_checkpoint(&store(), &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RDCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first record name
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.w");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&store(), &mut bytes).unwrap();
        let recs = read_checkpoint(&bytes[..]).unwrap();
        let mut other = ParamStore::new();
        other.insert("a.w", &[3, 2], vec![0.0; 6]).unwrap();
        other.insert("b", &[4], vec![0.0; 4]).unwrap();
        let err = restore(&mut other, recs).unwrap_err();
        assert!(err.to_string().contains("a.w"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&store(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
