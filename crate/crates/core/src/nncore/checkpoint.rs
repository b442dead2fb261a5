//! `SLNN` parameter checkpoints.
//!
//! Layout (little-endian): magic `SLNN`, u32 version, u32 tensor count, then per
//! tensor: u16 name length, name bytes, u8 rank, rank × u32 dims, f32 values.

use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SLNN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| NnError::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| NnError::Checkpoint(format!("rank too large: {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(format!("name not utf-8: {e}")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), NnError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Load values into an already-shaped store, matching tensors by name.
pub fn load_checkpoint_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<(), NnError> {
    let file = std::fs::File::open(path)?;
    let tensors = read_checkpoint(std::io::BufReader::new(file))?;
    let mut loaded = ParamStore::<T>::new();
    for (name, t) in tensors {
        loaded.insert("", &name, t.cast());
    }
    store.load_from(&loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let mut s = ParamStore::<f32>::new();
        s.insert("g", "ab", Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut expected = b"SLNN".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u16.to_le_bytes());
        expected.extend(b"ab");
        expected.push(2);
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.5f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_and_bad_magic() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", "w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s.insert("b", "bias", Tensor::new(vec![2, 2], vec![4.0; 4]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1.data(), s.get(s.find("w").unwrap()).data());
        buf[0] = b'X';
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", "w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
