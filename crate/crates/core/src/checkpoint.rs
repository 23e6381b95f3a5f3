//! Flat named-tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "FGAT"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name utf-8, rows u32, cols u32, rows*cols × f64 }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"FGAT";
const VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Matrix)>;

pub fn encode(tensors: &[(String, Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut bytes)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut bytes)? as usize;
        if bytes.len() < name_len {
            return Err(bad("truncated name"));
        }
        let (name, rest) = bytes.split_at(name_len);
        let name = std::str::from_utf8(name).map_err(|_| bad("name is not utf-8"))?.to_string();
        bytes = rest;
        let rows = read_u32(&mut bytes)? as usize;
        let cols = read_u32(&mut bytes)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
        if bytes.len() < n * 8 {
            return Err(Error::Checkpoint(format!("truncated tensor {name}")));
        }
        let (raw, rest) = bytes.split_at(n * 8);
        bytes = rest;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if !bytes.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(tensors)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    bytes
        .read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save(path: &Path, tensors: &[(String, Matrix)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(tensors))?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    decode(&fs::read(path)?)
}

/// Hex SHA-256 of the encoded tensors.
pub fn digest(tensors: &[(String, Matrix)]) -> String {
    hex::encode(Sha256::digest(encode(tensors)))
}

/// Removes and returns the tensor called `name`.
pub fn take(tensors: &mut NamedTensors, name: &str) -> Result<Matrix> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    Ok(tensors.swap_remove(i).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = vec![
            ("a".to_string(), Matrix::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 3.0]])),
            ("empty".to_string(), Matrix::zeros(0, 3)),
        ];
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"FGAT");
        assert_eq!(decode(&bytes).unwrap(), t);
        assert_eq!(digest(&t), digest(&decode(&bytes).unwrap()));
    }

    #[test]
    fn rejects_corruption() {
        let t = vec![("w".to_string(), Matrix::identity(2))];
        let bytes = encode(&t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
