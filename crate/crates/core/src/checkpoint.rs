//! Binary checkpoint format for named tensors.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! magic  "LTRV"
//! u32    version (1)
//! u32    tensor count
//! per tensor:
//!   u16      name length, then UTF-8 name
//!   u8       rank, then rank x u64 extents
//!   f64 * n  row-major values
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LTRV";
pub const VERSION: u32 = 1;

/// Writes named tensors in name order (deterministic byte output).
pub fn save<P: AsRef<Path>>(
    path: P,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!("name too long: {}", name)));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = t.shape().len();
        if rank > u8::MAX as usize {
            return Err(CheckpointError::Malformed("rank exceeds u8".into()));
        }
        w.write_all(&[rank as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic, expected: MAGIC });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version, expected: VERSION });
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("tensor name not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::NonFinite(name.clone()))?;
        out.insert(name, t);
    }
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Malformed("unexpected end of file".into())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ltrv");
        let mut map = BTreeMap::new();
        map.insert("a/w".to_string(), Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, 9.0]).unwrap());
        map.insert("b".to_string(), Tensor::scalar(0.1 + 0.2).unwrap());
        save(&path, &map).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (k, t) in &map {
            let u = &back[k];
            assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ltrv");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match load(&path) {
            Err(CheckpointError::BadMagic { found, .. }) => assert_eq!(&found, b"NOPE"),
            other => panic!("expected BadMagic, got {:?}", other.map(|_| ())),
        }
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(CheckpointError::BadVersion { found, .. }) => assert_eq!(found, 7),
            other => panic!("expected BadVersion, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ltrv");
        let mut map = BTreeMap::new();
        map.insert("t".to_string(), Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        save(&path, &map).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Malformed(_))));
    }
}
