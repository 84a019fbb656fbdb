//! TNSR v1 container, bit-exact.
//!
//! Layout: magic `0x54 0x4E 0x53 0x52` ("TNSR"), `u8` version = 1,
//! `u8` dtype (1 = f32 little-endian, 2 = u32 little-endian), `u8` rank,
//! rank x `u32` little-endian dims, then the row-major payload.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const MAGIC: [u8; 4] = [0x54, 0x4E, 0x53, 0x52];
const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U32: u8 = 2;

fn header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > u8::MAX as usize {
        return Err(Error::InvalidShape(format!(
            "TNSR rank {} out of range",
            shape.len()
        )));
    }
    let mut buf = Vec::with_capacity(7 + 4 * shape.len());
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.push(dtype);
    buf.push(shape.len() as u8);
    for &d in shape {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::InvalidShape(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d32.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = header(DTYPE_F32, t.shape())?;
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut buf = header(DTYPE_U32, &[labels.len()])?;
    for &v in labels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Parsed {
    dtype: u8,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

fn parse(path: &Path) -> Result<Parsed> {
    let raw = fs::read(path)?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if raw.len() < 7 {
        return Err(fail("truncated header"));
    }
    if raw[0..4] != MAGIC {
        return Err(fail("bad magic bytes"));
    }
    if raw[4] != VERSION {
        return Err(fail(&format!("unsupported version {}", raw[4])));
    }
    let dtype = raw[5];
    if dtype != DTYPE_F32 && dtype != DTYPE_U32 {
        return Err(fail(&format!("unknown dtype {dtype}")));
    }
    let rank = raw[6] as usize;
    if rank == 0 {
        return Err(fail("rank 0"));
    }
    let dims_end = 7 + 4 * rank;
    if raw.len() < dims_end {
        return Err(fail("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes([raw[off], raw[off + 1], raw[off + 2], raw[off + 3]]);
        if d == 0 {
            return Err(fail("zero dimension"));
        }
        shape.push(d as usize);
    }
    let count: usize = shape.iter().product();
    let expected = dims_end + 4 * count;
    if raw.len() < expected {
        return Err(fail("truncated payload"));
    }
    if raw.len() > expected {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(Parsed {
        dtype,
        shape,
        payload: raw[dims_end..].to_vec(),
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let p = parse(path)?;
    if p.dtype != DTYPE_F32 {
        return Err(Error::Checkpoint(format!(
            "{}: dtype mismatch, expected f32",
            path.display()
        )));
    }
    let data: Vec<f32> = p
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&p.shape, data)
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let p = parse(path)?;
    if p.dtype != DTYPE_U32 {
        return Err(Error::Checkpoint(format!(
            "{}: dtype mismatch, expected u32",
            path.display()
        )));
    }
    Ok(p
        .payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tnsr");
        let t = Tensor::normal(&[3, 4], 0.0, 1.0, 21).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_bits(), t.to_bits());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.tnsr");
        write_labels(&p, &[0, 1, 1, 0, 2]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![0, 1, 1, 0, 2]);
    }

    #[test]
    fn truncated_payload_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tnsr");
        let t = Tensor::normal(&[4], 0.0, 1.0, 5).unwrap();
        write_tensor(&p, &t).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        raw.truncate(raw.len() - 3);
        std::fs::write(&p, raw).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_magic_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tnsr");
        std::fs::write(&p, b"NOPE\x01\x01\x01\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dtype_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.tnsr");
        write_labels(&p, &[1, 2]).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Checkpoint(_))));
    }
}
