//! Binary tensor files ("TLT1") used for checkpoints, cached features, and
//! corpus frames.
//!
//! Layout:
//!   bytes 0..4    magic `TLT1`
//!   bytes 4..H    JSON header `{"dtype":"f64"|"f32","shape":[..],"order":"little"}`
//!                 padded with ASCII spaces so that H is a multiple of 64
//!   bytes H..     raw row-major payload, little-endian
//!
//! The header is self-delimiting JSON, so readers consume 64-byte blocks
//! until the accumulated text (space-trimmed) parses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TLT1";
const BLOCK: usize = 64;
const MAX_HEADER: usize = 64 * BLOCK;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F64,
    F32,
}

fn write_inner<W: Write>(w: &mut W, shape: &[usize], data: &[f64], dtype: Dtype) -> Result<()> {
    let header = Header {
        dtype: match dtype {
            Dtype::F64 => "f64".into(),
            Dtype::F32 => "f32".into(),
        },
        shape: shape.to_vec(),
        order: "little".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let used = MAGIC.len() + json.len();
    let total = used.div_ceil(BLOCK) * BLOCK;
    w.write_all(MAGIC)?;
    w.write_all(&json)?;
    w.write_all(&vec![b' '; total - used])?;
    match dtype {
        Dtype::F64 => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in data {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

/// Serialize a tensor to the file format in memory (for hashing before
/// writing).
pub fn tensor_to_bytes(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_inner(&mut buf, t.shape(), t.data(), dtype)?;
    Ok(buf)
}

pub fn write_tensor_as(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_inner(&mut w, t.shape(), t.data(), dtype)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    // First block completes the 64-byte alignment started by the magic.
    let mut text: Vec<u8> = Vec::new();
    let mut chunk = vec![0u8; BLOCK - MAGIC.len()];
    r.read_exact(&mut chunk)?;
    text.extend_from_slice(&chunk);
    let header: Header = loop {
        let trimmed = std::str::from_utf8(&text)
            .map_err(|_| CoreError::Format("header is not UTF-8".into()))?
            .trim_end();
        match serde_json::from_str::<Header>(trimmed) {
            Ok(h) => break h,
            Err(_) if text.len() < MAX_HEADER => {
                let mut block = vec![0u8; BLOCK];
                r.read_exact(&mut block)?;
                text.extend_from_slice(&block);
            }
            Err(e) => {
                return Err(CoreError::Format(format!(
                    "{}: unparseable header: {e}",
                    path.display()
                )))
            }
        }
    };
    if header.order != "little" {
        return Err(CoreError::Format(format!(
            "unsupported byte order {:?}",
            header.order
        )));
    }
    let numel: usize = header.shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match header.dtype.as_str() {
        "f64" => {
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf)?;
            for c in buf.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        "f32" => {
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)?;
            for c in buf.chunks_exact(4) {
                data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
        other => {
            return Err(CoreError::Format(format!("unsupported dtype {other:?}")));
        }
    }
    Tensor::new(header.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f64() {
        let dir = std::env::temp_dir().join("tlt1_rt_f64");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.tlt");
        let t = Tensor::new(vec![3, 5], (0..15).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn round_trip_f32_lossy() {
        let dir = std::env::temp_dir().join("tlt1_rt_f32");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.tlt");
        let t = Tensor::new(vec![2, 2], vec![1.5, -0.25, 3.0, 0.125]).unwrap();
        write_tensor_as(&p, &t, Dtype::F32).unwrap();
        let back = read_tensor(&p).unwrap();
        // Values chosen representable in f32.
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn payload_starts_on_block_boundary() {
        let dir = std::env::temp_dir().join("tlt1_align");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.tlt");
        // Long shape pushes the header over one block.
        let t = Tensor::ones(vec![1, 2, 3, 4, 5, 6, 1, 1, 1, 1, 1, 1, 1, 1]);
        write_tensor(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let payload = t.numel() * 8;
        assert_eq!((bytes.len() - payload) % 64, 0);
        assert!(read_tensor(&p).is_ok());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("tlt1_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.tlt");
        std::fs::write(&p, b"NOPE                                        ").unwrap();
        assert!(read_tensor(&p).is_err());
    }
}
