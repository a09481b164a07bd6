//! Binary tensor records and named-tensor checkpoints.
//!
//! Tensor record: `b"CFRT"`, version `u8 = 1`, rank `u8`, `rank` extents as
//! `u32` little-endian, then the payload as `f32` little-endian.
//!
//! Checkpoint: entry count `u32`, then per entry a `u16` name length, the
//! UTF-8 name, and a tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFRT";
pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

pub fn write_tensor<W: Write, T: Scalar>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| bad("extent exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> std::io::Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(bad(format!("unsupported version {}", head[0])));
    }
    let rank = head[1] as usize;
    if !(1..=4).contains(&rank) {
        return Err(bad(format!("invalid rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut buf = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_checkpoint<W: Write, T: Scalar>(
    w: &mut W,
    entries: &[(String, Tensor<T>)],
) -> std::io::Result<()> {
    let count = u32::try_from(entries.len()).map_err(|_| bad("too many entries"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| bad("name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> std::io::Result<Vec<(String, Tensor<f32>)>> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let mut name = vec![0u8; u16::from_le_bytes(buf2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, entries)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"CFRT".to_vec();
        expected.extend_from_slice(&[1, 2]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = b"XXXX\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
        buf[..4].copy_from_slice(b"CFRT");
        buf[4] = 2;
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let entries = vec![("a".to_string(), Tensor::<f32>::ones(&[3]))];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..=4), 1..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("t.{i}"), Tensor::randn(s, 1.0, &mut rng)))
                .collect();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &entries).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
