//! Binary checkpoint format.
//!
//! Little-endian layout: magic `SAFF`, format version `u32`, then one record
//! per tensor: name length `u32`, UTF-8 name, rank `u32`, extents `u64 × rank`,
//! `f64` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SAFF";
const VERSION: u32 = 1;

pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::validation(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut entries = Vec::new();
    loop {
        let name_len = match read_u32_opt(&mut r)? {
            Some(v) => v as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::validation("checkpoint name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Read a u32 or report a clean end-of-file.
fn read_u32_opt(r: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::validation("truncated checkpoint".to_string()));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = std::env::temp_dir().join("saff-checkpoint-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.bin");

        let a = Tensor::new(vec![2, 3], vec![1.0, -0.5, 3.25e-300, 7.0, 0.0, -0.0]).unwrap();
        let b = Tensor::scalar(0.1 + 0.2);
        save(&path, &[("layer.w".to_string(), &a), ("bias".to_string(), &b)]).unwrap();

        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "layer.w");
        assert_eq!(loaded[0].1.shape(), &[2, 3]);
        for (x, y) in loaded[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded[1].1.data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("saff-checkpoint-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(Error::Validation(_))));
    }
}
