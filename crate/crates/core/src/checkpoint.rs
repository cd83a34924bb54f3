//! Portable tensor container.
//!
//! Layout, all integers 64-bit little-endian unsigned:
//!
//! ```text
//! b"DASCD1\n"
//! count
//! count × { name_len, name (UTF-8), rank, shape[rank], data[numel] as f64 LE }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"DASCD1\n";

// Guards against allocating absurd buffers from a corrupt header.
const MAX_NAME_LEN: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

pub fn write_tensors<'a, W, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    I::IntoIter: ExactSizeIterator,
{
    let tensors = tensors.into_iter();
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a DASCD1 checkpoint".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!(
                "tensor name length {name_len} is implausible"
            )));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
        let rank = read_u64(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!(
                "tensor {name:?} has unsupported rank {rank}"
            )));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} shape overflows")))?;
        let mut bytes = Vec::new();
        (&mut r).take(numel as u64 * 8).read_to_end(&mut bytes)?;
        if bytes.len() != numel * 8 {
            return Err(Error::Format(format!("tensor {name:?} data truncated")));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    write_tensors(w, tensors.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}
