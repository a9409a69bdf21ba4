//! `DSPC` checkpoint files: little-endian, magic `DSPC`, u32 version 1,
//! u32 tensor count, then per tensor a u32-length UTF-8 name, u32 rank,
//! u32 extents and raw f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};

pub const MAGIC: &[u8; 4] = b"DSPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        NamedTensor { name: name.into(), shape: vec![1], data: vec![value] }
    }
}

pub fn write_to(w: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(TensorError::dim("checkpoint", &t.shape, &[t.data.len()]));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TensorError::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_from(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(TensorError::Format { offset: 0, msg: "bad magic, expected DSPC".into() });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| TensorError::Format { offset: at, msg: "name is not UTF-8".into() })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(n.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(NamedTensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Format { offset: c.pos as u64, msg: "trailing bytes".into() });
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    read_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let t = vec![NamedTensor { name: "a.b".into(), shape: vec![2, 3], data: vec![1.0; 6] }];
        let mut buf = Vec::new();
        write_to(&mut buf, &t).unwrap();
        assert_eq!(parse(&buf).unwrap(), t);
        let err = parse(&buf[..buf.len() - 3]).unwrap_err();
        match err {
            TensorError::Format { offset, .. } => assert!(offset > 12),
            e => panic!("unexpected {e}"),
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(parse(&bad), Err(TensorError::Format { offset: 0, .. })));
    }
}
