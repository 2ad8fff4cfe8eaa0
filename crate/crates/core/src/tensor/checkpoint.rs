//! Binary tensor records.
//!
//! Layout: magic `CXM1`, `u32` version, then records until end of file. Each
//! record is `u32` name length, UTF-8 name, `u32` rows, `u32` cols and
//! `rows * cols` little-endian `f32`. All integers are little-endian.

use std::io::{Read, Write};

use super::{Dense, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CXM1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_records<'a, W, I>(mut w: W, records: I) -> Result<(), TensorError>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Dense)>,
{
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in records {
        let name_len = u32::try_from(name.len())
            .map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Dense)>, TensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("record name is not UTF-8".into()))?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let payload = cur.take(rows * cols * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Dense::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
