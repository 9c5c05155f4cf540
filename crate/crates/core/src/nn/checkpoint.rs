//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "LMETACKP"
//! version    u32      1
//! flags      u32      bit 0: Adam state present, bit 1: separate critic
//! blocks     u32      number of parameter blocks
//! per block: name_len u16, name bytes (UTF-8), rows u32, cols u32
//! count      u64      total parameter count
//! params     count x f64, blocks in table order, each row-major
//! if bit 0:  t u64, m count x f64, v count x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, NetworkShape, PolicyParams};
use crate::config::CriticMode;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LMETACKP";
const VERSION: u32 = 1;
const FLAG_ADAM: u32 = 1;
const FLAG_SEPARATE_CRITIC: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub adam: Option<AdamState>,
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &PolicyParams, adam: Option<&AdamState>) -> Result<()> {
    let shape = params.shape();
    let mut flags = 0;
    if adam.is_some() {
        flags |= FLAG_ADAM;
    }
    if shape.critic == CriticMode::Separate {
        flags |= FLAG_SEPARATE_CRITIC;
    }
    let blocks = shape.blocks();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for b in &blocks {
        w.write_all(&(b.name.len() as u16).to_le_bytes())?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&(b.rows as u32).to_le_bytes())?;
        w.write_all(&(b.cols as u32).to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    put_f64s(&mut w, params.as_slice())?;
    if let Some(a) = adam {
        if a.m.len() != params.len() || a.v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        w.write_all(&a.t.to_le_bytes())?;
        put_f64s(&mut w, &a.m)?;
        put_f64s(&mut w, &a.v)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(b)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let flags = r.u32()?;
    let n_blocks = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let len = r.u16()? as usize;
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        table.push((name, r.u32()? as usize, r.u32()? as usize));
    }
    let critic = if flags & FLAG_SEPARATE_CRITIC != 0 {
        CriticMode::Separate
    } else {
        CriticMode::Shared
    };
    let (hidden, input) = match table.first() {
        Some((name, rows, cols)) if name == "W1" => (*rows, *cols),
        _ => return Err(Error::Checkpoint("first block must be W1".into())),
    };
    let actions = table
        .iter()
        .find(|(n, _, _)| n == "b_pi")
        .map(|t| t.1)
        .ok_or_else(|| Error::Checkpoint("missing b_pi block".into()))?;
    let shape = NetworkShape {
        input,
        hidden,
        actions,
        critic,
    };
    let expected: Vec<(String, usize, usize)> = shape
        .blocks()
        .into_iter()
        .map(|b| (b.name.to_string(), b.rows, b.cols))
        .collect();
    if expected != table {
        return Err(Error::Checkpoint(
            "shape table does not describe a supported network".into(),
        ));
    }
    let count = r.u64()? as usize;
    if count != shape.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match shape table"
        )));
    }
    let params = PolicyParams::from_flat(shape, r.f64s(count)?)?;
    let adam = if flags & FLAG_ADAM != 0 {
        let t = r.u64()?;
        let m = r.f64s(count)?;
        let v = r.f64s(count)?;
        Some(AdamState { m, v, t })
    } else {
        None
    };
    Ok(Checkpoint { params, adam })
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, adam: Option<&AdamState>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, adam)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(bytes.as_slice())
}
