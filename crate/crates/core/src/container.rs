//! Binary tensor container shared by datasets, measurement sets, and
//! checkpoints.
//!
//! Layout: magic "AMP1", u32 tensor count, then per tensor a u16 name length,
//! the name bytes, a u8 rank, rank×u64 dims, and the row-major f64 payload,
//! all little-endian. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AMP1";

/// Guard against dims that would overflow allocation on malformed input.
const MAX_ELEMENTS: u64 = 1 << 28;

/// An ordered name -> tensor map. Order is the BTreeMap name order, so a
/// write/read cycle is canonical regardless of insertion order.
#[derive(Default)]
pub struct Container {
    entries: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(name.len() <= u16::MAX as usize, "tensor name too long");
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            // Row vectors [1,n] are stored rank-1; everything else rank-2.
            if t.rows() == 1 {
                w.write_all(&[1u8])?;
                w.write_all(&(t.cols() as u64).to_le_bytes())?;
            } else {
                w.write_all(&[2u8])?;
                w.write_all(&(t.rows() as u64).to_le_bytes())?;
                w.write_all(&(t.cols() as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Container> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let count = read_u32(r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(r, &mut rank, "rank")?;
            let rank = rank[0];
            if rank == 0 || rank > 2 {
                return Err(Error::Format(format!("unsupported rank {rank}")));
            }
            let mut dims = [1u64; 2];
            for slot in dims.iter_mut().take(rank as usize) {
                *slot = read_u64(r)?;
            }
            let (rows, cols) = if rank == 1 {
                (1u64, dims[0])
            } else {
                (dims[0], dims[1])
            };
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| Error::Format(format!("dims overflow: {rows}x{cols}")))?;
            let mut data = vec![0.0f64; n as usize];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                read_exact(r, &mut buf, "payload")?;
                *v = f64::from_le_bytes(buf);
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite value in tensor {name:?}")));
            }
            entries.insert(name, Tensor::constant(rows as usize, cols as usize, data));
        }
        Ok(Container { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Container::read_from(&mut f)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated container while reading {what}")))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, "u16")?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}
