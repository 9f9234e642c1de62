//! Named parameter storage and the `VDNPAR01` checkpoint format.
//!
//! Layout (all integers little-endian): the 8-byte magic `VDNPAR01`, a `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` × `u32` dimensions and the values as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VDNPAR01";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Order-sensitive FNV-1a checksum over names and the exact bit patterns
    /// of the values selected by `filter`.
    pub fn checksum(&self, filter: impl Fn(&Param) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in self.params.iter().filter(|p| filter(p)) {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| {
                Error::InvalidArgument(format!("parameter name too long: {}", p.name))
            })?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.value.rank() as u8])?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint. Every entry is marked trainable; callers apply
    /// the freezing plan of the network they build.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let fmt = "checkpoint";
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, fmt, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(fmt, format!("bad magic {magic:?}")));
        }
        let count = read_u32(&mut r, fmt, "entry count")?;
        let mut store = ParamStore::new();
        for i in 0..count {
            let mut b2 = [0u8; 2];
            read_exact(&mut r, &mut b2, fmt, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(&mut r, &mut name, fmt, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format(fmt, format!("entry {i}: name is not UTF-8")))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, fmt, "rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, fmt, "dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut r, &mut raw, fmt, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::format(fmt, format!("entry {name}: {e}")))?;
            if store.get(&name).is_some() {
                return Err(Error::format(fmt, format!("duplicate entry {name}")));
            }
            store.insert(name, value, true);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }

    /// Rounds every value to `f32` precision, i.e. what a checkpoint round
    /// trip would produce.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub(crate) fn read_exact<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    format: &'static str,
    what: &str,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format, format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, format: &'static str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, format, what)?;
    Ok(u32::from_le_bytes(b))
}
