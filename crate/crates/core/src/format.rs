//! `BAGF` binary embedding file.
//!
//! ```text
//! magic       4 bytes  "BAGF"
//! version     u16      1
//! dtype       u8       0 = f32
//! dim         u32
//! item_count  u32
//! item_count times:
//!   id_len    u16
//!   id        id_len bytes, UTF-8
//!   row_count u32
//!   payload   row_count * dim f32, row-major
//!   validity  ceil(row_count / 8) bytes, bit r (LSB first) set = row r valid
//! ```
//!
//! All integers and floats are little-endian. Row 0 of every item is its CLS
//! vector; rows `1..` are the late-interaction rows (patches, tokens or
//! bags). The core works in `f64`; values are narrowed on write and widened
//! on read.

use std::path::Path;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::similarity::{ItemEmbedding, LateMatrix, PaddingMask};

pub const MAGIC: &[u8; 4] = b"BAGF";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct FileItem {
    pub id: String,
    /// `rows * dim` values, row-major.
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FileItem {
    pub fn rows(&self) -> usize {
        self.valid.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub items: Vec<FileItem>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        Self { dim, items: Vec::new() }
    }

    pub fn push(&mut self, item: FileItem) -> Result<()> {
        if item.data.len() != item.valid.len() * self.dim {
            return Err(Error::Format(format!(
                "item {} has {} values for {} rows of dim {}",
                item.id,
                item.data.len(),
                item.valid.len(),
                self.dim
            )));
        }
        self.items.push(item);
        Ok(())
    }

    /// Stores each item as its CLS row followed by its late rows.
    pub fn from_items(dim: usize, items: &[ItemEmbedding]) -> Result<Self> {
        let mut file = Self::new(dim);
        for it in items {
            let mut data: Vec<f32> = it.cls.iter().map(|v| *v as f32).collect();
            let mut valid = vec![true];
            if let Some(late) = &it.late {
                data.extend(late.rows.as_slice().iter().map(|v| *v as f32));
                valid.extend_from_slice(late.mask.flags());
            }
            file.push(FileItem {
                id: it.id.clone(),
                data,
                valid,
            })?;
        }
        Ok(file)
    }

    /// Widens every item back to `f64`; items with a single row get no late
    /// matrix.
    pub fn to_items(&self) -> Result<Vec<ItemEmbedding>> {
        self.items
            .iter()
            .map(|it| {
                if it.rows() == 0 {
                    return Err(Error::Format(format!("item {} has no CLS row", it.id)));
                }
                let wide: Vec<f64> = it.data.iter().map(|v| f64::from(*v)).collect();
                let (cls, rest) = wide.split_at(self.dim);
                let late = if it.rows() > 1 {
                    Some(LateMatrix::new(
                        EmbeddingMatrix::new(self.dim, rest.to_vec())?,
                        PaddingMask::new(it.valid[1..].to_vec()),
                    )?)
                } else {
                    None
                };
                Ok(ItemEmbedding {
                    id: it.id.clone(),
                    cls: cls.to_vec(),
                    late,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dim too large".into()))?;
        let count = u32::try_from(self.items.len()).map_err(|_| Error::Format("too many items".into()))?;
        let payload: usize = self.items.iter().map(|i| i.data.len() * 4 + i.id.len() + 16).sum();
        let mut out = Vec::with_capacity(15 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for it in &self.items {
            let id_len = u16::try_from(it.id.len())
                .map_err(|_| Error::Format(format!("id {:?} longer than 65535 bytes", it.id)))?;
            if it.data.len() != it.rows() * self.dim {
                return Err(Error::Format(format!("item {} payload/row mismatch", it.id)));
            }
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(it.id.as_bytes());
            out.extend_from_slice(&(it.rows() as u32).to_le_bytes());
            for v in &it.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let mut bitmap = vec![0u8; it.rows().div_ceil(8)];
            for (r, ok) in it.valid.iter().enumerate() {
                if *ok {
                    bitmap[r / 8] |= 1 << (r % 8);
                }
            }
            out.extend_from_slice(&bitmap);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a BAGF file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("dim must be positive".into()));
        }
        let count = r.u32()? as usize;
        let mut items = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id_len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| Error::Format("item id is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let n = rows
                .checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format("row count overflow".into()))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let bitmap = r.take(rows.div_ceil(8))?;
            let valid = (0..rows).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
            items.push(FileItem { id, data, valid });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { dim, items })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
