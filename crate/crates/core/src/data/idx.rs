//! Reader and writer for the IDX binary format used by the MNIST family.
//!
//! Header fields are big-endian `u32`s: a magic number, the item count and,
//! for image files, the row and column counts. The payload is one unsigned
//! byte per pixel or label.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    pub fn magic(self) -> u32 {
        match self {
            IdxKind::Images => IMAGES_MAGIC,
            IdxKind::Labels => LABELS_MAGIC,
        }
    }

    fn header_len(self) -> usize {
        match self {
            IdxKind::Images => 16,
            IdxKind::Labels => 8,
        }
    }
}

/// Decoded contents of an IDX file, still in raw `u8` form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxData {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::Images { count, .. } => *count,
            IdxData::Labels(labels) => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raster `index` of an image file.
    pub fn raster(&self, index: usize) -> Option<&[u8]> {
        match self {
            IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            } if index < *count => {
                let size = rows * cols;
                Some(&pixels[index * size..(index + 1) * size])
            }
            _ => None,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn load_idx(path: impl AsRef<Path>, kind: IdxKind) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, kind).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Corruption(msg) => Error::Corruption(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_idx(bytes: &[u8], kind: IdxKind) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::Corruption("file shorter than the magic number".into()));
    }
    let magic = read_u32(bytes, 0);
    if magic != kind.magic() {
        return Err(Error::Format(format!(
            "bad magic 0x{magic:08x}, expected 0x{:08x}",
            kind.magic()
        )));
    }
    if bytes.len() < kind.header_len() {
        return Err(Error::Corruption(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    let count = read_u32(bytes, 4) as usize;
    let (item_size, data) = match kind {
        IdxKind::Images => {
            let rows = read_u32(bytes, 8) as usize;
            let cols = read_u32(bytes, 12) as usize;
            (rows * cols, (rows, cols))
        }
        IdxKind::Labels => (1, (0, 0)),
    };
    let payload = &bytes[kind.header_len()..];
    let expected = count
        .checked_mul(item_size)
        .ok_or_else(|| Error::Corruption("declared size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "header declares {count} items ({expected} payload bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    Ok(match kind {
        IdxKind::Images => IdxData::Images {
            count,
            rows: data.0,
            cols: data.1,
            pixels: payload.to_vec(),
        },
        IdxKind::Labels => IdxData::Labels(payload.to_vec()),
    })
}

pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            for field in [IMAGES_MAGIC, *count as u32, *rows as u32, *cols as u32] {
                out.extend_from_slice(&field.to_be_bytes());
            }
            out.extend_from_slice(pixels);
        }
        IdxData::Labels(labels) => {
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

pub fn write_idx(path: impl AsRef<Path>, data: &IdxData) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_idx(data))
        .map_err(|e| Error::io(path, e))
}
