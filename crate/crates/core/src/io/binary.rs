//! Little-endian raw array containers with short magic headers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const SUPERPOINT_MAGIC: &[u8; 4] = b"SP3D";
pub const INSTANCE_MAGIC: &[u8; 4] = b"IN3D";
pub const FEATURE_MAGIC: &[u8; 4] = b"FT3D";
pub const DEPTH_MAGIC: &[u8; 4] = b"DB3D";
pub const PIXEL_FEATURE_MAGIC: &[u8; 4] = b"PF3D";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Cursor over a byte buffer that reports truncation with the byte offset.
pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(path: &'a Path, data: &'a [u8]) -> Self {
        Self { path, data, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(self.path, format!("byte {}", self.pos), message)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!("unexpected end of file, needed {n} more bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut s = self.take(4)?;
        Ok(s.read_u32::<LittleEndian>().expect("length checked"))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut s = self.take(8)?;
        Ok(s.read_u64::<LittleEndian>().expect("length checked"))
    }

    pub(crate) fn i32_array(&mut self, n: usize) -> Result<Vec<i32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.error("array length overflows"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f32_array(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.error("array length overflows"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn write_result(path: &Path, r: std::io::Result<()>) -> Result<()> {
    r.map_err(|e| Error::io(path, e))
}

/// Writes an `SP3D`/`IN3D`-style int32 label file: magic, version, length, data.
pub fn write_label_file(path: &Path, magic: &[u8; 4], labels: &[i32]) -> Result<()> {
    let mut w = create(path)?;
    let r = (|| {
        w.write_all(magic)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(labels.len() as u64)?;
        for &l in labels {
            w.write_i32::<LittleEndian>(l)?;
        }
        w.flush()
    })();
    write_result(path, r)
}

pub fn read_label_file(path: &Path, magic: &[u8; 4]) -> Result<Vec<i32>> {
    let data = read_file(path)?;
    let mut r = ByteReader::new(path, &data);
    r.magic(magic)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    let labels = r.i32_array(n)?;
    r.finish()?;
    Ok(labels)
}

pub fn write_feature_file(path: &Path, dim: usize, data: &[f32]) -> Result<()> {
    let mut w = create(path)?;
    let rows = if dim == 0 { 0 } else { data.len() / dim };
    let r = (|| {
        w.write_all(FEATURE_MAGIC)?;
        w.write_u64::<LittleEndian>(rows as u64)?;
        w.write_u64::<LittleEndian>(dim as u64)?;
        for &v in data {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()
    })();
    write_result(path, r)
}

/// Returns `(rows, dim, data)`.
pub fn read_feature_file(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let data = read_file(path)?;
    let mut r = ByteReader::new(path, &data);
    r.magic(FEATURE_MAGIC)?;
    let rows = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let n = rows
        .checked_mul(dim)
        .ok_or_else(|| r.error("feature table size overflows"))?;
    let values = r.f32_array(n)?;
    r.finish()?;
    Ok((rows, dim, values))
}

/// Raw float32 raster with `{magic, W u32, H u32, [D u32]}` header.
pub fn write_raster_file(path: &Path, magic: &[u8; 4], dims: &[u32], data: &[f32]) -> Result<()> {
    let mut w = create(path)?;
    let r = (|| {
        w.write_all(magic)?;
        for &d in dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        for &v in data {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()
    })();
    write_result(path, r)
}

pub fn read_raster_file(path: &Path, magic: &[u8; 4], ndims: usize) -> Result<(Vec<u32>, Vec<f32>)> {
    let data = read_file(path)?;
    let mut r = ByteReader::new(path, &data);
    r.magic(magic)?;
    let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| r.error("raster size overflows"))?;
    let values = r.f32_array(n)?;
    r.finish()?;
    Ok((dims, values))
}
