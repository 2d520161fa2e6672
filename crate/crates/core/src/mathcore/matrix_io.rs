use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"DLAB";
const MATRIX_VERSION: u32 = 1;

/// Writes `magic | version u32 | rows u32 | cols u32 | row-major f64`, all
/// little-endian.
pub fn write_matrix<W: Write>(w: &mut W, m: ArrayView2<'_, f64>) -> std::io::Result<()> {
    let (rows, cols) = m.dim();
    let rows = u32::try_from(rows).map_err(std::io::Error::other)?;
    let cols = u32::try_from(cols).map_err(std::io::Error::other)?;
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "matrix",
        reason: reason.into(),
    }
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    let io = |e: std::io::Error| format_err(e.to_string());
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MATRIX_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(io)?;
    if version != MATRIX_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let rows = read_u32(r).map_err(io)? as usize;
    let cols = read_u32(r).map_err(io)? as usize;
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| format_err(e.to_string()))
}

pub fn save_matrix(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(&mut BufReader::new(file))
}
