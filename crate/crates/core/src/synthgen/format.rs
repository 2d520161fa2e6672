//! `.dset` files: a fixed little-endian header followed by one record
//! (`d` f64 features, then a u32 label) per example.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::mathcore::matrix_io::{read_f64, read_u32, read_u64};

pub const DSET_MAGIC: &[u8; 4] = b"DSET";
const DSET_VERSION: u32 = 1;
/// magic + version + d + K + C + tau + M + count
pub const DSET_HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 4 + 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub d: u32,
    pub k: u32,
    pub c: u32,
    pub tau: f64,
    pub m: u32,
    pub count: u64,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        reason: reason.into(),
    }
}

fn to_u32(v: usize, name: &str) -> std::io::Result<u32> {
    u32::try_from(v).map_err(|_| std::io::Error::other(format!("{name} = {v} exceeds u32")))
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> std::io::Result<()> {
    w.write_all(DSET_MAGIC)?;
    w.write_all(&DSET_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(ds.dim(), "d")?.to_le_bytes())?;
    w.write_all(&to_u32(ds.k, "k")?.to_le_bytes())?;
    w.write_all(&to_u32(ds.c, "c")?.to_le_bytes())?;
    w.write_all(&ds.tau.to_le_bytes())?;
    w.write_all(&to_u32(ds.m, "m")?.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    let mut record = Vec::with_capacity(ds.dim() * 8 + 4);
    for (row, &t) in ds.features.outer_iter().zip(&ds.labels) {
        record.clear();
        for v in row {
            record.extend_from_slice(&v.to_le_bytes());
        }
        record.extend_from_slice(&t.to_le_bytes());
        w.write_all(&record)?;
    }
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DSET_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(io)?;
    if version != DSET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    Ok(DatasetHeader {
        d: read_u32(r).map_err(io)?,
        k: read_u32(r).map_err(io)?,
        c: read_u32(r).map_err(io)?,
        tau: read_f64(r).map_err(io)?,
        m: read_u32(r).map_err(io)?,
        count: read_u64(r).map_err(io)?,
    })
}

pub fn read_dataset<R: Read>(r: &mut R, split: Split) -> Result<Dataset> {
    let h = read_header(r)?;
    let (d, n) = (h.d as usize, h.count as usize);
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut record = vec![0u8; d * 8 + 4];
    for mut row in features.outer_iter_mut() {
        r.read_exact(&mut record)
            .map_err(|e| bad(format!("record {}: {e}", labels.len())))?;
        for (v, chunk) in row.iter_mut().zip(record.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        labels.push(u32::from_le_bytes(record[d * 8..].try_into().expect("4 bytes")));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last record"));
    }
    Dataset::new(
        h.k as usize,
        h.c as usize,
        h.tau,
        h.m as usize,
        split,
        features,
        labels,
    )
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, ds)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut BufReader::new(file), split)
}
