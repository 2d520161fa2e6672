//! `.dtch` teacher caches: a little-endian header declaring the record kind,
//! then one fixed-size record per example in dataset order.
//!
//! Record layouts: full = K f64; pt = one f64; top-k = k × (u32 class, f64 prob).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TeacherSignal;
use crate::error::{Error, Result};
use crate::mathcore::matrix_io::{read_f64, read_u32, read_u64};
use crate::mathcore::ProbDist;

pub const DTCH_MAGIC: &[u8; 4] = b"DTCH";
const DTCH_VERSION: u32 = 1;
/// magic + version + kind + K + k + count
pub const DTCH_HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheKind {
    Full,
    Pt,
    TopK(usize),
}

impl CacheKind {
    fn code(self) -> u32 {
        match self {
            CacheKind::Full => 0,
            CacheKind::Pt => 1,
            CacheKind::TopK(_) => 2,
        }
    }

    fn top_k(self) -> usize {
        match self {
            CacheKind::TopK(k) => k,
            _ => 0,
        }
    }

    /// Payload bytes of one record for `n_classes` classes.
    pub fn record_bytes(self, n_classes: usize) -> usize {
        match self {
            CacheKind::Full => 8 * n_classes,
            CacheKind::Pt => 8,
            CacheKind::TopK(k) => 12 * k,
        }
    }

    pub fn name(self) -> String {
        match self {
            CacheKind::Full => "full".into(),
            CacheKind::Pt => "pt".into(),
            CacheKind::TopK(k) => format!("top{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    pub kind: CacheKind,
    pub n_classes: usize,
    pub signals: Vec<TeacherSignal>,
}

impl TeacherCache {
    pub fn new(kind: CacheKind, n_classes: usize, signals: Vec<TeacherSignal>) -> Result<Self> {
        if let CacheKind::TopK(k) = kind {
            if k == 0 || k > n_classes {
                return Err(Error::invalid(format!("k = {k} outside 1..={n_classes}")));
            }
        }
        for (i, s) in signals.iter().enumerate() {
            let matches = match (kind, s) {
                (CacheKind::Full, TeacherSignal::Full(_)) | (CacheKind::Pt, TeacherSignal::Pt(_)) => true,
                (CacheKind::TopK(k), TeacherSignal::TopK(pairs)) => pairs.len() == k,
                _ => false,
            };
            if !matches {
                return Err(Error::invalid(format!("record {i} does not match cache kind {}", kind.name())));
            }
            s.validate(n_classes)?;
        }
        Ok(TeacherCache {
            kind,
            n_classes,
            signals,
        })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn payload_bytes_per_example(&self) -> usize {
        self.kind.record_bytes(self.n_classes)
    }

    pub fn file_bytes(&self) -> usize {
        DTCH_HEADER_BYTES + self.len() * self.payload_bytes_per_example()
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "teacher cache",
        reason: reason.into(),
    }
}

pub fn write_teacher_cache<W: Write>(w: &mut W, cache: &TeacherCache) -> std::io::Result<()> {
    let u32_of = |v: usize| u32::try_from(v).map_err(std::io::Error::other);
    w.write_all(DTCH_MAGIC)?;
    w.write_all(&DTCH_VERSION.to_le_bytes())?;
    w.write_all(&cache.kind.code().to_le_bytes())?;
    w.write_all(&u32_of(cache.n_classes)?.to_le_bytes())?;
    w.write_all(&u32_of(cache.kind.top_k())?.to_le_bytes())?;
    w.write_all(&(cache.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(cache.payload_bytes_per_example());
    for s in &cache.signals {
        buf.clear();
        match s {
            TeacherSignal::Full(p) => p.as_slice().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            TeacherSignal::Pt(v) => buf.extend_from_slice(&v.to_le_bytes()),
            TeacherSignal::TopK(pairs) => {
                for (c, v) in pairs {
                    buf.extend_from_slice(&c.to_le_bytes());
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_teacher_cache<R: Read>(r: &mut R) -> Result<TeacherCache> {
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DTCH_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(io)?;
    if version != DTCH_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let code = read_u32(r).map_err(io)?;
    let n_classes = read_u32(r).map_err(io)? as usize;
    let top_k = read_u32(r).map_err(io)? as usize;
    let count = read_u64(r).map_err(io)?;
    let kind = match code {
        0 => CacheKind::Full,
        1 => CacheKind::Pt,
        2 => CacheKind::TopK(top_k),
        _ => return Err(bad(format!("unknown record kind {code}"))),
    };
    let count = usize::try_from(count).map_err(|_| bad("record count overflows"))?;
    let mut signals = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let s = match kind {
            CacheKind::Full => {
                let v = (0..n_classes).map(|_| read_f64(r)).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
                TeacherSignal::Full(ProbDist::new(v)?)
            }
            CacheKind::Pt => TeacherSignal::Pt(read_f64(r).map_err(io)?),
            CacheKind::TopK(k) => {
                let mut pairs = Vec::with_capacity(k);
                for _ in 0..k {
                    pairs.push((read_u32(r).map_err(io)?, read_f64(r).map_err(io)?));
                }
                TeacherSignal::TopK(pairs)
            }
        };
        signals.push(s);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(bad("trailing bytes after last record"));
    }
    TeacherCache::new(kind, n_classes, signals)
}

pub fn save_teacher_cache(path: &Path, cache: &TeacherCache) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_teacher_cache(&mut w, cache).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_teacher_cache(path: &Path) -> Result<TeacherCache> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_teacher_cache(&mut BufReader::new(file))
}
