//! Checkpoints: every tensor as a `DLAB` matrix (vectors as 1×n), followed by
//! a JSON manifest, its byte length as u64 LE, and the trailer `DCKP`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Dense, MlpConfig, MlpParams};
use crate::error::{Error, Result};
use crate::mathcore::{read_matrix, write_matrix};

const TRAILER: &[u8; 4] = b"DCKP";
const TENSORS: [&str; 15] = [
    "layer1.w",
    "layer1.b",
    "bn1.gamma",
    "bn1.beta",
    "bn1.running_mean",
    "bn1.running_var",
    "layer2.w",
    "layer2.b",
    "bn2.gamma",
    "bn2.beta",
    "bn2.running_mean",
    "bn2.running_var",
    "out.w",
    "out.b",
    "log_scale",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: MlpConfig,
    step: u64,
    tensors: Vec<String>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn row(v: &Array1<f64>) -> ArrayView2<'_, f64> {
    v.view().insert_axis(ndarray::Axis(0))
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let tensors: [ArrayView2<'_, f64>; 15] = [
        p.layer1.w.view(),
        row(&p.layer1.b),
        row(&p.bn1.gamma),
        row(&p.bn1.beta),
        row(&p.bn1.running_mean),
        row(&p.bn1.running_var),
        p.layer2.w.view(),
        row(&p.layer2.b),
        row(&p.bn2.gamma),
        row(&p.bn2.beta),
        row(&p.bn2.running_mean),
        row(&p.bn2.running_var),
        p.out.w.view(),
        row(&p.out.b),
        row(&p.log_scale),
    ];
    let io = |e: std::io::Error| bad(e.to_string());
    for t in tensors {
        write_matrix(w, t).map_err(io)?;
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: p.config,
        step: ckpt.step,
        tensors: TENSORS.iter().map(|s| s.to_string()).collect(),
    })?;
    w.write_all(&manifest).map_err(io)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(TRAILER).map_err(io)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[bytes.len() - 4..] != TRAILER {
        return Err(bad("missing DCKP trailer"));
    }
    let len_at = bytes.len() - 12;
    let len = u64::from_le_bytes(bytes[len_at..len_at + 8].try_into().expect("8 bytes")) as usize;
    if len > len_at {
        return Err(bad("manifest length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[len_at - len..len_at])?;
    if manifest.tensors != TENSORS {
        return Err(bad(format!("unexpected tensor list {:?}", manifest.tensors)));
    }
    let cfg = manifest.config;
    cfg.validate()?;

    let mut cursor = &bytes[..len_at - len];
    let mut next = |rows: usize, cols: usize, name: &str| -> Result<Array2<f64>> {
        let m = read_matrix(&mut cursor)?;
        if m.dim() != (rows, cols) {
            return Err(bad(format!("{name} has shape {:?}, want {:?}", m.dim(), (rows, cols))));
        }
        Ok(m)
    };
    let vec = |m: Array2<f64>| {
        let n = m.len();
        m.into_shape_with_order(n).expect("1×n")
    };
    let (d, h, k) = (cfg.d_in, cfg.hidden, cfg.k);
    let w1 = next(h, d, TENSORS[0])?;
    let b1 = vec(next(1, h, TENSORS[1])?);
    let bn1 = BatchNorm {
        gamma: vec(next(1, h, TENSORS[2])?),
        beta: vec(next(1, h, TENSORS[3])?),
        running_mean: vec(next(1, h, TENSORS[4])?),
        running_var: vec(next(1, h, TENSORS[5])?),
    };
    let w2 = next(h, h, TENSORS[6])?;
    let b2 = vec(next(1, h, TENSORS[7])?);
    let bn2 = BatchNorm {
        gamma: vec(next(1, h, TENSORS[8])?),
        beta: vec(next(1, h, TENSORS[9])?),
        running_mean: vec(next(1, h, TENSORS[10])?),
        running_var: vec(next(1, h, TENSORS[11])?),
    };
    let w_out = next(k, h, TENSORS[12])?;
    let b_out = vec(next(1, k, TENSORS[13])?);
    let log_scale = vec(next(1, 1, TENSORS[14])?);
    if !cursor.is_empty() {
        return Err(bad("unexpected bytes between tensors and manifest"));
    }
    Ok(Checkpoint {
        params: MlpParams {
            config: cfg,
            layer1: Dense { w: w1, b: b1 },
            bn1,
            layer2: Dense { w: w2, b: b2 },
            bn2,
            out: Dense { w: w_out, b: b_out },
            log_scale,
        },
        step: manifest.step,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, ckpt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
