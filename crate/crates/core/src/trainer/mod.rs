//! Mini-batch training, evaluation and teacher precompute.
//!
//! The update loop runs on one thread so that a run is a pure function of
//! its config; evaluation and teacher precompute fan out over fixed-size
//! chunks and keep example order.

mod optim;
#[cfg(test)]
mod tests;

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{diagnostics_record, DiagnosticsRecord};
use crate::distill::{
    ls_target, soft_target, target_loss_grad_into, tempered_loss_grad_into, top_k_pairs, CacheKind,
    DistillConfig, Method, SimTable, TargetContext, TeacherCache, TeacherSignal,
};
use crate::error::{Error, Result};
use crate::mathcore::prob::argmax;
use crate::mathcore::{softmax_into, LogitVec, ProbDist, SeededRng};
use crate::mlp::{backward, forward, load_checkpoint, MlpConfig, MlpParams, Mode};
use crate::synthgen::{load_dataset, Dataset, Split};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

/// Abort when any parameter norm exceeds this.
pub const MAX_PARAM_NORM: f64 = 1e6;
/// Rows per forward pass during evaluation and precompute.
const EVAL_CHUNK: usize = 1024;
/// Training examples scored for diagnostics at the end of a run.
const DIAGNOSTIC_EXAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: MlpConfig,
    pub distill: DistillConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    #[serde(default)]
    pub diagnostics_enabled: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Teacher-derived inputs for distillation runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct TeacherInputs<'a> {
    /// Per-example signals aligned with the training split.
    pub cache: Option<&'a TeacherCache>,
    /// The teacher's logit-layer weights, K×hidden.
    pub logit_weights: Option<ArrayView2<'a, f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub train: &'a Dataset,
    pub valid: &'a Dataset,
    pub teacher: TeacherInputs<'a>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub valid_top1: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the highest validation accuracy
    /// (earliest on ties).
    pub best: MlpParams,
    pub best_step: u64,
    pub best_accuracy: f64,
    pub last: MlpParams,
    pub history: Vec<Metrics>,
    pub updates: u64,
    /// Filled when diagnostics are enabled and a full teacher cache is given.
    pub diagnostics: Vec<DiagnosticsRecord>,
}

/// How each example's loss is formed, resolved once per run.
enum Objective {
    Ce,
    /// K×K label-smoothed targets, one row per class.
    Smoothed(Array2<f64>),
    /// n×K tempered soft targets, one row per training example.
    Soft(Array2<f64>),
}

fn build_objective(cfg: &RunConfig, inputs: &RunInputs<'_>) -> Result<Objective> {
    let d = &cfg.distill;
    let k = cfg.model.k;
    match d.method {
        Method::Ce => return Ok(Objective::Ce),
        Method::Ls => {
            let mut table = Array2::zeros((k, k));
            for (t, mut row) in table.rows_mut().into_iter().enumerate() {
                row.assign(&ndarray::ArrayView1::from(ls_target(t, k, d.epsilon)?.as_slice()));
            }
            return Ok(Objective::Smoothed(table));
        }
        _ => {}
    }

    let train = inputs.train;
    let cache = match d.method.cache_kind(d.k) {
        Some(kind) => {
            let cache = inputs
                .teacher
                .cache
                .ok_or_else(|| Error::Config(format!("{} needs a teacher cache", d.method)))?;
            let compatible = match (kind, cache.kind) {
                (CacheKind::Pt, CacheKind::Full) => true,
                (CacheKind::TopK(k), CacheKind::TopK(have)) => k == have,
                (CacheKind::TopK(_), CacheKind::Full) => true,
                (want, have) => want == have,
            };
            if !compatible {
                return Err(Error::Config(format!(
                    "{} cannot use a {} cache",
                    d.method,
                    cache.kind.name()
                )));
            }
            if cache.len() != train.len() || cache.n_classes != k {
                return Err(Error::Config(format!(
                    "teacher cache has {} records over {} classes; training split has {} over {k}",
                    cache.len(),
                    cache.n_classes,
                    train.len()
                )));
            }
            Some(cache)
        }
        None => None,
    };
    let sim = if d.method.needs_teacher_weights() {
        let w = inputs
            .teacher
            .logit_weights
            .ok_or_else(|| Error::Config(format!("{} needs the teacher's logit weights", d.method)))?;
        if w.nrows() != k {
            return Err(Error::Config(format!("teacher has {} classes, model has {k}", w.nrows())));
        }
        Some(SimTable::new(w, d.alpha_sim, d.beta_sim)?)
    } else {
        None
    };
    let ctx = TargetContext {
        k,
        sim,
        super_of: Some(train.super_of()),
    };
    let rows: Vec<Vec<f64>> = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let t = train.labels[i] as usize;
            let signal = cache.map(|c| &c.signals[i]);
            let rho = soft_target(d, t, signal, &ctx)?.expect("soft method");
            Ok(rho.temper(d.temperature).into_vec())
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let table = Array2::from_shape_vec((train.len(), k), flat).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Objective::Soft(table))
}

fn check_shapes(cfg: &RunConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.dim() != cfg.model.d_in || ds.k != cfg.model.k {
        return Err(Error::Config(format!(
            "{what} split has d = {}, K = {}; model expects d = {}, K = {}",
            ds.dim(),
            ds.k,
            cfg.model.d_in,
            cfg.model.k
        )));
    }
    Ok(())
}

/// Trains `cfg.model` from scratch and returns the best-validation
/// parameters with the full metric history.
pub fn train(cfg: &RunConfig, inputs: &RunInputs<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shapes(cfg, inputs.train, "training")?;
    check_shapes(cfg, inputs.valid, "validation")?;
    if inputs.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let objective = build_objective(cfg, inputs)?;

    let root = SeededRng::new(cfg.seed);
    let mut params = MlpParams::init(cfg.model, &root)?;
    let shapes: Vec<usize> = params.trainable().iter().map(|s| s.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &shapes)?;

    let train = inputs.train;
    let n = train.len();
    let batch = cfg.batch_size.min(n);
    let k = cfg.model.k;
    let d = &cfg.distill;

    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = 0u64;
    let mut pos = n; // forces a shuffle before the first batch

    let mut history = Vec::new();
    let mut best = (params.clone(), 0u64, f64::NEG_INFINITY);
    let (mut loss_sum, mut loss_steps) = (0.0, 0u64);
    let mut dl_dz = Array2::<f64>::zeros((batch, k));

    for step in 1..=cfg.max_steps {
        if pos + batch > n {
            order.sort_unstable();
            order.shuffle(&mut root.derive("trainer.shuffle", epoch));
            epoch += 1;
            pos = 0;
        }
        let idx = &order[pos..pos + batch];
        pos += batch;

        let x = train.features.select(Axis(0), idx);
        let trace = forward(&params, x.view(), Mode::Train)?;
        let mut loss = 0.0;
        for (r, (&i, mut g)) in idx.iter().zip(dl_dz.rows_mut()).enumerate() {
            let t = train.labels[i] as usize;
            let z = trace.z.row(r);
            let z = z.as_slice().expect("standard layout");
            let g = g.as_slice_mut().expect("standard layout");
            loss += match &objective {
                Objective::Ce => crate::distill::ce_loss_grad_into(t, z, g),
                Objective::Smoothed(table) => target_loss_grad_into(table.row(t).as_slice().unwrap(), z, g),
                Objective::Soft(table) => tempered_loss_grad_into(
                    t,
                    z,
                    table.row(i).as_slice().unwrap(),
                    d.lambda,
                    d.temperature,
                    d.scale,
                    g,
                ),
            };
        }
        loss /= batch as f64;
        dl_dz /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let grads = backward(&trace, &params, dl_dz.view())?;
        params.update_running_stats(&trace);
        opt.update(&mut params.trainable_mut(), &grads.slices());
        let norm = params.norm();
        if !(norm <= MAX_PARAM_NORM) || !params.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("parameter norm {norm:e}"),
            });
        }
        loss_sum += loss;
        loss_steps += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let acc = evaluate(&params, inputs.valid)?;
            if acc > best.2 {
                best = (params.clone(), step, acc);
            }
            history.push(Metrics {
                step,
                train_loss: loss_sum / loss_steps as f64,
                valid_top1: acc,
                best_so_far: best.2,
            });
            loss_sum = 0.0;
            loss_steps = 0;
        }
    }

    let diagnostics = match inputs.teacher.cache {
        Some(cache) if cfg.diagnostics_enabled && cache.kind == CacheKind::Full && cache.len() == n => {
            diagnostics_for(&params, train, cache, d, DIAGNOSTIC_EXAMPLES)?
        }
        _ => Vec::new(),
    };
    let (best_params, best_step, best_accuracy) = best;
    Ok(TrainOutcome {
        best: best_params,
        best_step,
        best_accuracy,
        last: params,
        history,
        updates: opt.steps_taken(),
        diagnostics,
    })
}

/// Diagnostics records for the first `limit` training examples.
pub fn diagnostics_for(
    student: &MlpParams,
    ds: &Dataset,
    cache: &TeacherCache,
    cfg: &DistillConfig,
    limit: usize,
) -> Result<Vec<DiagnosticsRecord>> {
    let n = limit.min(ds.len()).min(cache.len());
    let z = predict_logits_rows(student, ds.features.slice(ndarray::s![..n, ..]))?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let TeacherSignal::Full(p) = &cache.signals[i] else {
                return Err(Error::Config("diagnostics need a full teacher cache".into()));
            };
            let zi = LogitVec::new(z.row(i).to_vec())?;
            diagnostics_record(i as u64, ds.labels[i] as usize, &zi, p, cfg)
        })
        .collect()
}

/// Eval-mode logits for every row, computed in fixed-size chunks.
pub fn predict_logits_rows(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.nrows() == 0 {
        return Ok(Array2::zeros((0, params.config.k)));
    }
    let chunks: Vec<ArrayView2<'_, f64>> = x.axis_chunks_iter(Axis(0), EVAL_CHUNK).collect();
    let parts = chunks
        .into_par_iter()
        .map(|c| forward(params, c, Mode::Eval).map(|t| t.z))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
}

pub fn predict_logits(params: &MlpParams, ds: &Dataset) -> Result<Array2<f64>> {
    predict_logits_rows(params, ds.features.view())
}

/// Row-wise `softmax(z / T)` of the model's eval-mode logits.
pub fn predict_probs(params: &MlpParams, ds: &Dataset, temperature: f64) -> Result<Array2<f64>> {
    let mut z = predict_logits(params, ds)?;
    let mut buf = vec![0.0; z.ncols()];
    for mut row in z.rows_mut() {
        softmax_into(row.as_slice().expect("standard layout"), temperature, &mut buf);
        row.as_slice_mut().expect("standard layout").copy_from_slice(&buf);
    }
    Ok(z)
}

/// Top-1 accuracy; ties in the logits go to the lowest class index.
pub fn evaluate(params: &MlpParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let z = predict_logits(params, ds)?;
    let correct = z
        .rows()
        .into_iter()
        .zip(&ds.labels)
        .filter(|(row, &t)| argmax(row.as_slice().expect("standard layout")) == t as usize)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Runs the teacher over `ds` and stores one signal per example, in order.
pub fn precompute_teacher(teacher: &MlpParams, ds: &Dataset, kind: CacheKind) -> Result<TeacherCache> {
    let probs = predict_probs(teacher, ds, 1.0)?;
    let signals = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let t = ds.labels[i];
            let p = ProbDist::new(probs.row(i).to_vec())?;
            Ok(match kind {
                CacheKind::Full => TeacherSignal::Full(p),
                CacheKind::Pt => TeacherSignal::Pt(p[t as usize]),
                CacheKind::TopK(k) => TeacherSignal::TopK(top_k_pairs(&p, k)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TeacherCache::new(kind, teacher.config.k, signals)
}

pub fn write_metrics_csv<W: Write>(w: W, history: &[Metrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "train_loss", "valid_top1", "best_so_far"])
        .and_then(|_| {
            history.iter().try_for_each(|m| {
                out.write_record([
                    m.step.to_string(),
                    m.train_loss.to_string(),
                    m.valid_top1.to_string(),
                    m.best_so_far.to_string(),
                ])
            })
        })
        .map_err(|e| Error::Format {
            what: "csv",
            reason: e.to_string(),
        })?;
    out.flush().map_err(|e| Error::io("metrics", e))
}

/// File locations for a run driven from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub teacher_cache: Option<PathBuf>,
}

/// Loads everything `files` points at and trains.
pub fn train_from_files(cfg: &RunConfig, files: &DataFiles) -> Result<TrainOutcome> {
    let train_ds = load_dataset(&files.train, Split::Train)?;
    let valid_ds = load_dataset(&files.valid, Split::Valid)?;
    let teacher = files.teacher_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if cfg.distill.method.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("{} needs a teacher checkpoint", cfg.distill.method)));
    }
    let cache = match (&files.teacher_cache, cfg.distill.method.cache_kind(cfg.distill.k)) {
        (Some(path), _) => Some(crate::distill::load_teacher_cache(path)?),
        (None, Some(kind)) => {
            let t = teacher.as_ref().expect("checked above");
            Some(precompute_teacher(&t.params, &train_ds, kind)?)
        }
        (None, None) => None,
    };
    let inputs = RunInputs {
        train: &train_ds,
        valid: &valid_ds,
        teacher: TeacherInputs {
            cache: cache.as_ref(),
            logit_weights: teacher.as_ref().map(|t| t.params.logit_weights()),
        },
    };
    train(cfg, &inputs)
}

/// Convenience for callers that only have a path to a directory of split files.
pub fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.train.dset")),
        dir.join(format!("{name}.valid.dset")),
    )
}
