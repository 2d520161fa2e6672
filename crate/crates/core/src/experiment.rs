//! Benchmark cells on the synthetic task: one dataset and teacher per
//! `(tau, seed)`, students trained against that teacher, and a content-keyed
//! on-disk store so long sweeps can be resumed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{CacheKind, DistillConfig, Method, TeacherCache};
use crate::error::{Error, Result};
use crate::mlp::{load_checkpoint, save_checkpoint, Checkpoint, MlpConfig, MlpParams};
use crate::synthgen::{gen_dataset, Dataset, SyntheticSpec};
use crate::trainer::{precompute_teacher, train, Metrics, OptimizerConfig, RunConfig, RunInputs, TeacherInputs};

/// Shape of the synthetic task plus the shared training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub d: usize,
    pub k: usize,
    pub c: usize,
    pub m: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub teacher_hidden: usize,
    pub student_hidden: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub lr: f64,
}

impl BenchmarkConfig {
    /// d = 100, K = 20, C = 5, M = 10, 50K/10K examples, 200K Adam steps.
    pub fn desk() -> Self {
        BenchmarkConfig {
            d: 100,
            k: 20,
            c: 5,
            m: 10,
            n_train: 50_000,
            n_valid: 10_000,
            teacher_hidden: 128,
            student_hidden: 64,
            batch_size: 128,
            steps: 200_000,
            eval_every: 1000,
            lr: 3e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_hidden == 0 || self.student_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.spec(0.0, 0).map(|_| ())
    }

    pub fn spec(&self, tau: f64, seed: u64) -> Result<SyntheticSpec> {
        SyntheticSpec::new(self.d, self.k, self.c, tau, self.m, self.n_train, self.n_valid, seed)
    }

    fn run(&self, hidden: usize, distill: DistillConfig, seed: u64) -> RunConfig {
        RunConfig {
            model: MlpConfig::standard(self.d, hidden, self.k),
            distill,
            optimizer: OptimizerConfig::adam(self.lr),
            batch_size: self.batch_size,
            max_steps: self.steps,
            eval_every: self.eval_every,
            seed,
            diagnostics_enabled: false,
        }
    }

    pub fn teacher_run(&self, seed: u64) -> RunConfig {
        self.run(self.teacher_hidden, DistillConfig::ce(), seed)
    }

    pub fn student_run(&self, distill: DistillConfig, seed: u64) -> RunConfig {
        self.run(self.student_hidden, distill, seed)
    }
}

/// Tuned synthetic-task temperatures, indexed by tau in steps of 0.1.
const KD_TEMPERATURES: [f64; 6] = [3.0, 5.0, 2.0, 3.0, 10.0, 5.0];

/// KD temperature for `tau`; off-grid values use the nearest tabulated tau.
pub fn kd_temperature(tau: f64) -> f64 {
    let i = (tau * 10.0).round().clamp(0.0, (KD_TEMPERATURES.len() - 1) as f64) as usize;
    KD_TEMPERATURES[i]
}

/// Default hyper-parameters for `method` on the synthetic task at `tau`.
pub fn default_distill(method: Method, tau: f64) -> DistillConfig {
    let t = kd_temperature(tau);
    match method {
        Method::Ce => DistillConfig::ce(),
        Method::Ls => DistillConfig::ls(0.3),
        Method::Kd => DistillConfig::kd(0.7, t),
        Method::KdPt => DistillConfig::kd_pt(0.7, t),
        Method::KdSim => DistillConfig::kd_sim(0.7, 0.5, 0.5),
        Method::KdRel => DistillConfig {
            method: Method::KdRel,
            ..DistillConfig::kd(0.7, t)
        },
        Method::KdPtSim => DistillConfig::kd_pt_sim(0.7, t, 0.5),
        Method::KdTopk => DistillConfig::kd_topk(0.7, t, 2),
    }
}

/// Summary of one finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub role: Role,
    pub tau: f64,
    pub seed: u64,
    pub run: RunConfig,
    pub best_accuracy: f64,
    pub best_step: u64,
    pub history: Vec<Metrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Caches finished runs as `<key>.json` plus `<key>.ckpt`, keyed by a hash
/// of everything that determines the run.
#[derive(Debug)]
pub struct ResultStore {
    dir: Option<PathBuf>,
    refresh: bool,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ResultStore {
    /// Keeps nothing on disk.
    pub fn ephemeral() -> Self {
        ResultStore {
            dir: None,
            refresh: false,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// With `refresh`, cached entries are ignored and overwritten.
    pub fn at(dir: impl Into<PathBuf>, refresh: bool) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResultStore {
            dir: Some(dir),
            refresh,
            ..Self::ephemeral()
        })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn paths(&self, key: &str) -> Option<(PathBuf, PathBuf)> {
        self.dir
            .as_ref()
            .map(|d| (d.join(format!("{key}.json")), d.join(format!("{key}.ckpt"))))
    }

    fn load(&self, key: &str) -> Result<Option<(CellResult, MlpParams)>> {
        let Some((json, ckpt)) = self.paths(key) else {
            return Ok(None);
        };
        if self.refresh || !json.exists() || !ckpt.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let result = serde_json::from_str(&text)?;
        let params = load_checkpoint(&ckpt)?.params;
        Ok(Some((result, params)))
    }

    fn save(&self, key: &str, result: &CellResult, params: &MlpParams) -> Result<()> {
        let Some((json, ckpt)) = self.paths(key) else {
            return Ok(());
        };
        let ck = Checkpoint {
            params: params.clone(),
            step: result.best_step,
        };
        save_checkpoint(&ckpt, &ck)?;
        // json last: its presence marks a complete entry
        let tmp = json.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(result)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &json).map_err(|e| Error::io(&json, e))
    }

    fn get_or_train(
        &self,
        key: &str,
        role: Role,
        tau: f64,
        seed: u64,
        run: &RunConfig,
        inputs: &RunInputs<'_>,
    ) -> Result<(CellResult, MlpParams)> {
        if let Some(hit) = self.load(key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let out = train(run, inputs)?;
        let result = CellResult {
            role,
            tau,
            seed,
            run: run.clone(),
            best_accuracy: out.best_accuracy,
            best_step: out.best_step,
            history: out.history,
        };
        self.save(key, &result, &out.best)?;
        Ok((result, out.best))
    }
}

fn content_key(parts: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(parts)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..12].iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest of the generated examples, so cached runs never outlive a change
/// in how data is generated.
fn data_digest(sets: &[&Dataset]) -> String {
    let mut h = Sha256::new();
    for ds in sets {
        for v in ds.features.iter() {
            h.update(v.to_le_bytes());
        }
        for t in &ds.labels {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize()[..12].iter().map(|b| format!("{b:02x}")).collect()
}

/// Data and trained teacher shared by every student at one `(tau, seed)`.
pub struct SeedContext {
    pub tau: f64,
    pub seed: u64,
    pub train: Dataset,
    pub valid: Dataset,
    pub teacher: MlpParams,
    pub teacher_result: CellResult,
    /// Full teacher distribution on every training example.
    pub cache: TeacherCache,
    key: String,
}

impl SeedContext {
    pub fn prepare(bench: &BenchmarkConfig, tau: f64, seed: u64, store: &ResultStore) -> Result<Self> {
        bench.validate()?;
        let spec = bench.spec(tau, seed)?;
        let (train_ds, valid_ds) = gen_dataset(&spec)?;
        let run = bench.teacher_run(seed);
        let key = content_key(&("teacher", &spec, data_digest(&[&train_ds, &valid_ds]), &run))?;
        let inputs = RunInputs {
            train: &train_ds,
            valid: &valid_ds,
            teacher: TeacherInputs::default(),
        };
        let (teacher_result, teacher) = store.get_or_train(&key, Role::Teacher, tau, seed, &run, &inputs)?;
        let cache = precompute_teacher(&teacher, &train_ds, CacheKind::Full)?;
        Ok(SeedContext {
            tau,
            seed,
            train: train_ds,
            valid: valid_ds,
            teacher,
            teacher_result,
            cache,
            key,
        })
    }

    pub fn student(
        &self,
        bench: &BenchmarkConfig,
        distill: DistillConfig,
        store: &ResultStore,
    ) -> Result<(CellResult, MlpParams)> {
        let run = bench.student_run(distill, self.seed);
        let key = content_key(&("student", &self.key, &run))?;
        let inputs = RunInputs {
            train: &self.train,
            valid: &self.valid,
            teacher: TeacherInputs {
                cache: Some(&self.cache),
                logit_weights: Some(self.teacher.logit_weights()),
            },
        };
        store.get_or_train(&key, Role::Student, self.tau, self.seed, &run, &inputs)
    }
}

/// Sweepable knob; the other settings come from [`default_distill`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Tau,
    K,
    Lambda,
    T,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tau" => Ok(SweepAxis::Tau),
            "k" => Ok(SweepAxis::K),
            "lambda" => Ok(SweepAxis::Lambda),
            "t" | "temperature" => Ok(SweepAxis::T),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    /// Used for every cell unless the axis is tau.
    pub tau: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub failures: Vec<String>,
}

fn apply_axis(mut cfg: DistillConfig, axis: SweepAxis, value: f64) -> Result<DistillConfig> {
    match axis {
        SweepAxis::Tau => {}
        SweepAxis::K => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("k must be a positive integer, got {value}")));
            }
            cfg.k = value as usize;
        }
        SweepAxis::Lambda => cfg.lambda = value,
        SweepAxis::T => cfg.temperature = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One finished (or failed) `(value, method, seed)` cell.
#[derive(Debug, Clone)]
pub struct CellReport {
    pub axis_value: f64,
    pub method: Method,
    pub seed: u64,
    pub outcome: std::result::Result<CellResult, String>,
}

/// Runs every `(value, method, seed)` cell, with up to `jobs` teacher
/// contexts in flight. A failing cell is recorded in its row and the sweep
/// continues; `progress` sees each cell as it finishes. Rows come back in
/// plan order regardless of `jobs`.
pub fn run_sweep(
    bench: &BenchmarkConfig,
    plan: &SweepPlan,
    store: &ResultStore,
    jobs: usize,
    progress: &(dyn Fn(&CellReport) + Sync),
) -> Result<Vec<SweepRow>> {
    if plan.values.is_empty() || plan.methods.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value, method and seed".into()));
    }
    let cells: Vec<(f64, Method)> = plan
        .values
        .iter()
        .flat_map(|&v| plan.methods.iter().map(move |&m| (v, m)))
        .collect();
    let taus: Vec<f64> = match plan.axis {
        SweepAxis::Tau => plan.values.clone(),
        _ => vec![plan.tau],
    };
    let contexts: Vec<(u64, f64)> = plan
        .seeds
        .iter()
        .flat_map(|&s| taus.iter().map(move |&t| (s, t)))
        .collect();

    let run_context = |&(seed, tau): &(u64, f64)| -> Vec<(usize, CellReport)> {
        let mine = cells
            .iter()
            .enumerate()
            .filter(|(_, (v, _))| plan.axis != SweepAxis::Tau || *v == tau);
        let ctx = SeedContext::prepare(bench, tau, seed, store);
        mine.map(|(i, &(axis_value, method))| {
            let outcome = match &ctx {
                Err(e) => Err(format!("seed {seed}, tau {tau}: teacher failed: {e}")),
                Ok(ctx) => apply_axis(default_distill(method, tau), plan.axis, axis_value)
                    .and_then(|cfg| ctx.student(bench, cfg, store))
                    .map(|(r, _)| r)
                    .map_err(|e| format!("seed {seed}: {e}")),
            };
            let report = CellReport {
                axis_value,
                method,
                seed,
                outcome,
            };
            progress(&report);
            (i, report)
        })
        .collect()
    };
    let finished: Vec<Vec<(usize, CellReport)>> = if jobs <= 1 {
        contexts.iter().map(run_context).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| contexts.par_iter().map(run_context).collect())
    };

    let mut rows: Vec<SweepRow> = cells
        .iter()
        .map(|&(axis_value, method)| SweepRow {
            axis_value,
            method,
            mean: f64::NAN,
            std: f64::NAN,
            runs: 0,
            failures: Vec::new(),
        })
        .collect();
    let mut accs: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for (i, report) in finished.into_iter().flatten() {
        match report.outcome {
            Ok(r) => accs[i].push(r.best_accuracy),
            Err(e) => rows[i].failures.push(e),
        }
    }
    for (row, a) in rows.iter_mut().zip(&accs) {
        if !a.is_empty() {
            summarize(row, a);
        }
    }
    Ok(rows)
}

fn summarize(row: &mut SweepRow, accs: &[f64]) {
    let n = accs.len() as f64;
    row.runs = accs.len();
    row.mean = accs.iter().sum::<f64>() / n;
    row.std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - row.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let axis_name = match axis {
        SweepAxis::Tau => "tau",
        SweepAxis::K => "k",
        SweepAxis::Lambda => "lambda",
        SweepAxis::T => "temperature",
    };
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Format {
        what: "csv",
        reason: e.to_string(),
    };
    out.write_record([axis_name, "method", "mean_top1", "std_top1", "runs", "failures"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.axis_value.to_string(),
            r.method.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.runs.to_string(),
            r.failures.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io(Path::new("sweep"), e))
}
