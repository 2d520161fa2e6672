//! Training settings resolved as defaults < config file < flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use dlab_core::distill::{DistillConfig, Method, SoftScale};
use dlab_core::experiment::default_distill;
use dlab_core::mlp::MlpConfig;
use dlab_core::trainer::{OptimizerConfig, OptimizerKind, RunConfig};
use serde::{Deserialize, Serialize};

/// Every field is optional so a config file and the command line can each
/// set a subset.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunKnobs {
    /// ce, ls, kd, kd-pt, kd-sim, kd-rel, kd-pt-sim or kd-topk
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Softmax temperature; defaults to the tuned value for the data's tau
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha_mix: Option<f64>,
    #[arg(long)]
    pub alpha_sim: Option<f64>,
    #[arg(long)]
    pub beta_sim: Option<f64>,
    /// Teacher entries kept by kd-topk
    #[arg(long)]
    pub topk: Option<usize>,
    /// Target, sibling and other-class masses for kd-rel, comma separated
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub beta_rel: Option<Vec<f64>>,
    /// Use loss weight 1 and gradient weight 1/T on the soft term instead of T² and T
    #[arg(long)]
    pub raw_scale: Option<bool>,

    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batchnorm: Option<bool>,
    #[arg(long)]
    pub residual: Option<bool>,
    #[arg(long)]
    pub normalize_logits: Option<bool>,

    /// adam or sgd-nesterov
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Piecewise-constant schedule as step:lr pairs, e.g. 1000:0.01,5000:0.001
    #[arg(long, value_delimiter = ',', value_parser = parse_schedule_entry)]
    pub lr_schedule: Option<Vec<(u64, f64)>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record per-example diagnostics at the end of the run
    #[arg(long)]
    pub diagnostics: Option<bool>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd-nesterov" | "sgd" => Ok(OptimizerKind::SgdNesterov),
        _ => Err(format!("unknown optimizer {s:?} (adam, sgd-nesterov)")),
    }
}

fn parse_schedule_entry(s: &str) -> Result<(u64, f64), String> {
    let (step, lr) = s.split_once(':').ok_or_else(|| format!("expected step:lr, got {s:?}"))?;
    Ok((
        step.trim().parse().map_err(|e| format!("bad step in {s:?}: {e}"))?,
        lr.trim().parse().map_err(|e| format!("bad lr in {s:?}: {e}"))?,
    ))
}

impl RunKnobs {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: RunKnobs) -> Result<RunKnobs> {
        let mut merged = serde_json::to_value(base)?;
        let top = serde_json::to_value(self)?;
        for (k, v) in top.as_object().expect("struct serializes to an object") {
            if !v.is_null() {
                merged[k] = v.clone();
            }
        }
        Ok(serde_json::from_value(merged)?)
    }

    /// Fills every unset field from the built-in defaults for data at `tau`.
    pub fn resolve(&self, d_in: usize, k: usize, tau: f64, default_method: Method) -> Result<RunConfig> {
        let method = self.method.unwrap_or(default_method);
        let base = default_distill(method, tau);
        let beta_rel = match &self.beta_rel {
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(v) => bail!("beta_rel needs 3 values, got {}", v.len()),
            None => base.beta_rel,
        };
        let distill = DistillConfig {
            method,
            lambda: self.lambda.unwrap_or(base.lambda),
            temperature: self.temperature.unwrap_or(base.temperature),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            alpha_mix: self.alpha_mix.unwrap_or(base.alpha_mix),
            alpha_sim: self.alpha_sim.unwrap_or(base.alpha_sim),
            beta_sim: self.beta_sim.unwrap_or(base.beta_sim),
            k: self.topk.unwrap_or(base.k),
            beta_rel,
            scale: if self.raw_scale.unwrap_or(false) {
                SoftScale::Raw
            } else {
                SoftScale::TSquared
            },
        };
        let standard = MlpConfig::standard(d_in, self.hidden.unwrap_or(64), k);
        let model = MlpConfig {
            use_batchnorm: self.batchnorm.unwrap_or(standard.use_batchnorm),
            use_residual: self.residual.unwrap_or(standard.use_residual),
            normalize_logits: self.normalize_logits.unwrap_or(standard.normalize_logits),
            ..standard
        };
        let lr = self.lr.unwrap_or(dlab_core::experiment::BenchmarkConfig::desk().lr);
        let mut optimizer = match self.optimizer.unwrap_or(OptimizerKind::Adam) {
            OptimizerKind::Adam => OptimizerConfig::adam(lr),
            OptimizerKind::SgdNesterov => OptimizerConfig::sgd_nesterov(lr, 0.9, 0.0),
        };
        optimizer.momentum = self.momentum.unwrap_or(optimizer.momentum);
        optimizer.weight_decay = self.weight_decay.unwrap_or(0.0);
        optimizer.lr_schedule = self.lr_schedule.clone().unwrap_or_default();
        let cfg = RunConfig {
            model,
            distill,
            optimizer,
            batch_size: self.batch_size.unwrap_or(128),
            max_steps: self.steps.unwrap_or(200_000),
            eval_every: self.eval_every.unwrap_or(1000),
            seed: self.seed.unwrap_or(0),
            diagnostics_enabled: self.diagnostics.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
