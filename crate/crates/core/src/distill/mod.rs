//! Training objectives: hard cross-entropy, label smoothing, distillation
//! against a full teacher distribution, and the hand-crafted partial
//! teachers. Every objective returns its loss together with the exact
//! gradient with respect to the logits.

mod cache;
mod targets;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::prob::{cross_entropy_slices, neg_log_floored, softmax_into};
use crate::mathcore::{LogitVec, ProbDist};

pub use cache::{
    load_teacher_cache, read_teacher_cache, save_teacher_cache, write_teacher_cache, CacheKind, TeacherCache,
    DTCH_HEADER_BYTES, DTCH_MAGIC,
};
pub use targets::{
    rho_pt, rho_pt_sim, rho_rel, rho_sim, rho_sim_from_cosines, rho_topk, rho_topk_from_pairs, top_k_pairs,
    SimTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ce,
    Ls,
    Kd,
    KdPt,
    KdSim,
    KdRel,
    KdPtSim,
    KdTopk,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ce,
        Method::Ls,
        Method::Kd,
        Method::KdPt,
        Method::KdSim,
        Method::KdRel,
        Method::KdPtSim,
        Method::KdTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Ls => "ls",
            Method::Kd => "kd",
            Method::KdPt => "kd-pt",
            Method::KdSim => "kd-sim",
            Method::KdRel => "kd-rel",
            Method::KdPtSim => "kd-pt-sim",
            Method::KdTopk => "kd-topk",
        }
    }

    /// Teacher cache record kind the method reads per example, if any.
    pub fn cache_kind(self, k: usize) -> Option<CacheKind> {
        match self {
            Method::Kd => Some(CacheKind::Full),
            Method::KdPt | Method::KdPtSim => Some(CacheKind::Pt),
            Method::KdTopk => Some(CacheKind::TopK(k)),
            Method::Ce | Method::Ls | Method::KdSim | Method::KdRel => None,
        }
    }

    /// Whether the method needs the teacher's logit-layer weights.
    pub fn needs_teacher_weights(self) -> bool {
        matches!(self, Method::KdSim | Method::KdPtSim)
    }

    pub fn needs_teacher(self) -> bool {
        self.cache_kind(1).is_some() || self.needs_teacher_weights()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "kd-pt+sim" && *m == Method::KdPtSim))
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// How the softened term is weighted against the hard-label term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftScale {
    /// Loss term multiplied by `T²`, so its logit gradient is `λ·T·(q̃ − p̃)`.
    #[default]
    TSquared,
    /// Unscaled loss term; logit gradient `(λ/T)·(q̃ − p̃)`.
    Raw,
}

impl SoftScale {
    /// Factor on `λ·H(p̃, q̃)` in the loss.
    pub fn loss_factor(self, temperature: f64) -> f64 {
        match self {
            SoftScale::TSquared => temperature * temperature,
            SoftScale::Raw => 1.0,
        }
    }

    /// Factor on `λ·(q̃ − p̃)` in the logit gradient.
    pub fn grad_factor(self, temperature: f64) -> f64 {
        match self {
            SoftScale::TSquared => temperature,
            SoftScale::Raw => 1.0 / temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub method: Method,
    /// Weight of the soft term.
    pub lambda: f64,
    pub temperature: f64,
    /// Label-smoothing mass.
    pub epsilon: f64,
    /// Mixing weight of the similarity target in `kd-pt-sim`.
    pub alpha_mix: f64,
    /// Exponent applied to clamped cosines before the similarity softmax.
    pub alpha_sim: f64,
    /// Softmax temperature of the similarity target.
    pub beta_sim: f64,
    /// Number of teacher entries kept by `kd-topk`.
    pub k: usize,
    /// Masses for (ground truth, each sibling, each other class) in `kd-rel`.
    pub beta_rel: [f64; 3],
    #[serde(default)]
    pub scale: SoftScale,
}

impl Default for DistillConfig {
    fn default() -> Self {
        // synthetic-benchmark settings; `beta_rel` fits K = 20 with 3 siblings
        DistillConfig {
            method: Method::Ce,
            lambda: 0.7,
            temperature: 1.0,
            epsilon: 0.3,
            alpha_mix: 0.5,
            alpha_sim: 0.5,
            beta_sim: 0.5,
            k: 2,
            beta_rel: [0.6, 0.1 / 3.0, 0.3 / 16.0],
            scale: SoftScale::TSquared,
        }
    }
}

impl DistillConfig {
    pub fn ce() -> Self {
        DistillConfig::default()
    }

    pub fn ls(epsilon: f64) -> Self {
        DistillConfig {
            method: Method::Ls,
            epsilon,
            ..Default::default()
        }
    }

    pub fn kd(lambda: f64, temperature: f64) -> Self {
        DistillConfig {
            method: Method::Kd,
            lambda,
            temperature,
            ..Default::default()
        }
    }

    pub fn kd_pt(lambda: f64, temperature: f64) -> Self {
        DistillConfig {
            method: Method::KdPt,
            ..Self::kd(lambda, temperature)
        }
    }

    pub fn kd_sim(lambda: f64, alpha_sim: f64, beta_sim: f64) -> Self {
        DistillConfig {
            method: Method::KdSim,
            lambda,
            alpha_sim,
            beta_sim,
            ..Default::default()
        }
    }

    pub fn kd_rel(lambda: f64, temperature: f64, beta_rel: [f64; 3]) -> Self {
        DistillConfig {
            method: Method::KdRel,
            beta_rel,
            ..Self::kd(lambda, temperature)
        }
    }

    pub fn kd_pt_sim(lambda: f64, temperature: f64, alpha_mix: f64) -> Self {
        DistillConfig {
            method: Method::KdPtSim,
            alpha_mix,
            ..Self::kd(lambda, temperature)
        }
    }

    pub fn kd_topk(lambda: f64, temperature: f64, k: usize) -> Self {
        DistillConfig {
            method: Method::KdTopk,
            k,
            ..Self::kd(lambda, temperature)
        }
    }

    pub fn with_scale(mut self, scale: SoftScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("epsilon", self.epsilon)?;
        unit("alpha_mix", self.alpha_mix)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.method.needs_teacher_weights() {
            if !(self.alpha_sim > 0.0 && self.alpha_sim <= 1.0) {
                return Err(Error::Config(format!("alpha_sim = {} outside (0, 1]", self.alpha_sim)));
            }
            if !(self.beta_sim > 0.0 && self.beta_sim.is_finite()) {
                return Err(Error::Config(format!("beta_sim must be positive, got {}", self.beta_sim)));
            }
        }
        if self.method == Method::KdTopk && self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.method == Method::KdRel {
            let [b1, b2, b3] = self.beta_rel;
            if !(b1 > b2 && b2 > b3 && b3 > 0.0) {
                return Err(Error::Config(format!(
                    "kd-rel masses must satisfy b1 > b2 > b3 > 0, got {:?}",
                    self.beta_rel
                )));
            }
        }
        Ok(())
    }
}

/// A teacher's per-example output in one of the cached representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TeacherSignal {
    Full(ProbDist),
    /// Probability on the ground-truth class only.
    Pt(f64),
    /// The largest entries as `(class, prob)`, sorted by descending
    /// probability with ties in ascending class order.
    TopK(Vec<(u32, f64)>),
}

impl TeacherSignal {
    /// Checks the representation's probability constraints against `k` classes.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            TeacherSignal::Full(p) if p.len() != k => {
                Err(Error::invalid(format!("teacher has {} classes, expected {k}", p.len())))
            }
            TeacherSignal::Full(_) => Ok(()),
            TeacherSignal::Pt(v) if !(0.0..=1.0).contains(v) => {
                Err(Error::invalid(format!("teacher confidence {v} outside [0, 1]")))
            }
            TeacherSignal::Pt(_) => Ok(()),
            TeacherSignal::TopK(pairs) => {
                if pairs.is_empty() || pairs.len() > k {
                    return Err(Error::invalid(format!("top-k list of {} entries for K = {k}", pairs.len())));
                }
                let mut seen = vec![false; k];
                let mut sum = 0.0;
                for (i, &(c, v)) in pairs.iter().enumerate() {
                    let c = c as usize;
                    if c >= k || seen[c] {
                        return Err(Error::invalid(format!("bad or repeated class {c} in top-k list")));
                    }
                    seen[c] = true;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::invalid(format!("top-k probability {v} outside [0, 1]")));
                    }
                    if i > 0 && v > pairs[i - 1].1 {
                        return Err(Error::invalid("top-k probabilities are not sorted descending"));
                    }
                    sum += v;
                }
                if sum > 1.0 + 1e-9 {
                    return Err(Error::invalid(format!("top-k mass {sum} exceeds 1")));
                }
                Ok(())
            }
        }
    }
}

/// Label-smoothed target: `(1 − ε)·onehot(t) + ε/K`.
pub fn ls_target(t: usize, k: usize, epsilon: f64) -> Result<ProbDist> {
    check_class(t, k)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon = {epsilon} outside [0, 1]")));
    }
    let off = epsilon / k as f64;
    let mut v = vec![off; k];
    v[t] = 1.0 - epsilon + off;
    ProbDist::new(v)
}

pub(crate) fn check_class(t: usize, k: usize) -> Result<()> {
    if k == 0 || t >= k {
        return Err(Error::invalid(format!("class {t} out of range for K = {k}")));
    }
    Ok(())
}

/// Hard cross-entropy loss and gradient `q − y`, written into `grad`.
pub fn ce_loss_grad_into(t: usize, z: &[f64], grad: &mut [f64]) -> f64 {
    softmax_into(z, 1.0, grad);
    let loss = neg_log_floored(grad[t]);
    grad[t] -= 1.0;
    loss
}

/// Cross-entropy against an arbitrary target distribution; gradient
/// `q − target`.
pub fn target_loss_grad_into(target: &[f64], z: &[f64], grad: &mut [f64]) -> f64 {
    softmax_into(z, 1.0, grad);
    let loss = cross_entropy_slices(target, grad);
    for (g, &y) in grad.iter_mut().zip(target) {
        *g -= y;
    }
    loss
}

/// `(1 − λ)·H(y, q) + λ·s·H(p̃, q̃)` where `p̃` is `soft` re-tempered at `T`
/// and `s` comes from `scale`.
pub fn soft_loss_grad_into(
    t: usize,
    z: &[f64],
    soft: &ProbDist,
    lambda: f64,
    temperature: f64,
    scale: SoftScale,
    grad: &mut [f64],
) -> f64 {
    let tempered = soft.temper(temperature);
    tempered_loss_grad_into(t, z, tempered.as_slice(), lambda, temperature, scale, grad)
}

/// As [`soft_loss_grad_into`] with the target already tempered.
pub fn tempered_loss_grad_into(
    t: usize,
    z: &[f64],
    soft_tempered: &[f64],
    lambda: f64,
    temperature: f64,
    scale: SoftScale,
    grad: &mut [f64],
) -> f64 {
    let mut q_t = vec![0.0; z.len()];
    softmax_into(z, temperature, &mut q_t);
    let hard = ce_loss_grad_into(t, z, grad);
    let soft_loss = cross_entropy_slices(soft_tempered, &q_t);
    let g = lambda * scale.grad_factor(temperature);
    for ((gi, &qt), &pt) in grad.iter_mut().zip(&q_t).zip(soft_tempered) {
        *gi = (1.0 - lambda) * *gi + g * (qt - pt);
    }
    (1.0 - lambda) * hard + lambda * scale.loss_factor(temperature) * soft_loss
}

fn check_logits(t: usize, z: &LogitVec, k: usize) -> Result<()> {
    check_class(t, z.len())?;
    if k != z.len() {
        return Err(Error::invalid(format!(
            "teacher has {k} classes but logits have {}",
            z.len()
        )));
    }
    Ok(())
}

/// Vanilla distillation against a full teacher distribution.
pub fn kd_loss_grad(t: usize, z: &LogitVec, teacher: &TeacherSignal, cfg: &DistillConfig) -> Result<(f64, LogitVec)> {
    let TeacherSignal::Full(p) = teacher else {
        return Err(Error::invalid("distillation needs the full teacher distribution"));
    };
    partial_kd_loss_grad(t, z, p, cfg)
}

/// Distillation against any target `rho` in place of the teacher output.
pub fn partial_kd_loss_grad(t: usize, z: &LogitVec, rho: &ProbDist, cfg: &DistillConfig) -> Result<(f64, LogitVec)> {
    check_logits(t, z, rho.len())?;
    cfg.validate()?;
    let mut grad = vec![0.0; z.len()];
    let loss = soft_loss_grad_into(t, z.as_slice(), rho, cfg.lambda, cfg.temperature, cfg.scale, &mut grad);
    Ok((loss, LogitVec::new(grad)?))
}

/// Label-smoothing loss and gradient.
pub fn ls_loss_grad(t: usize, z: &LogitVec, epsilon: f64) -> Result<(f64, LogitVec)> {
    let target = ls_target(t, z.len(), epsilon)?;
    let mut grad = vec![0.0; z.len()];
    let loss = target_loss_grad_into(target.as_slice(), z.as_slice(), &mut grad);
    Ok((loss, LogitVec::new(grad)?))
}

pub fn ce_loss_grad(t: usize, z: &LogitVec) -> Result<(f64, LogitVec)> {
    check_class(t, z.len())?;
    let mut grad = vec![0.0; z.len()];
    let loss = ce_loss_grad_into(t, z.as_slice(), &mut grad);
    Ok((loss, LogitVec::new(grad)?))
}

/// Distilling from a uniform teacher at `T = 1` gives the same logit
/// gradient as label smoothing with `ε = λ`.
pub fn kd_equals_ls_check(t: usize, z: &LogitVec, k: usize, lambda: f64) -> Result<bool> {
    let cfg = DistillConfig::kd(lambda, 1.0);
    let (_, kd) = partial_kd_loss_grad(t, z, &ProbDist::uniform(k), &cfg)?;
    let (_, ls) = ls_loss_grad(t, z, lambda)?;
    Ok(kd
        .as_slice()
        .iter()
        .zip(ls.as_slice())
        .all(|(a, b)| (a - b).abs() <= 1e-12))
}

/// Static per-run inputs for building distillation targets.
#[derive(Debug, Clone, Default)]
pub struct TargetContext {
    pub k: usize,
    /// Similarity targets from the teacher's logit layer.
    pub sim: Option<SimTable>,
    /// Class → super-class map, for `kd-rel`.
    pub super_of: Option<Vec<usize>>,
}

impl TargetContext {
    pub fn new(k: usize) -> Self {
        TargetContext {
            k,
            ..Default::default()
        }
    }
}

/// The soft target the method distills from for an example of class `t`.
/// `None` for CE and LS, which have no soft term.
pub fn soft_target(
    cfg: &DistillConfig,
    t: usize,
    signal: Option<&TeacherSignal>,
    ctx: &TargetContext,
) -> Result<Option<ProbDist>> {
    let k = ctx.k;
    check_class(t, k)?;
    let missing = || Error::Config(format!("{} needs a teacher signal", cfg.method));
    let confidence = |signal: Option<&TeacherSignal>| -> Result<f64> {
        match signal.ok_or_else(missing)? {
            TeacherSignal::Pt(v) => Ok(*v),
            TeacherSignal::Full(p) => Ok(p[t]),
            TeacherSignal::TopK(_) => Err(Error::Config("top-k cache cannot supply a confidence".into())),
        }
    };
    let sim = || {
        ctx.sim
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs teacher logit weights", cfg.method)))
            .and_then(|s| s.row(t))
    };
    let rho = match cfg.method {
        Method::Ce | Method::Ls => return Ok(None),
        Method::Kd => match signal.ok_or_else(missing)? {
            TeacherSignal::Full(p) => p.clone(),
            TeacherSignal::TopK(pairs) if pairs.len() == k => rho_topk_from_pairs(pairs, k)?,
            _ => return Err(Error::Config("kd needs the full teacher distribution".into())),
        },
        Method::KdPt => rho_pt(t, confidence(signal)?, k)?,
        Method::KdSim => sim()?,
        Method::KdRel => {
            let super_of = ctx
                .super_of
                .as_ref()
                .ok_or_else(|| Error::Config("kd-rel needs the class hierarchy".into()))?;
            let sibs = crate::synthgen::siblings(t, super_of);
            let [b1, b2, b3] = cfg.beta_rel;
            rho_rel(t, &sibs, b1, b2, b3, k)?
        }
        Method::KdPtSim => rho_pt_sim(&rho_pt(t, confidence(signal)?, k)?, &sim()?, cfg.alpha_mix)?,
        Method::KdTopk => match signal.ok_or_else(missing)? {
            TeacherSignal::Full(p) => rho_topk(p, cfg.k)?,
            TeacherSignal::TopK(pairs) => rho_topk_from_pairs(pairs, k)?,
            TeacherSignal::Pt(_) => return Err(Error::Config("kd-topk needs a full or top-k cache".into())),
        },
    };
    Ok(Some(rho))
}

/// Loss and logit gradient for any method; `grad.len() == z.len() == ctx.k`.
pub fn loss_grad_into(
    cfg: &DistillConfig,
    t: usize,
    z: &[f64],
    signal: Option<&TeacherSignal>,
    ctx: &TargetContext,
    grad: &mut [f64],
) -> Result<f64> {
    if z.len() != ctx.k || grad.len() != ctx.k {
        return Err(Error::invalid(format!(
            "logit width {} does not match K = {}",
            z.len(),
            ctx.k
        )));
    }
    match cfg.method {
        Method::Ce => {
            check_class(t, ctx.k)?;
            Ok(ce_loss_grad_into(t, z, grad))
        }
        Method::Ls => {
            let target = ls_target(t, ctx.k, cfg.epsilon)?;
            Ok(target_loss_grad_into(target.as_slice(), z, grad))
        }
        _ => {
            let rho = soft_target(cfg, t, signal, ctx)?.expect("soft methods build a target");
            Ok(soft_loss_grad_into(t, z, &rho, cfg.lambda, cfg.temperature, cfg.scale, grad))
        }
    }
}
