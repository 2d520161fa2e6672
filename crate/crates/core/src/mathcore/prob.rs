use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability fed to `ln` inside [`cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

const SUM_TOL: f64 = 1e-9;
const ENTRY_SLACK: f64 = 1e-12;

static LOG_FLOOR_HITS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`cross_entropy`] had to clamp a prediction to [`LOG_FLOOR`]
/// since process start.
pub fn log_floor_hits() -> u64 {
    LOG_FLOOR_HITS.load(Ordering::Relaxed)
}

/// A length-K probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(-ENTRY_SLACK..=1.0 + ENTRY_SLACK).contains(&v) {
                return Err(Error::invalid(format!("entry {i} = {v} outside [0, 1]")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("entries sum to {sum}, not 1")));
        }
        Ok(ProbDist(values))
    }

    pub fn uniform(k: usize) -> Self {
        ProbDist(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(t: usize, k: usize) -> Self {
        let mut v = vec![0.0; k];
        v[t] = 1.0;
        ProbDist(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Re-tempers a distribution without access to its logits:
    /// `softmax(z / T) ∝ softmax(z)^(1/T)`.
    pub fn temper(&self, temperature: f64) -> ProbDist {
        if temperature == 1.0 {
            return self.clone();
        }
        let inv = 1.0 / temperature;
        // Work in log space so tiny entries do not underflow before normalizing.
        let logs: Vec<f64> = self
            .0
            .iter()
            .map(|&p| if p > 0.0 { p.ln() * inv } else { f64::NEG_INFINITY })
            .collect();
        let mut out = vec![0.0; logs.len()];
        softmax_into(&logs, 1.0, &mut out);
        ProbDist(out)
    }
}

impl TryFrom<Vec<f64>> for ProbDist {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbDist::new(v)
    }
}

impl From<ProbDist> for Vec<f64> {
    fn from(p: ProbDist) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbDist {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A length-K vector of finite real scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVec(Vec<f64>);

impl LogitVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("logit vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite")));
        }
        Ok(LogitVec(values))
    }

    pub fn zeros(k: usize) -> Self {
        LogitVec(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for LogitVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    // strict `>` keeps the lowest index on ties
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(z / T)` written into `out`. No validation; `out.len() == z.len()`.
pub fn softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    let inv = 1.0 / temperature;
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * inv));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let e = (v * inv - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Temperature softmax with the max-subtraction stabilization.
pub fn softmax_t(z: &LogitVec, temperature: f64) -> Result<ProbDist> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z.as_slice(), temperature, &mut out);
    Ok(ProbDist(out))
}

/// `-Σ target_i ln(pred_i)`, with predictions floored at [`LOG_FLOOR`]
/// wherever the target puts mass.
pub fn cross_entropy(target: &ProbDist, pred: &ProbDist) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::invalid(format!(
            "length mismatch: target {} vs prediction {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(cross_entropy_slices(target.as_slice(), pred.as_slice()))
}

pub(crate) fn cross_entropy_slices(target: &[f64], pred: &[f64]) -> f64 {
    let mut h = 0.0;
    for (&t, &p) in target.iter().zip(pred) {
        if t > 0.0 {
            h += t * neg_log_floored(p);
        }
    }
    h
}

/// `-ln(max(p, LOG_FLOOR))`, counting floor hits.
pub(crate) fn neg_log_floored(p: f64) -> f64 {
    if p < LOG_FLOOR {
        LOG_FLOOR_HITS.fetch_add(1, Ordering::Relaxed);
        -LOG_FLOOR.ln()
    } else {
        -p.ln()
    }
}

pub fn entropy(p: &ProbDist) -> f64 {
    p.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}
