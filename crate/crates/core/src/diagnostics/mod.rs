//! Analysis quantities computed from logged model states: per-class gradient
//! rescaling factors, the gradient-mass identity, the optimal logit-layer
//! geometry, class-correlation heatmaps and confidence histograms.

mod geometry;

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::distill::{ce_loss_grad_into, rho_topk, soft_loss_grad_into, DistillConfig};
use crate::error::{Error, Result};
use crate::mathcore::{cosine_sim_matrix, pearson, pearson_corr_matrix, softmax_into, LogitVec, ProbDist};

pub use geometry::{prop2_geometry_check, solve_logit_layer, squared_distances, LogitLayerSolution};

/// Denominators `|q_i − y_i|` at or below this leave ω_i undefined.
pub const OMEGA_DENOM_EPS: f64 = 1e-9;

/// Everything about one example's student/teacher pair that the closed
/// forms need.
#[derive(Debug, Clone)]
struct Pair {
    t: usize,
    q: Vec<f64>,
    q_soft: Vec<f64>,
    p_soft: Vec<f64>,
    ce: Vec<f64>,
    kd: Vec<f64>,
}

fn pair(t: usize, z: &LogitVec, p: &ProbDist, cfg: &DistillConfig) -> Result<Pair> {
    let k = z.len();
    if p.len() != k || t >= k {
        return Err(Error::invalid(format!(
            "class {t}, {k} logits and {} teacher entries are inconsistent",
            p.len()
        )));
    }
    cfg.validate()?;
    let temp = cfg.temperature;
    let mut q = vec![0.0; k];
    let mut q_soft = vec![0.0; k];
    softmax_into(z.as_slice(), 1.0, &mut q);
    softmax_into(z.as_slice(), temp, &mut q_soft);
    let mut ce = vec![0.0; k];
    ce_loss_grad_into(t, z.as_slice(), &mut ce);
    let mut kd = vec![0.0; k];
    soft_loss_grad_into(t, z.as_slice(), p, cfg.lambda, temp, cfg.scale, &mut kd);
    Ok(Pair {
        t,
        q,
        q_soft,
        p_soft: p.temper(temp).into_vec(),
        ce,
        kd,
    })
}

impl Pair {
    fn omega(&self, cfg: &DistillConfig) -> Vec<Option<f64>> {
        let g = cfg.lambda * cfg.scale.grad_factor(cfg.temperature);
        (0..self.q.len())
            .map(|i| {
                let y = if i == self.t { 1.0 } else { 0.0 };
                let denom = self.q[i] - y;
                (denom.abs() > OMEGA_DENOM_EPS)
                    .then(|| (1.0 - cfg.lambda) + g * (self.q_soft[i] - self.p_soft[i]) / denom)
            })
            .collect()
    }

    fn sign_conditions_hold(&self) -> bool {
        let t = self.t;
        self.p_soft[t] > self.q_soft[t] && (0..self.q.len()).all(|i| i == t || self.q_soft[i] >= self.p_soft[i])
    }

    fn prop1(&self, cfg: &DistillConfig) -> Prop1 {
        let t = self.t;
        let abs_sum = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
        let c_tilde = self.p_soft[t] - self.q_soft[t];
        let g = cfg.lambda * cfg.scale.grad_factor(cfg.temperature);
        let off_target: f64 = self.kd.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, v)| v.abs()).sum();
        Prop1 {
            lhs: abs_sum(&self.kd) / abs_sum(&self.ce),
            rhs: (1.0 - cfg.lambda) + g * c_tilde / (1.0 - self.q[t]),
            mass_gap: (self.kd[t].abs() - off_target).abs(),
            assumption_holds: self.sign_conditions_hold(),
        }
    }
}

/// Per-class ratio of the distillation gradient to the hard-label gradient,
/// from the closed form. `None` where `|q_i − y_i|` is too small.
pub fn omega(t: usize, z: &LogitVec, p: &ProbDist, cfg: &DistillConfig) -> Result<Vec<Option<f64>>> {
    Ok(pair(t, z, p, cfg)?.omega(cfg))
}

/// The same ratio taken directly from the two gradient routines.
pub fn omega_from_gradients(t: usize, z: &LogitVec, p: &ProbDist, cfg: &DistillConfig) -> Result<Vec<Option<f64>>> {
    let pr = pair(t, z, p, cfg)?;
    Ok(pr
        .kd
        .iter()
        .zip(&pr.ce)
        .map(|(&a, &b)| (b.abs() > OMEGA_DENOM_EPS).then(|| a / b))
        .collect())
}

/// Total gradient mass ratio versus its closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop1 {
    /// `Σ|∂ᴷᴰ| / Σ|∂|` from actual gradients.
    pub lhs: f64,
    /// `(1 − λ) + λ·g(T)·c̃_t / (1 − q_t)` with `c̃_t = p̃_t − q̃_t`.
    pub rhs: f64,
    /// `| |∂ᴷᴰ_t| − Σ_{i≠t} |∂ᴷᴰ_i| |`.
    pub mass_gap: f64,
    /// `p̃_t > q̃_t` and `q̃_i ≥ p̃_i` for every other class.
    pub assumption_holds: bool,
}

pub fn prop1_ratio(t: usize, z: &LogitVec, p: &ProbDist, cfg: &DistillConfig) -> Result<Prop1> {
    Ok(pair(t, z, p, cfg)?.prop1(cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub example_id: u64,
    pub t: usize,
    pub p_t: f64,
    pub p_tilde_t: f64,
    pub q_t: f64,
    pub omega_t: Option<f64>,
    pub omega_sum_ratio: f64,
    pub prop1_rhs: f64,
    pub c_tilde_t: f64,
    pub assumption_holds: bool,
}

pub fn diagnostics_record(
    example_id: u64,
    t: usize,
    z: &LogitVec,
    p: &ProbDist,
    cfg: &DistillConfig,
) -> Result<DiagnosticsRecord> {
    let pr = pair(t, z, p, cfg)?;
    let prop1 = pr.prop1(cfg);
    Ok(DiagnosticsRecord {
        example_id,
        t,
        p_t: p[t],
        p_tilde_t: pr.p_soft[t],
        q_t: pr.q[t],
        omega_t: pr.omega(cfg)[t],
        omega_sum_ratio: prop1.lhs,
        prop1_rhs: prop1.rhs,
        c_tilde_t: pr.p_soft[t] - pr.q_soft[t],
        assumption_holds: prop1.assumption_holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PtOmegaCorrelation {
    /// `None` when fewer than two usable records or zero variance.
    pub r: Option<f64>,
    pub used: usize,
    /// Records without a defined, positive `ω_t`.
    pub skipped: usize,
}

/// Pearson correlation between `p̃_t` and `ln ω_t` over records where `ω_t`
/// is defined and positive.
pub fn correlate_pt_omega(records: &[DiagnosticsRecord]) -> PtOmegaCorrelation {
    let (x, y): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.omega_t.filter(|&w| w > 0.0).map(|w| (r.p_tilde_t, w.ln())))
        .unzip();
    PtOmegaCorrelation {
        r: pearson(&x, &y),
        used: x.len(),
        skipped: records.len() - x.len(),
    }
}

#[derive(Debug, Clone)]
pub struct HeatmapBundle {
    /// Pearson correlations between classes' tempered probabilities.
    pub pearson: Array2<f64>,
    /// Cosine similarities between logit-layer rows.
    pub cosine: Array2<f64>,
    /// `class_order[i]` is the original class shown at row/column `i`.
    pub class_order: Vec<usize>,
    /// Classes (original index) whose probability column was constant.
    pub degenerate: Vec<usize>,
}

/// Stable ordering that puts classes of the same group next to each other.
pub fn class_order_by_group(groups: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| groups[i]);
    order
}

fn check_permutation(order: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if order.len() != k || order.iter().any(|&c| c >= k || std::mem::replace(&mut seen[c], true)) {
        return Err(Error::invalid(format!("class order is not a permutation of 0..{k}")));
    }
    Ok(())
}

/// `m'[a][b] = m[order[a]][order[b]]`.
pub fn permute_symmetric(m: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((order.len(), order.len()), |(a, b)| m[[order[a], order[b]]])
}

/// Re-tempers every row of an N×K probability matrix at `temperature`.
pub fn temper_rows(samples: ArrayView2<'_, f64>, temperature: f64) -> Result<Array2<f64>> {
    let mut out = samples.to_owned();
    for mut row in out.rows_mut() {
        let p = ProbDist::new(row.to_vec())?.temper(temperature);
        row.assign(&ndarray::ArrayView1::from(p.as_slice()));
    }
    Ok(out)
}

/// Replaces every row of an N×K probability matrix with its top-`k`
/// truncation (kept entries in place, the rest of the mass spread evenly).
pub fn truncate_rows_topk(samples: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    let mut out = samples.to_owned();
    for mut row in out.rows_mut() {
        let p = rho_topk(&ProbDist::new(row.to_vec())?, k)?;
        row.assign(&ndarray::ArrayView1::from(p.as_slice()));
    }
    Ok(out)
}

pub fn build_heatmaps(
    prob_samples: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    class_order: &[usize],
    temperature: f64,
) -> Result<HeatmapBundle> {
    let k = prob_samples.ncols();
    if w.nrows() != k {
        return Err(Error::invalid(format!(
            "{} logit rows for {k} probability columns",
            w.nrows()
        )));
    }
    check_permutation(class_order, k)?;
    let corr = pearson_corr_matrix(temper_rows(prob_samples, temperature)?.view())?;
    let cosine = cosine_sim_matrix(w)?;
    Ok(HeatmapBundle {
        pearson: permute_symmetric(&corr.matrix, class_order),
        cosine: permute_symmetric(&cosine, class_order),
        class_order: class_order.to_vec(),
        degenerate: corr.degenerate,
    })
}

/// Mean off-diagonal entries inside and outside the diagonal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockContrast {
    pub intra: f64,
    pub inter: f64,
    /// Mean absolute value of the entries outside the blocks.
    pub inter_abs: f64,
}

impl BlockContrast {
    pub fn gap(&self) -> f64 {
        self.intra - self.inter
    }
}

/// `groups[i]` is the group of row/column `i` in the matrix's own order.
pub fn block_contrast(m: &Array2<f64>, groups: &[usize]) -> Result<BlockContrast> {
    let k = m.nrows();
    if m.ncols() != k || groups.len() != k {
        return Err(Error::invalid("matrix and group labels disagree in size"));
    }
    let (mut intra, mut n_intra, mut inter, mut inter_abs, mut n_inter) = (0.0, 0usize, 0.0, 0.0, 0usize);
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            if groups[i] == groups[j] {
                intra += m[[i, j]];
                n_intra += 1;
            } else {
                inter += m[[i, j]];
                inter_abs += m[[i, j]].abs();
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::invalid("need at least two groups, one with two members"));
    }
    Ok(BlockContrast {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
        inter_abs: inter_abs / n_inter as f64,
    })
}

/// Equal-width histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub mean: f64,
    pub variance: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let bins = self.counts.len() as f64;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
        for (i, c) in self.counts.iter().enumerate() {
            out.write_record([
                (i as f64 / bins).to_string(),
                ((i + 1) as f64 / bins).to_string(),
                c.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| csv_err(e.into()))
    }
}

/// Histogram of values in `[0, 1]`; a value of exactly 1 lands in the top bin.
pub fn pt_histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("value {v} outside [0, 1]")));
        }
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Histogram { counts, mean, variance })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        reason: e.to_string(),
    }
}

/// Writes records as comma-separated text with a header row; undefined
/// `omega_t` is an empty field.
pub fn write_records_csv<W: Write>(w: W, records: &[DiagnosticsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush().map_err(|e| csv_err(e.into()))
}
