//! Two-hidden-layer tanh network with optional batch normalization, a
//! residual connection between equal-width layers, and an optional cosine
//! (l2-normalized) logit layer with a learnable scale.
//!
//! ```text
//! a1 = x W1ᵀ + b1 → BN → tanh (+ x when d_in == hidden) = h1
//! a2 = h1 W2ᵀ + b2 → BN → tanh (+ h1)                 = h
//! z  = exp(log_scale) · ĥ Ŵᵀ      (normalize_logits)
//! z  = h Wᵀ + c                    (otherwise)
//! ```
//!
//! Forward passes are pure; running batch-norm statistics only change
//! through [`MlpParams::update_running_stats`].

mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{LogitVec, SeededRng};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const INITIAL_LOGIT_SCALE: f64 = 10.0;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub k: usize,
    pub use_batchnorm: bool,
    pub use_residual: bool,
    pub normalize_logits: bool,
}

impl MlpConfig {
    /// Batch norm, residual and cosine logits all on.
    pub fn standard(d_in: usize, hidden: usize, k: usize) -> Self {
        MlpConfig {
            d_in,
            hidden,
            k,
            use_batchnorm: true,
            use_residual: true,
            normalize_logits: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.k == 0 {
            return Err(Error::invalid(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    fn input_residual(&self) -> bool {
        self.use_residual && self.d_in == self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out×in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub layer1: Dense,
    pub bn1: BatchNorm,
    pub layer2: Dense,
    pub bn2: BatchNorm,
    /// K×hidden logit layer.
    pub out: Dense,
    /// One-element array so it can share the optimizer plumbing.
    pub log_scale: Array1<f64>,
}

fn glorot(out: usize, inp: usize, rng: &mut SeededRng) -> Array2<f64> {
    let limit = (6.0 / (inp + out) as f64).sqrt();
    Array2::from_shape_fn((out, inp), |_| rng.random_range(-limit..limit))
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn init(config: MlpConfig, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        let mut rng = rng.derive("mlp.init", 0);
        let (d, h, k) = (config.d_in, config.hidden, config.k);
        Ok(MlpParams {
            config,
            layer1: Dense {
                w: glorot(h, d, &mut rng),
                b: Array1::zeros(h),
            },
            bn1: BatchNorm::new(h),
            layer2: Dense {
                w: glorot(h, h, &mut rng),
                b: Array1::zeros(h),
            },
            bn2: BatchNorm::new(h),
            out: Dense {
                w: glorot(k, h, &mut rng),
                b: Array1::zeros(k),
            },
            log_scale: Array1::from_elem(1, INITIAL_LOGIT_SCALE.ln()),
        })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let (d, h, k) = (config.d_in, config.hidden, config.k);
        Ok(MlpParams {
            config,
            layer1: Dense {
                w: Array2::zeros((h, d)),
                b: Array1::zeros(h),
            },
            bn1: BatchNorm::new(h),
            layer2: Dense {
                w: Array2::zeros((h, h)),
                b: Array1::zeros(h),
            },
            bn2: BatchNorm::new(h),
            out: Dense {
                w: Array2::zeros((k, h)),
                b: Array1::zeros(k),
            },
            log_scale: Array1::from_elem(1, INITIAL_LOGIT_SCALE.ln()),
        })
    }

    /// Final logit-layer weights (K×hidden).
    pub fn logit_weights(&self) -> ArrayView2<'_, f64> {
        self.out.w.view()
    }

    pub fn logit_scale(&self) -> f64 {
        self.log_scale[0].exp()
    }

    /// Trainable tensors in a fixed order shared with [`MlpGrads::slices`].
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.layer1.w.as_slice_mut().expect("standard layout"),
            self.layer1.b.as_slice_mut().expect("standard layout"),
            self.bn1.gamma.as_slice_mut().expect("standard layout"),
            self.bn1.beta.as_slice_mut().expect("standard layout"),
            self.layer2.w.as_slice_mut().expect("standard layout"),
            self.layer2.b.as_slice_mut().expect("standard layout"),
            self.bn2.gamma.as_slice_mut().expect("standard layout"),
            self.bn2.beta.as_slice_mut().expect("standard layout"),
            self.out.w.as_slice_mut().expect("standard layout"),
            self.out.b.as_slice_mut().expect("standard layout"),
            self.log_scale.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn trainable(&self) -> [&[f64]; 11] {
        [
            self.layer1.w.as_slice().expect("standard layout"),
            self.layer1.b.as_slice().expect("standard layout"),
            self.bn1.gamma.as_slice().expect("standard layout"),
            self.bn1.beta.as_slice().expect("standard layout"),
            self.layer2.w.as_slice().expect("standard layout"),
            self.layer2.b.as_slice().expect("standard layout"),
            self.bn2.gamma.as_slice().expect("standard layout"),
            self.bn2.beta.as_slice().expect("standard layout"),
            self.out.w.as_slice().expect("standard layout"),
            self.out.b.as_slice().expect("standard layout"),
            self.log_scale.as_slice().expect("standard layout"),
        ]
    }

    /// l2 norm over every trainable entry.
    pub fn norm(&self) -> f64 {
        self.trainable()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|s| s.iter().all(|v| v.is_finite()))
            && [&self.bn1, &self.bn2].iter().all(|bn| {
                bn.running_mean.iter().chain(&bn.running_var).all(|v| v.is_finite())
            })
    }

    /// Folds the batch statistics of a train-mode trace into the running
    /// estimates (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        if !self.config.use_batchnorm {
            return;
        }
        let n = trace.batch_size() as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (bn, cache) in [(&mut self.bn1, &trace.bn1), (&mut self.bn2, &trace.bn2)] {
            let cache = cache.as_ref().expect("batchnorm cache");
            if !cache.batch_stats {
                continue;
            }
            Zip::from(&mut bn.running_mean)
                .and(&cache.mean)
                .for_each(|r, &m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
            Zip::from(&mut bn.running_var)
                .and(&cache.var)
                .for_each(|r, &v| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * correction);
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    mean: Array1<f64>,
    var: Array1<f64>,
    inv_std: Array1<f64>,
    x_hat: Array2<f64>,
    /// Normalized with the batch's own statistics (train mode).
    batch_stats: bool,
}

#[derive(Debug, Clone)]
struct CosineCache {
    h_norm: Array1<f64>,
    h_hat: Array2<f64>,
    w_norm: Array1<f64>,
    w_hat: Array2<f64>,
    cos: Array2<f64>,
    scale: f64,
}

/// Everything backward needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    config: MlpConfig,
    x: Array2<f64>,
    bn1: Option<BnCache>,
    t1: Array2<f64>,
    h1: Array2<f64>,
    bn2: Option<BnCache>,
    t2: Array2<f64>,
    /// Penultimate activation, batch×hidden.
    pub h: Array2<f64>,
    cosine: Option<CosineCache>,
    /// batch×K logits.
    pub z: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.z.nrows()
    }

    pub fn logits(&self, i: usize) -> LogitVec {
        LogitVec::new(self.z.row(i).to_vec()).expect("finite logits")
    }
}

/// `tanh` via one `exp`; several times faster than the libm routine and
/// within a few ulps in absolute terms.
#[inline]
fn tanh_fast(x: f64) -> f64 {
    let e = (2.0 * x).exp();
    1.0 - 2.0 / (e + 1.0)
}

fn rows_mut(m: &mut Array2<f64>) -> std::slice::ChunksExactMut<'_, f64> {
    let w = m.ncols();
    m.as_slice_mut().expect("standard layout").chunks_exact_mut(w)
}

fn rows(m: &Array2<f64>) -> std::slice::ChunksExact<'_, f64> {
    let w = m.ncols();
    m.as_slice().expect("standard layout").chunks_exact(w)
}

fn slice(v: &Array1<f64>) -> &[f64] {
    v.as_slice().expect("standard layout")
}

fn affine(x: ArrayView2<'_, f64>, layer: &Dense) -> Array2<f64> {
    let mut a = x.dot(&layer.w.t());
    let b = slice(&layer.b);
    for row in rows_mut(&mut a) {
        for (v, &bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
    a
}

/// Normalizes `a` in place into x̂ and returns the cache.
fn batchnorm_normalize(mut a: Array2<f64>, bn: &BatchNorm, mode: Mode) -> BnCache {
    let width = a.ncols();
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            let n = a.nrows() as f64;
            let mut mean = vec![0.0; width];
            for row in rows(&a) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; width];
            for row in rows(&a) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let c = v - m;
                    *s += c * c;
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            (Array1::from(mean), Array1::from(var), true)
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), false),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    {
        let (m, s) = (slice(&mean), slice(&inv_std));
        for row in rows_mut(&mut a) {
            for ((v, &mi), &si) in row.iter_mut().zip(m).zip(s) {
                *v = (*v - mi) * si;
            }
        }
    }
    BnCache {
        mean,
        var,
        inv_std,
        x_hat: a,
        batch_stats,
    }
}

/// affine → (batch norm) → tanh. Returns the tanh output and the BN cache.
fn hidden_forward(
    input: ArrayView2<'_, f64>,
    dense: &Dense,
    bn: Option<&BatchNorm>,
    mode: Mode,
) -> (Array2<f64>, Option<BnCache>) {
    let a = affine(input, dense);
    match bn {
        Some(bn) => {
            let cache = batchnorm_normalize(a, bn, mode);
            let mut t = Array2::<f64>::zeros(cache.x_hat.dim());
            let (g, b) = (slice(&bn.gamma), slice(&bn.beta));
            for (out, xh) in rows_mut(&mut t).zip(rows(&cache.x_hat)) {
                for (((o, &x), &gi), &bi) in out.iter_mut().zip(xh).zip(g).zip(b) {
                    *o = tanh_fast(gi * x + bi);
                }
            }
            (t, Some(cache))
        }
        None => {
            let mut t = a;
            t.mapv_inplace(tanh_fast);
            (t, None)
        }
    }
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    rows(m)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
        .collect()
}

fn scale_rows(m: &Array2<f64>, inv_by: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (row, &n) in rows_mut(&mut out).zip(inv_by) {
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn cosine_head(h: &Array2<f64>, w: &Array2<f64>, scale: f64) -> CosineCache {
    let h_norm = row_norms(h);
    let h_hat = scale_rows(h, &h_norm);
    let w_norm = row_norms(w);
    let w_hat = scale_rows(w, &w_norm);
    let cos = h_hat.dot(&w_hat.t());
    CosineCache {
        h_norm,
        h_hat,
        w_norm,
        w_hat,
        cos,
        scale,
    }
}

/// Batched forward pass over the rows of `x`.
pub fn forward(params: &MlpParams, x: ArrayView2<'_, f64>, mode: Mode) -> Result<ForwardTrace> {
    let cfg = params.config;
    if x.ncols() != cfg.d_in {
        return Err(Error::invalid(format!(
            "input width {} does not match d_in = {}",
            x.ncols(),
            cfg.d_in
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let x = x.as_standard_layout().into_owned();
    let bn = |b| cfg.use_batchnorm.then_some(b);

    let (t1, bn1) = hidden_forward(x.view(), &params.layer1, bn(&params.bn1), mode);
    let h1 = if cfg.input_residual() { &t1 + &x } else { t1.clone() };
    let (t2, bn2) = hidden_forward(h1.view(), &params.layer2, bn(&params.bn2), mode);
    let h = if cfg.use_residual { &t2 + &h1 } else { t2.clone() };

    let (z, cosine) = if cfg.normalize_logits {
        let cache = cosine_head(&h, &params.out.w, params.logit_scale());
        (&cache.cos * cache.scale, Some(cache))
    } else {
        (affine(h.view(), &params.out), None)
    };

    Ok(ForwardTrace {
        mode,
        config: cfg,
        x,
        bn1,
        t1,
        h1,
        bn2,
        t2,
        h,
        cosine,
        z,
    })
}

/// Eval-mode logits for a single feature vector.
pub fn logits(params: &MlpParams, x: &[f64]) -> Result<LogitVec> {
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
    let trace = forward(params, view, Mode::Eval)?;
    LogitVec::new(trace.z.row(0).to_vec())
}

/// Gradients with the same shapes as the trainable parts of [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma1: Array1<f64>,
    pub beta1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gamma2: Array1<f64>,
    pub beta2: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub log_scale: Array1<f64>,
}

impl MlpGrads {
    pub fn slices(&self) -> [&[f64]; 11] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.gamma1.as_slice().expect("standard layout"),
            self.beta1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.gamma2.as_slice().expect("standard layout"),
            self.beta2.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
            self.log_scale.as_slice().expect("standard layout"),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn column_sums(m: &Array2<f64>) -> Array1<f64> {
    let mut out = vec![0.0; m.ncols()];
    for row in rows(m) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Array1::from(out)
}

/// Backprop through tanh and (optionally) batch norm: takes dL/d(tanh output)
/// and returns (dL/d(affine output), d gamma, d beta).
fn hidden_backward(
    mut grad: Array2<f64>,
    t: &Array2<f64>,
    bn: Option<(&BatchNorm, &BnCache)>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    for (g_row, t_row) in rows_mut(&mut grad).zip(rows(t)) {
        for (g, &tv) in g_row.iter_mut().zip(t_row) {
            *g *= 1.0 - tv * tv;
        }
    }
    let width = grad.ncols();
    let Some((bn, c)) = bn else {
        return (grad, Array1::zeros(width), Array1::zeros(width));
    };
    let mut d_gamma = vec![0.0; width];
    let mut d_beta = vec![0.0; width];
    for (g_row, x_row) in rows(&grad).zip(rows(&c.x_hat)) {
        for (((dg, db), &g), &x) in d_gamma.iter_mut().zip(d_beta.iter_mut()).zip(g_row).zip(x_row) {
            *dg += g * x;
            *db += g;
        }
    }
    let gamma = slice(&bn.gamma);
    let inv_std = slice(&c.inv_std);
    if !c.batch_stats {
        // running statistics are constants: a per-feature affine map
        for g_row in rows_mut(&mut grad) {
            for ((g, &gm), &s) in g_row.iter_mut().zip(gamma).zip(inv_std) {
                *g *= gm * s;
            }
        }
        return (grad, Array1::from(d_gamma), Array1::from(d_beta));
    }
    // dx̂ = g·γ; da = inv_std/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with
    // Σdx̂ = γ·d_beta and Σ(dx̂·x̂) = γ·d_gamma
    let n = grad.nrows() as f64;
    for (g_row, x_row) in rows_mut(&mut grad).zip(rows(&c.x_hat)) {
        for (j, (g, &x)) in g_row.iter_mut().zip(x_row).enumerate() {
            let gm = gamma[j];
            *g = inv_std[j] / n * (n * *g * gm - gm * d_beta[j] - x * gm * d_gamma[j]);
        }
    }
    (grad, Array1::from(d_gamma), Array1::from(d_beta))
}

/// Chains `dl_dz` (batch×K) back to every parameter.
pub fn backward(trace: &ForwardTrace, params: &MlpParams, dl_dz: ArrayView2<'_, f64>) -> Result<MlpGrads> {
    let cfg = params.config;
    if trace.config != cfg {
        return Err(Error::invalid("trace was produced by a different network config"));
    }
    if dl_dz.dim() != trace.z.dim() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match logits {:?}",
            dl_dz.dim(),
            trace.z.dim()
        )));
    }

    let (w_out, b_out, log_scale, dh) = match &trace.cosine {
        Some(c) => {
            let d_scale = Zip::from(dl_dz).and(&c.cos).fold(0.0, |acc, &g, &cs| acc + g * cs);
            let d_cos = &dl_dz * c.scale;
            let mut dh = d_cos.dot(&c.w_hat);
            let mut dw = d_cos.t().dot(&c.h_hat);
            // d(v/|v|) = (I − v̂v̂ᵀ)/|v|
            project_out(&mut dh, &c.h_hat, &c.h_norm);
            project_out(&mut dw, &c.w_hat, &c.w_norm);
            (dw, Array1::zeros(cfg.k), Array1::from_elem(1, d_scale * c.scale), dh)
        }
        None => {
            let dw = dl_dz.t().dot(&trace.h);
            let db = dl_dz.sum_axis(Axis(0));
            let dh = dl_dz.dot(&params.out.w);
            (dw, db, Array1::zeros(1), dh)
        }
    };

    fn bn_pair<'a>(on: bool, bn: &'a BatchNorm, cache: &'a Option<BnCache>) -> Option<(&'a BatchNorm, &'a BnCache)> {
        on.then(|| (bn, cache.as_ref().expect("batchnorm cache")))
    }

    let (da2, gamma2, beta2) = hidden_backward(dh.clone(), &trace.t2, bn_pair(cfg.use_batchnorm, &params.bn2, &trace.bn2));
    let w2 = da2.t().dot(&trace.h1);
    let b2 = column_sums(&da2);
    let mut dh1 = da2.dot(&params.layer2.w);
    if cfg.use_residual {
        dh1 += &dh;
    }

    let (da1, gamma1, beta1) = hidden_backward(dh1, &trace.t1, bn_pair(cfg.use_batchnorm, &params.bn1, &trace.bn1));
    let w1 = da1.t().dot(&trace.x);
    let b1 = column_sums(&da1);

    Ok(MlpGrads {
        w1,
        b1,
        gamma1,
        beta1,
        w2,
        b2,
        gamma2,
        beta2,
        w_out,
        b_out,
        log_scale,
    })
}

/// `g_i ← (g_i − v̂_i (v̂_i·g_i)) / |v_i|` row by row.
fn project_out(g: &mut Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) {
    for ((g_row, u_row), &n) in rows_mut(g).zip(rows(unit)).zip(norms) {
        let dot: f64 = g_row.iter().zip(u_row).map(|(a, b)| a * b).sum();
        for (gv, &uv) in g_row.iter_mut().zip(u_row) {
            *gv = (*gv - uv * dot) / n;
        }
    }
}
