//! The logit-layer subproblem with a fixed penultimate activation: convex in
//! the class weights, so its optimum can be reached to tight tolerance.

use ndarray::{Array2, ArrayView2};

use crate::distill::{soft_loss_grad_into, SoftScale};
use crate::error::{Error, Result};
use crate::mathcore::{softmax_t, LogitVec, ProbDist};

#[derive(Debug, Clone)]
pub struct LogitLayerSolution {
    /// K×d class weights.
    pub w: Array2<f64>,
    /// Student output `softmax(W h)` at the solution.
    pub q: ProbDist,
    /// Frobenius norm of the loss gradient with respect to `W`.
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Minimizes the `T = 1` distillation loss over the weights `W` of
/// `z = W h` by gradient descent from `W = 0`.
///
/// Every update is a multiple of `h`, so the iterate stays in its span and
/// the step `1/‖h‖²` is plain gradient descent on `z` with unit step.
pub fn solve_logit_layer(
    h: &[f64],
    p: &ProbDist,
    t: usize,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LogitLayerSolution> {
    let k = p.len();
    if t >= k {
        return Err(Error::invalid(format!("class {t} out of range for K = {k}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda = {lambda} outside [0, 1]")));
    }
    let h_sq: f64 = h.iter().map(|v| v * v).sum();
    if !(h_sq > 0.0) {
        return Err(Error::invalid("penultimate vector is zero"));
    }
    let h_norm = h_sq.sqrt();
    let mut w = Array2::<f64>::zeros((k, h.len()));
    let mut z = vec![0.0; k];
    let mut g = vec![0.0; k];
    let mut iterations = 0;
    let grad_norm = loop {
        for (zi, row) in z.iter_mut().zip(w.rows()) {
            *zi = row.iter().zip(h).map(|(a, b)| a * b).sum();
        }
        soft_loss_grad_into(t, &z, p, lambda, 1.0, SoftScale::TSquared, &mut g);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt() * h_norm;
        if norm < tol || iterations == max_iter {
            break norm;
        }
        for (gi, mut row) in g.iter().zip(w.rows_mut()) {
            for (wv, &hv) in row.iter_mut().zip(h) {
                *wv -= gi * hv / h_sq;
            }
        }
        iterations += 1;
    };
    if grad_norm >= tol {
        return Err(Error::invalid(format!(
            "no convergence after {max_iter} iterations (gradient norm {grad_norm:e})"
        )));
    }
    let q = softmax_t(&LogitVec::new(z)?, 1.0)?;
    Ok(LogitLayerSolution {
        w,
        q,
        grad_norm,
        iterations,
    })
}

/// `‖h − w_k‖²` for every row of `w`.
pub fn squared_distances(h: &[f64], w: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if w.ncols() != h.len() {
        return Err(Error::invalid(format!(
            "weights have {} columns, h has {}",
            w.ncols(),
            h.len()
        )));
    }
    Ok(w.rows()
        .into_iter()
        .map(|row| row.iter().zip(h).map(|(a, b)| (b - a).powi(2)).sum())
        .collect())
}

/// Whether squared distances over incorrect classes order inversely to the
/// teacher probabilities: higher `p_i` means strictly closer `w_i`, and
/// equal probabilities mean distances within 1e-6.
pub fn prop2_geometry_check(h: &[f64], w_star: ArrayView2<'_, f64>, p: &ProbDist, t: usize) -> Result<bool> {
    const DIST_TIE: f64 = 1e-6;
    const PROB_TIE: f64 = 1e-12;
    if w_star.nrows() != p.len() || t >= p.len() {
        return Err(Error::invalid("weights, teacher and class index disagree"));
    }
    let d = squared_distances(h, w_star)?;
    let others: Vec<usize> = (0..p.len()).filter(|&i| i != t).collect();
    for &i in &others {
        for &j in &others {
            if i == j {
                continue;
            }
            let ok = if (p[i] - p[j]).abs() <= PROB_TIE {
                (d[i] - d[j]).abs() <= DIST_TIE
            } else if p[i] > p[j] {
                d[i] < d[j] + DIST_TIE
            } else {
                true
            };
            if !ok {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
