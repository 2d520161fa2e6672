use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A correlation matrix plus the columns that had zero variance.
#[derive(Debug, Clone)]
pub struct CorrMatrix {
    pub matrix: Array2<f64>,
    /// Columns with zero variance; their off-diagonal entries are 0.
    pub degenerate: Vec<usize>,
}

impl CorrMatrix {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

/// Pearson correlation between two equally long samples, or `None` when
/// either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Column-wise Pearson correlations of an N×K sample matrix (two-pass:
/// means first, then centered cross products).
pub fn pearson_corr_matrix(samples: ArrayView2<'_, f64>) -> Result<CorrMatrix> {
    let (n, k) = samples.dim();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &samples - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered);
    let sd: Vec<f64> = (0..k).map(|i| cov[[i, i]].sqrt()).collect();
    // Relative threshold: a column whose spread is rounding noise counts as constant.
    let scale = mean.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let flat: Vec<bool> = sd
        .iter()
        .map(|&s| s <= 1e-14 * scale * (n as f64).sqrt())
        .collect();

    let mut matrix = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        matrix[[i, i]] = 1.0;
        for j in (i + 1)..k {
            let r = if flat[i] || flat[j] {
                0.0
            } else {
                (cov[[i, j]] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            };
            matrix[[i, j]] = r;
            matrix[[j, i]] = r;
        }
    }
    let degenerate = flat
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i))
        .collect();
    Ok(CorrMatrix { matrix, degenerate })
}

fn row_norm(row: ArrayView1<'_, f64>) -> f64 {
    row.dot(&row).sqrt()
}

/// Pairwise cosine similarity of the rows of `w` (K×d).
pub fn cosine_sim_matrix(w: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let k = w.nrows();
    let mut unit = w.to_owned();
    for (i, mut row) in unit.outer_iter_mut().enumerate() {
        let norm = row_norm(row.view());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid(format!("row {i} has zero or non-finite norm")));
        }
        row /= norm;
    }
    let mut sims = unit.dot(&unit.t());
    for i in 0..k {
        sims[[i, i]] = 1.0;
        for j in (i + 1)..k {
            let s = sims[[i, j]].clamp(-1.0, 1.0);
            sims[[i, j]] = s;
            sims[[j, i]] = s;
        }
    }
    Ok(sims)
}
