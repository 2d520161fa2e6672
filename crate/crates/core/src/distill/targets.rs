//! Hand-crafted teacher distributions that each keep one aspect of a real
//! teacher's output.

use ndarray::{Array2, ArrayView2};

use super::check_class;
use crate::error::{Error, Result};
use crate::mathcore::{cosine_sim_matrix, softmax_into, ProbDist};

const MASS_TOL: f64 = 1e-9;

/// Confidence `p_t` on the ground truth, the rest spread uniformly.
pub fn rho_pt(t: usize, p_t: f64, k: usize) -> Result<ProbDist> {
    check_class(t, k)?;
    if k < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !(0.0..=1.0).contains(&p_t) {
        return Err(Error::invalid(format!("confidence {p_t} outside [0, 1]")));
    }
    let mut v = vec![(1.0 - p_t) / (k - 1) as f64; k];
    v[t] = p_t;
    ProbDist::new(v)
}

/// `softmax(max(cos, 0)^α / β)` over one row of class cosines.
pub fn rho_sim_from_cosines(cosines: &[f64], alpha: f64, beta: f64) -> Result<ProbDist> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha = {alpha} outside (0, 1]")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if cosines.is_empty() || cosines.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cosine row must be non-empty and finite"));
    }
    // fractional powers of negative numbers are undefined
    let scores: Vec<f64> = cosines.iter().map(|&c| c.max(0.0).powf(alpha) / beta).collect();
    let mut out = vec![0.0; scores.len()];
    softmax_into(&scores, 1.0, &mut out);
    ProbDist::new(out)
}

/// Similarity target for class `t` from the rows of a logit-layer matrix.
pub fn rho_sim(t: usize, w: ArrayView2<'_, f64>, alpha: f64, beta: f64) -> Result<ProbDist> {
    check_class(t, w.nrows())?;
    let cos = cosine_sim_matrix(w)?;
    rho_sim_from_cosines(cos.row(t).as_slice().expect("standard layout"), alpha, beta)
}

/// Similarity targets for every class, computed once per teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTable {
    cosines: Array2<f64>,
    rows: Vec<ProbDist>,
}

impl SimTable {
    pub fn new(w: ArrayView2<'_, f64>, alpha: f64, beta: f64) -> Result<Self> {
        let cosines = cosine_sim_matrix(w)?;
        let rows = cosines
            .outer_iter()
            .map(|r| rho_sim_from_cosines(r.as_slice().expect("standard layout"), alpha, beta))
            .collect::<Result<_>>()?;
        Ok(SimTable { cosines, rows })
    }

    pub fn cosines(&self) -> &Array2<f64> {
        &self.cosines
    }

    pub fn row(&self, t: usize) -> Result<ProbDist> {
        check_class(t, self.rows.len())?;
        Ok(self.rows[t].clone())
    }
}

/// Three-level target: `b1` on `t`, `b2` on each sibling, `b3` elsewhere.
pub fn rho_rel(t: usize, siblings: &[usize], b1: f64, b2: f64, b3: f64, k: usize) -> Result<ProbDist> {
    check_class(t, k)?;
    let mut is_sib = vec![false; k];
    for &s in siblings {
        if s >= k || s == t || is_sib[s] {
            return Err(Error::invalid(format!("bad sibling {s} for class {t}")));
        }
        is_sib[s] = true;
    }
    let ordered = if siblings.is_empty() {
        b1 > b3 && b3 > 0.0
    } else {
        b1 > b2 && b2 > b3 && b3 > 0.0
    };
    if !ordered {
        return Err(Error::invalid(format!("masses must decrease: {b1}, {b2}, {b3}")));
    }
    let n_sib = siblings.len() as f64;
    let n_rest = (k - 1 - siblings.len()) as f64;
    let total = b1 + n_sib * b2 + n_rest * b3;
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid(format!("masses sum to {total}, not 1")));
    }
    let v = (0..k)
        .map(|i| match i {
            _ if i == t => b1,
            _ if is_sib[i] => b2,
            _ => b3,
        })
        .collect();
    ProbDist::new(v)
}

/// `(1 − α)·pt + α·sim`.
pub fn rho_pt_sim(pt: &ProbDist, sim: &ProbDist, alpha_mix: f64) -> Result<ProbDist> {
    if pt.len() != sim.len() {
        return Err(Error::invalid("targets have different class counts"));
    }
    if !(0.0..=1.0).contains(&alpha_mix) {
        return Err(Error::invalid(format!("alpha_mix = {alpha_mix} outside [0, 1]")));
    }
    // exact at the endpoints
    if alpha_mix == 0.0 {
        return Ok(pt.clone());
    }
    if alpha_mix == 1.0 {
        return Ok(sim.clone());
    }
    let v = pt
        .as_slice()
        .iter()
        .zip(sim.as_slice())
        .map(|(a, b)| (1.0 - alpha_mix) * a + alpha_mix * b)
        .collect();
    ProbDist::new(v)
}

/// The `k` largest entries as `(class, prob)`, descending; ties go to the
/// lower class index.
pub fn top_k_pairs(p: &ProbDist, k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    // stable sort keeps ascending index order among equal values
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    Ok(idx[..k].iter().map(|&i| (i as u32, p[i])).collect())
}

/// Keeps the `k` largest entries of `p` in place and spreads the remaining
/// mass evenly over the other classes.
pub fn rho_topk(p: &ProbDist, k: usize) -> Result<ProbDist> {
    if k == p.len() {
        top_k_pairs(p, k)?;
        return Ok(p.clone());
    }
    rho_topk_from_pairs(&top_k_pairs(p, k)?, p.len())
}

/// Rebuilds the top-k target from stored pairs.
pub fn rho_topk_from_pairs(pairs: &[(u32, f64)], n_classes: usize) -> Result<ProbDist> {
    if pairs.is_empty() || pairs.len() > n_classes {
        return Err(Error::invalid(format!(
            "{} pairs for {n_classes} classes",
            pairs.len()
        )));
    }
    let kept: f64 = pairs.iter().map(|p| p.1).sum();
    let rest = n_classes - pairs.len();
    let fill = if rest == 0 { 0.0 } else { ((1.0 - kept) / rest as f64).max(0.0) };
    let mut v = vec![fill; n_classes];
    let mut seen = vec![false; n_classes];
    for &(c, prob) in pairs {
        let c = c as usize;
        if c >= n_classes || seen[c] {
            return Err(Error::invalid(format!("bad or repeated class {c}")));
        }
        seen[c] = true;
        v[c] = prob;
    }
    ProbDist::new(v)
}
