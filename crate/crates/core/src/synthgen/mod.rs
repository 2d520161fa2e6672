//! Synthetic classification benchmark with controllable intra-super-class
//! similarity (`tau`) and labeling non-linearity (`m`).
//!
//! Classes are laid out super-class by super-class: super-class `s` owns
//! classes `s*g .. (s+1)*g` with `g = k / c`, and the first of them is the
//! anchor. Siblings are therefore adjacent in class order.

mod format;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::SeededRng;

pub use format::{
    load_dataset, read_dataset, read_header, save_dataset, write_dataset, DatasetHeader,
    DSET_HEADER_BYTES, DSET_MAGIC,
};

/// Every knob of the generator. `a` and `b` are drawn from the master seed by
/// [`SyntheticSpec::new`] and stored so that a spec fully determines a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub k: usize,
    pub c: usize,
    pub tau: f64,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub n_train: usize,
    pub n_valid: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Builds a spec with `a_m ~ U[1, 5)` and `b_m ~ U[0, 2π)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        k: usize,
        c: usize,
        tau: f64,
        m: usize,
        n_train: usize,
        n_valid: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = SeededRng::new(seed).derive("synth.sine_constants", 0);
        let a = (0..m).map(|_| rng.random_range(1.0..5.0)).collect();
        let b = (0..m)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let spec = SyntheticSpec {
            d,
            k,
            c,
            tau,
            m,
            a,
            b,
            n_train,
            n_valid,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.c == 0 {
            return Err(Error::invalid("d, k and c must be positive"));
        }
        if self.k % self.c != 0 {
            return Err(Error::invalid(format!(
                "k = {} is not a multiple of c = {}",
                self.k, self.c
            )));
        }
        if self.c > self.d {
            return Err(Error::invalid(format!(
                "cannot fit {} orthonormal anchors in dimension {}",
                self.c, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau = {} outside [0, 1)", self.tau)));
        }
        if self.k > self.c && self.d < 2 {
            return Err(Error::invalid(
                "sibling classes need a direction orthogonal to their anchor (d >= 2)",
            ));
        }
        if self.a.len() != self.m || self.b.len() != self.m {
            return Err(Error::invalid("a and b must both have length m"));
        }
        if self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::invalid("a and b must be finite"));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.k / self.c
    }

    pub fn super_of(&self) -> Vec<usize> {
        super_classes(self.k, self.c)
    }
}

/// Super-class of every class for the adjacent layout.
pub fn super_classes(k: usize, c: usize) -> Vec<usize> {
    let g = k / c;
    (0..k).map(|i| i / g).collect()
}

/// Classes that share `t`'s super-class, excluding `t`.
pub fn siblings(t: usize, super_of: &[usize]) -> Vec<usize> {
    (0..super_of.len())
        .filter(|&i| i != t && super_of[i] == super_of[t])
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClassBasis {
    /// K×d, one unit vector per class.
    pub u: Array2<f64>,
    pub super_of: Vec<usize>,
    /// Anchor class of each super-class.
    pub anchors: Vec<usize>,
}

impl ClassBasis {
    /// Scores `u_k·x̂ + Σ sin(a_m u_k·x̂ + b_m)` for a unit-norm `x_hat`.
    pub fn scores(&self, spec: &SyntheticSpec, x_hat: ArrayView1<'_, f64>) -> Array1<f64> {
        self.u.dot(&x_hat).mapv(|s| {
            s + spec
                .a
                .iter()
                .zip(&spec.b)
                .map(|(&a, &b)| (a * s + b).sin())
                .sum::<f64>()
        })
    }

    pub fn label(&self, spec: &SyntheticSpec, x_hat: ArrayView1<'_, f64>) -> usize {
        crate::mathcore::prob::argmax(self.scores(spec, x_hat).as_slice().expect("contiguous"))
    }
}

fn gaussian_vec(d: usize, rng: &mut SeededRng) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    *v /= n;
    n
}

/// Removes the components of `v` along each (unit) vector in `against`.
/// Run twice ("twice is enough") to keep orthogonality at working precision.
fn orthogonalize(v: &mut Array1<f64>, against: &[Array1<f64>]) {
    for _ in 0..2 {
        for q in against {
            let proj = q.dot(v);
            v.scaled_add(-proj, q);
        }
    }
}

/// Samples `c` orthonormal anchors, then `k/c - 1` siblings per anchor at
/// cosine exactly `tau`: `u = tau·anchor + sqrt(1 - tau²)·v`, `v ⟂ anchor`.
pub fn gen_basis(spec: &SyntheticSpec, rng: &SeededRng) -> Result<ClassBasis> {
    spec.validate()?;
    let d = spec.d;
    let g = spec.group_size();
    let mut anchor_rng = rng.derive("synth.anchors", 0);
    let mut anchors: Vec<Array1<f64>> = Vec::with_capacity(spec.c);
    while anchors.len() < spec.c {
        let mut v = gaussian_vec(d, &mut anchor_rng);
        orthogonalize(&mut v, &anchors);
        // a draw (numerically) inside the current span is rejected
        if normalize(&mut v) > 1e-8 {
            anchors.push(v);
        }
    }

    let mut u = Array2::<f64>::zeros((spec.k, d));
    let mut sibling_rng = rng.derive("synth.siblings", 0);
    let spread = (1.0 - spec.tau * spec.tau).sqrt();
    // While there is room (K <= d), each sibling direction is also orthogonal
    // to every earlier direction, so at tau = 0 all classes are orthonormal.
    let mut taken: Vec<Array1<f64>> = anchors.clone();
    for (s, anchor) in anchors.iter().enumerate() {
        u.row_mut(s * g).assign(anchor);
        for j in 1..g {
            let v = loop {
                let mut v = gaussian_vec(d, &mut sibling_rng);
                if taken.len() < d {
                    orthogonalize(&mut v, &taken);
                } else {
                    orthogonalize(&mut v, std::slice::from_ref(anchor));
                }
                if normalize(&mut v) > 1e-8 {
                    break v;
                }
            };
            if taken.len() < d {
                taken.push(v.clone());
            }
            let mut row = anchor * spec.tau;
            row.scaled_add(spread, &v);
            // exact unit norm up to rounding; renormalize anyway
            normalize(&mut row);
            u.row_mut(s * g + j).assign(&row);
        }
    }
    Ok(ClassBasis {
        u,
        super_of: spec.super_of(),
        anchors: (0..spec.c).map(|s| s * g).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub t: usize,
}

/// Draws `x ~ N(0, I_d)` and labels it by the argmax score rule.
pub fn gen_example(basis: &ClassBasis, spec: &SyntheticSpec, rng: &mut SeededRng) -> LabeledExample {
    loop {
        let x = gaussian_vec(spec.d, rng);
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            continue;
        }
        let x_hat = &x / norm;
        let t = basis.label(spec, x_hat.view());
        return LabeledExample { x: x.to_vec(), t };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// A split stored column-major-free: `features` is n×d, `labels` has length n.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub k: usize,
    pub c: usize,
    pub tau: f64,
    pub m: usize,
    pub split: Split,
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        k: usize,
        c: usize,
        tau: f64,
        m: usize,
        split: Split,
        features: Array2<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&t) = labels.iter().find(|&&t| t as usize >= k) {
            return Err(Error::invalid(format!("label {t} out of range for k = {k}")));
        }
        if c == 0 || k % c != 0 {
            return Err(Error::invalid(format!("k = {k} is not a multiple of c = {c}")));
        }
        Ok(Dataset {
            k,
            c,
            tau,
            m,
            split,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn example(&self, i: usize) -> LabeledExample {
        LabeledExample {
            x: self.features.row(i).to_vec(),
            t: self.labels[i] as usize,
        }
    }

    pub fn super_of(&self) -> Vec<usize> {
        super_classes(self.k, self.c)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &t in &self.labels {
            counts[t as usize] += 1;
        }
        counts
    }
}

/// Example `i` of the combined train+valid index space draws from its own
/// sub-stream, so the output does not depend on the worker count.
fn gen_split(
    basis: &ClassBasis,
    spec: &SyntheticSpec,
    root: &SeededRng,
    offset: usize,
    n: usize,
    split: Split,
) -> Result<Dataset> {
    let examples: Vec<LabeledExample> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.derive("synth.example", (offset + i) as u64);
            gen_example(basis, spec, &mut rng)
        })
        .collect();
    let mut features = Array2::<f64>::zeros((n, spec.d));
    let mut labels = Vec::with_capacity(n);
    for (mut row, ex) in features.outer_iter_mut().zip(examples) {
        row.assign(&ArrayView1::from(&ex.x));
        labels.push(ex.t as u32);
    }
    Dataset::new(spec.k, spec.c, spec.tau, spec.m, split, features, labels)
}

/// One basis, then `n_train` + `n_valid` examples from the same distribution.
pub fn gen_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let (train, valid, _) = gen_dataset_with_basis(spec)?;
    Ok((train, valid))
}

pub fn gen_dataset_with_basis(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, ClassBasis)> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let basis = gen_basis(spec, &root)?;
    let train = gen_split(&basis, spec, &root, 0, spec.n_train, Split::Train)?;
    let valid = gen_split(&basis, spec, &root, spec.n_train, spec.n_valid, Split::Valid)?;
    Ok((train, valid, basis))
}
