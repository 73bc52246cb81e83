//! The margin operator `T` and its adjoint, applied matrix-free.
//!
//! Row block `l` of `T` maps a model to the score differences
//! `phi~(u_l)^T (x^(k) - x^(z_l))` for every class `k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelVector};

/// `L` blocks of `K` values, one block per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginVector {
    classes: usize,
    data: Vec<f64>,
}

impl MarginVector {
    pub fn zeros(samples: usize, classes: usize) -> Self {
        MarginVector {
            classes,
            data: vec![0.0; samples * classes],
        }
    }

    pub fn from_flat(classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || data.len() % classes != 0 {
            return Err(Error::Dimension(format!(
                "margin vector of length {} is not a multiple of K={}",
                data.len(),
                classes
            )));
        }
        Ok(MarginVector { classes, data })
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn samples(&self) -> usize {
        self.data.len() / self.classes
    }

    #[inline]
    pub fn sample(&self, l: usize) -> &[f64] {
        &self.data[l * self.classes..(l + 1) * self.classes]
    }

    #[inline]
    pub fn sample_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.data[l * self.classes..(l + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `T x`.
pub fn apply_t(x: &ModelVector, dataset: &Dataset) -> Result<MarginVector> {
    dataset.check_model(x)?;
    let k = dataset.classes();
    let mut out = MarginVector::zeros(dataset.len(), k);
    apply_t_into(x, dataset, out.as_mut_slice());
    Ok(out)
}

pub(crate) fn apply_t_into(x: &ModelVector, dataset: &Dataset, out: &mut [f64]) {
    let k = dataset.classes();
    for (s, block) in dataset.samples().iter().zip(out.chunks_exact_mut(k)) {
        for (c, o) in block.iter_mut().enumerate() {
            *o = x.score(c, &s.features);
        }
        let own = block[s.label];
        for o in block.iter_mut() {
            *o -= own;
        }
    }
}

/// `T^T y`.
pub fn apply_t_adjoint(y: &MarginVector, dataset: &Dataset) -> Result<ModelVector> {
    if y.classes() != dataset.classes() || y.samples() != dataset.len() {
        return Err(Error::Dimension(format!(
            "margin vector is L={} K={}, dataset is L={} K={}",
            y.samples(),
            y.classes(),
            dataset.len(),
            dataset.classes()
        )));
    }
    let mut out = ModelVector::zeros(dataset.classes(), dataset.features());
    apply_t_adjoint_into(y.as_slice(), dataset, &mut out);
    Ok(out)
}

/// Overwrites `out` with `T^T y`. Samples are accumulated in dataset order.
pub(crate) fn apply_t_adjoint_into(y: &[f64], dataset: &Dataset, out: &mut ModelVector) {
    let k = dataset.classes();
    let m = dataset.features();
    out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    for (s, yb) in dataset.samples().iter().zip(y.chunks_exact(k)) {
        let total: f64 = yb.iter().sum();
        for (c, &yc) in yb.iter().enumerate() {
            let coef = if c == s.label { yc - total } else { yc };
            if coef == 0.0 {
                continue;
            }
            let block = out.block_mut(c);
            s.features.add_scaled_to(coef, &mut block[..m]);
            block[m] += coef;
        }
    }
}

/// Multiplier applied to power-iteration estimates so that step sizes derived
/// from them stay feasible.
pub const NORM_SAFETY_FACTOR: f64 = 1.01;

/// Result of a power-iteration norm estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormEstimate {
    /// Square root of the last Rayleigh quotient of `A^T A` (a lower bound on `||A||`).
    pub raw: f64,
    /// `raw` times [`NORM_SAFETY_FACTOR`]; use this for step sizes.
    pub bound: f64,
    pub iterations: usize,
    /// False when `max_iter` was reached before the tolerance.
    pub converged: bool,
}

/// Power iteration on `A^T A` given `v -> A^T A v`.
///
/// The start vector is a fixed-seed pseudo-random vector, so the result is
/// reproducible. A constant start would lie in the kernel of `T` (equal class
/// blocks produce equal scores).
pub fn power_iteration<F>(dim: usize, tol: f64, max_iter: usize, mut gram: F) -> Result<NormEstimate>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "power iteration tolerance must be positive, got {tol}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut w = vec![0.0; dim];
    normalize(&mut v);

    let mut rq = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        gram(&v, &mut w);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let n = crate::model::norm2(&w);
        if n == 0.0 {
            rq = 0.0;
            converged = true;
            break;
        }
        let change = (next - rq).abs();
        rq = next;
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / n);
        if iterations > 1 && change <= tol * rq.abs() {
            converged = true;
            break;
        }
    }
    let raw = rq.max(0.0).sqrt();
    Ok(NormEstimate {
        raw,
        bound: raw * NORM_SAFETY_FACTOR,
        iterations,
        converged,
    })
}

fn normalize(v: &mut [f64]) {
    let n = crate::model::norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

/// Estimate of `||T||` for step-size selection.
pub fn operator_norm(dataset: &Dataset, tol: f64, max_iter: usize) -> Result<NormEstimate> {
    let k = dataset.classes();
    let m = dataset.features();
    let mut x = ModelVector::zeros(k, m);
    let mut y = vec![0.0; dataset.len() * k];
    let mut back = ModelVector::zeros(k, m);
    power_iteration(k * (m + 1), tol, max_iter, |v, out| {
        x.as_mut_slice().copy_from_slice(v);
        apply_t_into(&x, dataset, &mut y);
        apply_t_adjoint_into(&y, dataset, &mut back);
        out.copy_from_slice(back.as_slice());
    })
}

/// Estimate of the norm of the augmented feature matrix `[phi(u_l)^T 1]` (rows = samples).
pub fn feature_matrix_norm(dataset: &Dataset, tol: f64, max_iter: usize) -> Result<NormEstimate> {
    let m = dataset.features();
    let mut rows = vec![0.0; dataset.len()];
    power_iteration(m + 1, tol, max_iter, |v, out| {
        for (r, s) in rows.iter_mut().zip(dataset.samples()) {
            *r = s.features.dot(&v[..m]) + v[m];
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, s) in rows.iter().zip(dataset.samples()) {
            s.features.add_scaled_to(*r, &mut out[..m]);
            out[m] += r;
        }
    })
}
