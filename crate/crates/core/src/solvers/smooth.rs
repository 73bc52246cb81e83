//! Smooth-loss baselines solved by (accelerated) forward-backward splitting.

use std::time::Instant;

use super::{check_divergence, reference_distance, relative_change, IterRecord, SolveReport, SolverConfig, SolverKind};
use crate::error::{Error, Result};
use crate::eval::hinge_sum_of;
use crate::linop::{apply_t_adjoint_into, apply_t_into, feature_matrix_norm};
use crate::model::{make_margin_offsets, Dataset, MarginOffsets, ModelVector, RegularizerSpec};
use crate::prox::RegularizerProx;

/// Squared multiclass hinge `lambda * sum_l sum_{k != z_l} max(0, mu_l + (T x)_{lk})^2`
/// and its gradient `2 lambda T^T q` with `q = max(0, T x + r)`.
pub fn squared_hinge_loss(x: &ModelVector, dataset: &Dataset, lambda: f64) -> Result<(f64, ModelVector)> {
    dataset.check_model(x)?;
    let mut eval = LossEval::new(dataset);
    let mut grad = vec![0.0; x.as_slice().len()];
    let value = eval.squared_hinge(x.as_slice(), lambda, Some(&mut grad));
    Ok((value, ModelVector::from_flat(x.classes(), x.features(), grad)?))
}

/// Multinomial logistic loss `lambda * sum_l log(1 + sum_{k != z_l} exp(mu_l + (T x)_{lk}))`
/// and its gradient.
pub fn logistic_loss(x: &ModelVector, dataset: &Dataset, lambda: f64) -> Result<(f64, ModelVector)> {
    dataset.check_model(x)?;
    let mut eval = LossEval::new(dataset);
    let mut grad = vec![0.0; x.as_slice().len()];
    let value = eval.logistic(x.as_slice(), lambda, Some(&mut grad));
    Ok((value, ModelVector::from_flat(x.classes(), x.features(), grad)?))
}

/// Binary squared hinge of the one-vs-all subproblem for `class` (0-based):
/// `lambda * sum_l max(0, mu_l - s_l phi~(u_l)^T v)^2` with `s_l = +1` when
/// `z_l = class` and `-1` otherwise. `block` is the augmented class vector.
pub fn one_vs_all_loss(block: &[f64], dataset: &Dataset, class: usize, lambda: f64) -> Result<(f64, Vec<f64>)> {
    if block.len() != dataset.features() + 1 {
        return Err(Error::Dimension(format!(
            "class block has length {}, expected {}",
            block.len(),
            dataset.features() + 1
        )));
    }
    let mut grad = vec![0.0; block.len()];
    let value = binary_squared_hinge(block, dataset, class, lambda, Some(&mut grad));
    Ok((value, grad))
}

fn binary_squared_hinge(v: &[f64], dataset: &Dataset, class: usize, lambda: f64, grad: Option<&mut [f64]>) -> f64 {
    let m = dataset.features();
    let mut value = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|a| *a = 0.0);
    }
    for s in dataset.samples() {
        let sign = if s.label == class { 1.0 } else { -1.0 };
        let score = s.features.dot(&v[..m]) + v[m];
        let q = (s.margin - sign * score).max(0.0);
        if q == 0.0 {
            continue;
        }
        value += q * q;
        if let Some(g) = grad.as_deref_mut() {
            let coef = -2.0 * lambda * sign * q;
            s.features.add_scaled_to(coef, &mut g[..m]);
            g[m] += coef;
        }
    }
    lambda * value
}

/// Reusable buffers for evaluating the multiclass smooth losses.
struct LossEval<'a> {
    dataset: &'a Dataset,
    offsets: MarginOffsets,
    model: ModelVector,
    margins: Vec<f64>,
    back: ModelVector,
}

impl<'a> LossEval<'a> {
    fn new(dataset: &'a Dataset) -> Self {
        let k = dataset.classes();
        let m = dataset.features();
        LossEval {
            dataset,
            offsets: make_margin_offsets(dataset),
            model: ModelVector::zeros(k, m),
            margins: vec![0.0; dataset.len() * k],
            back: ModelVector::zeros(k, m),
        }
    }

    fn forward(&mut self, x: &[f64]) {
        self.model.as_mut_slice().copy_from_slice(x);
        apply_t_into(&self.model, self.dataset, &mut self.margins);
        for (t, r) in self.margins.iter_mut().zip(self.offsets.as_slice()) {
            *t += r;
        }
    }

    fn backward(&mut self, grad: &mut [f64]) {
        apply_t_adjoint_into(&self.margins, self.dataset, &mut self.back);
        grad.copy_from_slice(self.back.as_slice());
    }

    fn squared_hinge(&mut self, x: &[f64], lambda: f64, grad: Option<&mut [f64]>) -> f64 {
        self.forward(x);
        let k = self.dataset.classes();
        let mut value = 0.0;
        for (block, s) in self.margins.chunks_exact_mut(k).zip(self.dataset.samples()) {
            for (c, a) in block.iter_mut().enumerate() {
                let q = if c == s.label { 0.0 } else { a.max(0.0) };
                value += q * q;
                *a = 2.0 * lambda * q;
            }
        }
        if let Some(g) = grad {
            self.backward(g);
        }
        lambda * value
    }

    fn logistic(&mut self, x: &[f64], lambda: f64, grad: Option<&mut [f64]>) -> f64 {
        self.forward(x);
        let k = self.dataset.classes();
        let mut value = 0.0;
        for block in self.margins.chunks_exact_mut(k) {
            // The true class contributes exp(0) = 1, i.e. the "1 +" term.
            let peak = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in block.iter_mut() {
                *a = (*a - peak).exp();
                total += *a;
            }
            value += peak + total.ln();
            for a in block.iter_mut() {
                *a *= lambda / total;
            }
        }
        if let Some(g) = grad {
            self.backward(g);
        }
        lambda * value
    }
}

struct PgOutcome {
    x: Vec<f64>,
    iterations: usize,
    rel: f64,
    converged: bool,
    objective: f64,
    history: Vec<IterRecord>,
}

/// Forward-backward on `f + g` with step `1/lip`. With `accelerate`, FISTA
/// momentum is used and reset whenever the objective increases.
fn proximal_gradient<F>(
    x0: Vec<f64>,
    lip: f64,
    prox: &RegularizerProx,
    mut smooth: F,
    accelerate: bool,
    cfg: &SolverConfig,
) -> Result<PgOutcome>
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> f64,
{
    let step = 1.0 / lip.max(f64::MIN_POSITIVE);
    let n = x0.len();
    let mut x = x0;
    let mut v = x.clone();
    let mut x_new = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut t: f64 = 1.0;
    let mut objective = smooth(&x, None) + prox.value_slice(&x);
    let mut rel = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut history = Vec::new();
    let start = Instant::now();

    while iterations < cfg.max_iter {
        iterations += 1;
        smooth(&v, Some(&mut grad));
        for ((xn, vv), g) in x_new.iter_mut().zip(&v).zip(&grad) {
            *xn = vv - step * g;
        }
        prox.apply_slice(&mut x_new, step);
        let obj_new = smooth(&x_new, None) + prox.value_slice(&x_new);
        check_divergence(iterations, obj_new, &x_new)?;
        rel = relative_change(&x_new, &x);

        if accelerate {
            if obj_new > objective {
                t = 1.0;
                v.copy_from_slice(&x_new);
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let beta = (t - 1.0) / t_next;
                for ((vv, xn), xo) in v.iter_mut().zip(&x_new).zip(&x) {
                    *vv = xn + beta * (xn - xo);
                }
                t = t_next;
            }
        } else {
            v.copy_from_slice(&x_new);
        }
        std::mem::swap(&mut x, &mut x_new);
        objective = obj_new;

        if cfg.record_history {
            history.push(IterRecord {
                iteration: iterations,
                objective,
                rel_change: rel,
                elapsed_secs: start.elapsed().as_secs_f64(),
                reference_distance: reference_distance(cfg, &x),
            });
        }
        if rel <= cfg.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(PgOutcome {
        x,
        iterations,
        rel,
        converged,
        objective,
        history,
    })
}

fn finish(
    solver: SolverKind,
    dataset: &Dataset,
    spec: &RegularizerSpec,
    out: PgOutcome,
    tau: f64,
    norm: Option<crate::linop::NormEstimate>,
) -> Result<SolveReport> {
    let solution = ModelVector::from_flat(dataset.classes(), dataset.features(), out.x)?;
    let mut tx = vec![0.0; dataset.len() * dataset.classes()];
    apply_t_into(&solution, dataset, &mut tx);
    let hinge_sum = hinge_sum_of(&tx, &make_margin_offsets(dataset));
    let regularizer_value = crate::prox::regularizer_value(&solution, spec)?;
    Ok(SolveReport {
        solver,
        solution,
        iterations: out.iterations,
        final_rel_change: out.rel,
        final_dual_change: None,
        primal_objective: out.objective,
        regularizer_value,
        hinge_sum,
        constraint_violation: 0.0,
        converged: out.converged,
        tau,
        sigma: None,
        operator_norm: norm,
        history: out.history,
        dual: None,
        duality: None,
    })
}

/// FISTA on the squared multiclass hinge plus `g`; `cfg.param` is `lambda`.
/// Step `1 / (2 lambda ||T||^2)`.
pub fn solve_square_fista(dataset: &Dataset, spec: &RegularizerSpec, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.check(dataset, spec)?;
    let lambda = cfg.param;
    let norm = super::estimate_norm(dataset, cfg)?;
    let lip = 2.0 * lambda * norm.bound * norm.bound;
    let prox = RegularizerProx::new(spec, dataset.classes(), dataset.features());
    let mut eval = LossEval::new(dataset);
    let x0 = vec![0.0; dataset.classes() * (dataset.features() + 1)];
    let out = proximal_gradient(x0, lip, &prox, |x, g| eval.squared_hinge(x, lambda, g), true, cfg)?;
    finish(SolverKind::FistaSquare, dataset, spec, out, 1.0 / lip, Some(norm))
}

/// Plain forward-backward on the multinomial logistic loss plus `g`;
/// `cfg.param` is `lambda`. Step `1 / (lambda ||T||^2)`.
pub fn solve_logistic_fb(dataset: &Dataset, spec: &RegularizerSpec, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.check(dataset, spec)?;
    let lambda = cfg.param;
    let norm = super::estimate_norm(dataset, cfg)?;
    let lip = lambda * norm.bound * norm.bound;
    let prox = RegularizerProx::new(spec, dataset.classes(), dataset.features());
    let mut eval = LossEval::new(dataset);
    let x0 = vec![0.0; dataset.classes() * (dataset.features() + 1)];
    let out = proximal_gradient(x0, lip, &prox, |x, g| eval.logistic(x, lambda, g), false, cfg)?;
    finish(SolverKind::FbLogistic, dataset, spec, out, 1.0 / lip, Some(norm))
}

/// `K` independent binary squared-hinge problems, one per class block, each
/// solved with FISTA. Grouped penalties are applied within the class block.
pub fn solve_one_vs_all(dataset: &Dataset, spec: &RegularizerSpec, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.check(dataset, spec)?;
    let lambda = cfg.param;
    let k = dataset.classes();
    let m = dataset.features();
    let norm = feature_matrix_norm(dataset, cfg.norm_tol, cfg.norm_max_iter)?;
    let lip = 2.0 * lambda * norm.bound * norm.bound;
    let prox = RegularizerProx::new(spec, 1, m);
    // Subproblems are not traced; the combined iterate does not exist per step.
    let sub_cfg = SolverConfig {
        record_history: false,
        reference: None,
        ..cfg.clone()
    };

    let mut flat = Vec::with_capacity(k * (m + 1));
    let mut iterations = 0;
    let mut rel: f64 = 0.0;
    let mut converged = true;
    let mut objective = 0.0;
    for class in 0..k {
        let out = proximal_gradient(
            vec![0.0; m + 1],
            lip,
            &prox,
            |v, g| binary_squared_hinge(v, dataset, class, lambda, g),
            true,
            &sub_cfg,
        )?;
        iterations += out.iterations;
        rel = rel.max(out.rel);
        converged &= out.converged;
        objective += out.objective;
        flat.extend(out.x);
    }
    let out = PgOutcome {
        x: flat,
        iterations,
        rel,
        converged,
        objective,
        history: Vec::new(),
    };
    finish(SolverKind::OneVsAll, dataset, spec, out, 1.0 / lip, Some(norm))
}
