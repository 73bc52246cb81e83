//! Forward-backward primal-dual iterations for the exact hinge loss.

use std::time::Instant;

use super::{
    check_divergence, estimate_norm, reference_distance, relative_change, step_sizes, DualState, IterRecord,
    SolveReport, SolverConfig, SolverKind, REL_EPS,
};
use crate::error::Result;
use crate::eval::hinge_sum_of;
use crate::linop::{apply_t_adjoint_into, apply_t_into, MarginVector};
use crate::model::{make_margin_offsets, norm2, Dataset, ModelVector, RegularizerKind, RegularizerSpec};
use crate::prox::{project_epigraph_into, project_halfspace_in_place, RegularizerProx, SimplexProjector, SortSimplex};

/// Minimizes `g(x) + lambda * sum_l h_l(T_l x)`; `cfg.param` is `lambda`.
///
/// Each iteration takes a prox step on `g`, extrapolates the dual with
/// `T(2 x_new - x)`, and projects every dual block onto the scaled simplex.
pub fn solve_regularized_fbpd(dataset: &Dataset, spec: &RegularizerSpec, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.check(dataset, spec)?;
    let lambda = cfg.param;
    let k = dataset.classes();
    let m = dataset.features();
    let n_margins = dataset.len() * k;
    let norm = estimate_norm(dataset, cfg)?;
    let (tau, sigma) = step_sizes(cfg, norm.bound)?;
    let prox = RegularizerProx::new(spec, k, m);
    let offsets = make_margin_offsets(dataset);
    let simplex = SortSimplex;

    let mut x = ModelVector::zeros(k, m);
    let mut x_new = x.clone();
    let mut back = ModelVector::zeros(k, m);
    let mut tx = vec![0.0; n_margins];
    let mut tx_new = vec![0.0; n_margins];
    let mut y = vec![0.0; n_margins];
    let mut y_new = vec![0.0; n_margins];
    let mut shifted = vec![0.0; k];

    let start = Instant::now();
    let mut history = Vec::new();
    let mut rel = f64::INFINITY;
    let mut dual_rel = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut objective = prox.value(&x) + lambda * hinge_sum_of(&tx, &offsets);

    while iterations < cfg.max_iter {
        iterations += 1;
        apply_t_adjoint_into(&y, dataset, &mut back);
        for ((xn, xo), b) in x_new.as_mut_slice().iter_mut().zip(x.as_slice()).zip(back.as_slice()) {
            *xn = xo - tau * b;
        }
        prox.apply(&mut x_new, tau);
        apply_t_into(&x_new, dataset, &mut tx_new);

        for l in 0..dataset.len() {
            let span = l * k..(l + 1) * k;
            let r = offsets.sample(l);
            for (((s, &yo), (&tn, &to)), &rk) in shifted
                .iter_mut()
                .zip(&y[span.clone()])
                .zip(tx_new[span.clone()].iter().zip(&tx[span.clone()]))
                .zip(r)
            {
                *s = yo + sigma * (2.0 * tn - to) + sigma * rk;
            }
            simplex.project_into(&shifted, lambda, &mut y_new[span]);
        }

        rel = relative_change(x_new.as_slice(), x.as_slice());
        let drel = relative_change(&y_new, &y);
        dual_rel = Some(drel);
        // A primal iterate that stays at zero (up to roundoff) says nothing about convergence
        // while the dual is still moving.
        if norm2(x_new.as_slice()).max(norm2(x.as_slice())) <= REL_EPS {
            rel = drel;
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut tx, &mut tx_new);
        std::mem::swap(&mut y, &mut y_new);

        objective = prox.value(&x) + lambda * hinge_sum_of(&tx, &offsets);
        check_divergence(iterations, objective, x.as_slice())?;
        if cfg.record_history {
            history.push(IterRecord {
                iteration: iterations,
                objective,
                rel_change: rel,
                elapsed_secs: start.elapsed().as_secs_f64(),
                reference_distance: reference_distance(cfg, x.as_slice()),
            });
        }
        if rel <= cfg.rel_tol {
            converged = true;
            break;
        }
    }

    let hinge_sum = hinge_sum_of(&tx, &offsets);
    let regularizer_value = prox.value(&x);
    let y = MarginVector::from_flat(k, y)?;
    let duality = if spec.kind == RegularizerKind::SquaredL2 {
        Some(duality_diagnostics(&x, &y, dataset, lambda)?)
    } else {
        None
    };
    Ok(SolveReport {
        solver: SolverKind::FbpdRegularized,
        solution: x,
        iterations,
        final_rel_change: rel,
        final_dual_change: dual_rel,
        primal_objective: objective,
        regularizer_value,
        hinge_sum,
        constraint_violation: 0.0,
        converged,
        tau,
        sigma: Some(sigma),
        operator_norm: Some(norm),
        history,
        dual: Some(DualState {
            y,
            zeta: None,
            xi: None,
        }),
        duality,
    })
}

/// Minimizes `g(x)` subject to `sum_l h_l(T_l x) <= eta`; `cfg.param` is `eta`.
///
/// The constraint is split with one auxiliary height `zeta_l` per sample:
/// `(T_l x, zeta_l)` must lie in the epigraph of `h_l` and `sum zeta <= eta`.
/// The epigraph projections decouple across samples.
pub fn solve_constrained_fbpd(dataset: &Dataset, spec: &RegularizerSpec, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.check(dataset, spec)?;
    let eta = cfg.param;
    let k = dataset.classes();
    let m = dataset.features();
    let samples = dataset.len();
    let n_margins = samples * k;
    let norm = estimate_norm(dataset, cfg)?;
    let (tau, sigma) = step_sizes(cfg, norm.bound.max(1.0))?;
    let prox = RegularizerProx::new(spec, k, m);
    let offsets = make_margin_offsets(dataset);
    let zero_feasible = hinge_sum_of(&vec![0.0; n_margins], &offsets) <= eta;

    let mut x = ModelVector::zeros(k, m);
    let mut x_new = x.clone();
    let mut back = ModelVector::zeros(k, m);
    let mut tx = vec![0.0; n_margins];
    let mut tx_new = vec![0.0; n_margins];
    let mut zeta = vec![0.0; samples];
    let mut zeta_new = vec![0.0; samples];
    let mut y = vec![0.0; n_margins];
    let mut y_new = vec![0.0; n_margins];
    let mut xi = vec![0.0; samples];
    let mut xi_new = vec![0.0; samples];
    let mut y_hat = vec![0.0; k];
    let mut y_scaled = vec![0.0; k];
    let mut projected = vec![0.0; k];
    let mut scratch = Vec::with_capacity(k);

    let start = Instant::now();
    let mut history = Vec::new();
    let mut rel = f64::INFINITY;
    let mut dual_rel = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut objective = prox.value(&x);

    while iterations < cfg.max_iter {
        iterations += 1;
        apply_t_adjoint_into(&y, dataset, &mut back);
        for ((xn, xo), b) in x_new.as_mut_slice().iter_mut().zip(x.as_slice()).zip(back.as_slice()) {
            *xn = xo - tau * b;
        }
        prox.apply(&mut x_new, tau);
        for ((zn, zo), q) in zeta_new.iter_mut().zip(&zeta).zip(&xi) {
            *zn = zo - tau * q;
        }
        project_halfspace_in_place(&mut zeta_new, eta);
        apply_t_into(&x_new, dataset, &mut tx_new);

        for l in 0..samples {
            let span = l * k..(l + 1) * k;
            for ((h, &yo), (&tn, &to)) in y_hat
                .iter_mut()
                .zip(&y[span.clone()])
                .zip(tx_new[span.clone()].iter().zip(&tx[span.clone()]))
            {
                *h = yo + sigma * (2.0 * tn - to);
            }
            let xi_hat = xi[l] + sigma * (2.0 * zeta_new[l] - zeta[l]);
            for (s, h) in y_scaled.iter_mut().zip(&y_hat) {
                *s = h / sigma;
            }
            let height = project_epigraph_into(
                &y_scaled,
                offsets.sample(l),
                xi_hat / sigma,
                &mut projected,
                &mut scratch,
            );
            for ((yn, h), p) in y_new[span].iter_mut().zip(&y_hat).zip(&projected) {
                *yn = h - sigma * p;
            }
            xi_new[l] = xi_hat - sigma * height;
        }

        rel = relative_change(x_new.as_slice(), x.as_slice());
        let dual_norm = (norm2(&y).powi(2) + norm2(&xi).powi(2)).sqrt().max(REL_EPS);
        let dual_step = (crate::model::dist2(&y_new, &y).powi(2) + crate::model::dist2(&xi_new, &xi).powi(2)).sqrt();
        let drel = dual_step / dual_norm;
        dual_rel = Some(drel);
        // A primal iterate stuck at zero (up to roundoff) is optimal exactly when the zero model
        // meets the budget (g >= 0 = g(0)); otherwise the dual is still building up.
        if norm2(x_new.as_slice()).max(norm2(x.as_slice())) <= REL_EPS {
            rel = if zero_feasible { 0.0 } else { f64::INFINITY };
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut tx, &mut tx_new);
        std::mem::swap(&mut zeta, &mut zeta_new);
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut xi, &mut xi_new);

        objective = prox.value(&x);
        check_divergence(iterations, objective, x.as_slice())?;
        if cfg.record_history {
            history.push(IterRecord {
                iteration: iterations,
                objective,
                rel_change: rel,
                elapsed_secs: start.elapsed().as_secs_f64(),
                reference_distance: reference_distance(cfg, x.as_slice()),
            });
        }
        if rel <= cfg.rel_tol {
            converged = true;
            break;
        }
    }

    let hinge_sum = hinge_sum_of(&tx, &offsets);
    Ok(SolveReport {
        solver: SolverKind::FbpdConstrained,
        regularizer_value: objective,
        solution: x,
        iterations,
        final_rel_change: rel,
        final_dual_change: dual_rel,
        primal_objective: objective,
        hinge_sum,
        constraint_violation: (hinge_sum - eta).max(0.0),
        converged,
        tau,
        sigma: Some(sigma),
        operator_norm: Some(norm),
        history,
        dual: Some(DualState {
            y: MarginVector::from_flat(k, y)?,
            zeta: Some(zeta),
            xi: Some(xi),
        }),
        duality: None,
    })
}

/// Primal-dual agreement for `g(x) = sum_k ||w^(k)||^2` (offsets free).
///
/// The dual objective is `g*(-T^T y) - sum_l r_l^T y_l` with
/// `g*(v) = ||v_w||^2 / 4` on the weight coordinates. The offset coordinates
/// of `g*` are an indicator of `v_b = 0`; instead of returning `+inf` their
/// violation is folded into `stationarity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualityDiagnostics {
    pub primal: f64,
    pub dual: f64,
    /// `primal + dual`; zero at a saddle point.
    pub gap: f64,
    /// `||grad g(x) + T^T y||`, which vanishes at the solution. The offset
    /// part equals `||(T^T y)_b||`.
    pub stationarity: f64,
    pub offset_residual: f64,
}

pub fn duality_diagnostics(
    x: &ModelVector,
    y: &MarginVector,
    dataset: &Dataset,
    lambda: f64,
) -> Result<DualityDiagnostics> {
    dataset.check_model(x)?;
    let k = dataset.classes();
    let m = dataset.features();
    let offsets = make_margin_offsets(dataset);
    let mut tx = vec![0.0; dataset.len() * k];
    apply_t_into(x, dataset, &mut tx);
    let back = crate::linop::apply_t_adjoint(y, dataset)?;

    let mut g = 0.0;
    let mut conj = 0.0;
    let mut stat_sq = 0.0;
    let mut offset_sq = 0.0;
    for c in 0..k {
        let xb = x.block(c);
        let vb = back.block(c);
        for j in 0..m {
            g += xb[j] * xb[j];
            conj += vb[j] * vb[j] / 4.0;
            let s = 2.0 * xb[j] + vb[j];
            stat_sq += s * s;
        }
        offset_sq += vb[m] * vb[m];
    }
    let primal = g + lambda * hinge_sum_of(&tx, &offsets);
    let linear: f64 = y.as_slice().iter().zip(offsets.as_slice()).map(|(a, b)| a * b).sum();
    let dual = conj - linear;
    Ok(DualityDiagnostics {
        primal,
        dual,
        gap: primal + dual,
        stationarity: (stat_sq + offset_sq).sqrt(),
        offset_residual: offset_sq.sqrt(),
    })
}
