//! Training algorithms.
//!
//! Two primal-dual solvers minimize the exact multiclass hinge loss, either as
//! a penalty ([`solve_regularized_fbpd`]) or as a constraint
//! ([`solve_constrained_fbpd`]). Three smooth-loss baselines share the same
//! configuration and report types.

mod fbpd;
mod smooth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linop::{operator_norm, MarginVector, NormEstimate};
use crate::model::{Dataset, ModelVector, RegularizerSpec};

pub use fbpd::{duality_diagnostics, solve_constrained_fbpd, solve_regularized_fbpd, DualityDiagnostics};
pub use smooth::{
    logistic_loss, one_vs_all_loss, solve_logistic_fb, solve_one_vs_all, solve_square_fista, squared_hinge_loss,
};

/// Objective ceiling used by the divergence guard.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Guard against division by a vanishing iterate norm in the relative change.
pub const REL_EPS: f64 = 1e-12;

/// Solver settings. `param` is `lambda` for penalized problems and `eta` for
/// the constrained one.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub param: f64,
    pub tau: Option<f64>,
    pub sigma: Option<f64>,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub record_history: bool,
    /// When set, history entries carry `||x - reference|| / ||reference||`.
    pub reference: Option<ModelVector>,
    pub norm_tol: f64,
    pub norm_max_iter: usize,
}

impl SolverConfig {
    pub fn new(param: f64) -> Self {
        SolverConfig {
            param,
            tau: None,
            sigma: None,
            max_iter: 20_000,
            rel_tol: 1e-5,
            record_history: false,
            reference: None,
            norm_tol: 1e-9,
            norm_max_iter: 5_000,
        }
    }

    pub fn max_iter(mut self, n: usize) -> Self {
        self.max_iter = n;
        self
    }

    pub fn rel_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self
    }

    pub fn steps(mut self, tau: f64, sigma: f64) -> Self {
        self.tau = Some(tau);
        self.sigma = Some(sigma);
        self
    }

    pub fn record_history(mut self, on: bool) -> Self {
        self.record_history = on;
        self
    }

    pub fn reference(mut self, reference: ModelVector) -> Self {
        self.reference = Some(reference);
        self.record_history = true;
        self
    }

    fn check(&self, dataset: &Dataset, spec: &RegularizerSpec) -> Result<()> {
        if !(self.param > 0.0) || !self.param.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "hyperparameter must be positive and finite, got {}",
                self.param
            )));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be non-negative".into()));
        }
        if dataset.is_empty() {
            return Err(Error::InvalidDataset("training set is empty".into()));
        }
        spec.validate(dataset.features())?;
        if let Some(r) = &self.reference {
            dataset.check_model(r)?;
        }
        Ok(())
    }
}

/// One row of the optional per-iteration history.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub objective: f64,
    pub rel_change: f64,
    pub elapsed_secs: f64,
    pub reference_distance: Option<f64>,
}

/// Dual iterates of the primal-dual solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub y: MarginVector,
    /// Auxiliary epigraph heights (constrained solver only).
    pub zeta: Option<Vec<f64>>,
    /// Dual of the heights (constrained solver only).
    pub xi: Option<Vec<f64>>,
}

/// Outcome of a solve.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub solver: SolverKind,
    pub solution: ModelVector,
    pub iterations: usize,
    pub final_rel_change: f64,
    /// Relative change of the dual iterate at the last step (primal-dual solvers).
    pub final_dual_change: Option<f64>,
    /// `g + lambda * loss` for penalized problems, `g` for the constrained one.
    pub primal_objective: f64,
    pub regularizer_value: f64,
    /// Sum of multiclass hinge losses at the solution.
    pub hinge_sum: f64,
    /// `max(0, hinge_sum - eta)` for the constrained solver, 0 otherwise.
    pub constraint_violation: f64,
    pub converged: bool,
    pub tau: f64,
    pub sigma: Option<f64>,
    pub operator_norm: Option<NormEstimate>,
    pub history: Vec<IterRecord>,
    pub dual: Option<DualState>,
    pub duality: Option<DualityDiagnostics>,
}

/// The five training algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverKind {
    FbpdRegularized,
    FbpdConstrained,
    FistaSquare,
    FbLogistic,
    OneVsAll,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] = [
        SolverKind::FbpdRegularized,
        SolverKind::FbpdConstrained,
        SolverKind::FistaSquare,
        SolverKind::FbLogistic,
        SolverKind::OneVsAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::FbpdRegularized => "fbpd-reg",
            SolverKind::FbpdConstrained => "fbpd-con",
            SolverKind::FistaSquare => "fista-square",
            SolverKind::FbLogistic => "fb-logit",
            SolverKind::OneVsAll => "one-vs-all",
        }
    }

    /// Whether `param` is the constraint bound `eta` rather than the weight `lambda`.
    pub fn is_constrained(self) -> bool {
        self == SolverKind::FbpdConstrained
    }

    /// Hyperparameter for a sweep value `alpha`: `lambda = 1/alpha` or `eta = alpha * L`.
    pub fn param_from_alpha(self, alpha: f64, samples: usize) -> f64 {
        if self.is_constrained() {
            alpha * samples as f64
        } else {
            1.0 / alpha
        }
    }

    pub fn solve(self, dataset: &Dataset, spec: &RegularizerSpec, cfg: &SolverConfig) -> Result<SolveReport> {
        match self {
            SolverKind::FbpdRegularized => solve_regularized_fbpd(dataset, spec, cfg),
            SolverKind::FbpdConstrained => solve_constrained_fbpd(dataset, spec, cfg),
            SolverKind::FistaSquare => solve_square_fista(dataset, spec, cfg),
            SolverKind::FbLogistic => solve_logistic_fb(dataset, spec, cfg),
            SolverKind::OneVsAll => solve_one_vs_all(dataset, spec, cfg),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown solver '{s}'")))
    }
}

pub(crate) fn estimate_norm(dataset: &Dataset, cfg: &SolverConfig) -> Result<NormEstimate> {
    operator_norm(dataset, cfg.norm_tol, cfg.norm_max_iter)
}

/// Step sizes satisfying `tau * sigma * scale^2 <= 1`, where `scale` is the
/// norm bound of the full linear operator.
pub(crate) fn step_sizes(cfg: &SolverConfig, scale: f64) -> Result<(f64, f64)> {
    let scale = scale.max(f64::MIN_POSITIVE);
    let (tau, sigma) = match (cfg.tau, cfg.sigma) {
        (None, None) => (1.0 / scale, 1.0 / scale),
        (Some(t), None) => (t, 1.0 / (t * scale * scale)),
        (None, Some(s)) => (1.0 / (s * scale * scale), s),
        (Some(t), Some(s)) => (t, s),
    };
    if !(tau > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidArgument("step sizes must be positive".into()));
    }
    if tau * sigma * scale * scale > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "step sizes violate tau*sigma*||L||^2 <= 1 (tau={tau}, sigma={sigma}, ||L||<={scale})"
        )));
    }
    Ok((tau, sigma))
}

pub(crate) fn check_divergence(iteration: usize, objective: f64, x: &[f64]) -> Result<()> {
    if !objective.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            reason: "non-finite iterate".into(),
        });
    }
    if objective > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration,
            reason: format!("objective {objective:e} exceeds {DIVERGENCE_LIMIT:e}"),
        });
    }
    Ok(())
}

/// `||a - b|| / max(||b||, eps)`.
pub(crate) fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    crate::model::dist2(new, old) / crate::model::norm2(old).max(REL_EPS)
}

pub(crate) fn reference_distance(cfg: &SolverConfig, x: &[f64]) -> Option<f64> {
    cfg.reference
        .as_ref()
        .map(|r| crate::model::dist2(x, r.as_slice()) / r.norm().max(REL_EPS))
}

/// Whether the relative change, averaged over consecutive windows of
/// `window` iterations, never grows by more than `slack` (relative) from one
/// window to the next.
pub fn windowed_nonincreasing(history: &[IterRecord], window: usize, slack: f64) -> bool {
    if window == 0 {
        return true;
    }
    let means: Vec<f64> = history
        .chunks_exact(window)
        .map(|c| c.iter().map(|r| r.rel_change).sum::<f64>() / window as f64)
        .collect();
    means.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::eval::{count_errors, predict};
    use crate::model::{BlockStructure, Features, GroupMode, Sample};

    fn tiny() -> Dataset {
        let pts = [
            ([0.0, 1.0], 0),
            ([1.0, 0.2], 1),
            ([-1.0, -0.5], 2),
            ([0.3, 1.4], 0),
            ([1.2, -0.3], 1),
        ];
        let samples = pts
            .iter()
            .map(|(f, z)| Sample::unit(Features::Dense(f.to_vec()), *z))
            .collect();
        Dataset::new(samples, 2, 3).unwrap()
    }

    fn specs(m: usize) -> Vec<RegularizerSpec> {
        let b = BlockStructure::contiguous(m, 2, GroupMode::PerClass).unwrap();
        vec![
            RegularizerSpec::l1(),
            RegularizerSpec::squared_l2(),
            RegularizerSpec::l12(b.clone()),
            RegularizerSpec::l1inf(b.with_mode(GroupMode::CrossClass)),
        ]
    }

    fn central_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + x[i].abs());
                probe[i] = x[i] + h;
                let up = f(&probe);
                probe[i] = x[i] - h;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        crate::model::dist2(a, b) / crate::model::norm2(b).max(1e-8)
    }

    #[test]
    fn zero_iterations_return_zero_model() {
        let ds = tiny();
        for kind in SolverKind::ALL {
            let param = kind.param_from_alpha(1.0, ds.len());
            let rep = kind
                .solve(&ds, &RegularizerSpec::l1(), &SolverConfig::new(param).max_iter(0))
                .unwrap();
            assert_eq!(rep.iterations, 0);
            assert!(rep.solution.as_slice().iter().all(|&v| v == 0.0), "{kind}");
            assert!(!rep.converged);
        }
    }

    #[test]
    fn solver_names_round_trip() {
        for kind in SolverKind::ALL {
            assert_eq!(kind.name().parse::<SolverKind>().unwrap(), kind);
        }
        assert!("svm".parse::<SolverKind>().is_err());
        assert_eq!(SolverKind::FbpdConstrained.param_from_alpha(0.5, 10), 5.0);
        assert_eq!(SolverKind::FbpdRegularized.param_from_alpha(0.5, 10), 2.0);
    }

    #[test]
    fn config_validation() {
        let ds = tiny();
        assert!(solve_regularized_fbpd(&ds, &RegularizerSpec::l1(), &SolverConfig::new(0.0)).is_err());
        assert!(solve_regularized_fbpd(&ds, &RegularizerSpec::l1(), &SolverConfig::new(f64::NAN)).is_err());
        let too_big = SolverConfig::new(1.0).steps(1.0, 1.0);
        assert!(matches!(
            solve_regularized_fbpd(&ds, &RegularizerSpec::l1(), &too_big),
            Err(Error::InvalidArgument(_))
        ));
        let empty = ds.subset(&[]);
        assert!(solve_regularized_fbpd(&empty, &RegularizerSpec::l1(), &SolverConfig::new(1.0)).is_err());
        let bad_blocks = RegularizerSpec::l12(BlockStructure::contiguous(3, 1, GroupMode::PerClass).unwrap());
        assert!(solve_regularized_fbpd(&ds, &bad_blocks, &SolverConfig::new(1.0)).is_err());
    }

    #[test]
    fn step_rule_boundary_is_accepted() {
        let cfg = SolverConfig::new(1.0).steps(0.5, 2.0);
        assert_eq!(step_sizes(&cfg, 1.0).unwrap(), (0.5, 2.0));
        let (t, s) = step_sizes(&SolverConfig::new(1.0), 3.0).unwrap();
        assert!((t * s * 9.0 - 1.0).abs() < 1e-12);
        let (t, s) = step_sizes(
            &SolverConfig {
                tau: Some(0.1),
                ..SolverConfig::new(1.0)
            },
            2.0,
        )
        .unwrap();
        assert!((t * s * 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_guard() {
        assert!(check_divergence(3, 1.0, &[0.0, 1.0]).is_ok());
        assert!(matches!(
            check_divergence(3, 1e13, &[0.0]),
            Err(Error::Diverged { iteration: 3, .. })
        ));
        assert!(check_divergence(1, 1.0, &[f64::NAN]).is_err());
        assert!(check_divergence(1, f64::INFINITY, &[0.0]).is_err());
    }

    #[test]
    fn smooth_gradients_match_finite_differences() {
        let ds = tiny();
        let x0: Vec<f64> = (0..9).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let x = ModelVector::from_flat(3, 2, x0.clone()).unwrap();
        let (_, g) = squared_hinge_loss(&x, &ds, 0.7).unwrap();
        let fd = central_difference(&x0, |p| {
            squared_hinge_loss(&ModelVector::from_flat(3, 2, p.to_vec()).unwrap(), &ds, 0.7)
                .unwrap()
                .0
        });
        assert!(rel_err(g.as_slice(), &fd) <= 1e-5);

        let (_, g) = logistic_loss(&x, &ds, 0.7).unwrap();
        let fd = central_difference(&x0, |p| {
            logistic_loss(&ModelVector::from_flat(3, 2, p.to_vec()).unwrap(), &ds, 0.7)
                .unwrap()
                .0
        });
        assert!(rel_err(g.as_slice(), &fd) <= 1e-5);

        for class in 0..3 {
            let v = &x0[3 * class..3 * class + 3];
            let (_, g) = one_vs_all_loss(v, &ds, class, 1.3).unwrap();
            let fd = central_difference(v, |p| one_vs_all_loss(p, &ds, class, 1.3).unwrap().0);
            assert!(rel_err(&g, &fd) <= 1e-5);
        }
        assert!(one_vs_all_loss(&[0.0; 2], &ds, 0, 1.0).is_err());
    }

    #[test]
    fn logistic_at_zero() {
        let ds = Dataset::new(vec![Sample::unit(Features::Dense(vec![0.4]), 1)], 1, 2).unwrap();
        let (v, _) = logistic_loss(&ModelVector::zeros(2, 1), &ds, 1.0).unwrap();
        assert!((v - (1.0 + 1f64.exp()).ln()).abs() < 1e-14);
        let (v, _) = squared_hinge_loss(&ModelVector::zeros(2, 1), &ds, 2.0).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn loose_constraint_gives_zero_model() {
        let ds = tiny();
        let eta = ds.margin_sum();
        let rep = solve_constrained_fbpd(&ds, &RegularizerSpec::l1(), &SolverConfig::new(eta)).unwrap();
        // Offsets are unpenalized and only defined up to a common shift.
        assert!((0..3).all(|c| rep.solution.weights(c).iter().all(|&v| v == 0.0)));
        assert!((0..3).all(|c| rep.solution.offset(c).abs() < 1e-12));
        assert_eq!(rep.primal_objective, 0.0);
        assert_eq!(rep.constraint_violation, 0.0);
        assert!(rep.converged);
    }

    #[test]
    fn infeasible_zero_model_does_not_stop_early() {
        // Roundoff moves the offsets by ~1e-18 while the weights are still zero.
        let full = crate::data::make_synthetic(10, 10, 200, 5.0, 1).unwrap();
        let (ds, _) = crate::data::split(&full, crate::data::SplitRule::Fraction(0.5), 0).unwrap();
        let eta = 1.0;
        let rep = solve_constrained_fbpd(&ds, &RegularizerSpec::l1(), &SolverConfig::new(eta).max_iter(50)).unwrap();
        assert!(!rep.converged);
        assert!(rep.primal_objective > 0.0);
    }

    #[test]
    fn constrained_run_respects_budget() {
        let ds = tiny();
        let eta = 1.5;
        let rep = solve_constrained_fbpd(
            &ds,
            &RegularizerSpec::l1(),
            &SolverConfig::new(eta).rel_tol(1e-9).max_iter(200_000),
        )
        .unwrap();
        assert!(rep.converged);
        assert!(rep.hinge_sum <= eta + 1e-6 * eta.max(1.0), "{}", rep.hinge_sum);
        let dual = rep.dual.unwrap();
        assert_eq!(dual.y.as_slice().len(), 15);
        assert_eq!(dual.zeta.unwrap().len(), 5);
        assert_eq!(dual.xi.unwrap().len(), 5);
    }

    #[test]
    fn separable_data_is_fitted() {
        let ds = make_synthetic(3, 4, 30, 12.0, 4).unwrap();
        let rep = solve_regularized_fbpd(
            &ds,
            &RegularizerSpec::squared_l2(),
            &SolverConfig::new(100.0).rel_tol(1e-8),
        )
        .unwrap();
        assert!(rep.hinge_sum < 1e-6, "{}", rep.hinge_sum);
        assert_eq!(count_errors(&rep.solution, &ds).unwrap(), 0);
    }

    #[test]
    fn every_solver_is_offset_shift_invariant() {
        let ds = tiny();
        for kind in SolverKind::ALL {
            for spec in specs(2) {
                let param = kind.param_from_alpha(0.5, ds.len());
                let rep = kind
                    .solve(&ds, &spec, &SolverConfig::new(param).max_iter(3000))
                    .unwrap();
                let mut shifted = rep.solution.clone();
                for c in 0..3 {
                    shifted.set_offset(c, rep.solution.offset(c) + 2.5);
                }
                for s in ds.samples() {
                    let scores: Vec<f64> = (0..3).map(|c| rep.solution.score(c, &s.features)).collect();
                    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let gap = scores
                        .iter()
                        .filter(|&&v| v < best)
                        .fold(f64::INFINITY, |a, &v| a.min(best - v));
                    if gap > 1e-9 {
                        assert_eq!(
                            predict(&shifted, &s.features).unwrap(),
                            predict(&rep.solution, &s.features).unwrap(),
                            "{kind} {}",
                            spec.kind
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn residual_decreases_on_average() {
        let ds = tiny();
        let rep = solve_regularized_fbpd(
            &ds,
            &RegularizerSpec::squared_l2(),
            &SolverConfig::new(1.0)
                .rel_tol(1e-10)
                .max_iter(5000)
                .record_history(true),
        )
        .unwrap();
        assert!(rep.history.len() >= 100);
        assert!(windowed_nonincreasing(&rep.history, 50, 0.1));
    }

    #[test]
    fn windowed_check() {
        let rec = |r: f64| IterRecord {
            iteration: 0,
            objective: 0.0,
            rel_change: r,
            elapsed_secs: 0.0,
            reference_distance: None,
        };
        let down: Vec<IterRecord> = (0..10).map(|i| rec(1.0 / (i + 1) as f64)).collect();
        assert!(windowed_nonincreasing(&down, 2, 0.0));
        let up: Vec<IterRecord> = (0..10).map(|i| rec(i as f64)).collect();
        assert!(!windowed_nonincreasing(&up, 2, 0.1));
        assert!(windowed_nonincreasing(&up, 0, 0.0));
    }

    #[test]
    fn history_and_reference_distance() {
        let ds = tiny();
        let reference = solve_square_fista(&ds, &RegularizerSpec::l1(), &SolverConfig::new(1.0).rel_tol(1e-12))
            .unwrap()
            .solution;
        let rep = solve_square_fista(
            &ds,
            &RegularizerSpec::l1(),
            &SolverConfig::new(1.0).reference(reference),
        )
        .unwrap();
        let first = rep.history.first().unwrap().reference_distance.unwrap();
        let last = rep.history.last().unwrap().reference_distance.unwrap();
        assert!(last <= first);
        assert_eq!(rep.history.len(), rep.iterations);
    }

    #[test]
    fn one_vs_all_single_class() {
        let ds = Dataset::new(
            vec![
                Sample::unit(Features::Dense(vec![1.0]), 0),
                Sample::unit(Features::Dense(vec![-1.0]), 0),
            ],
            1,
            1,
        )
        .unwrap();
        let rep = solve_one_vs_all(
            &ds,
            &RegularizerSpec::squared_l2(),
            &SolverConfig::new(10.0).rel_tol(1e-12),
        )
        .unwrap();
        // Both labels are +1, so any offset b >= 1 with w = 0 is optimal.
        let (w, b) = (rep.solution.weights(0)[0], rep.solution.offset(0));
        assert!(w.abs() < 1e-6, "{w}");
        assert!(b >= 1.0 - 1e-6, "{b}");
        let (loss, _) = one_vs_all_loss(rep.solution.block(0), &ds, 0, 10.0).unwrap();
        assert!(loss < 1e-10);
    }
}
