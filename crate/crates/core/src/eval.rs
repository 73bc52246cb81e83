//! Prediction, error counting, sparsity and objective values.

use crate::error::{Error, Result};
use crate::linop::apply_t_into;
use crate::model::{make_margin_offsets, max_shifted, Dataset, Features, MarginOffsets, ModelVector, RegularizerSpec};
use crate::prox::regularizer_value;

/// Magnitude above which a coefficient counts as non-zero.
pub const DEFAULT_NONZERO_THRESHOLD: f64 = 1e-5;

/// Class with the largest discriminant value (0-based). Ties go to the lowest index.
pub fn predict(model: &ModelVector, features: &Features) -> Result<usize> {
    if features.dim() != model.features() {
        return Err(Error::Dimension(format!(
            "features have dimension {}, model expects {}",
            features.dim(),
            model.features()
        )));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..model.classes() {
        let s = model.score(c, features);
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    Ok(best)
}

/// Per-class count of weights with `|w| > threshold`. Offsets are excluded.
pub fn count_nonzeros(model: &ModelVector, threshold: f64) -> Vec<usize> {
    (0..model.classes())
        .map(|c| model.weights(c).iter().filter(|w| w.abs() > threshold).count())
        .collect()
}

/// Number of groups of `spec` that contain at least one weight above `threshold`.
/// `None` for ungrouped regularizers.
pub fn count_nonzero_groups(model: &ModelVector, spec: &RegularizerSpec, threshold: f64) -> Option<usize> {
    let blocks = spec.blocks.as_ref().filter(|_| spec.kind.needs_blocks())?;
    let x = model.as_slice();
    Some(
        blocks
            .flat_groups(model.classes())
            .iter()
            .filter(|g| g.iter().any(|&i| x[i].abs() > threshold))
            .count(),
    )
}

/// `sum_l max_k ((T x)_{lk} + r_{lk})` from precomputed margins `T x`.
pub(crate) fn hinge_sum_of(tx: &[f64], offsets: &MarginOffsets) -> f64 {
    let k = offsets.classes();
    tx.chunks_exact(k)
        .zip(offsets.as_slice().chunks_exact(k))
        .map(|(y, r)| max_shifted(y, r))
        .sum()
}

/// Sum of multiclass hinge losses of `model` on `dataset`.
pub fn hinge_sum(model: &ModelVector, dataset: &Dataset) -> Result<f64> {
    dataset.check_model(model)?;
    let mut tx = vec![0.0; dataset.len() * dataset.classes()];
    apply_t_into(model, dataset, &mut tx);
    Ok(hinge_sum_of(&tx, &make_margin_offsets(dataset)))
}

/// How the hinge term enters the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectiveMode {
    /// `g + lambda * hinge_sum`.
    Regularized { lambda: f64 },
    /// `g` subject to `hinge_sum <= eta`.
    Constrained { eta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValues {
    pub regularizer: f64,
    pub hinge_sum: f64,
    /// Regularized: `g + lambda * hinge_sum`. Constrained: `g`.
    pub total: f64,
    /// Constrained: `max(0, hinge_sum - eta)`. Regularized: 0.
    pub violation: f64,
}

pub fn objective_value(
    model: &ModelVector,
    dataset: &Dataset,
    spec: &RegularizerSpec,
    mode: ObjectiveMode,
) -> Result<ObjectiveValues> {
    let regularizer = regularizer_value(model, spec)?;
    let hinge = hinge_sum(model, dataset)?;
    Ok(match mode {
        ObjectiveMode::Regularized { lambda } => ObjectiveValues {
            regularizer,
            hinge_sum: hinge,
            total: regularizer + lambda * hinge,
            violation: 0.0,
        },
        ObjectiveMode::Constrained { eta } => ObjectiveValues {
            regularizer,
            hinge_sum: hinge,
            total: regularizer,
            violation: (hinge - eta).max(0.0),
        },
    })
}

/// Test-set summary of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub error_count: usize,
    pub test_size: usize,
    pub error_rate: f64,
    pub nonzeros_per_class: Vec<usize>,
    pub nonzero_groups: Option<usize>,
    pub objective: ObjectiveValues,
}

impl EvalReport {
    pub fn total_nonzeros(&self) -> usize {
        self.nonzeros_per_class.iter().sum()
    }
}

pub fn count_errors(model: &ModelVector, dataset: &Dataset) -> Result<usize> {
    dataset.check_model(model)?;
    let mut errors = 0;
    for s in dataset.samples() {
        if predict(model, &s.features)? != s.label {
            errors += 1;
        }
    }
    Ok(errors)
}

pub fn evaluate(
    model: &ModelVector,
    dataset: &Dataset,
    spec: &RegularizerSpec,
    mode: ObjectiveMode,
    threshold: f64,
) -> Result<EvalReport> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "nonzero threshold must be non-negative, got {threshold}"
        )));
    }
    let error_count = count_errors(model, dataset)?;
    let test_size = dataset.len();
    Ok(EvalReport {
        error_count,
        test_size,
        error_rate: if test_size == 0 {
            0.0
        } else {
            error_count as f64 / test_size as f64
        },
        nonzeros_per_class: count_nonzeros(model, threshold),
        nonzero_groups: count_nonzero_groups(model, spec, threshold),
        objective: objective_value(model, dataset, spec, mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockStructure, GroupMode, Sample};
    use crate::prox::prox_regularizer;
    use proptest::prelude::*;

    #[test]
    fn predict_tie_rule_and_offsets() {
        let f = Features::Dense(vec![1.0, -2.0]);
        assert_eq!(predict(&ModelVector::zeros(3, 2), &f).unwrap(), 0);
        let mut x = ModelVector::zeros(3, 2);
        x.set_offset(1, 1.0);
        assert_eq!(predict(&x, &f).unwrap(), 1);
        assert!(predict(&x, &Features::Dense(vec![1.0])).is_err());
    }

    #[test]
    fn nonzero_counts() {
        assert_eq!(
            count_nonzeros(&ModelVector::zeros(3, 4), DEFAULT_NONZERO_THRESHOLD),
            vec![0, 0, 0]
        );
        let x = ModelVector::from_flat(2, 2, vec![0.5, -3.0, 9.0, 1e-6, 2.0, 9.0]).unwrap();
        assert_eq!(count_nonzeros(&x, DEFAULT_NONZERO_THRESHOLD), vec![2, 1]);
        let killed = prox_regularizer(&x, &RegularizerSpec::l1(), 3.0).unwrap();
        assert_eq!(count_nonzeros(&killed, 0.0), vec![0, 0]);

        let blocks = BlockStructure::contiguous(2, 1, GroupMode::PerClass).unwrap();
        assert_eq!(
            count_nonzero_groups(&x, &RegularizerSpec::l12(blocks.clone()), 1e-5),
            Some(3)
        );
        let cross = RegularizerSpec::l12(blocks.with_mode(GroupMode::CrossClass));
        assert_eq!(count_nonzero_groups(&x, &cross, 1e-5), Some(2));
        assert_eq!(count_nonzero_groups(&x, &RegularizerSpec::l1(), 1e-5), None);
    }

    fn toy() -> Dataset {
        Dataset::new(
            vec![
                Sample::unit(Features::Dense(vec![1.0, 0.0]), 0),
                Sample::unit(Features::Dense(vec![0.0, 1.0]), 1),
                Sample::unit(Features::Dense(vec![-1.0, -1.0]), 2),
            ],
            2,
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_objective() {
        let ds = toy();
        let v = objective_value(
            &ModelVector::zeros(3, 2),
            &ds,
            &RegularizerSpec::l1(),
            ObjectiveMode::Regularized { lambda: 2.0 },
        )
        .unwrap();
        assert_eq!(v.hinge_sum, 3.0);
        assert_eq!(v.regularizer, 0.0);
        assert_eq!(v.total, 6.0);

        let c = objective_value(
            &ModelVector::zeros(3, 2),
            &ds,
            &RegularizerSpec::l1(),
            ObjectiveMode::Constrained { eta: 1.0 },
        )
        .unwrap();
        assert_eq!(c.violation, 2.0);
    }

    #[test]
    fn evaluate_counts_errors() {
        let ds = toy();
        let r = evaluate(
            &ModelVector::zeros(3, 2),
            &ds,
            &RegularizerSpec::l1(),
            ObjectiveMode::Regularized { lambda: 1.0 },
            DEFAULT_NONZERO_THRESHOLD,
        )
        .unwrap();
        assert_eq!(r.error_count, 2);
        assert_eq!(r.test_size, 3);
        assert!(evaluate(
            &ModelVector::zeros(3, 2),
            &ds,
            &RegularizerSpec::l1(),
            ObjectiveMode::Regularized { lambda: 1.0 },
            -1.0
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn prediction_is_scale_invariant(
            flat in proptest::collection::vec(-3.0f64..3.0, 12),
            f in proptest::collection::vec(-3.0f64..3.0, 3),
            c in 0.01f64..100.0,
            shift in -10.0f64..10.0,
        ) {
            let x = ModelVector::from_flat(3, 3, flat.clone()).unwrap();
            let feats = Features::Dense(f);
            let base = predict(&x, &feats).unwrap();
            let scores: Vec<f64> = (0..3).map(|k| x.score(k, &feats)).collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let runner_up = scores.iter().copied().filter(|&s| s < best).fold(f64::NEG_INFINITY, f64::max);
            // Skip near-ties where rounding of the scaled scores may reorder them.
            prop_assume!(best - runner_up > 1e-9 * (1.0 + best.abs()));
            let scaled = ModelVector::from_flat(3, 3, flat.iter().map(|v| v * c).collect()).unwrap();
            prop_assert_eq!(predict(&scaled, &feats).unwrap(), base);
            let mut shifted = x.clone();
            for k in 0..3 {
                shifted.set_offset(k, x.offset(k) + shift);
            }
            prop_assert_eq!(predict(&shifted, &feats).unwrap(), base);
        }
    }
}
