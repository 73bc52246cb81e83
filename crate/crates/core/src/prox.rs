//! Proximity operators and projections.

use crate::error::{Error, Result};
use crate::model::{max_shifted, ModelVector, RegularizerKind, RegularizerSpec};

/// Euclidean projection onto the scaled simplex `{v >= 0 : sum v = radius}`.
///
/// Implementations write into `out`, which has the length of `u`.
pub trait SimplexProjector {
    fn project_into(&self, u: &[f64], radius: f64, out: &mut [f64]);
}

/// Sort-based threshold search, `O(K log K)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SortSimplex;

impl SimplexProjector for SortSimplex {
    fn project_into(&self, u: &[f64], radius: f64, out: &mut [f64]) {
        let mut sorted = u.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let t = simplex_threshold(&sorted, radius);
        for (o, &v) in out.iter_mut().zip(u) {
            *o = (v - t).max(0.0);
        }
    }
}

/// Threshold `t` with `sum max(u_i - t, 0) = radius`, given `u` sorted descending.
fn simplex_threshold(sorted_desc: &[f64], radius: f64) -> f64 {
    let mut cumsum = 0.0;
    let mut t = sorted_desc[0] - radius;
    for (j, &v) in sorted_desc.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if v - candidate > 0.0 {
            t = candidate;
        } else {
            break;
        }
    }
    t
}

fn check_radius(radius: f64, what: &str) -> Result<()> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{what} radius must be positive and finite, got {radius}"
        )));
    }
    Ok(())
}

pub fn project_simplex(u: &[f64], radius: f64) -> Result<Vec<f64>> {
    check_radius(radius, "simplex")?;
    if u.is_empty() {
        return Err(Error::InvalidArgument("cannot project an empty vector".into()));
    }
    let mut out = vec![0.0; u.len()];
    SortSimplex.project_into(u, radius, &mut out);
    Ok(out)
}

/// Prox of `scale * max_k (y_k + r_k)` at `y`, i.e. `y - P_S(y + r)`.
pub fn prox_hinge_max(y: &[f64], r: &[f64], scale: f64) -> Result<Vec<f64>> {
    if y.len() != r.len() {
        return Err(Error::Dimension("prox block lengths differ".into()));
    }
    let shifted: Vec<f64> = y.iter().zip(r).map(|(a, b)| a + b).collect();
    let p = project_simplex(&shifted, scale)?;
    Ok(y.iter().zip(&p).map(|(a, b)| a - b).collect())
}

/// A point of the epigraph of `max_k (. + r_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpiProjResult {
    pub point: Vec<f64>,
    pub height: f64,
}

/// Projection of `(y, zeta)` onto `{(p, theta) : max_k (p_k + r_k) <= theta}`.
pub fn project_epigraph_max(y: &[f64], r: &[f64], height: f64) -> Result<EpiProjResult> {
    if y.len() != r.len() {
        return Err(Error::Dimension("epigraph block lengths differ".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("epigraph block is empty".into()));
    }
    if !height.is_finite() || y.iter().chain(r).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("epigraph projection input".into()));
    }
    let mut point = vec![0.0; y.len()];
    let mut scratch = Vec::with_capacity(y.len());
    let theta = project_epigraph_into(y, r, height, &mut point, &mut scratch);
    Ok(EpiProjResult { point, height: theta })
}

/// Writes the projected point into `point` and returns the projected height.
/// `scratch` is reused for the sorted values.
pub(crate) fn project_epigraph_into(y: &[f64], r: &[f64], zeta: f64, point: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
    if max_shifted(y, r) <= zeta {
        point.copy_from_slice(y);
        return zeta;
    }
    scratch.clear();
    scratch.extend(y.iter().zip(r).map(|(a, b)| a + b));
    scratch.sort_by(f64::total_cmp);
    let theta = epigraph_height(scratch, zeta);
    for ((p, &yk), &rk) in point.iter_mut().zip(y).zip(r) {
        *p = yk.min(theta - rk);
    }
    theta
}

/// Height of the projection, given `nu` sorted ascending.
///
/// Scans `kbar = K+1, K, ..., 1` with a running suffix sum and returns the
/// first `theta` with `nu[kbar-1] < theta <= nu[kbar]` (1-based, with
/// `nu[0] = -inf` and `nu[K+1] = +inf`).
fn epigraph_height(nu: &[f64], zeta: f64) -> f64 {
    let k = nu.len();
    let mut suffix = 0.0;
    let mut best = (f64::INFINITY, zeta);
    for kbar in (1..=k + 1).rev() {
        if kbar <= k {
            suffix += nu[kbar - 1];
        }
        let theta = (zeta + suffix) / (k + 2 - kbar) as f64;
        let lower = if kbar >= 2 { nu[kbar - 2] } else { f64::NEG_INFINITY };
        let upper = if kbar <= k { nu[kbar - 1] } else { f64::INFINITY };
        if lower < theta && theta <= upper {
            return theta;
        }
        // Rounding can push the exact answer just outside its interval; keep
        // the closest candidate as a fallback.
        let miss = (lower - theta).max(theta - upper).max(0.0);
        if miss < best.0 {
            best = (miss, theta);
        }
    }
    best.1
}

/// Projection onto the half-space `{z : sum z <= bound}`.
pub fn project_halfspace_sum(z: &[f64], bound: f64) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("half-space projection of empty vector".into()));
    }
    let mut out = z.to_vec();
    project_halfspace_in_place(&mut out, bound);
    Ok(out)
}

pub(crate) fn project_halfspace_in_place(z: &mut [f64], bound: f64) {
    let total: f64 = z.iter().sum();
    if total > bound {
        let shift = (total - bound) / z.len() as f64;
        z.iter_mut().for_each(|v| *v -= shift);
    }
}

/// Projection onto the l1 ball of the given radius.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    check_radius(radius, "l1 ball")?;
    let mut out = v.to_vec();
    project_l1_ball_in_place(&mut out, radius);
    Ok(out)
}

pub(crate) fn project_l1_ball_in_place(v: &mut [f64], radius: f64) {
    let l1: f64 = v.iter().map(|a| a.abs()).sum();
    if l1 <= radius {
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|a| a.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let t = simplex_threshold(&mags, radius).max(0.0);
    for a in v.iter_mut() {
        let m = (a.abs() - t).max(0.0);
        *a = m.copysign(*a);
    }
}

/// Soft threshold with exact zeros for `|w| <= tau`.
#[inline]
pub fn soft_threshold(w: f64, tau: f64) -> f64 {
    if w > tau {
        w - tau
    } else if w < -tau {
        w + tau
    } else {
        0.0
    }
}

/// Prox of `tau * g`. Offsets are returned unchanged.
pub fn prox_regularizer(x: &ModelVector, spec: &RegularizerSpec, tau: f64) -> Result<ModelVector> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("prox step must be positive, got {tau}")));
    }
    spec.validate(x.features())?;
    let mut out = x.clone();
    RegularizerProx::new(spec, x.classes(), x.features()).apply(&mut out, tau);
    Ok(out)
}

/// Value of `g` at `x` (weights only).
pub fn regularizer_value(x: &ModelVector, spec: &RegularizerSpec) -> Result<f64> {
    spec.validate(x.features())?;
    Ok(RegularizerProx::new(spec, x.classes(), x.features()).value(x))
}

/// Precomputed coordinate groups for repeated prox evaluations inside a solver.
#[derive(Clone, Debug)]
pub(crate) struct RegularizerProx {
    kind: RegularizerKind,
    features: usize,
    groups: Vec<Vec<usize>>,
}

impl RegularizerProx {
    /// `spec` must already be validated against `features`.
    pub(crate) fn new(spec: &RegularizerSpec, classes: usize, features: usize) -> Self {
        let groups = match (&spec.blocks, spec.kind.needs_blocks()) {
            (Some(b), true) => b.flat_groups(classes),
            _ => Vec::new(),
        };
        RegularizerProx {
            kind: spec.kind,
            features,
            groups,
        }
    }

    fn weights_mut<'a>(&self, x: &'a mut [f64]) -> impl Iterator<Item = &'a mut f64> {
        let m = self.features;
        x.chunks_exact_mut(m + 1).flat_map(move |b| b[..m].iter_mut())
    }

    pub(crate) fn apply(&self, x: &mut ModelVector, tau: f64) {
        self.apply_slice(x.as_mut_slice(), tau);
    }

    /// Same as [`apply`](Self::apply) on a flat slice with the model layout.
    pub(crate) fn apply_slice(&self, x: &mut [f64], tau: f64) {
        match self.kind {
            RegularizerKind::L1 => {
                for w in self.weights_mut(x) {
                    *w = soft_threshold(*w, tau);
                }
            }
            RegularizerKind::SquaredL2 => {
                let shrink = 1.0 / (1.0 + 2.0 * tau);
                for w in self.weights_mut(x) {
                    *w *= shrink;
                }
            }
            RegularizerKind::L12 => {
                for g in &self.groups {
                    let n = g.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                    let factor = if n > tau { 1.0 - tau / n } else { 0.0 };
                    for &i in g {
                        x[i] *= factor;
                    }
                }
            }
            RegularizerKind::L1Inf => {
                let mut buf = Vec::new();
                for g in &self.groups {
                    buf.clear();
                    buf.extend(g.iter().map(|&i| x[i]));
                    project_l1_ball_in_place(&mut buf, tau);
                    for (&i, p) in g.iter().zip(&buf) {
                        x[i] -= p;
                    }
                }
            }
        }
    }

    pub(crate) fn value(&self, x: &ModelVector) -> f64 {
        self.value_slice(x.as_slice())
    }

    pub(crate) fn value_slice(&self, x: &[f64]) -> f64 {
        let m = self.features;
        let weights = || x.chunks_exact(m + 1).flat_map(move |b| b[..m].iter());
        match self.kind {
            RegularizerKind::L1 => weights().map(|w| w.abs()).sum(),
            RegularizerKind::SquaredL2 => weights().map(|w| w * w).sum(),
            RegularizerKind::L12 => self
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt())
                .sum(),
            RegularizerKind::L1Inf => self
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| x[i].abs()).fold(0.0, f64::max))
                .sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockStructure, GroupMode};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn simplex_examples() {
        let p = project_simplex(&[2.0, 2.0, 2.0], 1.0).unwrap();
        assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(project_simplex(&[1.0, 0.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(project_simplex(&[0.5, 0.5, 2.0], 1.0).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(project_simplex(&[1.0], 0.0).is_err());
        assert!(project_simplex(&[1.0], -1.0).is_err());
    }

    #[test]
    fn prox_hinge_examples() {
        assert_eq!(prox_hinge_max(&[0.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), vec![0.0, -1.0]);
        let y = [0.3, -1.2, 2.5];
        let p = prox_hinge_max(&y, &[1.0, 0.0, 1.0], 1e-8).unwrap();
        assert!(close(&p, &y, 1e-6));
    }

    #[test]
    fn epigraph_examples() {
        let e = project_epigraph_max(&[0.0, 0.0], &[0.0, 1.0], 2.0).unwrap();
        assert_eq!((e.point, e.height), (vec![0.0, 0.0], 2.0));
        let e = project_epigraph_max(&[3.0], &[0.0], 1.0).unwrap();
        assert_eq!((e.point, e.height), (vec![2.0], 2.0));
        let e = project_epigraph_max(&[0.0, 0.0], &[0.0, 1.0], -1.0).unwrap();
        assert_eq!((e.point, e.height), (vec![0.0, -1.0], 0.0));
        assert!(project_epigraph_max(&[0.0], &[0.0], f64::INFINITY).is_err());
        assert!(project_epigraph_max(&[f64::NAN], &[0.0], 0.0).is_err());
    }

    #[test]
    fn halfspace_examples() {
        assert_eq!(project_halfspace_sum(&[0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_halfspace_sum(&[2.0, 2.0], 2.0).unwrap(), vec![1.0, 1.0]);
        assert!(project_halfspace_sum(&[], 1.0).is_err());
    }

    #[test]
    fn l1_ball_examples() {
        assert_eq!(project_l1_ball(&[0.2, -0.1], 1.0).unwrap(), vec![0.2, -0.1]);
        assert_eq!(project_l1_ball(&[2.0, 1.0], 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(project_l1_ball(&[3.0, 3.0], 6.0).unwrap(), vec![3.0, 3.0]);
        assert_eq!(project_l1_ball(&[3.0, -3.0], 3.0).unwrap(), vec![1.5, -1.5]);
        assert!(project_l1_ball(&[1.0], 0.0).is_err());
    }

    #[test]
    fn regularizer_examples() {
        let x = ModelVector::from_flat(1, 2, vec![3.0, 0.5, 7.0]).unwrap();
        let p = prox_regularizer(&x, &RegularizerSpec::l1(), 1.0).unwrap();
        assert_eq!(p.as_slice(), &[2.0, 0.0, 7.0]);

        let blocks = BlockStructure::contiguous(2, 2, GroupMode::PerClass).unwrap();
        let x = ModelVector::from_flat(1, 2, vec![2.0, 1.0, -4.0]).unwrap();
        let p = prox_regularizer(&x, &RegularizerSpec::l1inf(blocks.clone()), 1.0).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 1.0, -4.0]);

        let x = ModelVector::from_flat(1, 2, vec![1.0, 1.0, 5.0]).unwrap();
        let p = prox_regularizer(&x, &RegularizerSpec::squared_l2(), 0.5).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5, 5.0]);

        let x = ModelVector::from_flat(1, 2, vec![3.0, 4.0, 1.0]).unwrap();
        let p = prox_regularizer(&x, &RegularizerSpec::l12(blocks), 1.0).unwrap();
        assert!(close(p.as_slice(), &[2.4, 3.2, 1.0], 1e-15));
    }

    #[test]
    fn regularizer_errors() {
        let x = ModelVector::zeros(2, 3);
        assert!(prox_regularizer(&x, &RegularizerSpec::l1(), 0.0).is_err());
        let wrong = BlockStructure::contiguous(4, 2, GroupMode::PerClass).unwrap();
        assert!(prox_regularizer(&x, &RegularizerSpec::l12(wrong), 1.0).is_err());
        let missing = RegularizerSpec {
            kind: RegularizerKind::L1Inf,
            blocks: None,
        };
        assert!(prox_regularizer(&x, &missing, 1.0).is_err());
    }

    #[test]
    fn regularizer_values() {
        let blocks = BlockStructure::contiguous(2, 1, GroupMode::CrossClass).unwrap();
        let x = ModelVector::from_flat(2, 2, vec![3.0, -1.0, 9.0, 4.0, 2.0, 9.0]).unwrap();
        assert_eq!(regularizer_value(&x, &RegularizerSpec::l1()).unwrap(), 10.0);
        assert_eq!(regularizer_value(&x, &RegularizerSpec::squared_l2()).unwrap(), 30.0);
        assert_eq!(
            regularizer_value(&x, &RegularizerSpec::l12(blocks.clone())).unwrap(),
            5.0 + 5f64.sqrt()
        );
        assert_eq!(regularizer_value(&x, &RegularizerSpec::l1inf(blocks)).unwrap(), 6.0);
    }

    fn small_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, 1..8)
    }

    proptest! {
        #[test]
        fn simplex_output_is_feasible_and_idempotent(u in small_vec(), lam in 0.1f64..4.0) {
            let p = project_simplex(&u, lam).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - lam).abs() <= 1e-10);
            let q = project_simplex(&p, lam).unwrap();
            prop_assert!(close(&p, &q, 1e-12));
        }

        #[test]
        fn epigraph_membership_and_idempotence(y in small_vec(), zeta in -5.0f64..5.0, mu in 0.1f64..2.0, z in 0usize..8) {
            let z = z % y.len();
            let r: Vec<f64> = (0..y.len()).map(|k| if k == z { 0.0 } else { mu }).collect();
            let e = project_epigraph_max(&y, &r, zeta).unwrap();
            prop_assert!(max_shifted(&e.point, &r) <= e.height + 1e-12);
            let again = project_epigraph_max(&e.point, &r, e.height).unwrap();
            prop_assert!(close(&again.point, &e.point, 1e-12));
            prop_assert!((again.height - e.height).abs() <= 1e-12);
            let inside = max_shifted(&y, &r) <= zeta;
            let unchanged = e.point == y && e.height == zeta;
            prop_assert_eq!(inside, unchanged);
        }

        #[test]
        fn projections_are_nonexpansive(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6), rad in 0.1f64..3.0) {
            let d = crate::model::dist2(&a, &b);
            let pa = project_simplex(&a, rad).unwrap();
            let pb = project_simplex(&b, rad).unwrap();
            prop_assert!(crate::model::dist2(&pa, &pb) <= d + 1e-12);
            let pa = project_l1_ball(&a, rad).unwrap();
            let pb = project_l1_ball(&b, rad).unwrap();
            prop_assert!(crate::model::dist2(&pa, &pb) <= d + 1e-12);
            let pa = project_halfspace_sum(&a, rad).unwrap();
            let pb = project_halfspace_sum(&b, rad).unwrap();
            prop_assert!(crate::model::dist2(&pa, &pb) <= d + 1e-12);
            let r = [0.0, 1.0, 1.0, 1.0, 1.0];
            let ea = project_epigraph_max(&a[..5], &r, a[5]).unwrap();
            let eb = project_epigraph_max(&b[..5], &r, b[5]).unwrap();
            let mut va = ea.point.clone(); va.push(ea.height);
            let mut vb = eb.point.clone(); vb.push(eb.height);
            prop_assert!(crate::model::dist2(&va, &vb) <= d + 1e-12);
        }

        #[test]
        fn l1_prox_gives_exact_zeros(w in proptest::collection::vec(-3.0f64..3.0, 1..10), tau in 0.0f64..3.0) {
            let tau = tau + 1e-9;
            let mut flat = w.clone();
            flat.push(0.7);
            let x = ModelVector::from_flat(1, w.len(), flat).unwrap();
            let p = prox_regularizer(&x, &RegularizerSpec::l1(), tau).unwrap();
            for (orig, out) in w.iter().zip(p.weights(0)) {
                if orig.abs() <= tau {
                    prop_assert_eq!(out.to_bits(), 0.0f64.to_bits());
                }
            }
            prop_assert_eq!(p.offset(0), 0.7);
        }
    }
}
