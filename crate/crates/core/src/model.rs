//! Domain types shared by the operators, solvers and evaluation code.
//!
//! A model stores `K` class blocks back to back. Each block is the augmented
//! vector `[w_1 .. w_M, b]`: the `M` feature weights followed by the offset.
//! Feature vectors never store the trailing constant 1; every routine that
//! needs the augmented feature vector appends it on the fly.

use std::fmt;

use crate::error::{Error, Result};

/// Stacked parameter vector of a linear multiclass classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelVector {
    classes: usize,
    features: usize,
    data: Vec<f64>,
}

impl ModelVector {
    pub fn zeros(classes: usize, features: usize) -> Self {
        ModelVector {
            classes,
            features,
            data: vec![0.0; classes * (features + 1)],
        }
    }

    /// Builds a model from the flat layout `[x^(1); b^(1); ...; x^(K); b^(K)]`.
    pub fn from_flat(classes: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * (features + 1) {
            return Err(Error::Dimension(format!(
                "flat model of length {} does not match K={} M={}",
                data.len(),
                classes,
                features
            )));
        }
        Ok(ModelVector {
            classes,
            features,
            data,
        })
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn features(&self) -> usize {
        self.features
    }

    /// Length of one augmented class block (`M + 1`).
    #[inline]
    pub fn block_len(&self) -> usize {
        self.features + 1
    }

    /// The augmented block `[x^(k); b^(k)]` for a 0-based class index.
    #[inline]
    pub fn block(&self, class: usize) -> &[f64] {
        let n = self.block_len();
        &self.data[class * n..(class + 1) * n]
    }

    #[inline]
    pub fn block_mut(&mut self, class: usize) -> &mut [f64] {
        let n = self.block_len();
        &mut self.data[class * n..(class + 1) * n]
    }

    #[inline]
    pub fn weights(&self, class: usize) -> &[f64] {
        &self.block(class)[..self.features]
    }

    #[inline]
    pub fn offset(&self, class: usize) -> f64 {
        self.block(class)[self.features]
    }

    pub fn set_offset(&mut self, class: usize, value: f64) {
        let m = self.features;
        self.block_mut(class)[m] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Discriminant value `phi(u)^T x^(k) + b^(k)`.
    #[inline]
    pub fn score(&self, class: usize, features: &Features) -> f64 {
        let block = self.block(class);
        features.dot(&block[..self.features]) + block[self.features]
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ModelVector) -> bool {
        self.classes == other.classes && self.features == other.features
    }
}

/// Euclidean norm of a slice.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Euclidean distance between two equally long slices.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A feature vector `phi(u)`, stored dense or as sorted `(index, value)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Dense(Vec<f64>),
    Sparse {
        dim: usize,
        indices: Vec<usize>,
        values: Vec<f64>,
    },
}

impl Features {
    /// Builds a sparse vector, checking that indices are strictly increasing and in range.
    pub fn sparse(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::Dimension("sparse indices and values differ in length".into()));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(format!(
                    "sparse indices must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(Error::Dimension(format!(
                    "sparse index {last} out of range for dimension {dim}"
                )));
            }
        }
        Ok(Features::Sparse { dim, indices, values })
    }

    pub fn dim(&self) -> usize {
        match self {
            Features::Dense(v) => v.len(),
            Features::Sparse { dim, .. } => *dim,
        }
    }

    /// Dot product with a weight slice of length `dim`.
    #[inline]
    pub fn dot(&self, w: &[f64]) -> f64 {
        match self {
            Features::Dense(v) => v.iter().zip(w).filter(|(a, _)| **a != 0.0).map(|(a, b)| a * b).sum(),
            Features::Sparse { indices, values, .. } => indices.iter().zip(values).map(|(&i, v)| v * w[i]).sum(),
        }
    }

    /// `out += scale * phi`.
    #[inline]
    pub fn add_scaled_to(&self, scale: f64, out: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        match self {
            Features::Dense(v) => {
                for (o, a) in out.iter_mut().zip(v) {
                    if *a != 0.0 {
                        *o += scale * a;
                    }
                }
            }
            Features::Sparse { indices, values, .. } => {
                for (&i, v) in indices.iter().zip(values) {
                    out[i] += scale * v;
                }
            }
        }
    }

    /// Iterator over the stored `(index, value)` pairs; dense vectors skip zeros.
    pub fn nonzeros(&self) -> Box<dyn Iterator<Item = (usize, f64)> + '_> {
        match self {
            Features::Dense(v) => Box::new(v.iter().copied().enumerate().filter(|(_, a)| *a != 0.0)),
            Features::Sparse { indices, values, .. } => Box::new(indices.iter().copied().zip(values.iter().copied())),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.nonzeros().map(|(_, v)| v * v).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            Features::Dense(v) => v.clone(),
            Features::Sparse { dim, indices, values } => {
                let mut out = vec![0.0; *dim];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i] = v;
                }
                out
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nonzeros().all(|(_, v)| v.is_finite())
    }
}

/// One training pair: mapped features, 0-based label and margin `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Features,
    pub label: usize,
    pub margin: f64,
}

impl Sample {
    pub fn new(features: Features, label: usize, margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin must be positive and finite, got {margin}"
            )));
        }
        Ok(Sample {
            features,
            label,
            margin,
        })
    }

    /// Sample with the conventional unit margin.
    pub fn unit(features: Features, label: usize) -> Self {
        Sample {
            features,
            label,
            margin: 1.0,
        }
    }
}

/// A labelled set of `L` samples sharing the feature dimension `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    features: usize,
    classes: usize,
}

impl Dataset {
    /// Validates and wraps samples. Requires at least one sample.
    pub fn new(samples: Vec<Sample>, features: usize, classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidDataset("dataset has no samples".into()));
        }
        Self::with_samples(samples, features, classes)
    }

    /// An empty dataset, e.g. the test side of a split that kept everything for training.
    pub fn empty(features: usize, classes: usize) -> Self {
        Dataset {
            samples: Vec::new(),
            features,
            classes,
        }
    }

    fn with_samples(samples: Vec<Sample>, features: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidDataset("need at least one class".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.dim() != features {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has {} features, expected {}",
                    i + 1,
                    s.features.dim(),
                    features
                )));
            }
            if s.label >= classes {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has label {} but there are only {} classes",
                    i + 1,
                    s.label + 1,
                    classes
                )));
            }
            if !(s.margin > 0.0 && s.margin.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "sample {} has non-positive margin {}",
                    i + 1,
                    s.margin
                )));
            }
            if !s.features.is_finite() {
                return Err(Error::NonFinite(format!("sample {} features", i + 1)));
            }
        }
        Ok(Dataset {
            samples,
            features,
            classes,
        })
    }

    /// Samples selected by index, in the given order. May be empty.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            features: self.features,
            classes: self.classes,
        }
    }

    #[inline]
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[inline]
    pub fn features(&self) -> usize {
        self.features
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sum of the margins, i.e. the hinge sum of the zero model.
    pub fn margin_sum(&self) -> f64 {
        self.samples.iter().map(|s| s.margin).sum()
    }

    pub(crate) fn check_model(&self, x: &ModelVector) -> Result<()> {
        if x.classes() != self.classes || x.features() != self.features {
            return Err(Error::Dimension(format!(
                "model is K={} M={}, dataset is K={} M={}",
                x.classes(),
                x.features(),
                self.classes,
                self.features
            )));
        }
        Ok(())
    }
}

/// How weight groups are formed from feature index sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupMode {
    /// Group `b` of every class vector is a separate group (`K * B` groups).
    PerClass,
    /// Group `b` collects those features across all classes (`B` groups).
    CrossClass,
}

impl fmt::Display for GroupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupMode::PerClass => "per-class",
            GroupMode::CrossClass => "cross-class",
        })
    }
}

/// Partition of the `M` feature indices into groups.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStructure {
    features: usize,
    groups: Vec<Vec<usize>>,
    mode: GroupMode,
}

impl BlockStructure {
    /// Contiguous runs of `size` features; the last run may be shorter.
    pub fn contiguous(features: usize, size: usize, mode: GroupMode) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidBlocks("block size must be positive".into()));
        }
        let groups = (0..features)
            .step_by(size)
            .map(|start| (start..(start + size).min(features)).collect())
            .collect();
        Ok(BlockStructure { features, groups, mode })
    }

    /// Arbitrary groups of 0-based indices; they must partition `0..features`.
    pub fn from_groups(features: usize, groups: Vec<Vec<usize>>, mode: GroupMode) -> Result<Self> {
        let mut seen = vec![false; features];
        for (b, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidBlocks(format!("group {} is empty", b + 1)));
            }
            for &j in g {
                if j >= features {
                    return Err(Error::InvalidBlocks(format!(
                        "index {} out of range for {} features",
                        j + 1,
                        features
                    )));
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(Error::InvalidBlocks(format!(
                        "index {} appears in more than one group",
                        j + 1
                    )));
                }
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidBlocks(format!(
                "index {} is not covered by any group",
                j + 1
            )));
        }
        Ok(BlockStructure { features, groups, mode })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn mode(&self) -> GroupMode {
        self.mode
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn with_mode(&self, mode: GroupMode) -> Self {
        BlockStructure { mode, ..self.clone() }
    }

    /// Groups expressed as indices into a flat [`ModelVector`] with `classes` blocks.
    /// Offsets never appear.
    pub fn flat_groups(&self, classes: usize) -> Vec<Vec<usize>> {
        let stride = self.features + 1;
        match self.mode {
            GroupMode::PerClass => (0..classes)
                .flat_map(|k| {
                    self.groups
                        .iter()
                        .map(move |g| g.iter().map(|&j| k * stride + j).collect())
                })
                .collect(),
            GroupMode::CrossClass => self
                .groups
                .iter()
                .map(|g| {
                    (0..classes)
                        .flat_map(|k| g.iter().map(move |&j| k * stride + j))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Per-sample offset vectors `r_l`: zero at the true class, `mu_l` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginOffsets {
    classes: usize,
    data: Vec<f64>,
}

impl MarginOffsets {
    pub fn sample(&self, l: usize) -> &[f64] {
        &self.data[l * self.classes..(l + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

pub fn make_margin_offsets(dataset: &Dataset) -> MarginOffsets {
    let k = dataset.classes();
    let mut data = Vec::with_capacity(dataset.len() * k);
    for s in dataset.samples() {
        data.extend((0..k).map(|c| if c == s.label { 0.0 } else { s.margin }));
    }
    MarginOffsets { classes: k, data }
}

/// Which sparsity-inducing (or quadratic) penalty is applied to the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    L1,
    L12,
    L1Inf,
    SquaredL2,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::L1 => "l1",
            RegularizerKind::L12 => "l12",
            RegularizerKind::L1Inf => "l1inf",
            RegularizerKind::SquaredL2 => "l2sq",
        }
    }

    pub fn needs_blocks(self) -> bool {
        matches!(self, RegularizerKind::L12 | RegularizerKind::L1Inf)
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RegularizerKind::L1),
            "l12" => Ok(RegularizerKind::L12),
            "l1inf" => Ok(RegularizerKind::L1Inf),
            "l2sq" => Ok(RegularizerKind::SquaredL2),
            other => Err(Error::InvalidArgument(format!("unknown regularizer '{other}'"))),
        }
    }
}

/// Regularizer `g`. Offsets are never penalized.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub blocks: Option<BlockStructure>,
}

impl RegularizerSpec {
    pub fn l1() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::L1,
            blocks: None,
        }
    }

    pub fn squared_l2() -> Self {
        RegularizerSpec {
            kind: RegularizerKind::SquaredL2,
            blocks: None,
        }
    }

    pub fn l12(blocks: BlockStructure) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::L12,
            blocks: Some(blocks),
        }
    }

    pub fn l1inf(blocks: BlockStructure) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::L1Inf,
            blocks: Some(blocks),
        }
    }

    /// Checks that grouped penalties carry blocks over exactly `features` indices.
    pub fn validate(&self, features: usize) -> Result<()> {
        if self.kind.needs_blocks() {
            match &self.blocks {
                None => {
                    return Err(Error::InvalidBlocks(format!(
                        "regularizer {} needs a block structure",
                        self.kind
                    )))
                }
                Some(b) if b.features() != features => {
                    return Err(Error::InvalidBlocks(format!(
                        "blocks cover {} features, model has {}",
                        b.features(),
                        features
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `max_k (y_k + r_k)`, the multiclass hinge of one sample's margin block.
pub fn multiclass_hinge(y: &[f64], r: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("hinge needs at least one class".into()));
    }
    if y.len() != r.len() {
        return Err(Error::Dimension(format!(
            "hinge block lengths differ: {} vs {}",
            y.len(),
            r.len()
        )));
    }
    Ok(max_shifted(y, r))
}

#[inline]
pub(crate) fn max_shifted(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a + b).fold(f64::NEG_INFINITY, f64::max)
}
