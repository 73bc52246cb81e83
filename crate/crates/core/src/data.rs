//! Dataset files, preprocessing, splitting and synthetic data.
//!
//! Labels are 1-based in every file format and 0-based in memory.
//!
//! Dense CSV: one sample per line, `label,f_1,...,f_M`.
//! Sparse svmlight: `label idx:val idx:val ...` with 1-based, strictly
//! increasing indices; absent features are zero and `#` starts a comment.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{BlockStructure, Dataset, Features, GroupMode, Sample};

/// Formats a float with 17 significant digits (round-trips exactly).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_label(path: &Path, line: usize, token: &str) -> Result<usize> {
    let token = token.trim();
    let parsed: Option<i64> = token.trim_start_matches('+').parse::<i64>().ok().or_else(|| {
        token
            .parse::<f64>()
            .ok()
            .filter(|v| v.fract() == 0.0 && v.abs() < 1e15)
            .map(|v| v as i64)
    });
    match parsed {
        Some(v) if v >= 1 => Ok((v - 1) as usize),
        Some(v) => Err(Error::parse(path, line, format!("label {v} is not in 1..K"))),
        None => Err(Error::parse(path, line, format!("label '{token}' is not an integer"))),
    }
}

fn parse_value(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("'{}' is not a number", token.trim())))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value '{}'", token.trim())));
    }
    Ok(v)
}

fn finish_dataset(path: &Path, samples: Vec<Sample>, features: usize, classes: Option<usize>) -> Result<Dataset> {
    if samples.is_empty() {
        return Err(Error::parse(path, 0, "file contains no samples"));
    }
    let max_label = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let classes = match classes {
        Some(k) if k < max_label => {
            return Err(Error::parse(
                path,
                0,
                format!("label {max_label} exceeds the declared {k} classes"),
            ))
        }
        Some(k) => k,
        None => max_label,
    };
    Dataset::new(samples, features, classes)
}

/// Reads a dense CSV file. `classes` defaults to the largest label.
pub fn load_dense_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut samples = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let label = parse_label(path, lineno, cells.next().unwrap_or(""))?;
        let values = cells
            .map(|c| parse_value(path, lineno, c))
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row has {} features, earlier rows have {}", values.len(), w),
                ))
            }
            _ => {}
        }
        samples.push(Sample::unit(Features::Dense(values), label));
    }
    finish_dataset(path, samples, width.unwrap_or(0), classes)
}

pub fn save_dense_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in dataset.samples() {
        let mut line = (s.label + 1).to_string();
        for v in s.features.to_dense() {
            line.push(',');
            line.push_str(&fmt_f64(v));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an svmlight file. `features` defaults to the largest index seen.
pub fn load_sparse_svmlight(
    path: impl AsRef<Path>,
    features: Option<usize>,
    classes: Option<usize>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rows = Vec::new();
    let mut max_index = 0;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = parse_label(path, lineno, tokens.next().unwrap_or(""))?;
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(path, lineno, format!("token '{tok}' is not idx:val")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad feature index '{idx}'")))?;
            if idx == 0 {
                return Err(Error::parse(path, lineno, "feature indices are 1-based"));
            }
            if let Some(&prev) = indices.last() {
                if idx - 1 <= prev {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("feature index {idx} does not increase (previous {})", prev + 1),
                    ));
                }
            }
            if let Some(m) = features {
                if idx > m {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("feature index {idx} exceeds dimension {m}"),
                    ));
                }
            }
            indices.push(idx - 1);
            values.push(parse_value(path, lineno, val)?);
            max_index = max_index.max(idx);
        }
        rows.push((label, indices, values));
    }
    let dim = features.unwrap_or(max_index);
    let samples = rows
        .into_iter()
        .map(|(label, idx, val)| Ok(Sample::unit(Features::sparse(dim, idx, val)?, label)))
        .collect::<Result<Vec<_>>>()?;
    finish_dataset(path, samples, dim, classes)
}

pub fn save_svmlight(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in dataset.samples() {
        let mut line = (s.label + 1).to_string();
        for (i, v) in s.features.nonzeros() {
            line.push_str(&format!(" {}:{}", i + 1, fmt_f64(v)));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a group file: one group per line, 1-based feature indices separated
/// by whitespace or commas.
pub fn load_groups(path: impl AsRef<Path>, features: usize, mode: GroupMode) -> Result<BlockStructure> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut groups = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let group = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| match t.parse::<usize>() {
                Ok(j) if j >= 1 => Ok(j - 1),
                _ => Err(Error::parse(path, i + 1, format!("bad feature index '{t}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    BlockStructure::from_groups(features, groups, mode)
}

/// Per-feature centering and scaling fitted on a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Standard deviation, or 1 for constant features (those are only centered).
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidDataset("cannot standardize an empty dataset".into()));
        }
        let m = dataset.features();
        let n = dataset.len() as f64;
        let mut mean = vec![0.0; m];
        for s in dataset.samples() {
            for (j, v) in s.features.nonzeros() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for s in dataset.samples() {
            let dense = s.features.to_dense();
            for ((acc, v), mu) in var.iter_mut().zip(&dense).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    /// Applies the stored statistics; the result is dense.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.features() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} features, dataset has {}",
                self.mean.len(),
                dataset.features()
            )));
        }
        let samples: Vec<Sample> = dataset
            .samples()
            .iter()
            .map(|s| {
                let dense = s
                    .features
                    .to_dense()
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, mu), sd)| (v - mu) / sd)
                    .collect();
                Sample {
                    features: Features::Dense(dense),
                    label: s.label,
                    margin: s.margin,
                }
            })
            .collect();
        if samples.is_empty() {
            return Ok(Dataset::empty(dataset.features(), dataset.classes()));
        }
        Dataset::new(samples, dataset.features(), dataset.classes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("# feature standardization\nfeatures {}\n", self.mean.len());
        for (mu, sd) in self.mean.iter().zip(&self.scale) {
            out.push_str(&format!("{} {}\n", fmt_f64(*mu), fmt_f64(*sd)));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (n0, head) = lines.next().ok_or_else(|| Error::parse(path, 0, "empty stats file"))?;
        let m: usize = head
            .strip_prefix("features ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, n0 + 1, "expected 'features <M>'"))?;
        let mut mean = Vec::with_capacity(m);
        let mut scale = Vec::with_capacity(m);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(path, i + 1, "expected '<mean> <scale>'"));
            };
            mean.push(parse_value(path, i + 1, a)?);
            scale.push(parse_value(path, i + 1, b)?);
        }
        if mean.len() != m {
            return Err(Error::parse(
                path,
                0,
                format!("expected {m} rows, found {}", mean.len()),
            ));
        }
        Ok(Standardizer { mean, scale })
    }
}

/// Fits on `dataset` and returns the standardized copy together with the statistics.
pub fn standardize(dataset: &Dataset) -> Result<(Dataset, Standardizer)> {
    let stats = Standardizer::fit(dataset)?;
    Ok((stats.apply(dataset)?, stats))
}

/// Gaussian clusters: class `k` is centered at `separation * c_k` with `c_k`
/// a random unit direction, plus unit-variance noise. Labels cycle through
/// the classes so every class gets `L/K` (+1) samples.
pub fn make_synthetic(classes: usize, features: usize, samples: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || features == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs K, M and L all positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir: Vec<f64> = (0..features).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::model::norm2(&dir).max(1e-12);
            dir.iter().map(|v| separation * v / n).collect()
        })
        .collect();
    let data = (0..samples)
        .map(|i| {
            let label = i % classes;
            let f = centers[label]
                .iter()
                .map(|c| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    c + noise
                })
                .collect();
            Sample::unit(Features::Dense(f), label)
        })
        .collect();
    Dataset::new(data, features, classes)
}

/// How many samples go to the training side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitRule {
    /// Fraction of every class (rounded to nearest).
    Fraction(f64),
    /// Exactly this many samples of every class.
    PerClass(usize),
}

/// Stratified random split. Both sides keep the original sample order.
pub fn split(dataset: &Dataset, rule: SplitRule, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset, rule, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Index version of [`split`]; both index lists are sorted.
pub fn split_indices(dataset: &Dataset, rule: SplitRule, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if let SplitRule::Fraction(f) = rule {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!(
                "train fraction must lie in [0, 1], got {f}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); dataset.classes()];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut in_train = vec![false; dataset.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        let take = match rule {
            SplitRule::Fraction(f) => (f * members.len() as f64).round() as usize,
            SplitRule::PerClass(n) => {
                if n > members.len() {
                    return Err(Error::InvalidArgument(format!(
                        "class {} has {} samples, {} requested",
                        c + 1,
                        members.len(),
                        n
                    )));
                }
                n
            }
        };
        members.shuffle(&mut rng);
        for &i in &members[..take.min(members.len())] {
            in_train[i] = true;
        }
    }
    let train = (0..dataset.len()).filter(|&i| in_train[i]).collect();
    let test = (0..dataset.len()).filter(|&i| !in_train[i]).collect();
    Ok((train, test))
}
