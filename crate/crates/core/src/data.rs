//! Datasets, synthetic Gaussian blobs, train/validation/test splitting and
//! CSV ingestion.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Radius of the class-centre shell for synthetic blobs. Centres are
/// near-orthogonal directions, so pairwise distances sit around
/// `CENTER_RADIUS · √2` unless `spread` forces them further apart.
pub const CENTER_RADIUS: f64 = 3.0;

/// Minimum pairwise centre distance in units of `spread`.
pub const MIN_CENTER_SEPARATION: f64 = 4.0;

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Data("feature_dim must be positive".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::Shape {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Copies the rows at `indices` into a contiguous feature matrix.
    pub fn gather_features(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    /// A new dataset holding the rows at `indices`, keeping the class count.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.gather_features(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub spread: f64,
}

fn class_centers(spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let dim = spec.feature_dim;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // Gram-Schmidt against earlier directions while there is room.
        if c < dim {
            for d in &dirs {
                let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }

    let mut min_dist = f64::INFINITY;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let d = dirs[i]
                .iter()
                .zip(&dirs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let required = MIN_CENTER_SEPARATION * spec.spread / min_dist.max(1e-12);
    let radius = CENTER_RADIUS.max(required);
    dirs.into_iter()
        .map(|d| d.into_iter().map(|a| a * radius).collect())
        .collect()
}

/// Isotropic Gaussian blobs, `per_class` samples per class, ordered by class.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut RngStream) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::config("data.k", "need at least 2 classes"));
    }
    if spec.per_class < 1 {
        return Err(Error::config("data.per_class", "need at least 1 sample per class"));
    }
    if spec.feature_dim < 2 {
        return Err(Error::config("data.dim", "feature dimension must be at least 2"));
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return Err(Error::config("data.spread", "spread must be positive"));
    }

    let centers = class_centers(spec, rng);
    let n = spec.num_classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &mu in center {
                let z: f64 = StandardNormal.sample(rng);
                features.push(mu + spec.spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, spec.feature_dim, spec.num_classes)
}

/// Relative sizes of the train, validation and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 9,
            validation: 1,
            test: 2,
        }
    }
}

impl SplitRatio {
    fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    /// `(train, validation, test)` sizes for `n` samples: the first two parts
    /// are floored and the test split takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = self.total();
        let train = n * self.train / total;
        let validation = n * self.validation / total;
        (train, validation, n - train - validation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(n_samples: usize, ratio: SplitRatio, rng: &mut RngStream) -> Result<SplitIndices> {
    if ratio.total() == 0 {
        return Err(Error::config("data.split", "split ratio must not be all zero"));
    }
    if n_samples < ratio.total() {
        return Err(Error::Data(format!(
            "{n_samples} samples cannot be split {}:{}:{}",
            ratio.train, ratio.validation, ratio.test
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    rng.shuffle(&mut order);
    let (n_train, n_val, _) = ratio.sizes(n_samples);
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok(SplitIndices {
        train: order,
        validation,
        test,
    })
}

/// Reads `f0,…,f{d-1},label` rows. The class count is `max label + 1`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let ingest = |line: Option<u64>, message: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(None, e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| ingest(Some(1), e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(ingest(Some(1), "need at least one feature column and a label".into()));
    }
    if headers.get(headers.len() - 1) != Some("label") {
        return Err(ingest(Some(1), "last column must be named `label`".into()));
    }
    let dim = headers.len() - 1;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line());
            ingest(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line());
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| ingest(line, format!("feature f{j} `{field}` is not a number")))?;
            features.push(v);
        }
        let raw = &record[dim];
        let y: usize = raw
            .parse()
            .map_err(|_| ingest(line, format!("label `{raw}` is not a nonnegative integer")))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(ingest(None, "no data rows".into()));
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(features, labels, dim, num_classes)
}
