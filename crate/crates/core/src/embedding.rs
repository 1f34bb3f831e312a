//! Vector-space primitives: normalization, cosine similarity, tempered
//! softmax and per-class centroids over frozen visual embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as the zero vector.
pub const MIN_NORM: f64 = 1e-12;

/// Allowed deviation of a stored unit embedding's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Pre-normalization embedding as produced by a frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbedding(Vec<f64>);

impl RawEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// A point on the unit hypersphere.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Wraps `values`, checking the unit-norm invariant.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::NotUnitNorm { norm: n });
        }
        Ok(Self(values))
    }

    /// Standard basis vector `e_axis` in `dim` dimensions.
    pub fn axis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Softmax temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self(gamma))
        } else {
            Err(Error::InvalidTemperature(gamma))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Frozen embeddings of one domain. Sources carry labels, the target does not.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    domain_id: String,
    raw: Vec<RawEmbedding>,
    unit: Vec<UnitEmbedding>,
    labels: Option<Vec<usize>>,
}

impl DomainDataset {
    /// Builds a dataset, normalizing every raw embedding. All embeddings must
    /// share one dimension and every label must be below `classes`.
    pub fn new(
        domain_id: impl Into<String>,
        raw: Vec<RawEmbedding>,
        labels: Option<Vec<usize>>,
        classes: usize,
    ) -> Result<Self> {
        let dim = raw.first().map(RawEmbedding::dim).unwrap_or(0);
        if let Some(bad) = raw.iter().find(|r| r.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != raw.len() {
                return Err(Error::DimensionMismatch {
                    expected: raw.len(),
                    found: labels.len(),
                });
            }
            if let Some(&index) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::ClassOutOfRange { index, classes });
            }
        }
        let unit = raw.iter().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domain_id: domain_id.into(),
            raw,
            unit,
            labels,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn raw(&self) -> &[RawEmbedding] {
        &self.raw
    }

    pub fn unit(&self) -> &[UnitEmbedding] {
        &self.unit
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.raw.first().map(RawEmbedding::dim).unwrap_or(0)
    }

    /// Same embeddings with the labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Concatenates labeled domains into one, as in the source-combined setting.
    pub fn merge(domain_id: impl Into<String>, parts: &[DomainDataset], classes: usize) -> Result<Self> {
        let mut raw = Vec::new();
        let mut labels = Vec::new();
        for part in parts {
            raw.extend(part.raw.iter().cloned());
            match part.labels() {
                Some(l) => labels.extend_from_slice(l),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "cannot merge unlabeled domain {}",
                        part.domain_id
                    )))
                }
            }
        }
        Self::new(domain_id, raw, Some(labels), classes)
    }
}

/// Per-domain, per-class means of raw embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidTable {
    domains: usize,
    classes: usize,
    cells: Vec<Option<RawEmbedding>>,
}

impl CentroidTable {
    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Centroid of class `class` in domain `domain`, or `None` when the domain
    /// has no sample of that class.
    pub fn get(&self, domain: usize, class: usize) -> Option<&RawEmbedding> {
        self.cells
            .get(domain * self.classes + class)
            .and_then(Option::as_ref)
    }

    /// Reorders domains so that row `i` of the result is row `order[i]` of `self`.
    pub fn permute_domains(&self, order: &[usize]) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        for &i in order {
            cells.extend_from_slice(&self.cells[i * self.classes..(i + 1) * self.classes]);
        }
        Self {
            domains: order.len(),
            classes: self.classes,
            cells,
        }
    }
}

pub fn l2_normalize(v: &RawEmbedding) -> Result<UnitEmbedding> {
    normalize_slice(v.values())
}

pub fn normalize_slice(v: &[f64]) -> Result<UnitEmbedding> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(UnitEmbedding(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &UnitEmbedding, b: &UnitEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(a.values(), b.values()).clamp(-1.0, 1.0))
}

/// `softmax(logits / gamma)`, evaluated with the maximum subtracted first.
pub fn tempered_softmax(logits: &[f64], gamma: Temperature) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / gamma.value()).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class centroids of the raw embeddings of each labeled source domain.
pub fn compute_centroids(sources: &[DomainDataset], classes: usize) -> CentroidTable {
    let mut cells = Vec::with_capacity(sources.len() * classes);
    for domain in sources {
        let dim = domain.dim();
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        if let Some(labels) = domain.labels() {
            for (raw, &label) in domain.raw().iter().zip(labels) {
                counts[label] += 1;
                for (s, v) in sums[label].iter_mut().zip(raw.values()) {
                    *s += v;
                }
            }
        }
        for (sum, count) in sums.into_iter().zip(counts) {
            cells.push((count > 0).then(|| {
                RawEmbedding(sum.into_iter().map(|s| s / count as f64).collect())
            }));
        }
    }
    CentroidTable {
        domains: sources.len(),
        classes,
        cells,
    }
}
