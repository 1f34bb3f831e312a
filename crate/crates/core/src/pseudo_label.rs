//! Zero-shot scoring and source-enhanced soft pseudo-labels for the target
//! domain.

use serde::{Deserialize, Serialize};

use crate::embedding::{
    argmax, cosine_similarity, l2_normalize, tempered_softmax, CentroidTable, DomainDataset,
    RawEmbedding, Temperature, UnitEmbedding,
};
use crate::error::{Error, Result};

/// Distance used to weight source domains per class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMetric {
    /// Euclidean distance between raw embedding and raw centroid.
    #[default]
    L2,
    /// One minus the cosine of the normalized embedding and centroid.
    Cosine,
    /// Equal weight for every domain.
    Uniform,
}

/// Sign of the distance inside the softmax over domains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSign {
    /// `exp(-dist)`: nearer domains weigh more.
    #[default]
    Softmin,
    /// `exp(+dist)`, the literal printed form.
    SoftmaxPaper,
}

/// `w[i][k]`: weight of source domain `i` for class `k`. Each class column
/// sums to one over domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassWeights {
    domains: usize,
    classes: usize,
    w: Vec<f64>,
}

impl DomainClassWeights {
    pub fn uniform(domains: usize, classes: usize) -> Self {
        Self {
            domains,
            classes,
            w: vec![1.0 / domains as f64; domains * classes],
        }
    }

    pub fn get(&self, domain: usize, class: usize) -> f64 {
        self.w[domain * self.classes + class]
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.domains).map(|i| self.get(i, class)).collect()
    }
}

/// A class distribution for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "soft label is not on the simplex (sum = {sum})"
            )));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(classes: usize, k: usize) -> Self {
        let mut p = vec![0.0; classes];
        p[k] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

fn similarities(z: &UnitEmbedding, table: &[UnitEmbedding]) -> Result<Vec<f64>> {
    table.iter().map(|t| cosine_similarity(z, t)).collect()
}

pub fn zero_shot_probs(z: &UnitEmbedding, table: &[UnitEmbedding], gamma: Temperature) -> Result<SoftLabel> {
    Ok(SoftLabel(tempered_softmax(&similarities(z, table)?, gamma)?))
}

/// Most probable class; ties go to the smallest index.
///
/// The softmax is strictly monotone, so this is the argmax of the raw
/// similarities for every temperature; scoring them directly keeps exp()
/// rounding from merging near-ties.
pub fn zero_shot_predict(z: &UnitEmbedding, table: &[UnitEmbedding], _gamma: Temperature) -> Result<usize> {
    if table.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(argmax(&similarities(z, table)?))
}

/// Softmax over source domains of the (signed) distance from `z_pre` to each
/// domain's class centroid.
pub fn domain_class_weights(
    z_pre: &RawEmbedding,
    centroids: &CentroidTable,
    metric: WeightMetric,
    sign: WeightSign,
) -> Result<DomainClassWeights> {
    let domains = centroids.domains();
    let classes = centroids.classes();
    if domains == 0 {
        return Err(Error::InvalidConfig("no source domains".into()));
    }
    if metric == WeightMetric::Uniform {
        return Ok(DomainClassWeights::uniform(domains, classes));
    }
    let z_unit = if metric == WeightMetric::Cosine {
        Some(l2_normalize(z_pre)?)
    } else {
        None
    };
    let mut w = vec![0.0; domains * classes];
    let mut logits = vec![0.0; domains];
    for k in 0..classes {
        for (i, logit) in logits.iter_mut().enumerate() {
            let c = centroids
                .get(i, k)
                .ok_or(Error::MissingCentroid { domain: i, class: k })?;
            if c.dim() != z_pre.dim() {
                return Err(Error::DimensionMismatch {
                    expected: z_pre.dim(),
                    found: c.dim(),
                });
            }
            let dist = match &z_unit {
                None => z_pre
                    .values()
                    .iter()
                    .zip(c.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                Some(z) => 1.0 - cosine_similarity(z, &l2_normalize(c)?)?,
            };
            *logit = match sign {
                WeightSign::Softmin => -dist,
                WeightSign::SoftmaxPaper => dist,
            };
        }
        let col = tempered_softmax(&logits, Temperature::new(1.0)?)?;
        for (i, p) in col.into_iter().enumerate() {
            w[i * classes + k] = p;
        }
    }
    Ok(DomainClassWeights { domains, classes, w })
}

/// `1/2 <z, base_k> + 1/2 sum_i w[i][k] <z, source_i_k>`.
pub fn enhanced_similarity(
    z: &UnitEmbedding,
    k: usize,
    base_table: &[UnitEmbedding],
    source_tables: &[Vec<UnitEmbedding>],
    w: &DomainClassWeights,
) -> Result<f64> {
    if source_tables.len() != w.domains() {
        return Err(Error::DimensionMismatch {
            expected: w.domains(),
            found: source_tables.len(),
        });
    }
    let base = base_table.get(k).ok_or(Error::ClassOutOfRange {
        index: k,
        classes: base_table.len(),
    })?;
    let mut weighted = 0.0;
    for (i, table) in source_tables.iter().enumerate() {
        let tau = table.get(k).ok_or(Error::ClassOutOfRange {
            index: k,
            classes: table.len(),
        })?;
        weighted += w.get(i, k) * cosine_similarity(z, tau)?;
    }
    Ok(0.5 * cosine_similarity(z, base)? + 0.5 * weighted)
}

/// How source domains are weighted when enhancing pseudo-labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub metric: WeightMetric,
    pub sign: WeightSign,
}

/// Soft label from the tempered softmax of enhanced similarities. No
/// confidence threshold is applied.
pub fn enhanced_pseudo_label(
    z: &UnitEmbedding,
    z_pre: &RawEmbedding,
    base_table: &[UnitEmbedding],
    source_tables: &[Vec<UnitEmbedding>],
    centroids: &CentroidTable,
    gamma: Temperature,
    scheme: WeightScheme,
) -> Result<SoftLabel> {
    let w = domain_class_weights(z_pre, centroids, scheme.metric, scheme.sign)?;
    let sims = (0..base_table.len())
        .map(|k| enhanced_similarity(z, k, base_table, source_tables, &w))
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftLabel(tempered_softmax(&sims, gamma)?))
}

/// Zero-shot class for samples whose top probability reaches `alpha`,
/// `None` otherwise.
pub fn hard_threshold_labels(
    target: &DomainDataset,
    base_table: &[UnitEmbedding],
    gamma: Temperature,
    alpha: f64,
) -> Result<Vec<Option<usize>>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    target
        .unit()
        .iter()
        .map(|z| {
            let p = zero_shot_probs(z, base_table, gamma)?;
            let k = p.argmax();
            Ok((p.probs()[k] >= alpha).then_some(k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{compute_centroids, normalize_slice};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(x: f64) -> Temperature {
        Temperature::new(x).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> UnitEmbedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_slice(&v).unwrap()
    }

    fn raw(v: Vec<f64>) -> RawEmbedding {
        RawEmbedding::new(v).unwrap()
    }

    /// One-domain centroid table with the given class centroids.
    fn centroid_table(domains: &[Vec<Vec<f64>>]) -> CentroidTable {
        let classes = domains[0].len();
        let sets: Vec<DomainDataset> = domains
            .iter()
            .enumerate()
            .map(|(i, cs)| {
                DomainDataset::new(
                    format!("s{i}"),
                    cs.iter().cloned().map(raw).collect(),
                    Some((0..classes).collect()),
                    classes,
                )
                .unwrap()
            })
            .collect();
        compute_centroids(&sets, classes)
    }

    #[test]
    fn zero_shot_picks_matching_entry() {
        let table: Vec<UnitEmbedding> = (0..4).map(|k| UnitEmbedding::axis(4, k)).collect();
        let z = UnitEmbedding::axis(4, 2);
        assert_eq!(zero_shot_probs(&z, &table, g(1.0)).unwrap().argmax(), 2);
        assert_eq!(zero_shot_predict(&z, &table, g(1.0)).unwrap(), 2);
    }

    #[test]
    fn zero_shot_identical_table_is_uniform() {
        let e = UnitEmbedding::axis(3, 0);
        let table = vec![e.clone(), e.clone(), e.clone(), e];
        let p = zero_shot_probs(&UnitEmbedding::axis(3, 1), &table, g(0.01)).unwrap();
        assert!(p.probs().iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_shot_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let table: Vec<UnitEmbedding> = (0..6).map(|_| random_unit(&mut rng, 8)).collect();
            let z = random_unit(&mut rng, 8);
            let gamma = rng.random_range(0.05..2.0);
            let p = zero_shot_probs(&z, &table, g(gamma)).unwrap();
            let exps: Vec<f64> = table
                .iter()
                .map(|t| {
                    let c: f64 = z.values().iter().zip(t.values()).map(|(a, b)| a * b).sum();
                    (c / gamma).exp()
                })
                .collect();
            let total: f64 = exps.iter().sum();
            for (a, e) in p.probs().iter().zip(&exps) {
                assert!((a - e / total).abs() <= 1e-12);
            }
            let oracle = (0..6).fold(0, |b, i| if exps[i] > exps[b] { i } else { b });
            assert_eq!(zero_shot_predict(&z, &table, g(gamma)).unwrap(), oracle);
        }
    }

    #[test]
    fn zero_shot_tie_goes_to_first_and_ignores_gamma() {
        let table = vec![
            normalize_slice(&[1.0, 1.0, 0.0]).unwrap(),
            normalize_slice(&[1.0, -1.0, 0.0]).unwrap(),
        ];
        let z = UnitEmbedding::axis(3, 0);
        for gamma in [0.01, 1.0, 100.0] {
            assert_eq!(zero_shot_predict(&z, &table, g(gamma)).unwrap(), 0);
        }
    }

    #[test]
    fn single_domain_weights_are_one() {
        let c = centroid_table(&[vec![vec![1.0, 0.0], vec![0.0, 3.0]]]);
        for metric in [WeightMetric::L2, WeightMetric::Cosine, WeightMetric::Uniform] {
            for sign in [WeightSign::Softmin, WeightSign::SoftmaxPaper] {
                let w = domain_class_weights(&raw(vec![0.3, 0.2]), &c, metric, sign).unwrap();
                assert_eq!(w.get(0, 0), 1.0);
                assert_eq!(w.get(0, 1), 1.0);
            }
        }
    }

    #[test]
    fn equal_distances_split_evenly() {
        let c = centroid_table(&[vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]]);
        let w = domain_class_weights(&raw(vec![0.0, 2.0]), &c, WeightMetric::L2, WeightSign::Softmin).unwrap();
        assert!((w.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((w.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmin_closed_form() {
        let ln3 = 3f64.ln();
        let c = centroid_table(&[vec![vec![0.0, 5.0]], vec![vec![ln3, 5.0]]]);
        let w = domain_class_weights(&raw(vec![0.0, 5.0]), &c, WeightMetric::L2, WeightSign::Softmin).unwrap();
        assert!((w.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((w.get(1, 0) - 0.25).abs() < 1e-12);
        let w = domain_class_weights(&raw(vec![0.0, 5.0]), &c, WeightMetric::L2, WeightSign::SoftmaxPaper).unwrap();
        assert!((w.get(0, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn missing_centroid_is_reported() {
        let sets = vec![DomainDataset::new("s", vec![raw(vec![1.0, 0.0])], Some(vec![0]), 2).unwrap()];
        let c = compute_centroids(&sets, 2);
        let err = domain_class_weights(&raw(vec![1.0, 1.0]), &c, WeightMetric::L2, WeightSign::Softmin);
        assert!(matches!(err, Err(Error::MissingCentroid { domain: 0, class: 1 })));
    }

    #[test]
    fn enhanced_similarity_collapses_and_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base: Vec<UnitEmbedding> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
        let src: Vec<UnitEmbedding> = (0..3).map(|_| random_unit(&mut rng, 5)).collect();
        let z = random_unit(&mut rng, 5);
        let w = DomainClassWeights::uniform(2, 3);
        for k in 0..3 {
            let s = enhanced_similarity(&z, k, &base, &[base.clone(), base.clone()], &w).unwrap();
            let c = cosine_similarity(&z, &base[k]).unwrap();
            assert!((s - c).abs() < 1e-15);
        }
        let w1 = DomainClassWeights::uniform(1, 3);
        let s = enhanced_similarity(&z, 1, &base, &[src.clone()], &w1).unwrap();
        let expect = 0.5 * cosine_similarity(&z, &base[1]).unwrap() + 0.5 * cosine_similarity(&z, &src[1]).unwrap();
        assert!((s - expect).abs() < 1e-15);
    }

    #[test]
    fn enhanced_similarity_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let d = 6;
            let base: Vec<UnitEmbedding> = (0..4).map(|_| random_unit(&mut rng, d)).collect();
            let sources: Vec<Vec<UnitEmbedding>> =
                (0..3).map(|_| (0..4).map(|_| random_unit(&mut rng, d)).collect()).collect();
            let cents: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|_| (0..4).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
                .collect();
            let table = centroid_table(&cents);
            let z_pre: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z = normalize_slice(&z_pre).unwrap();
            let w = domain_class_weights(&raw(z_pre.clone()), &table, WeightMetric::L2, WeightSign::Softmin).unwrap();
            for k in 0..4 {
                // oracle: explicit distances and exponentials
                let dists: Vec<f64> = cents
                    .iter()
                    .map(|c| c[k].iter().zip(&z_pre).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let exps: Vec<f64> = dists.iter().map(|x| (-x).exp()).collect();
                let tot: f64 = exps.iter().sum();
                let dotp = |t: &UnitEmbedding| -> f64 { z.values().iter().zip(t.values()).map(|(a, b)| a * b).sum() };
                let mut expect = 0.5 * dotp(&base[k]);
                for i in 0..3 {
                    expect += 0.5 * exps[i] / tot * dotp(&sources[i][k]);
                }
                let got = enhanced_similarity(&z, k, &base, &sources, &w).unwrap();
                assert!((got - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn enhanced_label_follows_dominant_source() {
        // Two classes, one source domain. The base prompt mildly prefers
        // class 0, the source prompt strongly prefers class 1.
        let z = UnitEmbedding::axis(2, 0);
        let base = vec![
            normalize_slice(&[0.6, 0.8]).unwrap(),
            normalize_slice(&[0.5, 0.866_025_403_784_438_6]).unwrap(),
        ];
        let source = vec![vec![
            normalize_slice(&[0.0, 1.0]).unwrap(),
            normalize_slice(&[1.0, 0.0]).unwrap(),
        ]];
        let table = centroid_table(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]]]);
        let gamma = g(0.1);
        let zs = zero_shot_probs(&z, &base, gamma).unwrap();
        assert_eq!(zs.argmax(), 0);
        let y = enhanced_pseudo_label(&z, &raw(vec![1.0, 0.0]), &base, &source, &table, gamma, WeightScheme::default()).unwrap();
        // oracle: 0.5*0.6 + 0.5*0 = 0.3 vs 0.5*0.5 + 0.5*1 = 0.75
        let e0 = (0.3f64 / 0.1).exp();
        let e1 = (0.75f64 / 0.1).exp();
        assert!((y.probs()[1] - e1 / (e0 + e1)).abs() < 1e-12);
        assert_eq!(y.argmax(), 1);
    }

    #[test]
    fn threshold_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table: Vec<UnitEmbedding> = (0..3).map(|_| random_unit(&mut rng, 4)).collect();
        let raws: Vec<RawEmbedding> = (0..40)
            .map(|_| raw((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let target = DomainDataset::new("t", raws, None, 3).unwrap();
        let gamma = g(0.2);
        let all = hard_threshold_labels(&target, &table, gamma, 0.0).unwrap();
        assert!(all.iter().all(Option::is_some));
        let none = hard_threshold_labels(&target, &table, gamma, 1.0).unwrap();
        assert!(none.iter().all(Option::is_none));
        let some = hard_threshold_labels(&target, &table, gamma, 0.6).unwrap();
        for (z, got) in target.unit().iter().zip(&some) {
            let p = zero_shot_probs(z, &table, gamma).unwrap();
            let max = p.probs().iter().cloned().fold(0.0, f64::max);
            assert_eq!(got.is_some(), max >= 0.6);
        }
        assert!(some.iter().any(Option::is_some) && some.iter().any(Option::is_none));
        assert!(hard_threshold_labels(&target, &table, gamma, 1.5).is_err());
    }
}
