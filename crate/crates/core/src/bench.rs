//! Evaluation under the inference modes, the ablation driver and the
//! clustering-lemma sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{normalize_slice, DomainDataset, Temperature, UnitEmbedding};
use crate::error::{Error, Result};
use crate::ot::{constrained_clustering_oracle, cost_matrix, exact_ot};
use crate::prompt::{text_embedding_table, Owner, PromptBank, TextEncoder};
use crate::pseudo_label::zero_shot_predict;
use crate::synthetic::{generate_with_retry, Benchmark, SyntheticSpec};
use crate::training::{train, AblationMode, LossBreakdown, TrainConfig, TrainingTask};

/// Which text table scores the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "tau_T")]
    TauT,
    /// Renormalized mean of the source tables.
    #[serde(rename = "tau_S")]
    TauS,
    /// Renormalized mean of the source and target tables.
    #[serde(rename = "tau_avg")]
    TauAvg,
    #[serde(rename = "base")]
    Base,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [Self::TauT, Self::TauS, Self::TauAvg, Self::Base];
}

fn mean_table(tables: &[Vec<UnitEmbedding>]) -> Result<Vec<UnitEmbedding>> {
    let first = tables.first().ok_or(Error::EmptyInput)?;
    (0..first.len())
        .map(|k| {
            let d = first[k].dim();
            let mut acc = vec![0.0; d];
            for t in tables {
                for (a, v) in acc.iter_mut().zip(t[k].values()) {
                    *a += v;
                }
            }
            normalize_slice(&acc)
        })
        .collect()
}

/// Text table used for inference in `mode`.
pub fn inference_table(bank: &PromptBank, enc: &TextEncoder, mode: EvalMode) -> Result<Vec<UnitEmbedding>> {
    let sources = || {
        (0..bank.num_sources())
            .map(|i| text_embedding_table(bank, enc, Owner::Source(i)))
            .collect::<Result<Vec<_>>>()
    };
    match mode {
        EvalMode::TauT => text_embedding_table(bank, enc, Owner::Target),
        EvalMode::Base => text_embedding_table(bank, enc, Owner::Base),
        EvalMode::TauS => mean_table(&sources()?),
        EvalMode::TauAvg => {
            let mut all = sources()?;
            all.push(text_embedding_table(bank, enc, Owner::Target)?);
            mean_table(&all)
        }
    }
}

/// Accuracy in percent of argmax predictions against held-out labels.
pub fn evaluate(
    bank: &PromptBank,
    enc: &TextEncoder,
    target: &DomainDataset,
    labels: &[usize],
    gamma: Temperature,
    mode: EvalMode,
) -> Result<f64> {
    if labels.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            found: labels.len(),
        });
    }
    if target.is_empty() {
        return Err(Error::EmptyInput);
    }
    let table = inference_table(bank, enc, mode)?;
    let mut hits = 0usize;
    for (z, &y) in target.unit().iter().zip(labels) {
        if zero_shot_predict(z, &table, gamma)? == y {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / target.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EvalReport {
    pub accuracy_tau_T: f64,
    pub accuracy_tau_S: f64,
    pub accuracy_tau_avg: f64,
    pub accuracy_zero_shot_base: f64,
}

pub fn evaluate_all(
    bank: &PromptBank,
    enc: &TextEncoder,
    target: &DomainDataset,
    labels: &[usize],
    gamma: Temperature,
) -> Result<EvalReport> {
    let acc = |mode| evaluate(bank, enc, target, labels, gamma, mode);
    Ok(EvalReport {
        accuracy_tau_T: acc(EvalMode::TauT)?,
        accuracy_tau_S: acc(EvalMode::TauS)?,
        accuracy_tau_avg: acc(EvalMode::TauAvg)?,
        accuracy_zero_shot_base: acc(EvalMode::Base)?,
    })
}

impl Benchmark {
    pub fn training_task(&self) -> Result<TrainingTask> {
        TrainingTask::new(
            self.sources.clone(),
            self.target.clone(),
            TextEncoder::new(self.encoder)?,
            self.classes.clone(),
            self.base.clone(),
        )
    }

    /// SHA-256 over every float32 payload, label and frozen token.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut floats = |vals: &[f64]| {
            for v in vals {
                h.update((*v as f32).to_le_bytes());
            }
        };
        for ds in self.sources.iter().chain(std::iter::once(&self.target)) {
            for r in ds.raw() {
                floats(r.values());
            }
        }
        floats(self.classes.0.data());
        floats(self.base.0.data());
        let labels = self
            .sources
            .iter()
            .flat_map(|s| s.labels().unwrap_or(&[]).iter())
            .chain(&self.target_labels);
        for &l in labels {
            h.update((l as u32).to_le_bytes());
        }
        h.update(format!("{:?}", self.encoder).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub data_sha256: String,
    #[serde(flatten)]
    pub report: EvalReport,
    pub final_losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Generator seed actually used, after any fit retries.
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// Seeds tried by the generator before giving up.
pub const GENERATOR_ATTEMPTS: usize = 8;

/// Trains one model per mode on identically generated data and evaluates
/// each in every inference mode.
pub fn run_ablation(spec: &SyntheticSpec, config: &TrainConfig, modes: &[AblationMode]) -> Result<AblationTable> {
    if modes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows = Vec::with_capacity(modes.len());
    let mut seed = spec.seed;
    let mut first_hash: Option<String> = None;
    for &mode in modes {
        // Regenerated per mode so each run is self-contained; the hash check
        // confirms they all saw the same data.
        let (bench, _, used) = generate_with_retry(spec, GENERATOR_ATTEMPTS)?;
        seed = used;
        let hash = bench.content_hash();
        match &first_hash {
            None => first_hash = Some(hash.clone()),
            Some(h) if *h != hash => {
                return Err(Error::InvalidConfig("generated data differs between ablation runs".into()))
            }
            Some(_) => {}
        }
        let task = bench.training_task()?;
        let cfg = TrainConfig {
            ablation_mode: mode,
            ..config.clone()
        };
        let (bank, report) = train(&task, &cfg)?;
        let eval = evaluate_all(&bank, &task.encoder, &bench.target, &bench.target_labels, cfg.gamma)?;
        rows.push(AblationRow {
            mode,
            data_sha256: hash,
            report: eval,
            final_losses: report.epochs.last().map(|r| r.losses).unwrap_or_default(),
        });
    }
    Ok(AblationTable { seed, rows })
}

/// Settings for the exact-transport versus constrained-assignment sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LemmaSweep {
    /// `(B, K)` pairs with `K` dividing `B`.
    pub shapes: Vec<(usize, usize)>,
    pub dims: Vec<usize>,
    pub seeds_per_cell: u64,
    pub seed: u64,
}

impl Default for LemmaSweep {
    fn default() -> Self {
        Self {
            shapes: vec![(4, 2), (6, 2), (6, 3), (8, 2), (12, 2), (12, 3)],
            dims: vec![2, 4, 8],
            seeds_per_cell: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub instances: usize,
    pub max_abs_gap: f64,
    /// Instances whose gap exceeds `tolerance`.
    pub failures: usize,
    pub tolerance: f64,
    pub pass: bool,
}

fn random_units(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Vec<UnitEmbedding>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            normalize_slice(&v)
        })
        .collect()
}

/// Compares the exact transport value with the brute-force constrained
/// clustering minimum under uniform class weights.
pub fn verify_lemma(sweep: &LemmaSweep, tolerance: f64) -> Result<LemmaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
    let mut max_abs_gap: f64 = 0.0;
    let mut instances = 0;
    let mut failures = 0;
    for &(b, k) in &sweep.shapes {
        if k == 0 || b % k != 0 {
            return Err(Error::InvalidConfig(format!("K = {k} must divide B = {b}")));
        }
        for &d in &sweep.dims {
            for _ in 0..sweep.seeds_per_cell {
                let taus = random_units(&mut rng, k, d)?;
                let zs = random_units(&mut rng, b, d)?;
                let pi = vec![1.0 / k as f64; k];
                let c = cost_matrix(&taus, &zs)?;
                let ot = exact_ot(&c, &pi, &vec![1.0 / b as f64; b])?.value();
                let (oracle, _) = constrained_clustering_oracle(&taus, &zs, &pi)?;
                let diff = (ot - oracle).abs();
                max_abs_gap = max_abs_gap.max(diff);
                instances += 1;
                if diff > tolerance {
                    failures += 1;
                }
            }
        }
    }
    Ok(LemmaReport {
        instances,
        max_abs_gap,
        failures,
        tolerance,
        pass: failures == 0,
    })
}
