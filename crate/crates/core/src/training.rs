//! Source, target and clustering losses, SGD with momentum under a cosine
//! schedule, and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{compute_centroids, dot, CentroidTable, DomainDataset, RawEmbedding, Temperature, UnitEmbedding};
use crate::error::{Error, Result};
use crate::ot::{wasserstein_grad_taus, wasserstein_loss, SinkhornParams, TransportPlan, WassersteinOptions};
use crate::prompt::{
    table_backward, text_embedding_table, BaseContext, ClassTokenSet, Owner, PromptBank, PromptGrads,
    TextEncoder, TokenMatrix,
};
use crate::pseudo_label::{
    enhanced_pseudo_label, hard_threshold_labels, SoftLabel, WeightMetric, WeightScheme, WeightSign,
};

/// Which pseudo-labels feed the target loss, and whether the clustering term
/// is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Enhanced soft labels plus the clustering term.
    #[default]
    #[serde(rename = "CRPL")]
    Crpl,
    /// Enhanced soft labels, no clustering term.
    #[serde(rename = "SPL_only")]
    SplOnly,
    /// Thresholded zero-shot labels, no clustering term.
    #[serde(rename = "CPL_only")]
    CplOnly,
    /// Thresholded zero-shot labels plus the clustering term.
    #[serde(rename = "CPL_with_W")]
    CplWithW,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::CplOnly, Self::CplWithW, Self::SplOnly, Self::Crpl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Crpl => "CRPL",
            Self::SplOnly => "SPL_only",
            Self::CplOnly => "CPL_only",
            Self::CplWithW => "CPL_with_W",
        }
    }

    fn uses_enhanced_labels(self) -> bool {
        matches!(self, Self::Crpl | Self::SplOnly)
    }

    fn uses_clustering(self) -> bool {
        matches!(self, Self::Crpl | Self::CplWithW)
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "lambda_T")]
    pub lambda_t: f64,
    #[serde(rename = "lambda_W")]
    pub lambda_w: f64,
    pub gamma: Temperature,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub weight_metric: WeightMetric,
    pub weight_sign: WeightSign,
    pub exact_ot_bound: usize,
    pub ablation_mode: AblationMode,
    /// Confidence threshold for the hard zero-shot labels.
    pub alpha: f64,
    #[serde(rename = "M1")]
    pub m1: usize,
    #[serde(rename = "M2")]
    pub m2: usize,
    pub init_std: f64,
    /// Merge all sources into one domain with a single prompt.
    pub source_combined: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sinkhorn = SinkhornParams::default();
        Self {
            lambda_t: 0.5,
            lambda_w: 0.5,
            gamma: Temperature::new(0.01).expect("positive"),
            lr: 0.005,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            sinkhorn_epsilon: sinkhorn.epsilon,
            sinkhorn_max_iter: sinkhorn.max_iter,
            sinkhorn_tol: sinkhorn.tol,
            weight_metric: WeightMetric::default(),
            weight_sign: WeightSign::default(),
            exact_ot_bound: WassersteinOptions::default().exact_bound,
            ablation_mode: AblationMode::default(),
            alpha: 0.5,
            m1: 16,
            m2: 16,
            init_std: 0.02,
            source_combined: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda_t >= 0.0 && self.lambda_w >= 0.0) {
            return bad(format!("loss weights must be >= 0, got {} and {}", self.lambda_t, self.lambda_w));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.sinkhorn_epsilon > 0.0 && self.sinkhorn_tol > 0.0) {
            return bad("sinkhorn epsilon and tol must be positive".into());
        }
        if self.m1 == 0 || self.m2 == 0 {
            return bad("M1 and M2 must be >= 1".into());
        }
        if !(self.init_std >= 0.0) {
            return bad(format!("init_std must be >= 0, got {}", self.init_std));
        }
        Ok(())
    }

    /// Clustering weight after the ablation mode is applied.
    pub fn effective_lambda_w(&self) -> f64 {
        if self.ablation_mode.uses_clustering() {
            self.lambda_w
        } else {
            0.0
        }
    }

    pub fn wasserstein_options(&self) -> WassersteinOptions {
        WassersteinOptions {
            exact_bound: self.exact_ot_bound,
            sinkhorn: SinkhornParams {
                epsilon: self.sinkhorn_epsilon,
                max_iter: self.sinkhorn_max_iter,
                tol: self.sinkhorn_tol,
            },
        }
    }

    fn weight_scheme(&self) -> WeightScheme {
        WeightScheme {
            metric: self.weight_metric,
            sign: self.weight_sign,
        }
    }
}

/// Labeled minibatch from one source domain.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub zs: Vec<UnitEmbedding>,
    pub labels: Vec<usize>,
}

/// Unlabeled target minibatch. `hard_labels` holds the thresholded zero-shot
/// labels used by the CPL modes.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub zs: Vec<UnitEmbedding>,
    pub raws: Vec<RawEmbedding>,
    pub hard_labels: Vec<Option<usize>>,
}

/// Mean soft cross-entropy of `softmax(z . tau / gamma)` against `targets`,
/// with its gradient with respect to each `tau_k`.
fn soft_cross_entropy(
    table: &[UnitEmbedding],
    zs: &[UnitEmbedding],
    targets: &[&[f64]],
    gamma: Temperature,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = table.len();
    let d = table.first().map(UnitEmbedding::dim).unwrap_or(0);
    let mut grads = vec![vec![0.0; d]; k];
    if zs.is_empty() {
        return Ok((0.0, grads));
    }
    let inv_g = 1.0 / gamma.value();
    let scale = 1.0 / zs.len() as f64;
    let mut loss = 0.0;
    for (z, q) in zs.iter().zip(targets) {
        if z.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: z.dim() });
        }
        if q.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: q.len() });
        }
        let s: Vec<f64> = table.iter().map(|t| dot(z.values(), t.values()) * inv_g).collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for c in 0..k {
            if q[c] != 0.0 {
                loss -= q[c] * (s[c] - lse);
            }
            let coef = ((s[c] - lse).exp() - q[c]) * inv_g * scale;
            if coef != 0.0 {
                for (g, zi) in grads[c].iter_mut().zip(z.values()) {
                    *g += coef * zi;
                }
            }
        }
    }
    Ok((loss * scale, grads))
}

/// Mean over source domains of the per-domain cross-entropy. Batch `i`
/// belongs to source prompt `i`.
pub fn source_loss(
    bank: &PromptBank,
    enc: &TextEncoder,
    source_batches: &[LabeledBatch],
    gamma: Temperature,
) -> Result<(f64, PromptGrads)> {
    if source_batches.len() != bank.num_sources() {
        return Err(Error::DimensionMismatch {
            expected: bank.num_sources(),
            found: source_batches.len(),
        });
    }
    let k = bank.num_classes();
    let inv_n = 1.0 / source_batches.len() as f64;
    let mut grads = PromptGrads::empty(bank);
    let mut total = 0.0;
    for (i, batch) in source_batches.iter().enumerate() {
        if batch.zs.len() != batch.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.zs.len(),
                found: batch.labels.len(),
            });
        }
        let one_hot: Vec<Vec<f64>> = batch
            .labels
            .iter()
            .map(|&y| {
                if y >= k {
                    return Err(Error::ClassOutOfRange { index: y, classes: k });
                }
                let mut v = vec![0.0; k];
                v[y] = 1.0;
                Ok(v)
            })
            .collect::<Result<_>>()?;
        let targets: Vec<&[f64]> = one_hot.iter().map(Vec::as_slice).collect();
        let owner = Owner::Source(i);
        let table = text_embedding_table(bank, enc, owner)?;
        let (value, mut table_grads) = soft_cross_entropy(&table, &batch.zs, &targets, gamma)?;
        table_grads.iter_mut().flatten().for_each(|g| *g *= inv_n);
        table_backward(bank, enc, owner, &table_grads, &mut grads)?;
        total += value * inv_n;
    }
    Ok((total, grads))
}

/// Soft cross-entropy of the target-prompt probabilities against fixed soft
/// labels. An empty batch contributes zero.
pub fn target_loss(
    bank: &PromptBank,
    enc: &TextEncoder,
    zs: &[UnitEmbedding],
    soft_labels: &[SoftLabel],
    gamma: Temperature,
) -> Result<(f64, PromptGrads)> {
    if zs.len() != soft_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: zs.len(),
            found: soft_labels.len(),
        });
    }
    let mut grads = PromptGrads::empty(bank);
    if zs.is_empty() {
        return Ok((0.0, grads));
    }
    let table = text_embedding_table(bank, enc, Owner::Target)?;
    let targets: Vec<&[f64]> = soft_labels.iter().map(SoftLabel::probs).collect();
    let (value, table_grads) = soft_cross_entropy(&table, zs, &targets, gamma)?;
    table_backward(bank, enc, Owner::Target, &table_grads, &mut grads)?;
    Ok((value, grads))
}

/// Transport cost between the uniform measure on the target table and the
/// batch, with gradients through the table at the optimal plan.
pub fn clustering_loss(
    bank: &PromptBank,
    enc: &TextEncoder,
    zs: &[UnitEmbedding],
    opts: WassersteinOptions,
) -> Result<(f64, PromptGrads, TransportPlan)> {
    let table = text_embedding_table(bank, enc, Owner::Target)?;
    let pi = vec![1.0 / table.len() as f64; table.len()];
    let (value, plan) = match wasserstein_loss(&table, zs, &pi, opts) {
        // An approximate plan still yields a valid descent direction.
        Err(Error::NotConverged { plan, .. }) => (plan.value(), *plan),
        other => other?,
    };
    let mut grads = PromptGrads::empty(bank);
    table_backward(bank, enc, Owner::Target, &wasserstein_grad_taus(&plan, zs), &mut grads)?;
    Ok((value, grads, plan))
}

/// Loss components of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_T")]
    pub l_t: f64,
    #[serde(rename = "L_W")]
    pub l_w: f64,
    pub total: f64,
}

/// Frozen quantities shared by every step of a run.
pub struct StepContext<'a> {
    pub enc: &'a TextEncoder,
    pub centroids: &'a CentroidTable,
    pub config: &'a TrainConfig,
}

/// Pseudo-labels for a target batch under the configured mode, treated as
/// constants. Returns the retained samples and their labels.
fn target_labels(
    bank: &PromptBank,
    ctx: &StepContext,
    batch: &TargetBatch,
) -> Result<(Vec<UnitEmbedding>, Vec<SoftLabel>)> {
    let k = bank.num_classes();
    if ctx.config.ablation_mode.uses_enhanced_labels() {
        let base = text_embedding_table(bank, ctx.enc, Owner::Base)?;
        let sources = (0..bank.num_sources())
            .map(|i| text_embedding_table(bank, ctx.enc, Owner::Source(i)))
            .collect::<Result<Vec<_>>>()?;
        let labels = batch
            .zs
            .iter()
            .zip(&batch.raws)
            .map(|(z, raw)| {
                enhanced_pseudo_label(
                    z,
                    raw,
                    &base,
                    &sources,
                    ctx.centroids,
                    ctx.config.gamma,
                    ctx.config.weight_scheme(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((batch.zs.clone(), labels))
    } else {
        if batch.hard_labels.len() != batch.zs.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.zs.len(),
                found: batch.hard_labels.len(),
            });
        }
        Ok(batch
            .zs
            .iter()
            .zip(&batch.hard_labels)
            .filter_map(|(z, y)| y.map(|y| (z.clone(), SoftLabel::one_hot(k, y))))
            .unzip())
    }
}

/// Joint objective and its gradient on one set of batches.
pub fn objective(
    bank: &PromptBank,
    ctx: &StepContext,
    source_batches: &[LabeledBatch],
    target: &TargetBatch,
) -> Result<(LossBreakdown, PromptGrads)> {
    let config = ctx.config;
    let lambda_w = config.effective_lambda_w();
    let (l_s, mut grads) = source_loss(bank, ctx.enc, source_batches, config.gamma)?;
    let (zs, labels) = target_labels(bank, ctx, target)?;
    let (l_t, g_t) = target_loss(bank, ctx.enc, &zs, &labels, config.gamma)?;
    let (l_w, g_w, _) = clustering_loss(bank, ctx.enc, &target.zs, config.wasserstein_options())?;
    grads.add_scaled(&g_t, config.lambda_t);
    if lambda_w != 0.0 {
        grads.add_scaled(&g_w, lambda_w);
    }
    let total = l_s + config.lambda_t * l_t + lambda_w * l_w;
    Ok((LossBreakdown { l_s, l_t, l_w, total }, grads))
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Momentum buffers and schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// One buffer per learnable block, in [`PromptBank::learnable_blocks`] order.
    pub buffers: Vec<Vec<f64>>,
    pub step: usize,
    pub total_steps: usize,
    pub epochs_done: usize,
}

impl OptimizerState {
    pub fn new(bank: &PromptBank, total_steps: usize) -> Self {
        Self {
            buffers: bank.learnable_blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
            step: 0,
            total_steps,
            epochs_done: 0,
        }
    }

    pub fn check_shapes(&self, bank: &PromptBank) -> Result<()> {
        let blocks = bank.learnable_blocks();
        if blocks.len() != self.buffers.len() {
            return Err(Error::SchemaMismatch(format!(
                "optimizer has {} buffers, bank has {} learnable blocks",
                self.buffers.len(),
                blocks.len()
            )));
        }
        for (b, buf) in blocks.iter().zip(&self.buffers) {
            if b.len() != buf.len() {
                return Err(Error::SchemaMismatch(format!(
                    "momentum buffer of length {} for a block of length {}",
                    buf.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }

    pub fn current_lr(&self, lr0: f64) -> f64 {
        cosine_lr(lr0, self.step, self.total_steps)
    }

    /// `v = mu v + g; p -= lr v`, then advances the schedule. Returns the lr used.
    pub fn apply(&mut self, bank: &mut PromptBank, grads: &PromptGrads, lr0: f64, momentum: f64) -> Result<f64> {
        self.check_shapes(bank)?;
        let lr = self.current_lr(lr0);
        let dense = grads.dense_blocks(bank);
        for ((block, buf), g) in bank.learnable_blocks_mut().into_iter().zip(&mut self.buffers).zip(&dense) {
            for ((p, v), gi) in block.iter_mut().zip(buf.iter_mut()).zip(g) {
                *v = momentum * *v + gi;
                *p -= lr * *v;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

/// One optimizer step on the joint objective.
pub fn total_step(
    bank: &mut PromptBank,
    ctx: &StepContext,
    source_batches: &[LabeledBatch],
    target: &TargetBatch,
    opt: &mut OptimizerState,
) -> Result<LossBreakdown> {
    let (losses, grads) = objective(bank, ctx, source_batches, target)?;
    opt.apply(bank, &grads, ctx.config.lr, ctx.config.momentum)?;
    Ok(losses)
}

/// Everything training reads: labeled sources, the unlabeled target, and the
/// frozen encoder and tokens.
#[derive(Clone, Debug)]
pub struct TrainingTask {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub encoder: TextEncoder,
    pub classes: ClassTokenSet,
    pub base: BaseContext,
}

impl TrainingTask {
    pub fn new(
        sources: Vec<DomainDataset>,
        target: DomainDataset,
        encoder: TextEncoder,
        classes: ClassTokenSet,
        base: BaseContext,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidConfig("at least one labeled source is required".into()));
        }
        if let Some(s) = sources.iter().find(|s| !s.is_labeled() || s.is_empty()) {
            return Err(Error::InvalidConfig(format!(
                "source {} must be labeled and non-empty",
                s.domain_id()
            )));
        }
        if target.is_labeled() {
            return Err(Error::InvalidConfig("the training target must not carry labels".into()));
        }
        if target.is_empty() {
            return Err(Error::EmptyInput);
        }
        let d = target.dim();
        for s in &sources {
            if s.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: s.dim() });
            }
        }
        if encoder.d_out() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: encoder.d_out(),
            });
        }
        if classes.0.dim() != encoder.d_tok() || base.0.dim() != encoder.d_tok() {
            return Err(Error::DimensionMismatch {
                expected: encoder.d_tok(),
                found: classes.0.dim(),
            });
        }
        Ok(Self {
            sources,
            target,
            encoder,
            classes,
            base,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.0.rows()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(rename = "lambda_T")]
    pub lambda_t: f64,
    /// Clustering weight in effect for the ablation mode.
    #[serde(rename = "lambda_W")]
    pub lambda_w: f64,
    /// Epoch 0 is the objective at initialization; later rows are measured
    /// after each epoch's updates.
    pub epochs: Vec<EpochRecord>,
}

/// Resumable training run over a [`TrainingTask`].
pub struct Trainer<'a> {
    task: &'a TrainingTask,
    config: TrainConfig,
    sources: Vec<DomainDataset>,
    centroids: CentroidTable,
    hard_labels: Vec<Option<usize>>,
    bank: PromptBank,
    opt: OptimizerState,
}

impl<'a> Trainer<'a> {
    /// Fresh run with a bank drawn from the config seed.
    pub fn new(task: &'a TrainingTask, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n_sources = if config.source_combined { 1 } else { task.sources.len() };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bank = PromptBank::initialize(
            n_sources,
            config.m1,
            config.m2,
            config.init_std,
            task.classes.clone(),
            task.base.clone(),
            &mut rng,
        )?;
        let total = config.epochs * steps_per_epoch(task.target.len(), config.batch_size);
        let opt = OptimizerState::new(&bank, total);
        Self::resume(task, config, bank, opt)
    }

    /// Continues from saved parameters and optimizer state.
    /// Frozen tokens must match the task's up to float32 rounding; the task's
    /// copies are kept.
    pub fn resume(task: &'a TrainingTask, config: TrainConfig, mut bank: PromptBank, opt: OptimizerState) -> Result<Self> {
        config.validate()?;
        bank.validate()?;
        opt.check_shapes(&bank)?;
        let sources = if config.source_combined {
            vec![DomainDataset::merge("combined", &task.sources, task.num_classes())?]
        } else {
            task.sources.clone()
        };
        if bank.num_sources() != sources.len() {
            return Err(Error::SchemaMismatch(format!(
                "bank has {} source prompts, run needs {}",
                bank.num_sources(),
                sources.len()
            )));
        }
        if !same_tokens(&bank.classes.0, &task.classes.0) || !same_tokens(&bank.base.0, &task.base.0) {
            return Err(Error::SchemaMismatch("frozen tokens differ from the task's".into()));
        }
        bank.classes = task.classes.clone();
        bank.base = task.base.clone();
        let spe = steps_per_epoch(task.target.len(), config.batch_size);
        if opt.total_steps != config.epochs * spe {
            return Err(Error::InvalidConfig(format!(
                "optimizer schedules {} steps, config implies {}",
                opt.total_steps,
                config.epochs * spe
            )));
        }
        let centroids = compute_centroids(&sources, task.num_classes());
        let base_table = text_embedding_table(&bank, &task.encoder, Owner::Base)?;
        let hard_labels = hard_threshold_labels(&task.target, &base_table, config.gamma, config.alpha)?;
        Ok(Self {
            task,
            config,
            sources,
            centroids,
            hard_labels,
            bank,
            opt,
        })
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (PromptBank, OptimizerState) {
        (self.bank, self.opt)
    }

    pub fn epochs_done(&self) -> usize {
        self.opt.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.opt.epochs_done >= self.config.epochs
    }

    fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.task.target.len(), self.config.batch_size)
    }

    fn context(&self) -> StepContext<'_> {
        StepContext {
            enc: &self.task.encoder,
            centroids: &self.centroids,
            config: &self.config,
        }
    }

    fn batches(&self, step: usize, source_orders: &[Vec<usize>], target_order: &[usize]) -> (Vec<LabeledBatch>, TargetBatch) {
        let b = self.config.batch_size;
        let sources = self
            .sources
            .iter()
            .zip(source_orders)
            .map(|(ds, order)| {
                let labels = ds.labels().expect("sources are labeled");
                let idx = (0..b).map(|j| order[(step * b + j) % order.len()]);
                let (zs, labels) = idx.map(|n| (ds.unit()[n].clone(), labels[n])).unzip();
                LabeledBatch { zs, labels }
            })
            .collect();
        let lo = step * b;
        let hi = (lo + b).min(target_order.len());
        let t = &self.task.target;
        let idx = &target_order[lo..hi];
        let target = TargetBatch {
            zs: idx.iter().map(|&n| t.unit()[n].clone()).collect(),
            raws: idx.iter().map(|&n| t.raw()[n].clone()).collect(),
            hard_labels: idx.iter().map(|&n| self.hard_labels[n]).collect(),
        };
        (sources, target)
    }

    /// Mean of the joint objective over one unshuffled pass, without updates.
    pub fn evaluate_objective(&self) -> Result<LossBreakdown> {
        let orders: Vec<Vec<usize>> = self.sources.iter().map(|s| (0..s.len()).collect()).collect();
        let target_order: Vec<usize> = (0..self.task.target.len()).collect();
        let ctx = self.context();
        let spe = self.steps_per_epoch();
        let mut acc = LossBreakdown::default();
        for step in 0..spe {
            let (src, tgt) = self.batches(step, &orders, &target_order);
            let (l, _) = objective(&self.bank, &ctx, &src, &tgt)?;
            acc.l_s += l.l_s;
            acc.l_t += l.l_t;
            acc.l_w += l.l_w;
        }
        let inv = 1.0 / spe as f64;
        acc.l_s *= inv;
        acc.l_t *= inv;
        acc.l_w *= inv;
        acc.total = acc.l_s + self.config.lambda_t * acc.l_t + self.config.effective_lambda_w() * acc.l_w;
        Ok(acc)
    }

    /// One shuffled pass of updates, followed by a full-pass evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::InvalidConfig("all scheduled epochs are done".into()));
        }
        let epoch = self.opt.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + epoch as u64);
        let mut shuffled = |n: usize| {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut rng);
            v
        };
        let orders: Vec<Vec<usize>> = self.sources.iter().map(|s| shuffled(s.len())).collect();
        let target_order = shuffled(self.task.target.len());
        for step in 0..self.steps_per_epoch() {
            let (src, tgt) = self.batches(step, &orders, &target_order);
            let ctx = StepContext {
                enc: &self.task.encoder,
                centroids: &self.centroids,
                config: &self.config,
            };
            total_step(&mut self.bank, &ctx, &src, &tgt, &mut self.opt)?;
        }
        self.opt.epochs_done += 1;
        Ok(EpochRecord {
            epoch: epoch + 1,
            losses: self.evaluate_objective()?,
            lr: self.opt.current_lr(self.config.lr),
        })
    }

    pub fn initial_record(&self) -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch: self.opt.epochs_done,
            losses: self.evaluate_objective()?,
            lr: self.opt.current_lr(self.config.lr),
        })
    }

    /// Runs the remaining epochs, passing each record to `on_record`.
    pub fn run(mut self, mut on_record: impl FnMut(&EpochRecord)) -> Result<(PromptBank, TrainReport)> {
        let mut epochs = Vec::new();
        let first = self.initial_record()?;
        on_record(&first);
        epochs.push(first);
        while !self.is_finished() {
            let rec = self.run_epoch()?;
            on_record(&rec);
            epochs.push(rec);
        }
        let report = TrainReport {
            lambda_t: self.config.lambda_t,
            lambda_w: self.config.effective_lambda_w(),
            epochs,
        };
        Ok((self.bank, report))
    }
}

fn same_tokens(a: &TokenMatrix, b: &TokenMatrix) -> bool {
    a.rows() == b.rows()
        && a.dim() == b.dim()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + y.abs()))
}

pub fn steps_per_epoch(target_len: usize, batch_size: usize) -> usize {
    target_len.div_ceil(batch_size.max(1))
}

/// Trains from scratch.
pub fn train(task: &TrainingTask, config: &TrainConfig) -> Result<(PromptBank, TrainReport)> {
    Trainer::new(task, config.clone())?.run(|_| {})
}
