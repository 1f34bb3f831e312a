mod common;

use common::{locate, perturbed, rel_err, small_bench, small_config};
use crpl::embedding::{dot, Temperature, UnitEmbedding};
use crpl::ot::{cost_matrix, exact_ot, WassersteinOptions};
use crpl::prompt::{text_embedding_table, Owner, PromptBank};
use crpl::pseudo_label::{hard_threshold_labels, SoftLabel};
use crpl::synthetic::{generate_with_retry, Benchmark, SyntheticSpec};
use crpl::training::{
    clustering_loss, cosine_lr, objective, source_loss, target_loss, total_step, train, AblationMode,
    LabeledBatch, OptimizerState, StepContext, TargetBatch, TrainConfig, Trainer, TrainingTask,
};
use crpl::embedding::compute_centroids;
use crpl::Error;

fn gamma(g: f64) -> Temperature {
    Temperature::new(g).unwrap()
}

fn setup(seed: u64) -> (Benchmark, TrainingTask, PromptBank) {
    let bench = small_bench(seed);
    let task = bench.training_task().unwrap();
    let bank = Trainer::new(&task, small_config(seed)).unwrap().bank().clone();
    (bench, task, bank)
}

/// `n` indices spread over `len`, so every class shows up.
fn spread(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|j| (j * 7 + j / 4) % len).collect()
}

fn source_batches(task: &TrainingTask, n: usize) -> Vec<LabeledBatch> {
    task.sources
        .iter()
        .map(|s| {
            let idx = spread(s.len(), n);
            LabeledBatch {
                zs: idx.iter().map(|&i| s.unit()[i].clone()).collect(),
                labels: idx.iter().map(|&i| s.labels().unwrap()[i]).collect(),
            }
        })
        .collect()
}

fn target_zs(task: &TrainingTask, n: usize) -> Vec<UnitEmbedding> {
    spread(task.target.len(), n).iter().map(|&i| task.target.unit()[i].clone()).collect()
}

fn target_batch(task: &TrainingTask, n: usize, hard: &[Option<usize>]) -> TargetBatch {
    let idx = spread(task.target.len(), n);
    TargetBatch {
        zs: idx.iter().map(|&i| task.target.unit()[i].clone()).collect(),
        raws: idx.iter().map(|&i| task.target.raw()[i].clone()).collect(),
        hard_labels: idx.iter().map(|&i| hard[i]).collect(),
    }
}

fn manual_ce(table: &[UnitEmbedding], zs: &[UnitEmbedding], labels: &[SoftLabel], g: f64) -> f64 {
    let mut total = 0.0;
    for (z, q) in zs.iter().zip(labels) {
        let s: Vec<f64> = table.iter().map(|t| dot(z.values(), t.values()) / g).collect();
        let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
        total -= q.probs().iter().zip(&s).map(|(p, v)| p * (v - lse)).sum::<f64>();
    }
    total / zs.len() as f64
}

#[test]
fn source_loss_vanishes_when_predictions_are_one_hot() {
    let (_, task, bank) = setup(1);
    // Use each class's own text embedding as the visual embedding.
    let batches: Vec<LabeledBatch> = (0..bank.num_sources())
        .map(|i| {
            let table = text_embedding_table(&bank, &task.encoder, Owner::Source(i)).unwrap();
            LabeledBatch {
                labels: (0..table.len()).collect(),
                zs: table,
            }
        })
        .collect();
    let (loss, _) = source_loss(&bank, &task.encoder, &batches, gamma(1e-4)).unwrap();
    assert!(loss < 1e-12, "loss {loss}");
}

#[test]
fn source_loss_is_ln_k_for_uniform_predictions() {
    let (_, task, bank) = setup(2);
    let (loss, _) = source_loss(&bank, &task.encoder, &source_batches(&task, 10), gamma(1e9)).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-8, "loss {loss}");
}

#[test]
fn one_hot_soft_labels_give_hard_cross_entropy() {
    let (_, task, bank) = setup(3);
    let zs = target_zs(&task, 12);
    let labels: Vec<SoftLabel> = (0..12).map(|j| SoftLabel::one_hot(4, j % 4)).collect();
    let (loss, _) = target_loss(&bank, &task.encoder, &zs, &labels, gamma(0.05)).unwrap();
    let table = text_embedding_table(&bank, &task.encoder, Owner::Target).unwrap();
    let expected = manual_ce(&table, &zs, &labels, 0.05);
    assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
}

#[test]
fn uniform_soft_labels_respect_gibbs() {
    let (_, task, bank) = setup(4);
    let zs = target_zs(&task, 16);
    let uniform = vec![SoftLabel::new(vec![0.25; 4]).unwrap(); 16];
    for g in [0.01, 0.1, 1.0] {
        let (loss, _) = target_loss(&bank, &task.encoder, &zs, &uniform, gamma(g)).unwrap();
        assert!(loss >= 4f64.ln() - 1e-12, "loss {loss} below ln K");
    }
    let (loss, _) = target_loss(&bank, &task.encoder, &zs, &uniform, gamma(1e9)).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-8);
}

#[test]
fn empty_target_batch_contributes_nothing() {
    let (_, task, bank) = setup(5);
    let (loss, grads) = target_loss(&bank, &task.encoder, &[], &[], gamma(0.01)).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.target.is_none());
    assert!(matches!(
        target_loss(&bank, &task.encoder, &target_zs(&task, 2), &[], gamma(0.01)),
        Err(Error::DimensionMismatch { .. })
    ));
}

/// Central differences on a spread of coordinates from every learnable block.
fn check_fd(bank: &PromptBank, f: impl Fn(&PromptBank) -> f64, analytic: &[f64], coords: usize) {
    let h = 1e-5;
    let n = analytic.len();
    let mut worst: f64 = 0.0;
    for c in 0..coords {
        let flat = (c * 7919) % n;
        let (b, i) = locate(bank, flat);
        let fd = (f(&perturbed(bank, b, i, h)) - f(&perturbed(bank, b, i, -h))) / (2.0 * h);
        worst = worst.max(rel_err(analytic[flat], fd, 1e-6));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn source_gradient_matches_finite_differences() {
    let (_, task, bank) = setup(6);
    let batches = source_batches(&task, 8);
    let g = gamma(0.05);
    let (_, grads) = source_loss(&bank, &task.encoder, &batches, g).unwrap();
    let analytic = grads.dense_blocks(&bank).concat();
    check_fd(&bank, |b| source_loss(b, &task.encoder, &batches, g).unwrap().0, &analytic, 40);
}

#[test]
fn target_gradient_matches_finite_differences() {
    let (_, task, bank) = setup(7);
    let zs = target_zs(&task, 8);
    let labels: Vec<SoftLabel> = (0..8)
        .map(|j| SoftLabel::new(vec![0.1, 0.2, 0.3, 0.4].into_iter().cycle().skip(j).take(4).collect()).unwrap())
        .collect();
    let g = gamma(0.05);
    let (_, grads) = target_loss(&bank, &task.encoder, &zs, &labels, g).unwrap();
    let analytic = grads.dense_blocks(&bank).concat();
    check_fd(&bank, |b| target_loss(b, &task.encoder, &zs, &labels, g).unwrap().0, &analytic, 40);
}

#[test]
fn clustering_gradient_matches_fixed_plan_differences() {
    let (_, task, bank) = setup(8);
    let zs = target_zs(&task, 8);
    let (_, grads, plan) = clustering_loss(&bank, &task.encoder, &zs, WassersteinOptions::default()).unwrap();
    let analytic = grads.dense_blocks(&bank).concat();
    let fixed = |b: &PromptBank| {
        let table = text_embedding_table(b, &task.encoder, Owner::Target).unwrap();
        let c = cost_matrix(&table, &zs).unwrap();
        (0..plan.rows())
            .flat_map(|k| (0..plan.cols()).map(move |n| (k, n)))
            .map(|(k, n)| plan.get(k, n) * c.get(k, n))
            .sum::<f64>()
    };
    check_fd(&bank, fixed, &analytic, 40);
}

#[test]
fn gradients_touch_only_their_blocks() {
    let (_, task, bank) = setup(9);
    let (_, gs) = source_loss(&bank, &task.encoder, &source_batches(&task, 6), gamma(0.01)).unwrap();
    assert!(gs.target.is_none());
    assert!(gs.sources.iter().all(Option::is_some));

    let zs = target_zs(&task, 6);
    let labels = vec![SoftLabel::one_hot(4, 1); 6];
    let (_, gt) = target_loss(&bank, &task.encoder, &zs, &labels, gamma(0.01)).unwrap();
    assert!(gt.sources.iter().all(Option::is_none));
    assert!(gt.target.is_some());

    let (_, gw, _) = clustering_loss(&bank, &task.encoder, &zs, WassersteinOptions::default()).unwrap();
    assert!(gw.sources.iter().all(Option::is_none));
    assert!(gw.target.is_some());
}

#[test]
fn zero_weights_leave_target_prompt_untouched() {
    let (_, task, mut bank) = setup(10);
    let config = TrainConfig {
        lambda_t: 0.0,
        lambda_w: 0.0,
        ..small_config(10)
    };
    let centroids = compute_centroids(&task.sources, 4);
    let ctx = StepContext {
        enc: &task.encoder,
        centroids: &centroids,
        config: &config,
    };
    let before = bank.clone();
    let mut opt = OptimizerState::new(&bank, 10);
    let tgt = target_batch(&task, 8, &vec![None; task.target.len()]);
    for _ in 0..3 {
        total_step(&mut bank, &ctx, &source_batches(&task, 8), &tgt, &mut opt).unwrap();
    }
    assert_eq!(bank.target, before.target);
    assert_ne!(bank.shared, before.shared);
    assert_ne!(bank.sources, before.sources);
}

#[test]
fn cpl_only_uses_thresholded_labels_without_clustering() {
    let (_, task, bank) = setup(11);
    let config = TrainConfig {
        ablation_mode: AblationMode::CplOnly,
        alpha: 0.3,
        ..small_config(11)
    };
    assert_eq!(config.effective_lambda_w(), 0.0);
    let base = text_embedding_table(&bank, &task.encoder, Owner::Base).unwrap();
    let hard = hard_threshold_labels(&task.target, &base, config.gamma, config.alpha).unwrap();
    let centroids = compute_centroids(&task.sources, 4);
    let ctx = StepContext {
        enc: &task.encoder,
        centroids: &centroids,
        config: &config,
    };
    let src = source_batches(&task, 8);
    let tgt = target_batch(&task, 16, &hard);
    let (losses, _) = objective(&bank, &ctx, &src, &tgt).unwrap();

    let (zs, labels): (Vec<UnitEmbedding>, Vec<SoftLabel>) = tgt
        .zs
        .iter()
        .zip(&tgt.hard_labels)
        .filter_map(|(z, y)| y.map(|y| (z.clone(), SoftLabel::one_hot(4, y))))
        .unzip();
    assert!(!zs.is_empty());
    let table = text_embedding_table(&bank, &task.encoder, Owner::Target).unwrap();
    let expected_t = manual_ce(&table, &zs, &labels, config.gamma.value());
    assert!((losses.l_t - expected_t).abs() < 1e-9 * expected_t.max(1.0));
    assert!((losses.total - (losses.l_s + 0.5 * losses.l_t)).abs() < 1e-12);
}

#[test]
fn first_epoch_lowers_the_objective() {
    for seed in 12..15 {
        let spec = SyntheticSpec {
            d: 16,
            d_tok: 16,
            d_hid: 32,
            samples_per_domain: 200,
            ..common::small_spec(seed)
        };
        let (bench, _, _) = generate_with_retry(&spec, 4).unwrap();
        let task = bench.training_task().unwrap();
        let config = TrainConfig {
            m1: 4,
            m2: 4,
            epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let (_, report) = train(&task, &config).unwrap();
        let totals: Vec<f64> = report.epochs.iter().map(|r| r.losses.total).collect();
        assert!(totals[1] < totals[0], "seed {seed}: {totals:?}");
    }
}

#[test]
fn logged_total_is_weighted_sum() {
    let (_, task, _) = setup(13);
    for mode in AblationMode::ALL {
        let config = TrainConfig {
            ablation_mode: mode,
            ..small_config(13)
        };
        let (_, report) = train(&task, &config).unwrap();
        for r in &report.epochs {
            let l = r.losses;
            let expected = l.l_s + report.lambda_t * l.l_t + report.lambda_w * l.l_w;
            assert!((l.total - expected).abs() <= 1e-9, "{mode:?} epoch {}", r.epoch);
        }
    }
}

#[test]
fn zero_epochs_return_initial_bank() {
    let (_, task, initial) = setup(14);
    let config = TrainConfig {
        epochs: 0,
        ..small_config(14)
    };
    let (bank, report) = train(&task, &config).unwrap();
    assert_eq!(bank, initial);
    assert_eq!(report.epochs.len(), 1);
}

#[test]
fn same_seed_same_run() {
    let (_, task, _) = setup(15);
    let a = train(&task, &small_config(15)).unwrap();
    let b = train(&task, &small_config(15)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let c = train(&task, &small_config(16)).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let (_, task, _) = setup(17);
    let config = small_config(17);
    let (full, _) = train(&task, &config).unwrap();
    let mut first = Trainer::new(&task, config.clone()).unwrap();
    first.run_epoch().unwrap();
    let (bank, opt) = first.into_parts();
    let (resumed, report) = Trainer::resume(&task, config, bank, opt).unwrap().run(|_| {}).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(report.epochs.first().unwrap().epoch, 1);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.005, 0, 100), 0.005);
    assert!(cosine_lr(0.005, 100, 100).abs() <= 1e-12);
    assert!((cosine_lr(0.005, 50, 100) - 0.0025).abs() <= 1e-15);
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let lr = cosine_lr(0.005, s, 100);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn source_combined_trains_one_source_prompt() {
    let (_, task, _) = setup(18);
    let config = TrainConfig {
        source_combined: true,
        ..small_config(18)
    };
    let (bank, _) = train(&task, &config).unwrap();
    assert_eq!(bank.num_sources(), 1);
}

#[test]
fn labeled_target_is_rejected() {
    let bench = small_bench(19);
    let labeled_target = bench.sources[0].clone();
    let err = TrainingTask::new(
        bench.sources.clone(),
        labeled_target,
        crpl::prompt::TextEncoder::new(bench.encoder).unwrap(),
        bench.classes.clone(),
        bench.base.clone(),
    );
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}

#[test]
fn config_json_defaults_and_names() {
    let c: TrainConfig = serde_json::from_str(r#"{"lambda_T": 0.25, "ablation_mode": "SPL_only", "seed": 3}"#).unwrap();
    assert_eq!(c.lambda_t, 0.25);
    assert_eq!(c.lambda_w, 0.5);
    assert_eq!(c.ablation_mode, AblationMode::SplOnly);
    assert_eq!(c.batch_size, 32);
    assert!((c.gamma.value() - 0.01).abs() < 1e-15);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda_T": 1}"#).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"gamma": 0}"#).is_err());
    let bad = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn exact_and_entropic_clustering_agree_roughly() {
    let (_, task, bank) = setup(20);
    let zs = target_zs(&task, 8);
    let exact = clustering_loss(&bank, &task.encoder, &zs, WassersteinOptions::default()).unwrap().0;
    let mut opts = WassersteinOptions::default();
    opts.exact_bound = 0;
    opts.sinkhorn.epsilon = 0.01;
    opts.sinkhorn.max_iter = 20_000;
    let entropic = clustering_loss(&bank, &task.encoder, &zs, opts).unwrap().0;
    let table = text_embedding_table(&bank, &task.encoder, Owner::Target).unwrap();
    let c = cost_matrix(&table, &zs).unwrap();
    let direct = exact_ot(&c, &[0.25; 4], &[0.125; 8]).unwrap().value();
    assert!((exact - direct).abs() < 1e-12);
    assert!((entropic - exact).abs() < 0.05, "{entropic} vs {exact}");
}
