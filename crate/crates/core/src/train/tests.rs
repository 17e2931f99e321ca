use proptest::prelude::*;

use super::*;
use crate::oracle::{generate, GeneratorSpec};

fn scalar_step(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
    let config = TrainConfig {
        weight_decay: wd,
        ..TrainConfig::default()
    };
    let mut param = Tensor::scalar(p);
    let grad = Tensor::scalar(g);
    let mut state = AdamState::zeros_like([&param]);
    adamw_step(&mut [&mut param], &[&grad], &["p"], &mut state, &config, lr).unwrap();
    param.item()
}

#[test]
fn adamw_first_step_closed_form() {
    let eps = TrainConfig::default().adam_eps;
    // Bias correction makes m̂ = g and v̂ = g² on the first step.
    assert!((scalar_step(1.0, 1.0, 0.1, 0.0) - (1.0 - 0.1 / (1.0 + eps))).abs() < 1e-15);
    let want = 1.0 - 0.1 * (1.0 / (1.0 + eps) + 0.01);
    assert!((scalar_step(1.0, 1.0, 0.1, 0.01) - want).abs() < 1e-15);
    assert!((scalar_step(1.0, 1.0, 0.1, 0.01) - 0.899).abs() < 1e-6);
    assert_eq!(scalar_step(1.0, 0.0, 0.1, 0.0), 1.0);
}

#[test]
fn adamw_matches_reference_over_steps() {
    let config = TrainConfig {
        weight_decay: 0.05,
        ..TrainConfig::default()
    };
    let grads = [0.3, -1.2, 0.7, 0.0, 2.5];
    let mut param = Tensor::scalar(0.4);
    let mut state = AdamState::zeros_like([&param]);
    let (mut p, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let lr = 0.01 * (t + 1) as f64;
        adamw_step(
            &mut [&mut param],
            &[&Tensor::scalar(g)],
            &["p"],
            &mut state,
            &config,
            lr,
        )
        .unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = (t + 1) as i32;
        let update = (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        p -= lr * (update + 0.05 * p);
        assert!((param.item() - p).abs() < 1e-14);
    }
    assert_eq!(state.step, grads.len() as u64);
}

#[test]
fn adamw_rejects_non_finite_gradient() {
    let config = TrainConfig::default();
    let mut a = Tensor::scalar(1.0);
    let mut b = Tensor::scalar(2.0);
    let mut state = AdamState::zeros_like([&a, &b]);
    let ga = Tensor::scalar(0.5);
    let gb = Tensor::scalar(f64::NAN);
    let err = adamw_step(
        &mut [&mut a, &mut b],
        &[&ga, &gb],
        &["a", "b"],
        &mut state,
        &config,
        0.1,
    );
    assert!(matches!(err, Err(TrainError::NonFiniteGradient(name)) if name == "b"));
    assert_eq!((a.item(), b.item(), state.step), (1.0, 2.0, 0));
}

#[test]
fn clip_examples() {
    let mut small = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
    assert_eq!(clip_gradients(&mut small, 1.0).unwrap(), 0.5);
    assert_eq!(small[0].data(), &[0.3, 0.4]);

    let mut big = vec![
        Tensor::scalar(0.0),
        Tensor::new(vec![2], vec![0.0, 4.0]).unwrap(),
    ];
    assert_eq!(clip_gradients(&mut big, 1.0).unwrap(), 4.0);
    assert_eq!(big[1].data(), &[0.0, 1.0]);

    let mut zero = vec![Tensor::zeros(&[3])];
    assert_eq!(clip_gradients(&mut zero, 1.0).unwrap(), 0.0);
    assert_eq!(zero[0].data(), &[0.0; 3]);

    let mut bad = vec![Tensor::scalar(f64::INFINITY)];
    assert!(clip_gradients(&mut bad, 1.0).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_bound(values in prop::collection::vec(-50.0f64..50.0, 1..20), max in 0.1f64..5.0) {
        let mut grads = vec![Tensor::new(vec![values.len()], values.clone()).unwrap()];
        let before = clip_gradients(&mut grads, max).unwrap();
        let after = grads[0].l2_norm();
        prop_assert!(after <= max * (1.0 + 1e-12));
        prop_assert!((after - before.min(max)).abs() < 1e-9 * (1.0 + before));
    }
}

#[test]
fn schedule_warmup_then_plateau() {
    let config = TrainConfig::default();
    let mut s = LrSchedule::new(&config);
    assert_eq!(s.lr(500), 0.5 * config.lr);
    assert_eq!(s.lr(1000), config.lr);
    assert_eq!(s.lr(5000), config.lr);

    // Stalled epochs inside the warmup are ignored.
    for _ in 0..10 {
        assert!(!s.observe(10, 1.0));
    }
    assert_eq!(s.lr(1000), config.lr);

    assert!(!s.observe(1000, 1.0));
    assert!(!s.observe(1100, 1.0));
    assert!(!s.observe(1200, 0.99995));
    assert!(s.observe(1300, 1.0));
    assert_eq!(s.lr(1300), 0.5 * config.lr);

    // A real improvement resets the count.
    assert!(!s.observe(1400, 0.5));
    assert!(!s.observe(1500, 0.6));
    assert!(!s.observe(1600, 0.4));
    assert_eq!(s.scale(), 0.5);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            val_fraction: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(
            matches!(bad.validate(), Err(TrainError::Config(_))),
            "{bad:?}"
        );
    }
}

fn tiny_data(samples: usize, tokens: usize, seed: u64) -> Dataset {
    let spec = GeneratorSpec {
        seed,
        tokens,
        ..GeneratorSpec::default()
    };
    Dataset::new(spec.geometry, generate(&spec, samples).unwrap()).unwrap()
}

fn tiny_mapper() -> MapperConfig {
    MapperConfig {
        d_time: 8,
        enc_layers: 1,
        enc_heads: 2,
        d_head: 4,
        crop_len: 16,
        stride: 8,
        ..MapperConfig::toy()
    }
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        warmup_steps: 2,
        lr: 1e-3,
        val_fraction: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let data = tiny_data(8, 8, 0);
    let (train, val) = data.split(&quick(1, 3)).unwrap();
    assert_eq!((train.len(), val.len()), (6, 2));
    let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..8).collect::<Vec<_>>());
    assert_eq!(data.split(&quick(1, 3)).unwrap(), (train, val));

    let one = tiny_data(1, 8, 0);
    assert!(matches!(
        one.split(&quick(1, 0)),
        Err(TrainError::Dataset(_))
    ));
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = tiny_data(4, 16, 1);
    let cfg = quick(0, 5);
    let out = train(
        &data,
        &tiny_mapper(),
        &LossConfig::default(),
        &cfg,
        &AblationSpec::Full,
    )
    .unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    let mut rng = cfg.rng(STREAM_INIT);
    let init = HybridAxialMapper::new(tiny_mapper(), *data.geometry(), &mut rng).unwrap();
    assert_eq!(out.best.mapper, init);
    assert_eq!(out.last.mapper, init);
}

#[test]
fn training_is_deterministic() {
    // 24 tokens with crop 16 exercises cropped training examples.
    let data = tiny_data(6, 24, 2);
    let run = |seed| {
        train(
            &data,
            &tiny_mapper(),
            &LossConfig::default(),
            &quick(2, seed),
            &AblationSpec::Full,
        )
        .unwrap()
    };
    let (a, b) = (run(9), run(9));
    assert_eq!(a.last.checksum(), b.last.checksum());
    assert_eq!(a.best.checksum(), b.best.checksum());
    assert_eq!(a.history, b.history);
    assert_ne!(run(10).last.checksum(), a.last.checksum());

    assert_eq!(a.history.len(), 2);
    for r in &a.history {
        assert!(r.train_loss.is_finite() && r.val_loss.is_finite());
        assert!((0.0..=1.0 + 1e-12).contains(&r.val_captured_mass));
    }
    let best = a.best_epoch.unwrap();
    assert!(a
        .history
        .iter()
        .all(|r| r.val_loss >= a.history[best - 1].val_loss));
}

#[test]
fn training_updates_running_statistics() {
    let data = tiny_data(4, 16, 3);
    let out = train(
        &data,
        &tiny_mapper(),
        &LossConfig::default(),
        &quick(1, 0),
        &AblationSpec::Full,
    )
    .unwrap();
    let mean = out
        .last
        .mapper
        .params()
        .get("stem.bn1.running_mean")
        .unwrap();
    assert!(mean.data().iter().any(|&v| v != 0.0));
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    // Eight training samples in one batch, so every epoch is the same step.
    let data = tiny_data(9, 16, 4);
    for seed in 0..3 {
        let cfg = TrainConfig {
            batch_size: 64,
            val_fraction: 0.1,
            ..quick(50, seed)
        };
        let out = train(
            &data,
            &tiny_mapper(),
            &LossConfig::default(),
            &cfg,
            &AblationSpec::Full,
        )
        .unwrap();
        let first = out.history[0].train_loss;
        let last = out.history[49].train_loss;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn ablation_variants() {
    let (m, l) = (MapperConfig::toy(), LossConfig::default());
    let suite = AblationSpec::loss_loo_suite();
    assert_eq!(suite.len(), 6);
    let labels: Vec<String> = suite
        .iter()
        .map(|s| s.variants(&m, &l).unwrap().remove(0).label)
        .collect();
    assert_eq!(
        labels,
        [
            "full",
            "w/o mse",
            "w/o bin",
            "w/o fine",
            "w/o global",
            "w/o cos"
        ]
    );

    for term in LossTerm::ALL {
        let v = AblationSpec::LossLoo { term }
            .variants(&m, &l)
            .unwrap()
            .remove(0);
        for other in LossTerm::ALL {
            let want = if other == term { 0.0 } else { l.lambda(other) };
            assert_eq!(v.loss.lambda(other), want);
        }
        assert_eq!(v.mapper, m);
    }

    let v = AblationSpec::ComponentLoo { stage: Stage::Time }
        .variants(&m, &l)
        .unwrap()
        .remove(0);
    assert_eq!(
        v.mapper.stage_modes.time,
        crate::mapper::StageMode::Disabled
    );
    assert_eq!(v.mapper.stage_modes.conv, crate::mapper::StageMode::Active);
    assert_eq!(AblationSpec::component_loo_suite().len(), 4);

    let sweep = AblationSpec::CoeffSweep {
        term: LossTerm::Cos,
        values: vec![0.0, 1.0, 2.0],
    };
    let vs = sweep.variants(&m, &l).unwrap();
    assert_eq!(
        vs.iter().map(|v| v.loss.lambda_cos).collect::<Vec<_>>(),
        [0.0, 1.0, 2.0]
    );
    let data = tiny_data(4, 16, 0);
    assert!(matches!(
        train(&data, &m, &l, &quick(0, 0), &sweep),
        Err(TrainError::Config(_))
    ));

    let json = serde_json::to_string(&AblationSpec::LossLoo {
        term: LossTerm::Fine,
    })
    .unwrap();
    assert_eq!(json, r#"{"mode":"loss_loo","term":"fine"}"#);
}

#[test]
fn loss_loo_total_equals_zeroed_lambda() {
    let base = LossConfig::default();
    let tape = Tape::new();
    let logits = tape.constant(Tensor::from_fn(&[1, 2, 6], |i| {
        ((i * 7) % 5) as f64 * 0.3 - 0.6
    }));
    let y = Tensor::from_fn(&[1, 2, 6], |i| ((i * 3) % 7) as f64 / 6.0);
    let plan = plan_pairs(&y, &base, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for term in LossTerm::ALL {
        let v = AblationSpec::LossLoo { term }
            .variants(&MapperConfig::toy(), &base)
            .unwrap()
            .remove(0);
        let (_, ablated) = loss_total(logits, &y, 1.0, &plan, &v.loss).unwrap();
        let (_, full) = loss_total(logits, &y, 1.0, &plan, &base).unwrap();
        let want = full.total - base.lambda(term) * full.terms.get(term);
        assert!((ablated.total - want).abs() < 1e-12, "{term:?}");
    }
}

#[test]
fn evaluate_contracts() {
    let data = tiny_data(3, 16, 6);
    let g = *data.geometry();
    let ckpt = Checkpoint {
        mapper: HybridAxialMapper::new(tiny_mapper(), g, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap(),
        s_max: 1.0,
    };
    let ratios: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let reports = evaluate(&ckpt, &data, &ratios).unwrap();
    assert_eq!(reports.len(), 9);
    assert_eq!(reports.iter().map(|r| r.ratio).collect::<Vec<_>>(), ratios);

    let full = evaluate(&ckpt, &data, &[1.0]).unwrap();
    assert_eq!(full[0].captured_mass_ratio.mean, 1.0);

    // Injecting the oracle as the prediction.
    let flat = [3 * g.target_layers, g.target_heads, 16];
    let y: Vec<f64> = data
        .samples()
        .iter()
        .flat_map(|s| s.y.data().iter().copied())
        .collect();
    let y = Tensor::new(flat.to_vec(), y).unwrap();
    for r in evaluate_scores(&y, &y, &ratios).unwrap() {
        assert_eq!(r.topk_overlap.mean, 1.0);
        assert_eq!(r.captured_mass_ratio.mean, 1.0);
    }

    let other = GeneratorSpec {
        geometry: ModelGeometry {
            target_heads: 2,
            ..g
        },
        tokens: 16,
        ..GeneratorSpec::default()
    };
    let mismatched = Dataset::new(other.geometry, generate(&other, 1).unwrap()).unwrap();
    assert!(matches!(
        evaluate(&ckpt, &mismatched, &[0.5]),
        Err(TrainError::GeometryMismatch { .. })
    ));
}

#[test]
fn predictions_match_forward_full() {
    let data = tiny_data(2, 20, 7);
    let ckpt = Checkpoint {
        mapper: HybridAxialMapper::new(
            tiny_mapper(),
            *data.geometry(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap(),
        s_max: 1.0,
    };
    let pred = predict(&ckpt, &data).unwrap();
    for (i, s) in data.samples().iter().enumerate() {
        let x = s.x.reshape(&[1, 2, 2, 20]).unwrap();
        let want = ckpt.mapper.forward_full(&x).unwrap();
        assert_eq!(pred.outer(i), want.data());
    }
}

#[test]
fn history_csv_columns_align() {
    let header = EpochRecord::csv_header();
    assert_eq!(header.len(), 16);
    let record = EpochRecord {
        epoch: 1,
        lr: 1e-4,
        train_loss: 2.0,
        train_terms: TermValues::default(),
        val_loss: 3.0,
        val_terms: TermValues::default(),
        val_captured_mass: 0.5,
        grad_norm: 1.5,
    };
    let row = record.csv_row();
    assert_eq!(row.len(), header.len());
    assert_eq!(
        row[header
            .iter()
            .position(|h| h == "val_captured_mass")
            .unwrap()],
        "0.5"
    );
}
