use proptest::prelude::*;
use proxyprune::autodiff::Tensor;
use proxyprune::loss::LossConfig;
use proxyprune::mapper::{
    read_checkpoint, write_checkpoint, Checkpoint, HybridAxialMapper, MapperConfig, Mode,
    ModelGeometry,
};
use proxyprune::oracle::{
    generate, read_trace, write_trace, GeneratorSpec, Mixing, OracleSample, TraceHeader,
};
use proxyprune::train::{evaluate, predict, train, AblationSpec, Dataset, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geometry(proxy_heads: usize, target_heads: usize) -> ModelGeometry {
    ModelGeometry {
        target_layers: 3,
        target_heads,
        proxy_layers: 2,
        proxy_heads,
        head_dim: 4,
    }
}

fn small_mapper() -> MapperConfig {
    MapperConfig {
        d_time: 8,
        enc_layers: 1,
        d_head: 4,
        crop_len: 16,
        stride: 8,
        ..MapperConfig::toy()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trace_round_trip_is_bit_exact(
        seed in any::<u64>(),
        tokens in 1usize..40,
        n in 0usize..4,
        hs in 1usize..4,
        hl in 1usize..5,
        per_layer in any::<bool>(),
    ) {
        let spec = GeneratorSpec {
            seed,
            geometry: geometry(hs, hl),
            tokens,
            mixing: if per_layer { Mixing::RandomPerLayer } else { Mixing::Random },
            ..GeneratorSpec::default()
        };
        let samples = generate(&spec, n).unwrap();
        let header = TraceHeader::for_spec(&spec, n);
        let mut bytes = Vec::new();
        write_trace(&mut bytes, &header, &samples).unwrap();
        let (back_header, back) = read_trace(bytes.as_slice()).unwrap();
        prop_assert_eq!(back_header, header);
        let bits = |s: &[OracleSample]| -> Vec<u64> {
            s.iter().flat_map(|s| s.x.data().iter().chain(s.y.data())).map(|v| v.to_bits()).collect()
        };
        prop_assert_eq!(bits(&back), bits(&samples));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions(seed in any::<u64>(), s_max in 0.01f64..10.0, tokens in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapper = HybridAxialMapper::new(small_mapper(), geometry(2, 3), &mut rng).unwrap();
        let ckpt = Checkpoint { mapper, s_max };
        let mut bytes = Vec::new();
        write_checkpoint(&ckpt, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.s_max.to_bits(), s_max.to_bits());
        prop_assert_eq!(back.checksum(), ckpt.checksum());
        let x = Tensor::from_fn(&[1, 2, tokens], |i| (i as f64 * 0.37).sin().abs());
        prop_assert_eq!(
            back.mapper.sliding_forward(&x, Mode::Eval).unwrap(),
            ckpt.mapper.sliding_forward(&x, Mode::Eval).unwrap()
        );
    }
}

#[test]
fn trained_checkpoint_survives_disk_and_scores_identically() {
    let spec = GeneratorSpec {
        seed: 4,
        tokens: 24,
        ..GeneratorSpec::default()
    };
    let data = Dataset::new(spec.geometry, generate(&spec, 8).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_steps: 2,
        lr: 1e-3,
        val_fraction: 0.25,
        ..TrainConfig::default()
    };
    let out = train(
        &data,
        &small_mapper(),
        &LossConfig::default(),
        &cfg,
        &AblationSpec::Full,
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mapper.pxmc");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), out.best.to_bytes());
    assert_eq!(
        predict(&loaded, &data).unwrap(),
        predict(&out.best, &data).unwrap()
    );

    let reports = evaluate(&loaded, &data, &[0.2, 1.0]).unwrap();
    assert_eq!(reports.len(), 2);
    assert!((reports[1].captured_mass_ratio.mean - 1.0).abs() < 1e-12);
    assert!(reports[0].captured_mass_ratio.mean > 0.0);
}
