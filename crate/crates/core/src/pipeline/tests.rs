use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mapper::{Checkpoint, HybridAxialMapper, MapperConfig};
use crate::oracle::{generate, GeneratorSpec};

fn profile(
    t_prefill: f64,
    t_secondary: f64,
    t_proxy: f64,
    t_mapper: f64,
    beta: f64,
) -> LatencyProfile {
    LatencyProfile {
        t_prefill,
        t_secondary,
        t_proxy,
        t_mapper,
        shared_contention: beta,
    }
}

#[test]
fn dual_examples() {
    let r = simulate_dual(&profile(10.0, 22.1, 2.0, 0.5, 0.0)).unwrap();
    assert_eq!(r.proxykv_time, 10.0);
    assert!((r.baseline_time - 32.1).abs() < 1e-12);
    assert!((r.speedup - 3.21).abs() < 1e-12);
    assert!(r.budget_ok);

    let r = simulate_dual(&profile(10.0, 0.0, 2.0, 0.5, 0.0)).unwrap();
    assert_eq!(r.speedup, 1.0);

    let r = simulate_dual(&profile(10.0, 22.1, 9.0, 2.0, 0.0)).unwrap();
    assert!(!r.budget_ok);
    assert_eq!(r.proxykv_time, 11.0);
    assert!(r.speedup < 3.21);
}

#[test]
fn shared_examples() {
    let p = profile(10.0, 5.5, 2.0, 0.5, 0.4);
    let r = simulate_shared(&p).unwrap();
    assert!((r.proxykv_time - 11.0).abs() < 1e-12);
    assert!((r.speedup - 15.5 / 11.0).abs() < 1e-12);
    assert!((r.speedup - 1.41).abs() < 0.01);

    let serial = simulate_shared(&LatencyProfile {
        shared_contention: 1.0,
        ..p
    })
    .unwrap();
    assert_eq!(serial.proxykv_time, 12.5);
    let free = simulate_shared(&LatencyProfile {
        shared_contention: 0.0,
        ..p
    })
    .unwrap();
    assert_eq!(free, simulate_dual(&p).unwrap());
}

#[test]
fn invalid_profiles_are_rejected() {
    assert!(matches!(
        simulate_dual(&profile(-1.0, 0.0, 0.0, 0.0, 0.0)),
        Err(SimError::Profile(_))
    ));
    assert!(matches!(
        simulate_shared(&profile(1.0, 0.0, 0.0, 0.0, 1.5)),
        Err(SimError::Profile(_))
    ));
    assert!(simulate_dual(&profile(f64::NAN, 0.0, 0.0, 0.0, 0.0)).is_err());
}

#[test]
fn mapper_share_examples() {
    let p = profile(10.0, 22.1, 2.0, 0.5, 0.0);
    assert!((mapper_share(&p, Regime::Dual).unwrap() - 0.05).abs() < 1e-12);
    assert_eq!(
        mapper_share(&profile(10.0, 1.0, 2.0, 0.0, 0.0), Regime::Dual).unwrap(),
        0.0
    );
    let mut last = f64::INFINITY;
    for t_prefill in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let share = mapper_share(&profile(t_prefill, 0.0, 2.0, 0.5, 0.3), Regime::Shared).unwrap();
        assert!(share <= last);
        last = share;
    }
}

proptest! {
    #[test]
    fn dual_within_budget_never_slows_down(
        t_prefill in 0.01f64..100.0,
        t_secondary in 0.0f64..100.0,
        frac in 0.0f64..1.0,
        split in 0.0f64..1.0,
        beta in 0.0f64..1.0,
    ) {
        let scoring = frac * t_prefill;
        let p = profile(t_prefill, t_secondary, split * scoring, (1.0 - split) * scoring, beta);
        let dual = simulate_dual(&p).unwrap();
        prop_assert!(dual.budget_ok);
        prop_assert!(dual.speedup >= 1.0);
        let shared = simulate_shared(&LatencyProfile { shared_contention: 0.0, ..p }).unwrap();
        prop_assert_eq!(shared, dual);
        prop_assert!(simulate_shared(&p).unwrap().proxykv_time >= dual.proxykv_time);
    }
}

#[test]
fn reference_timeline_levels() {
    let phases = MemoryPhases::reference();
    let tl = memory_timeline(&phases, SAMPLE_INTERVAL).unwrap();
    assert_eq!(tl.levels(|s| s.proxy_gb), [3.5, 26.7, 3.5]);
    assert_eq!(tl.levels(|s| s.target_gb), [16.1, 39.7, 20.5]);
    assert_eq!(tl.samples.len(), 241);
    assert_eq!(tl.samples[0].phase, Phase::Load);
    assert_eq!(tl.samples.last().unwrap().phase, Phase::Decode);
    assert!((tl.premium - 26.7 / 39.7).abs() < 1e-15);
    assert_eq!(phases.proxy.retained_kv(), 0.0);
    assert!((phases.target.activation_peak() - 23.6).abs() < 1e-12);
}

#[test]
fn premium_is_zero_iff_proxy_is_absent() {
    let mut phases = MemoryPhases::reference();
    phases.proxy = DeviceMemory {
        name: "proxy".into(),
        weights: 0.0,
        prefill_peak: 0.0,
        decode_steady: 0.0,
    };
    assert_eq!(memory_timeline(&phases, 0.5).unwrap().premium, 0.0);
    phases.proxy.prefill_peak = 0.1;
    assert!(memory_timeline(&phases, 0.5).unwrap().premium > 0.0);
}

#[test]
fn invalid_phases_are_rejected() {
    let mut phases = MemoryPhases::reference();
    phases.target.decode_steady = 50.0;
    assert!(matches!(
        memory_timeline(&phases, 0.05),
        Err(SimError::Phases(_))
    ));
    let mut phases = MemoryPhases::reference();
    phases.proxy.decode_steady = 5.0;
    phases.proxy.prefill_peak = 26.7;
    assert!(matches!(
        memory_timeline(&phases, 0.05),
        Err(SimError::Phases(_))
    ));
    assert!(memory_timeline(&MemoryPhases::reference(), 0.0).is_err());
}

fn fixture(seed: u64, samples: usize) -> (Vec<crate::oracle::OracleSample>, Checkpoint) {
    let spec = GeneratorSpec {
        seed,
        tokens: 40,
        ..GeneratorSpec::default()
    };
    let config = MapperConfig {
        crop_len: 32,
        stride: 16,
        ..MapperConfig::toy()
    };
    let mapper =
        HybridAxialMapper::new(config, spec.geometry, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
    (
        generate(&spec, samples).unwrap(),
        Checkpoint { mapper, s_max: 1.0 },
    )
}

#[test]
fn pipeline_matches_sequential() {
    for seed in 0..5 {
        let (samples, ckpt) = fixture(seed, 3);
        let run = live_pipeline_demo(&samples, &ckpt, 0.3).unwrap();
        assert_eq!(run.masks, sequential_masks(&samples, &ckpt, 0.3).unwrap());
    }
}

#[test]
fn single_sample_completes() {
    let (samples, ckpt) = fixture(1, 1);
    let run = live_pipeline_demo(&samples, &ckpt, 0.2).unwrap();
    assert_eq!(run.masks.len(), 1);
    assert_eq!(run.masks[0].shape(), &[4, 4, 40]);
}

#[test]
fn slow_producer_leaves_consumer_idle() {
    let (samples, ckpt) = fixture(2, 8);
    let run = live_pipeline_demo(&samples, &ckpt, 0.2).unwrap();
    assert!(run.consumer_idle > std::time::Duration::ZERO);
    for (i, t) in run.times.iter().enumerate() {
        assert!(
            t.score_start <= t.score_end
                && t.score_end <= t.mask_start
                && t.mask_start <= t.mask_end
        );
        if i > 0 {
            // One consumer: masks are produced strictly in order.
            assert!(t.mask_start >= run.times[i - 1].mask_end);
        }
    }
}

#[test]
fn producer_failure_propagates() {
    let (mut samples, ckpt) = fixture(3, 4);
    samples[2].x = crate::autodiff::Tensor::zeros(&[1, 2, 40]);
    assert!(matches!(
        live_pipeline_demo(&samples, &ckpt, 0.2),
        Err(SimError::Mapper(_))
    ));
}
