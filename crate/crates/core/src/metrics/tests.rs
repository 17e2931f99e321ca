use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Stable descending sort keeps equal scores in index order.
fn sort_oracle(scores: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut mask = vec![false; scores.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

#[test]
fn topk_examples() {
    let m = topk_mask(&t(&[3], &[3.0, 1.0, 2.0]), 0.34).unwrap();
    assert_eq!(m.k(), 2);
    assert_eq!(m.bits(), &[true, false, true]);
    let m = topk_mask(&t(&[5], &[0.5, 0.1, 0.4, 0.2, 0.3]), 0.4).unwrap();
    assert_eq!(m.bits(), &[true, false, true, false, false]);
    let m = topk_mask(&t(&[3], &[0.3, 0.3, 0.1]), 0.2).unwrap();
    assert_eq!((m.k(), m.bits()), (1, &[true, false, false][..]));
    let m = topk_mask(&t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), 1.0).unwrap();
    assert!(m.bits().iter().all(|&b| b));
}

#[test]
fn topk_count_rounds_up_and_absorbs_float_noise() {
    assert_eq!(topk_count(0.2, 128).unwrap(), 26);
    assert_eq!(topk_count(0.3, 10).unwrap(), 3);
    assert_eq!(topk_count(0.01, 10).unwrap(), 1);
    assert_eq!(topk_count(0.5, 7).unwrap(), 4);
    assert_eq!(topk_count(0.0, 4), Err(MetricsError::InvalidRatio(0.0)));
    assert_eq!(topk_count(1.5, 4), Err(MetricsError::InvalidRatio(1.5)));
    assert_eq!(topk_count(0.5, 0), Err(MetricsError::EmptyTokenAxis));
}

#[test]
fn topk_rejects_bad_input() {
    assert_eq!(
        topk_mask(&t(&[2], &[f64::NAN, 1.0]), 0.5),
        Err(MetricsError::NonFinite)
    );
    assert!(matches!(
        PruneMask::new(vec![3], vec![true, true, false], 0.2),
        Err(MetricsError::CountMismatch {
            found: 2,
            expected: 1,
            ..
        })
    ));
}

#[test]
fn topk_matches_sort_oracle_exhaustively() {
    let alphabet = [0.1, 0.2, 0.3];
    let ratios = [0.05, 0.125, 0.2, 0.25, 0.375, 0.5, 0.75, 1.0];
    let mut v = [0.0; 8];
    for code in 0..3usize.pow(8) {
        let mut c = code;
        for slot in &mut v {
            *slot = alphabet[c % 3];
            c /= 3;
        }
        for &r in &ratios {
            let k = topk_count(r, 8).unwrap();
            assert_eq!(
                topk_mask(&t(&[8], &v), r).unwrap().bits(),
                sort_oracle(&v, k)
            );
        }
    }
}

#[test]
fn topk_matches_sort_oracle_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=32);
        // Coarse values force frequent ties.
        let v: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..6u8)))
            .collect();
        let r: f64 = rng.random_range(0.01..=1.0);
        let k = topk_count(r, n).unwrap();
        assert_eq!(
            topk_mask(&t(&[n], &v), r).unwrap().bits(),
            sort_oracle(&v, k)
        );
    }
}

#[test]
fn captured_mass_examples() {
    let y = t(&[3], &[0.5, 0.3, 0.2]);
    let pred = PruneMask::new(vec![3], vec![false, true, false], 0.3).unwrap();
    assert!((captured_mass_ratio(&pred, &y).unwrap().mean - 0.6).abs() < 1e-15);
    let oracle = topk_mask(&y, 0.3).unwrap();
    assert_eq!(captured_mass_ratio(&oracle, &y).unwrap().mean, 1.0);

    let y = t(&[4], &[0.0, 0.0, 0.7, 0.1]);
    let pred = PruneMask::new(vec![4], vec![true, true, false, false], 0.5).unwrap();
    assert_eq!(captured_mass_ratio(&pred, &y).unwrap().mean, 0.0);

    let zero = t(&[4], &[0.0; 4]);
    assert_eq!(captured_mass_ratio(&pred, &zero).unwrap().mean, 1.0);
}

#[test]
fn overlap_examples() {
    let a = PruneMask::new(vec![4], vec![true, true, false, false], 0.5).unwrap();
    let b = PruneMask::new(vec![4], vec![false, false, true, true], 0.5).unwrap();
    let c = PruneMask::new(vec![4], vec![true, false, true, false], 0.5).unwrap();
    assert_eq!(topk_overlap(&a, &a).unwrap().mean, 1.0);
    assert_eq!(topk_overlap(&a, &b).unwrap().mean, 0.0);
    assert_eq!(topk_overlap(&a, &c).unwrap().mean, 0.5);
}

#[test]
fn spearman_examples() {
    let y = t(&[2, 4], &[0.1, 0.4, 0.2, 0.3, 1.0, 2.0, 3.0, 4.0]);
    assert_eq!(spearman(&y, &y).unwrap().mean, 1.0);
    let rev = t(&[1, 4], &[4.0, 3.0, 2.0, 1.0]);
    let fwd = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
    assert!((spearman(&rev, &fwd).unwrap().mean + 1.0).abs() < 1e-15);
    assert_eq!(
        average_ranks(&[2.0, 1.0, 2.0, 3.0]),
        vec![2.5, 1.0, 2.5, 4.0]
    );
    // Ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4): Pearson = 4.5 / √(4.5·5).
    let tied = t(&[1, 4], &[1.0, 2.0, 2.0, 3.0]);
    let expected = 4.5 / (4.5f64 * 5.0).sqrt();
    assert!((spearman(&tied, &fwd).unwrap().mean - expected).abs() < 1e-15);
    let flat = t(&[1, 4], &[1.0; 4]);
    assert_eq!(spearman(&flat, &flat).unwrap().mean, 1.0);
    assert_eq!(spearman(&flat, &fwd).unwrap().mean, 0.0);
    assert_eq!(
        spearman(&t(&[1], &[1.0]), &t(&[1], &[1.0])),
        Err(MetricsError::TooShort(1))
    );
}

#[test]
fn apply_mask_examples() {
    let m = PruneMask::new(vec![5], vec![true, false, true, false, false], 0.4).unwrap();
    assert_eq!(apply_mask(&m, 128, 2).retained, vec![vec![0, 2]]);

    let scores = Tensor::from_fn(&[1024], |i| ((i * 7919) % 1024) as f64);
    let half = topk_mask(&scores, 0.5).unwrap();
    let app = apply_mask(&half, 128, 2);
    assert_eq!(app.bytes_saved_per_slice, 262_144);
    assert_eq!(app.retained[0].len(), 512);

    let all = topk_mask(&scores, 1.0).unwrap();
    assert_eq!(apply_mask(&all, 128, 2).bytes_saved_total, 0);
}

#[test]
fn evaluate_aggregates_by_unweighted_mean() {
    let y = t(&[2, 3], &[0.5, 0.3, 0.2, 0.1, 0.2, 0.7]);
    let pred = t(&[2, 3], &[0.0, 1.0, 0.5, 0.0, 0.0, 9.0]);
    let report = evaluate(&pred, &y, 0.3).unwrap();
    assert_eq!(report.captured_mass_ratio.per_slice, vec![0.6, 1.0]);
    assert!((report.captured_mass_ratio.mean - 0.8).abs() < 1e-15);
    assert_eq!(report.topk_overlap.per_slice, vec![0.0, 1.0]);
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0, 2.0]), 1..24)
}

proptest! {
    #[test]
    fn selection_is_rank_invariant(v in scores_strategy(), a in 0.5f64..4.0, c in -3.0f64..3.0, r in 0.01f64..=1.0) {
        let n = v.len();
        let moved: Vec<f64> = v.iter().map(|x| a * x + c).collect();
        let (a, b) = (topk_mask(&t(&[n], &v), r).unwrap(), topk_mask(&t(&[n], &moved), r).unwrap());
        prop_assert_eq!(a.bits(), b.bits());
    }

    #[test]
    fn oracle_mask_captures_everything(v in prop::collection::vec(0.0f64..1.0, 1..40), r in 0.01f64..=1.0) {
        let y = t(&[v.len()], &v);
        let m = topk_mask(&y, r).unwrap();
        prop_assert_eq!(captured_mass_ratio(&m, &y).unwrap().mean, 1.0);
        prop_assert_eq!(topk_overlap(&m, &m).unwrap().mean, 1.0);
    }

    #[test]
    fn metrics_stay_in_range(
        a in prop::collection::vec(0.0f64..1.0, 2..40),
        seed in any::<u64>(),
        r in 0.01f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let (ta, tb) = (t(&[a.len()], &a), t(&[b.len()], &b));
        let report = evaluate(&ta, &tb, r).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&report.captured_mass_ratio.mean));
        prop_assert!((0.0..=1.0).contains(&report.topk_overlap.mean));
        prop_assert!((-1.0..=1.0).contains(&report.spearman.mean));
        let (ma, mb) = (topk_mask(&ta, r).unwrap(), topk_mask(&tb, r).unwrap());
        prop_assert_eq!(topk_overlap(&ma, &mb).unwrap(), topk_overlap(&mb, &ma).unwrap());
    }
}
