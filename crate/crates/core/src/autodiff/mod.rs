//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! [`Tensor`] is plain row-major `f64` storage. A [`Tape`] records operations
//! on [`Var`] handles during a forward pass; [`Tape::backward`] then fills in
//! gradients for every leaf created with [`Tape::param`].

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{BatchStats, NormMode, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("axis {axis} out of range for {ndim}-d tensor")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("batch norm needs at least 2 values per channel in train mode, got {count}")]
    DegenerateBatch { count: usize },
    #[error("backward requires a single-element root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Exact GELU, `x · Φ(x)`, for use outside a tape.
pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}

/// Logistic sigmoid, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// `ln(1 + eˣ)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    kernels::softplus(x)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheck};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_passes(report: &GradCheck, tol: f64) {
        for (i, err) in report.relative_errors.iter().enumerate() {
            assert!(
                *err < tol,
                "input {i}: relative error {err:e} (report {report:?})"
            );
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::new(vec![2, 2], vec![1.5, -2.0, 3.25, 4.0]).unwrap());
        assert_eq!(eye.matmul(m).unwrap().to_tensor(), m.to_tensor());

        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().to_tensor().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn grad_of_sum_of_product_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a0, b0) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
        let tape = Tape::new();
        let a = tape.param(a0.clone());
        let b = tape.constant(b0.clone());
        let loss = a.matmul(b).unwrap().sum();
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let want: f64 = (0..2).map(|j| b0.get(&[k, j])).sum();
                assert!((g.get(&[i, k]) - want).abs() < 1e-12);
            }
        }
        let fd = check_gradients(&[a0, b0], 1e-6, |_, v| v[0].matmul(v[1]).unwrap().sum());
        assert_passes(&fd, 1e-6);
    }

    #[test]
    fn conv1d_identity_kernel_and_hand_example() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let delta = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv1d(delta, Some(zero), 1).unwrap();
        assert_eq!(y.to_tensor().data(), &[1.0, 2.0, 3.0]);

        let ones = tape.constant(Tensor::full(&[1, 1, 3], 1.0));
        let y = x.conv1d(ones, None, 1).unwrap();
        assert_eq!(y.to_tensor().data(), &[3.0, 6.0, 5.0]);

        let bad_w = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(
            x.conv1d(bad_w, None, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [
                random(&[2, 3, 5], &mut rng),
                random(&[4, 3, 3], &mut rng),
                random(&[4], &mut rng),
                random(&[2, 4, 5], &mut rng),
            ];
            let fd = check_gradients(&inputs, 1e-6, |_, v| {
                v[0].conv1d(v[1], Some(v[2]), 1)
                    .unwrap()
                    .mul(v[3])
                    .unwrap()
                    .sum()
            });
            assert_passes(&fd, 1e-6);
        }
    }

    #[test]
    fn batch_norm_constant_input_yields_beta() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 3], 4.0));
        let gamma = tape.constant(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let beta = tape.constant(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        let (y, stats) = x.batch_norm(gamma, beta, NormMode::Train, 1e-5).unwrap();
        let y = y.to_tensor();
        for b in 0..2 {
            for t in 0..3 {
                assert_eq!(y.get(&[b, 0, t]), 0.5);
                assert_eq!(y.get(&[b, 1, t]), -1.0);
            }
        }
        assert_eq!(stats.unwrap().mean, vec![4.0, 4.0]);
    }

    #[test]
    fn batch_norm_standardized_input_is_near_identity() {
        // per channel: values ±1 -> mean 0, biased var 1
        let data = vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 4], data.clone()).unwrap());
        let (y, _) = x
            .batch_norm(
                tape.constant(Tensor::full(&[1], 1.0)),
                tape.constant(Tensor::zeros(&[1])),
                NormMode::Train,
                1e-5,
            )
            .unwrap();
        for (a, b) in y.to_tensor().data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_eval_matches_hand_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.constant(Tensor::new(vec![2], vec![1.5, 0.5]).unwrap());
        let beta = tape.constant(Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        let (rm, rv) = ([0.5, 3.0], [4.0, 0.25]);
        let eps = 1e-5;
        let (y, stats) = x
            .batch_norm(
                gamma,
                beta,
                NormMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                },
                eps,
            )
            .unwrap();
        assert!(stats.is_none());
        let y = y.to_tensor();
        let hand = |v: f64, c: usize, g: f64, b: f64| (v - rm[c]) / (rv[c] + eps).sqrt() * g + b;
        assert!((y.get(&[0, 0, 0]) - hand(1.0, 0, 1.5, 0.1)).abs() < 1e-12);
        assert!((y.get(&[0, 0, 1]) - hand(2.0, 0, 1.5, 0.1)).abs() < 1e-12);
        assert!((y.get(&[0, 1, 0]) - hand(3.0, 1, 0.5, 0.2)).abs() < 1e-12);
        assert!((y.get(&[0, 1, 1]) - hand(4.0, 1, 0.5, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_degenerate_batch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(
            x.batch_norm(g, b, NormMode::Train, 1e-5).unwrap_err(),
            TensorError::DegenerateBatch { count: 1 }
        );
    }

    #[test]
    fn normalization_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let inputs = [
                random(&[2, 3, 4], &mut rng),
                random(&[3], &mut rng),
                random(&[3], &mut rng),
                random(&[2, 3, 4], &mut rng),
            ];
            let fd = check_gradients(&inputs, 1e-6, |_, v| {
                let (y, _) = v[0].batch_norm(v[1], v[2], NormMode::Train, 1e-5).unwrap();
                y.mul(v[3]).unwrap().sum()
            });
            assert_passes(&fd, 1e-5);
            let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
            let fd = check_gradients(&inputs, 1e-6, |_, v| {
                let mode = NormMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                };
                let (y, _) = v[0].batch_norm(v[1], v[2], mode, 1e-5).unwrap();
                y.mul(v[3]).unwrap().sum()
            });
            assert_passes(&fd, 1e-5);

            let inputs = [
                random(&[3, 5], &mut rng),
                random(&[5], &mut rng),
                random(&[5], &mut rng),
                random(&[3, 5], &mut rng),
            ];
            let fd = check_gradients(&inputs, 1e-6, |_, v| {
                v[0].layer_norm(v[1], v[2], 1e-5)
                    .unwrap()
                    .mul(v[3])
                    .unwrap()
                    .sum()
            });
            assert_passes(&fd, 1e-5);
        }
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let s = x.softmax(0).unwrap().to_tensor();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            x.softmax(1),
            Err(TensorError::InvalidAxis { axis: 1, ndim: 1 })
        ));
    }

    #[test]
    fn softmax_rows_are_distributions_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-30.0..30.0));
        let tape = Tape::new();
        let x = tape.constant(t);
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap();
            let s = y.sum_axis(axis).unwrap().to_tensor();
            assert!(y.to_tensor().data().iter().all(|&v| v >= 0.0));
            for v in s.data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_and_structural_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = [random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng)];
            type Case = Box<dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>>;
            let cases: Vec<(&str, Case)> = vec![
                ("gelu", Box::new(|v| v[0].gelu().mul(v[1]).unwrap().sum())),
                (
                    "sigmoid",
                    Box::new(|v| v[0].sigmoid().mul(v[1]).unwrap().sum()),
                ),
                (
                    "softplus",
                    Box::new(|v| v[0].softplus().mul(v[1]).unwrap().sum()),
                ),
                ("exp", Box::new(|v| v[0].exp().mul(v[1]).unwrap().sum())),
                (
                    "sub",
                    Box::new(|v| v[0].sub(v[1]).unwrap().mul(v[0]).unwrap().mean()),
                ),
                (
                    "softmax",
                    Box::new(|v| v[0].softmax(1).unwrap().mul(v[1]).unwrap().sum()),
                ),
                (
                    "permute",
                    Box::new(|v| {
                        let p = v[0].permute(&[2, 0, 1]).unwrap();
                        let q = v[1].permute(&[2, 0, 1]).unwrap();
                        p.mul(q).unwrap().sum()
                    }),
                ),
                (
                    "sum_axis+expand",
                    Box::new(|v| {
                        let s = v[0].sum_axis(1).unwrap().expand_axis(1, 3).unwrap();
                        s.mul(v[1]).unwrap().sum()
                    }),
                ),
                (
                    "gather",
                    Box::new(|v| {
                        let g = v[0].reshape(&[24]).unwrap().gather(&[0, 5, 5, 23]).unwrap();
                        g.mul(g).unwrap().sum()
                    }),
                ),
                (
                    "batched matmul_t",
                    Box::new(|v| {
                        let a = v[0].reshape(&[2, 3, 4]).unwrap();
                        let b = v[1].reshape(&[2, 3, 4]).unwrap();
                        let p = a.matmul_t(b).unwrap().softmax(2).unwrap();
                        p.matmul(a).unwrap().mul(b).unwrap().sum()
                    }),
                ),
                (
                    "row_cosine",
                    Box::new(|v| v[0].row_cosine(v[1], 1e-12).unwrap().sum()),
                ),
                (
                    "bce",
                    Box::new(|v| {
                        let t: Vec<f64> = (0..24).map(|i| (i % 2) as f64).collect();
                        v[0].mul(v[1]).unwrap().bce_with_logits(&t).unwrap()
                    }),
                ),
            ];
            for (name, f) in &cases {
                let fd = check_gradients(&inputs, 1e-6, |_, v| f(v));
                for err in &fd.relative_errors {
                    assert!(*err < 1e-5, "{name} seed {seed}: {fd:?}");
                }
            }
        }
    }

    #[test]
    fn shared_weight_matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)];
        let fd = check_gradients(&inputs, 1e-6, |_, v| {
            v[0].matmul(v[1]).unwrap().gelu().sum()
        });
        assert_passes(&fd, 1e-6);
        let inputs = [random(&[4, 3], &mut rng), random(&[2, 5, 3], &mut rng)];
        let fd = check_gradients(&inputs, 1e-6, |_, v| {
            v[0].matmul_t(v[1]).unwrap().sigmoid().sum()
        });
        assert_passes(&fd, 1e-6);
    }

    #[test]
    fn diamond_graph_doubles_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let single = x.scale(3.0).sum();
        tape.backward(single).unwrap();
        let g1 = tape.grad(x).unwrap();

        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let y = x.scale(3.0);
        let both = y.add(y).unwrap().sum();
        tape.backward(both).unwrap();
        let g2 = tape.grad(x).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 2.0));
        let p = tape.param(Tensor::full(&[2], 1.0));
        let loss = c.mul(p).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap().data(), &[2.0, 2.0]);
        assert!(matches!(tape.backward(c), Err(TensorError::NotScalar(_))));
    }
}
