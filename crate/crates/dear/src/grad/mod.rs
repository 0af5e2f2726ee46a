//! Minimal reverse-mode automatic differentiation over (channels x length)
//! tensors, with exactly the op vocabulary the watermarking networks and
//! losses need, plus an Adam optimizer and a binary checkpoint format.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{AdamCheckpoint, Checkpoint, FORMAT_VERSION};
pub use graph::{BackwardStats, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{check_gradients, DEFAULT_STEP};
    use super::*;
    use crate::error::Result;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Random tensor with entries kept away from activation kinks.
    fn rand_tensor(r: &mut ChaCha8Rng, c: usize, n: usize) -> Tensor {
        let data = (0..c * n)
            .map(|_| {
                let mag = r.gen_range(0.05..1.0);
                if r.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::from_vec(c, n, data).unwrap()
    }

    /// Build a graph, run `build` to get a scalar loss, backprop, and
    /// finite-difference check every input's gradient.
    fn fd_check(
        inputs: &[Tensor],
        build: &mut dyn FnMut(&mut Graph, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|v| g.grad(*v).cloned().expect("gradient populated"))
            .collect();

        let report = check_gradients(inputs, &analytic, DEFAULT_STEP, &mut |xs| {
            let mut g2 = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|t| g2.leaf(t.clone(), false)).collect();
            let out = build(&mut g2, &vs)?;
            Ok(g2.value(out).item())
        })
        .unwrap();
        assert!(
            report.max_rel_error < tol,
            "gradient mismatch: {report:?}"
        );
    }

    #[test]
    fn conv1d_k1_scales() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), false);
        let w = g.leaf(Tensor::from_vec(1, 1, vec![2.0]).unwrap(), false);
        let b = g.leaf(Tensor::zeros(1, 1), false);
        let y = g.conv1d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 5, vec![1.0, -2.0, 3.0, 0.5, 0.0]).unwrap(), false);
        let w = g.leaf(Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap(), false);
        let y = g.conv1d(x, w, None, 3, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv1d_rejects_even_kernel_and_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 8), false);
        let w_even = g.leaf(Tensor::zeros(3, 2 * 4), false);
        assert!(g.conv1d(x, w_even, None, 4, 1).is_err());
        let w_bad = g.leaf(Tensor::zeros(3, 3 * 3), false);
        assert!(g.conv1d(x, w_bad, None, 3, 1).is_err());
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        for seed in [1u64, 2, 3] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 2, 16);
            let w = rand_tensor(&mut r, 3, 2 * 3);
            let b = rand_tensor(&mut r, 3, 1);
            fd_check(
                &[x, w, b],
                &mut |g, vs| {
                    let y = g.conv1d(vs[0], vs[1], Some(vs[2]), 3, 1)?;
                    let t = g.tanh(y);
                    let zero = g.constant(Tensor::zeros(3, 16));
                    g.mse(t, zero)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn strided_conv_shapes_and_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(1, 8), false);
        let w = g.leaf(Tensor::zeros(1, 3), false);
        let y = g.conv1d(x, w, None, 3, 2).unwrap();
        assert_eq!(g.value(y).shape(), (1, 4));

        for seed in [4u64, 5, 6] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 2, 15);
            let w = rand_tensor(&mut r, 2, 2 * 5);
            fd_check(
                &[x, w],
                &mut |g, vs| {
                    let y = g.conv1d(vs[0], vs[1], None, 5, 3)?;
                    let zero = g.constant(Tensor::zeros(2, 5));
                    g.mse(y, zero)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn stride_one_equals_conv1d() {
        let mut r = rng(9);
        let x = rand_tensor(&mut r, 2, 12);
        let w = rand_tensor(&mut r, 3, 2 * 3);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let wv = g.leaf(w, false);
        let a = g.conv1d(xv, wv, None, 3, 1).unwrap();
        let b = g.conv1d(xv, wv, None, 3, 1).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).item(), 0.5);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.25);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap(), true);
        let loss = g.mse(a, a).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_and_loss_gradients() {
        for seed in [10u64, 11, 12] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 2, 9);
            let y = rand_tensor(&mut r, 2, 9);
            fd_check(
                &[x.clone(), y.clone()],
                &mut |g, vs| {
                    let a = g.leaky_relu(vs[0], 0.2);
                    let b = g.tanh(vs[1]);
                    g.mse(a, b)
                },
                1e-5,
            );
            fd_check(
                &[x.clone()],
                &mut |g, vs| {
                    let s = g.sigmoid(vs[0]);
                    let c = g.clamp(s, 1e-6, 1.0 - 1e-6);
                    let l = g.log(c)?;
                    Ok(g.mean_over_length(l))
                        .map(|m| g.mul_scalar(m, 1.0))
                        .and_then(|m| {
                            let z = g.constant(Tensor::zeros(2, 1));
                            let sum = g.add(m, z)?;
                            let zero = g.constant(Tensor::zeros(2, 1));
                            g.mse(sum, zero)
                        })
                },
                1e-5,
            );
        }
    }

    #[test]
    fn composite_tanh_conv_gradient() {
        for seed in [21u64, 22, 23] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 1, 16);
            let w = rand_tensor(&mut r, 2, 3);
            fd_check(
                &[x, w],
                &mut |g, vs| {
                    let y = g.conv1d(vs[0], vs[1], None, 3, 1)?;
                    let t = g.tanh(y);
                    let zero = g.constant(Tensor::zeros(2, 16));
                    g.mse(t, zero)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn dwt_idwt_graph_ops_and_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 4, vec![1.0, 1.0, 1.0, 1.0]).unwrap(), false);
        let c = g.dwt(x).unwrap();
        assert_eq!(g.value(c).shape(), (2, 2));
        let back = g.idwt(c).unwrap();
        for (a, b) in g.value(back).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        for seed in [31u64, 32, 33] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 1, 64);
            fd_check(
                &[x],
                &mut |g, vs| {
                    let c = g.dwt(vs[0])?;
                    let approx = g.slice_channels(c, 0, 1)?;
                    let zero = g.constant(Tensor::zeros(1, 32));
                    g.mse(approx, zero)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn concat_slice_block_mean_gradients() {
        for seed in [41u64, 42, 43] {
            let mut r = rng(seed);
            let a = rand_tensor(&mut r, 1, 10);
            let b = rand_tensor(&mut r, 2, 10);
            fd_check(
                &[a, b],
                &mut |g, vs| {
                    let cat = g.concat_channels(vs[0], vs[1])?;
                    let mid = g.slice_channels(cat, 1, 2)?;
                    let bm = g.block_mean(mid, 3)?;
                    let t = g.tanh(bm);
                    let zero = g.constant(Tensor::zeros(2, 3));
                    g.mse(t, zero)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn mean_loss_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 8, vec![0.5; 8]).unwrap(), true);
        let m = g.mean_over_length(x);
        g.backward(m).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert!((v - 1.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_parameter_accumulates_both_paths() {
        // loss = mse(w*x, 0) + mse(w conv x2, 0) style double use of w
        for seed in [51u64, 52, 53] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 1, 8);
            let w = rand_tensor(&mut r, 1, 3);
            fd_check(
                &[x, w],
                &mut |g, vs| {
                    let y1 = g.conv1d(vs[0], vs[1], None, 3, 1)?;
                    let y2 = g.conv1d(vs[0], vs[1], None, 3, 2)?;
                    let z1 = g.constant(Tensor::zeros(1, 8));
                    let z2 = g.constant(Tensor::zeros(1, 4));
                    let l1 = g.mse(y1, z1)?;
                    let l2 = g.mse(y2, z2)?;
                    g.add(l1, l2)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), true);
        let zero = g.constant(Tensor::zeros(1, 3));
        let loss = g.mse(x, zero).unwrap();
        g.backward(loss).unwrap();
        let once: Vec<f64> = g.grad(x).unwrap().data().to_vec();
        g.backward(loss).unwrap();
        let twice: Vec<f64> = g.grad(x).unwrap().data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(1, 4), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_touches_each_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.7, 0.1]).unwrap(), true);
        let w = g.leaf(Tensor::from_vec(1, 3, vec![0.5, 0.2, -0.4]).unwrap(), true);
        let y1 = g.conv1d(x, w, None, 3, 1).unwrap();
        let y2 = g.tanh(y1);
        let zero = g.constant(Tensor::zeros(1, 4));
        let loss = g.mse(y2, zero).unwrap();
        let total_nodes = g.len();
        let stats = g.backward(loss).unwrap();
        // every recorded node except the non-grad constant participates
        assert_eq!(stats.nodes_visited, total_nodes - 1);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap(), true);
        let w = g.leaf(Tensor::from_vec(1, 3, vec![1.0, 0.5, 0.25]).unwrap(), false);
        let y = g.conv1d(x, w, None, 3, 1).unwrap();
        let zero = g.constant(Tensor::zeros(1, 4));
        let loss = g.mse(y, zero).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || -> (Vec<u64>, Vec<u64>) {
            let mut r = rng(77);
            let x = rand_tensor(&mut r, 2, 32);
            let w = rand_tensor(&mut r, 4, 2 * 9);
            let mut g = Graph::new();
            let xv = g.leaf(x, true);
            let wv = g.leaf(w, true);
            let y = g.conv1d(xv, wv, None, 9, 1).unwrap();
            let t = g.tanh(y);
            let zero = g.constant(Tensor::zeros(4, 32));
            let loss = g.mse(t, zero).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).data().iter().map(|v| v.to_bits()).collect(),
                g.grad(wv).unwrap().data().iter().map(|v| v.to_bits()).collect(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fir_ops_match_hand_convolution() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap(), false);
        let y = g.fir_causal(x, Arc::new(vec![1.0, 0.5])).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.5, 0.0]);
    }

    #[test]
    fn gaussian_noise_gradient_with_frozen_seed() {
        for seed in [61u64, 62, 63] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 1, 32);
            let noise: Arc<Vec<f64>> = Arc::new(
                (0..32)
                    .map(|_| rand_distr_standard_normal(&mut r))
                    .collect(),
            );
            let noise_c = Arc::clone(&noise);
            fd_check(
                &[x],
                &mut move |g, vs| {
                    let y = g.gaussian_noise(vs[0], Arc::clone(&noise_c), 20.0)?;
                    let zero = g.constant(Tensor::zeros(1, 32));
                    g.mse(y, zero)
                },
                1e-5,
            );
        }
    }

    fn rand_distr_standard_normal(r: &mut ChaCha8Rng) -> f64 {
        // Box-Muller keeps this module free of extra deps.
        let u1: f64 = r.gen_range(f64::EPSILON..1.0);
        let u2: f64 = r.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn lin_resample_round_trip_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 5, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let down = g.lin_resample(x, 5).unwrap();
        assert_eq!(g.value(down).data(), g.value(x).data());

        for seed in [71u64, 72, 73] {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, 1, 20);
            fd_check(
                &[x],
                &mut |g, vs| {
                    let d = g.lin_resample(vs[0], 18)?;
                    let u = g.lin_resample(d, 20)?;
                    let zero = g.constant(Tensor::zeros(1, 20));
                    g.mse(u, zero)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn requantize_rounds_to_level() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 2, vec![0.5, -0.503]).unwrap(), false);
        let y = g.requantize(x, 8);
        assert!((g.value(y).data()[0] - 0.5).abs() <= 1.0 / 128.0);
        assert!((g.value(y).data()[1] + 0.5).abs() <= 1.0 / 128.0);
    }

    #[test]
    fn median_filter_hand_case() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![0.0, 10.0, 0.0]).unwrap(), true);
        let y = g.median_filter(x, 3).unwrap();
        assert_eq!(g.value(y).data()[1], 0.0);
        let zero = g.constant(Tensor::zeros(1, 3));
        let loss = g.mse(y, zero).unwrap();
        g.backward(loss).unwrap();
        // gradient routed to selected elements only; the spike at index 1
        // is never the median, so it gets no gradient
        assert_eq!(g.grad(x).unwrap().data()[1], 0.0);
    }
}
