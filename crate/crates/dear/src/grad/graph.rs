//! Reverse-mode tape over a fixed op vocabulary.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks the tape
//! in reverse insertion order (reverse topological order by construction)
//! and accumulates gradients into every node that requires them. Gradients
//! persist on the nodes, so calling backward twice doubles them.

use std::sync::Arc;

use crate::error::{DearError, Result};
use crate::grad::kernels::{
    block_bounds, conv_accum, conv_accum_quad, conv_wgrad, fir_causal_accum,
    fir_causal_transpose_accum, fir_centered_accum, fir_centered_transpose_accum,
    strided_scatter_axpy,
};
use crate::grad::tensor::Tensor;
use crate::wavelet;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        c_in: usize,
        kernel: usize,
        stride: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    MeanOverLength {
        x: Var,
    },
    BlockMean {
        x: Var,
        blocks: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Log {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Dwt {
        x: Var,
    },
    Idwt {
        x: Var,
    },
    FirCausal {
        x: Var,
        taps: Arc<Vec<f64>>,
    },
    FirCentered {
        x: Var,
        taps: Arc<Vec<f64>>,
    },
    GaussianNoise {
        x: Var,
        unit_noise: Arc<Vec<f64>>,
        power_ratio: f64,
        sigma: f64,
    },
    LinResample {
        x: Var,
    },
    MulMask {
        x: Var,
        mask: Arc<Vec<f64>>,
    },
    Requantize {
        x: Var,
    },
    MedianFilter {
        x: Var,
        selected: Arc<Vec<u32>>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Counters from one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose gradient was propagated; each node is touched once.
    pub nodes_visited: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires, op)
    }

    /// Same-padded cross-correlation with odd kernel size. `w` has shape
    /// `(c_out, c_in * kernel)`, `b` has shape `(c_out, 1)`. With `stride`
    /// s > 1 the output keeps every s-th position (length `ceil(n / s)`).
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        let (c_in, n) = self.value(x).shape();
        let (c_out, w_cols) = self.value(w).shape();
        if kernel % 2 == 0 || kernel == 0 {
            return Err(DearError::InvalidArgument(format!(
                "conv kernel size must be odd, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(DearError::InvalidArgument("stride must be >= 1".into()));
        }
        if w_cols != c_in * kernel {
            return Err(DearError::ShapeMismatch {
                expected: format!("weights ({c_out}, {c_in}*{kernel})"),
                got: format!("({c_out}, {w_cols})"),
            });
        }
        if let Some(bias) = b {
            if self.value(bias).shape() != (c_out, 1) {
                return Err(DearError::ShapeMismatch {
                    expected: format!("bias ({c_out}, 1)"),
                    got: format!("{:?}", self.value(bias).shape()),
                });
            }
        }
        let pad = (kernel - 1) / 2;
        let out_len = n.div_ceil(stride);
        let mut out = Tensor::zeros(c_out, out_len);
        {
            let xs = self.value(x);
            let ws = self.value(w);
            if let Some(bias) = b {
                for co in 0..c_out {
                    out.row_mut(co).fill(self.nodes[bias.0].value.data()[co]);
                }
            }
            for ci in 0..c_in {
                let x_row = xs.row(ci);
                let mut co = 0;
                while co + 4 <= c_out {
                    let dst = &mut out.data_mut()[co * out_len..(co + 4) * out_len];
                    let w4 = [
                        &ws.row(co)[ci * kernel..(ci + 1) * kernel],
                        &ws.row(co + 1)[ci * kernel..(ci + 1) * kernel],
                        &ws.row(co + 2)[ci * kernel..(ci + 1) * kernel],
                        &ws.row(co + 3)[ci * kernel..(ci + 1) * kernel],
                    ];
                    conv_accum_quad(dst, out_len, x_row, w4, pad, stride);
                    co += 4;
                }
                for c in co..c_out {
                    let w_row = &ws.row(c)[ci * kernel..(ci + 1) * kernel];
                    conv_accum(out.row_mut(c), x_row, w_row, pad, stride);
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_from(
            out,
            &inputs,
            Op::Conv1d {
                x,
                w,
                b,
                c_in,
                kernel,
                stride,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push_from(out, &[x], Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push_from(out, &[x], Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push_from(out, &[x], Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err(a, b));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        Ok(self.push_from(out, &[a, b], Op::Add { a, b }))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push_from(out, &[x], Op::Affine { x, scale })
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, na) = self.value(a).shape();
        let (cb, nb) = self.value(b).shape();
        if na != nb {
            return Err(self.shape_err(a, b));
        }
        let mut data = Vec::with_capacity((ca + cb) * na);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(ca + cb, na, data)?;
        Ok(self.push_from(out, &[a, b], Op::ConcatChannels { a, b }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (c, n) = self.value(x).shape();
        if start + count > c {
            return Err(DearError::ShapeMismatch {
                expected: format!("channel range within {c}"),
                got: format!("{start}..{}", start + count),
            });
        }
        let data = self.value(x).data()[start * n..(start + count) * n].to_vec();
        let out = Tensor::from_vec(count, n, data)?;
        Ok(self.push_from(out, &[x], Op::SliceChannels { x, start }))
    }

    /// Per-channel mean over the length axis: `(c, n)` -> `(c, 1)`.
    pub fn mean_over_length(&mut self, x: Var) -> Var {
        let (c, n) = self.value(x).shape();
        let mut out = Tensor::zeros(c, 1);
        for ch in 0..c {
            out.data_mut()[ch] = self.value(x).row(ch).iter().sum::<f64>() / n as f64;
        }
        self.push_from(out, &[x], Op::MeanOverLength { x })
    }

    /// Mean over each of `blocks` contiguous balanced blocks per channel:
    /// `(c, n)` -> `(c, blocks)`.
    pub fn block_mean(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let (c, n) = self.value(x).shape();
        if blocks == 0 || blocks > n {
            return Err(DearError::InvalidArgument(format!(
                "blocks must be in 1..={n}, got {blocks}"
            )));
        }
        let bounds = block_bounds(n, blocks);
        let mut out = Tensor::zeros(c, blocks);
        for ch in 0..c {
            let row = self.value(x).row(ch);
            for i in 0..blocks {
                let span = &row[bounds[i]..bounds[i + 1]];
                out.row_mut(ch)[i] = span.iter().sum::<f64>() / span.len() as f64;
            }
        }
        Ok(self.push_from(out, &[x], Op::BlockMean { x, blocks }))
    }

    /// Mean squared error over all elements: `(c, n)` x `(c, n)` -> scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err(a, b));
        }
        let n = self.value(a).numel() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(sum / n);
        Ok(self.push_from(out, &[a, b], Op::Mse { a, b }))
    }

    /// Natural log. Callers guard the domain with [`Graph::clamp`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(DearError::InvalidArgument(
                "log of non-positive value".into(),
            ));
        }
        let out = self.value(x).map(f64::ln);
        Ok(self.push_from(out, &[x], Op::Log { x }))
    }

    /// Clamp into `[lo, hi]`; gradient passes inside the interval and is
    /// zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push_from(out, &[x], Op::Clamp { x, lo, hi })
    }

    /// Single-level orthonormal Haar analysis: `(1, n)` -> `(2, n/2)` with
    /// approximate coefficients in channel 0 and detail in channel 1.
    pub fn dwt(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.value(x).shape();
        if c != 1 {
            return Err(DearError::ShapeMismatch {
                expected: "(1, n)".into(),
                got: format!("({c}, {n})"),
            });
        }
        let pair = wavelet::dwt_samples(self.value(x).row(0))?;
        let mut data = pair.approx;
        data.extend_from_slice(&pair.detail);
        let out = Tensor::from_vec(2, n / 2, data)?;
        Ok(self.push_from(out, &[x], Op::Dwt { x }))
    }

    /// Exact inverse of [`Graph::dwt`]: `(2, m)` -> `(1, 2m)`.
    pub fn idwt(&mut self, x: Var) -> Result<Var> {
        let (c, m) = self.value(x).shape();
        if c != 2 {
            return Err(DearError::ShapeMismatch {
                expected: "(2, m)".into(),
                got: format!("({c}, {m})"),
            });
        }
        let pair = wavelet::CoefficientPair::new(
            self.value(x).row(0).to_vec(),
            self.value(x).row(1).to_vec(),
        )?;
        let out = Tensor::from_vec(1, 2 * m, wavelet::idwt_samples(&pair))?;
        Ok(self.push_from(out, &[x], Op::Idwt { x }))
    }

    /// Causal linear convolution with fixed taps, truncated to the input
    /// length (reverb; the taps are data, not parameters).
    pub fn fir_causal(&mut self, x: Var, taps: Arc<Vec<f64>>) -> Result<Var> {
        if taps.is_empty() {
            return Err(DearError::InvalidArgument("empty impulse response".into()));
        }
        let (c, n) = self.value(x).shape();
        if c != 1 {
            return Err(DearError::ShapeMismatch {
                expected: "(1, n)".into(),
                got: format!("({c}, {n})"),
            });
        }
        let mut out = Tensor::zeros(1, n);
        fir_causal_accum(out.row_mut(0), self.value(x).row(0), &taps);
        Ok(self.push_from(out, &[x], Op::FirCausal { x, taps }))
    }

    /// Linear-phase FIR applied with group-delay compensation: the output
    /// at n is the full convolution at n + (taps-1)/2, so a symmetric
    /// filter keeps the input timing. Tap count must be odd.
    pub fn fir_centered(&mut self, x: Var, taps: Arc<Vec<f64>>) -> Result<Var> {
        if taps.is_empty() || taps.len() % 2 == 0 {
            return Err(DearError::InvalidArgument(
                "centered FIR needs an odd tap count".into(),
            ));
        }
        let (c, n) = self.value(x).shape();
        if c != 1 {
            return Err(DearError::ShapeMismatch {
                expected: "(1, n)".into(),
                got: format!("({c}, {n})"),
            });
        }
        let mut out = Tensor::zeros(1, n);
        fir_centered_accum(out.row_mut(0), self.value(x).row(0), &taps);
        Ok(self.push_from(out, &[x], Op::FirCentered { x, taps }))
    }

    /// Additive Gaussian noise at a target SNR. The noise scale follows the
    /// signal power, so the op is differentiable through both the additive
    /// path and the power estimate. `unit_noise` holds standard-normal
    /// draws frozen at record time; an infinite `target_snr_db` is the
    /// identity.
    pub fn gaussian_noise(
        &mut self,
        x: Var,
        unit_noise: Arc<Vec<f64>>,
        target_snr_db: f64,
    ) -> Result<Var> {
        let value = self.value(x);
        if unit_noise.len() != value.numel() {
            return Err(DearError::LengthMismatch {
                left: unit_noise.len(),
                right: value.numel(),
            });
        }
        let power = value.data().iter().map(|v| v * v).sum::<f64>() / value.numel() as f64;
        if power == 0.0 {
            return Err(DearError::ZeroReference);
        }
        let power_ratio = if target_snr_db.is_infinite() {
            0.0
        } else {
            10f64.powf(-target_snr_db / 10.0)
        };
        let sigma = (power * power_ratio).sqrt();
        let mut out = value.clone();
        for (o, z) in out.data_mut().iter_mut().zip(unit_noise.iter()) {
            *o += sigma * z;
        }
        Ok(self.push_from(
            out,
            &[x],
            Op::GaussianNoise {
                x,
                unit_noise,
                power_ratio,
                sigma,
            },
        ))
    }

    /// Endpoint-matched linear-interpolation resampling to `to_len`.
    pub fn lin_resample(&mut self, x: Var, to_len: usize) -> Result<Var> {
        let (c, n) = self.value(x).shape();
        if c != 1 || n < 2 {
            return Err(DearError::ShapeMismatch {
                expected: "(1, n >= 2)".into(),
                got: format!("({c}, {n})"),
            });
        }
        if to_len < 2 {
            return Err(DearError::InvalidArgument(
                "resample target must be >= 2".into(),
            ));
        }
        let src = self.value(x).row(0);
        let mut data = Vec::with_capacity(to_len);
        for i in 0..to_len {
            let (j, frac) = resample_pos(i, to_len, n);
            data.push(src[j] * (1.0 - frac) + src[(j + 1).min(n - 1)] * frac);
        }
        let out = Tensor::from_vec(1, to_len, data)?;
        Ok(self.push_from(out, &[x], Op::LinResample { x }))
    }

    /// Elementwise multiply by a constant mask (dropout-style zeroing,
    /// amplitude masks).
    pub fn mul_mask(&mut self, x: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(DearError::LengthMismatch {
                left: mask.len(),
                right: self.value(x).numel(),
            });
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.iter()) {
            *o *= m;
        }
        Ok(self.push_from(out, &[x], Op::MulMask { x, mask }))
    }

    /// Round to `bits`-per-sample levels with a straight-through gradient.
    pub fn requantize(&mut self, x: Var, bits: u32) -> Var {
        let scale = f64::from(1u32 << (bits - 1));
        let out = self
            .value(x)
            .map(|v| (v * scale).round().clamp(-scale, scale - 1.0) / scale);
        self.push_from(out, &[x], Op::Requantize { x })
    }

    /// Moving median with replicate padding; the gradient routes to the
    /// element the median came from.
    pub fn median_filter(&mut self, x: Var, window: usize) -> Result<Var> {
        if window % 2 == 0 || window == 0 {
            return Err(DearError::InvalidArgument(
                "median window must be odd".into(),
            ));
        }
        let (c, n) = self.value(x).shape();
        if c != 1 {
            return Err(DearError::ShapeMismatch {
                expected: "(1, n)".into(),
                got: format!("({c}, {n})"),
            });
        }
        let src = self.value(x).row(0);
        let half = window as isize / 2;
        let mut data = Vec::with_capacity(n);
        let mut selected = Vec::with_capacity(n);
        let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(window);
        for i in 0..n {
            scratch.clear();
            for off in -half..=half {
                let j = (i as isize + off).clamp(0, n as isize - 1) as usize;
                scratch.push((src[j], j));
            }
            scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (v, j) = scratch[window / 2];
            data.push(v);
            selected.push(j as u32);
        }
        let out = Tensor::from_vec(1, n, data)?;
        Ok(self.push_from(
            out,
            &[x],
            Op::MedianFilter {
                x,
                selected: Arc::new(selected),
            },
        ))
    }

    fn shape_err(&self, a: Var, b: Var) -> DearError {
        DearError::ShapeMismatch {
            expected: format!("{:?}", self.value(a).shape()),
            got: format!("{:?}", self.value(b).shape()),
        }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// node with `requires_grad` reachable from `loss`; each node is
    /// processed exactly once per call.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.value(loss).numel() != 1 {
            return Err(DearError::ShapeMismatch {
                expected: "scalar loss (1, 1)".into(),
                got: format!("{:?}", self.value(loss).shape()),
            });
        }
        let mut flows: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        flows[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0usize;

        for i in (0..=loss.0).rev() {
            let Some(grad_out) = flows[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            visited += 1;
            self.propagate(i, &grad_out, &mut flows);
            match &mut self.nodes[i].grad {
                Some(g) => g.add_assign(&grad_out),
                slot => *slot = Some(grad_out),
            }
        }
        Ok(BackwardStats {
            nodes_visited: visited,
        })
    }

    /// Add `d(out_i)/d(input) * grad_out` into each input's flow buffer.
    fn propagate(&self, out: usize, grad_out: &Tensor, flows: &mut [Option<Tensor>]) {
        let op = self.nodes[out].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                b,
                c_in,
                kernel,
                stride,
            } => {
                let pad = (kernel - 1) / 2;
                let c_out = self.nodes[w.0].value.channels();
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    let ws = &self.nodes[w.0].value;
                    let n_in = gx.len();
                    // transpose of a same-padded odd-kernel conv is the
                    // conv with the reversed kernel
                    let mut w_rev = vec![0.0; 4 * kernel];
                    for co in 0..c_out {
                        let g_row = grad_out.row(co);
                        if stride == 1 {
                            let mut ci = 0;
                            while ci + 4 <= c_in {
                                for j in 0..4 {
                                    let w_row =
                                        &ws.row(co)[(ci + j) * kernel..(ci + j + 1) * kernel];
                                    for (r, &wv) in w_rev[j * kernel..(j + 1) * kernel]
                                        .iter_mut()
                                        .zip(w_row.iter().rev())
                                    {
                                        *r = wv;
                                    }
                                }
                                let dst = &mut gx.data_mut()[ci * n_in..(ci + 4) * n_in];
                                let w4 = [
                                    &w_rev[0..kernel],
                                    &w_rev[kernel..2 * kernel],
                                    &w_rev[2 * kernel..3 * kernel],
                                    &w_rev[3 * kernel..4 * kernel],
                                ];
                                conv_accum_quad(dst, n_in, g_row, w4, pad, 1);
                                ci += 4;
                            }
                            for c in ci..c_in {
                                let w_row = &ws.row(co)[c * kernel..(c + 1) * kernel];
                                for (r, &wv) in w_rev[..kernel].iter_mut().zip(w_row.iter().rev())
                                {
                                    *r = wv;
                                }
                                conv_accum(gx.row_mut(c), g_row, &w_rev[..kernel], pad, 1);
                            }
                        } else {
                            for ci in 0..c_in {
                                let gx_row = gx.row_mut(ci);
                                let w_row = &ws.row(co)[ci * kernel..(ci + 1) * kernel];
                                for (k, &wv) in w_row.iter().enumerate() {
                                    let shift = k as isize - pad as isize;
                                    strided_scatter_axpy(gx_row, g_row, stride, shift, wv);
                                }
                            }
                        }
                    }
                    store_flow(flows, x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = self.flow_buffer(flows, w);
                    let xs = &self.nodes[x.0].value;
                    for co in 0..c_out {
                        let g_row = grad_out.row(co);
                        let gw_row = gw.row_mut(co);
                        for ci in 0..c_in {
                            let x_row = xs.row(ci);
                            conv_wgrad(
                                &mut gw_row[ci * kernel..(ci + 1) * kernel],
                                g_row,
                                x_row,
                                pad,
                                stride,
                            );
                        }
                    }
                    store_flow(flows, w, gw);
                }
                if let Some(bias) = b {
                    if self.nodes[bias.0].requires_grad {
                        let mut gb = self.flow_buffer(flows, bias);
                        for co in 0..c_out {
                            gb.data_mut()[co] += grad_out.row(co).iter().sum::<f64>();
                        }
                        store_flow(flows, bias, gb);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                self.accumulate_mapped(flows, x, out, grad_out, |xv, _yv, g| {
                    if xv >= 0.0 {
                        g
                    } else {
                        slope * g
                    }
                });
            }
            Op::Tanh { x } => {
                self.accumulate_mapped(flows, x, out, grad_out, |_xv, yv, g| (1.0 - yv * yv) * g);
            }
            Op::Sigmoid { x } => {
                self.accumulate_mapped(flows, x, out, grad_out, |_xv, yv, g| yv * (1.0 - yv) * g);
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.nodes[v.0].requires_grad {
                        let mut gv = self.flow_buffer(flows, v);
                        gv.add_assign(grad_out);
                        store_flow(flows, v, gv);
                    }
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate_mapped(flows, x, out, grad_out, |_xv, _yv, g| scale * g);
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.nodes[a.0].value.channels();
                let na = self.nodes[a.0].value.len();
                if self.nodes[a.0].requires_grad {
                    let mut ga = self.flow_buffer(flows, a);
                    for (gi, go) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(&grad_out.data()[..ca * na])
                    {
                        *gi += go;
                    }
                    store_flow(flows, a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = self.flow_buffer(flows, b);
                    for (gi, go) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(&grad_out.data()[ca * na..])
                    {
                        *gi += go;
                    }
                    store_flow(flows, b, gb);
                }
            }
            Op::SliceChannels { x, start } => {
                if self.nodes[x.0].requires_grad {
                    let n = self.nodes[x.0].value.len();
                    let mut gx = self.flow_buffer(flows, x);
                    for (gi, go) in gx.data_mut()[start * n..]
                        .iter_mut()
                        .zip(grad_out.data())
                    {
                        *gi += go;
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::MeanOverLength { x } => {
                if self.nodes[x.0].requires_grad {
                    let (c, n) = self.nodes[x.0].value.shape();
                    let mut gx = self.flow_buffer(flows, x);
                    for ch in 0..c {
                        let g = grad_out.data()[ch] / n as f64;
                        for gi in gx.row_mut(ch) {
                            *gi += g;
                        }
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::BlockMean { x, blocks } => {
                if self.nodes[x.0].requires_grad {
                    let (c, n) = self.nodes[x.0].value.shape();
                    let bounds = block_bounds(n, blocks);
                    let mut gx = self.flow_buffer(flows, x);
                    for ch in 0..c {
                        let gx_row = gx.row_mut(ch);
                        for i in 0..blocks {
                            let span = bounds[i]..bounds[i + 1];
                            let g = grad_out.row(ch)[i] / (bounds[i + 1] - bounds[i]) as f64;
                            for gi in &mut gx_row[span] {
                                *gi += g;
                            }
                        }
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].value.numel() as f64;
                let g = grad_out.item() * 2.0 / n;
                if self.nodes[a.0].requires_grad {
                    let mut ga = self.flow_buffer(flows, a);
                    for ((gi, av), bv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.data())
                        .zip(self.nodes[b.0].value.data())
                    {
                        *gi += g * (av - bv);
                    }
                    store_flow(flows, a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = self.flow_buffer(flows, b);
                    for ((gi, av), bv) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.data())
                        .zip(self.nodes[b.0].value.data())
                    {
                        *gi -= g * (av - bv);
                    }
                    store_flow(flows, b, gb);
                }
            }
            Op::Log { x } => {
                self.accumulate_mapped(flows, x, out, grad_out, |xv, _yv, g| g / xv);
            }
            Op::Clamp { x, lo, hi } => {
                self.accumulate_mapped(flows, x, out, grad_out, |xv, _yv, g| {
                    if xv >= lo && xv <= hi {
                        g
                    } else {
                        0.0
                    }
                });
            }
            Op::Dwt { x } => {
                if self.nodes[x.0].requires_grad {
                    let half = grad_out.len();
                    let back =
                        wavelet::dwt_backward(&grad_out.data()[..half], &grad_out.data()[half..])
                            .expect("grad shape matches forward");
                    let mut gx = self.flow_buffer(flows, x);
                    for (gi, go) in gx.data_mut().iter_mut().zip(&back) {
                        *gi += go;
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::Idwt { x } => {
                if self.nodes[x.0].requires_grad {
                    let (ga, gd) = wavelet::idwt_backward(grad_out.row(0))
                        .expect("grad shape matches forward");
                    let mut gx = self.flow_buffer(flows, x);
                    let half = gx.len();
                    for (gi, go) in gx.data_mut()[..half].iter_mut().zip(&ga) {
                        *gi += go;
                    }
                    for (gi, go) in gx.data_mut()[half..].iter_mut().zip(&gd) {
                        *gi += go;
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::FirCausal { x, taps } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    fir_causal_transpose_accum(gx.row_mut(0), grad_out.row(0), &taps);
                    store_flow(flows, x, gx);
                }
            }
            Op::FirCentered { x, taps } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    fir_centered_transpose_accum(gx.row_mut(0), grad_out.row(0), &taps);
                    store_flow(flows, x, gx);
                }
            }
            Op::GaussianNoise {
                x,
                unit_noise,
                power_ratio,
                sigma,
            } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    gx.add_assign(grad_out);
                    if sigma > 0.0 {
                        // d(sigma)/dx_i = ratio * x_i / (n * sigma)
                        let gz: f64 = grad_out
                            .data()
                            .iter()
                            .zip(unit_noise.iter())
                            .map(|(g, z)| g * z)
                            .sum();
                        let n = self.nodes[x.0].value.numel() as f64;
                        let coef = gz * power_ratio / (n * sigma);
                        for (gi, xv) in gx.data_mut().iter_mut().zip(self.nodes[x.0].value.data())
                        {
                            *gi += coef * xv;
                        }
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::LinResample { x } => {
                if self.nodes[x.0].requires_grad {
                    let n = self.nodes[x.0].value.len();
                    let to_len = grad_out.len();
                    let mut gx = self.flow_buffer(flows, x);
                    let gx_row = gx.row_mut(0);
                    for (i, &g) in grad_out.row(0).iter().enumerate() {
                        let (j, frac) = resample_pos(i, to_len, n);
                        gx_row[j] += g * (1.0 - frac);
                        gx_row[(j + 1).min(n - 1)] += g * frac;
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::MulMask { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    for ((gi, go), m) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(grad_out.data())
                        .zip(mask.iter())
                    {
                        *gi += go * m;
                    }
                    store_flow(flows, x, gx);
                }
            }
            Op::Requantize { x } => {
                // straight-through
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    gx.add_assign(grad_out);
                    store_flow(flows, x, gx);
                }
            }
            Op::MedianFilter { x, selected, .. } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = self.flow_buffer(flows, x);
                    let gx_row = gx.row_mut(0);
                    for (&j, &g) in selected.iter().zip(grad_out.row(0)) {
                        gx_row[j as usize] += g;
                    }
                    store_flow(flows, x, gx);
                }
            }
        }
    }

    /// Unary-op helper: `flow[x] += f(x_value, out_value, grad_out)` elementwise.
    fn accumulate_mapped(
        &self,
        flows: &mut [Option<Tensor>],
        x: Var,
        out: usize,
        grad_out: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let mut gx = self.flow_buffer(flows, x);
        let x_val = self.nodes[x.0].value.data();
        let y_val = self.nodes[out].value.data();
        for (((gi, &xv), &yv), &g) in gx
            .data_mut()
            .iter_mut()
            .zip(x_val)
            .zip(y_val)
            .zip(grad_out.data())
        {
            *gi += f(xv, yv, g);
        }
        store_flow(flows, x, gx);
    }

    fn flow_buffer(&self, flows: &mut [Option<Tensor>], v: Var) -> Tensor {
        flows[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.channels(), self.nodes[v.0].value.len()))
    }
}

fn store_flow(flows: &mut [Option<Tensor>], v: Var, buf: Tensor) {
    flows[v.0] = Some(buf);
}

/// Source index and interpolation fraction for endpoint-matched linear
/// resampling of `src_len` samples to `to_len`.
fn resample_pos(i: usize, to_len: usize, src_len: usize) -> (usize, f64) {
    let pos = i as f64 * (src_len - 1) as f64 / (to_len - 1) as f64;
    let j = (pos.floor() as usize).min(src_len - 1);
    (j, pos - j as f64)
}
