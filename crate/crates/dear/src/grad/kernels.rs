//! Inner loops shared by the forward and backward passes.
//!
//! Convolutions with small odd kernels dispatch to const-generic bodies so
//! the tap loop unrolls and the position loop vectorizes; long FIR filters
//! are evaluated as contiguous dot products. Everything operates on slices
//! with the valid interior split from the boundary columns.

/// `out[i] += sum_k w[k] * x[i*stride + k - pad]` over the valid window.
pub fn conv_accum(out: &mut [f64], x: &[f64], w: &[f64], pad: usize, stride: usize) {
    match w.len() {
        1 => conv_accum_fixed::<1>(out, x, w, pad, stride),
        3 => conv_accum_fixed::<3>(out, x, w, pad, stride),
        5 => conv_accum_fixed::<5>(out, x, w, pad, stride),
        7 => conv_accum_fixed::<7>(out, x, w, pad, stride),
        9 => conv_accum_fixed::<9>(out, x, w, pad, stride),
        11 => conv_accum_fixed::<11>(out, x, w, pad, stride),
        _ => conv_accum_generic(out, x, w, pad, stride),
    }
}

/// Four-row form of [`conv_accum`]: `dst` holds four contiguous output
/// rows of length `n_out` that share the same input row, one kernel each.
/// Blocking the rows lets every input window load feed four kernels.
pub fn conv_accum_quad(
    dst: &mut [f64],
    n_out: usize,
    x: &[f64],
    ws: [&[f64]; 4],
    pad: usize,
    stride: usize,
) {
    debug_assert_eq!(dst.len(), 4 * n_out);
    match ws[0].len() {
        1 => conv_accum_quad_fixed::<1>(dst, n_out, x, ws, pad, stride),
        3 => conv_accum_quad_fixed::<3>(dst, n_out, x, ws, pad, stride),
        5 => conv_accum_quad_fixed::<5>(dst, n_out, x, ws, pad, stride),
        7 => conv_accum_quad_fixed::<7>(dst, n_out, x, ws, pad, stride),
        9 => conv_accum_quad_fixed::<9>(dst, n_out, x, ws, pad, stride),
        11 => conv_accum_quad_fixed::<11>(dst, n_out, x, ws, pad, stride),
        _ => {
            for (row, w) in dst.chunks_exact_mut(n_out).zip(ws) {
                conv_accum_generic(row, x, w, pad, stride);
            }
        }
    }
}

fn conv_accum_quad_fixed<const K: usize>(
    dst: &mut [f64],
    n_out: usize,
    x: &[f64],
    ws: [&[f64]; 4],
    pad: usize,
    stride: usize,
) {
    let w0: &[f64; K] = ws[0].try_into().expect("kernel length");
    let w1: &[f64; K] = ws[1].try_into().expect("kernel length");
    let w2: &[f64; K] = ws[2].try_into().expect("kernel length");
    let w3: &[f64; K] = ws[3].try_into().expect("kernel length");
    let (lo, hi) = interior(n_out, x.len(), K, pad, stride);
    let (r0, rest) = dst.split_at_mut(n_out);
    let (r1, rest) = rest.split_at_mut(n_out);
    let (r2, r3) = rest.split_at_mut(n_out);
    for i in (0..lo).chain(hi..n_out) {
        edge_accum(r0, x, w0, pad, stride, i);
        edge_accum(r1, x, w1, pad, stride, i);
        edge_accum(r2, x, w2, pad, stride, i);
        edge_accum(r3, x, w3, pad, stride, i);
    }
    if hi <= lo {
        return;
    }
    let m = hi - lo;
    let (o0, o1, o2, o3) = (
        &mut r0[lo..hi],
        &mut r1[lo..hi],
        &mut r2[lo..hi],
        &mut r3[lo..hi],
    );
    if stride == 1 {
        let base = lo - pad;
        let xs = &x[base..base + m + K - 1];
        for j in 0..m {
            let xw: &[f64; K] = xs[j..j + K].try_into().expect("window length");
            let mut a0 = o0[j];
            let mut a1 = o1[j];
            let mut a2 = o2[j];
            let mut a3 = o3[j];
            for k in 0..K {
                let xv = xw[k];
                a0 = w0[k].mul_add(xv, a0);
                a1 = w1[k].mul_add(xv, a1);
                a2 = w2[k].mul_add(xv, a2);
                a3 = w3[k].mul_add(xv, a3);
            }
            o0[j] = a0;
            o1[j] = a1;
            o2[j] = a2;
            o3[j] = a3;
        }
    } else {
        for j in 0..m {
            let base = (lo + j) * stride - pad;
            let xw: &[f64; K] = x[base..base + K].try_into().expect("window length");
            let mut a0 = o0[j];
            let mut a1 = o1[j];
            let mut a2 = o2[j];
            let mut a3 = o3[j];
            for k in 0..K {
                let xv = xw[k];
                a0 = w0[k].mul_add(xv, a0);
                a1 = w1[k].mul_add(xv, a1);
                a2 = w2[k].mul_add(xv, a2);
                a3 = w3[k].mul_add(xv, a3);
            }
            o0[j] = a0;
            o1[j] = a1;
            o2[j] = a2;
            o3[j] = a3;
        }
    }
}

/// `gw[k] += sum_i gy[i] * x[i*stride + k - pad]`.
pub fn conv_wgrad(gw: &mut [f64], gy: &[f64], x: &[f64], pad: usize, stride: usize) {
    match gw.len() {
        1 => conv_wgrad_fixed::<1>(gw, gy, x, pad, stride),
        3 => conv_wgrad_fixed::<3>(gw, gy, x, pad, stride),
        5 => conv_wgrad_fixed::<5>(gw, gy, x, pad, stride),
        7 => conv_wgrad_fixed::<7>(gw, gy, x, pad, stride),
        9 => conv_wgrad_fixed::<9>(gw, gy, x, pad, stride),
        11 => conv_wgrad_fixed::<11>(gw, gy, x, pad, stride),
        _ => conv_wgrad_generic(gw, gy, x, pad, stride),
    }
}

/// Interior bounds: positions `lo..hi` of the output have the full tap
/// window inside `x`.
fn interior(n_out: usize, n_in: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = pad.div_ceil(stride).min(n_out);
    let hi = if n_in + pad >= k {
        (((n_in + pad - k) / stride) + 1).clamp(lo, n_out)
    } else {
        lo
    };
    (lo, hi)
}

fn edge_accum(out: &mut [f64], x: &[f64], w: &[f64], pad: usize, stride: usize, i: usize) {
    let mut acc = 0.0;
    for (k, &wk) in w.iter().enumerate() {
        let pos = (i * stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < x.len() {
            acc += wk * x[pos as usize];
        }
    }
    out[i] += acc;
}

fn conv_accum_fixed<const K: usize>(
    out: &mut [f64],
    x: &[f64],
    w: &[f64],
    pad: usize,
    stride: usize,
) {
    let w: &[f64; K] = w.try_into().expect("kernel length");
    let (lo, hi) = interior(out.len(), x.len(), K, pad, stride);
    for i in 0..lo {
        edge_accum(out, x, w, pad, stride, i);
    }
    for i in hi..out.len() {
        edge_accum(out, x, w, pad, stride, i);
    }
    if hi <= lo {
        return;
    }
    if stride == 1 {
        let base = lo - pad;
        let xs = &x[base..base + (hi - lo) + K - 1];
        for (o, xw) in out[lo..hi].iter_mut().zip(xs.windows(K)) {
            let xw: &[f64; K] = xw.try_into().expect("window length");
            let mut acc = *o;
            for k in 0..K {
                acc = w[k].mul_add(xw[k], acc);
            }
            *o = acc;
        }
    } else {
        for (m, o) in out[lo..hi].iter_mut().enumerate() {
            let base = (lo + m) * stride - pad;
            let xw: &[f64; K] = x[base..base + K].try_into().expect("window length");
            let mut acc = *o;
            for k in 0..K {
                acc = w[k].mul_add(xw[k], acc);
            }
            *o = acc;
        }
    }
}

fn conv_accum_generic(out: &mut [f64], x: &[f64], w: &[f64], pad: usize, stride: usize) {
    for (k, &wk) in w.iter().enumerate() {
        let shift = k as isize - pad as isize;
        if stride == 1 {
            shifted_axpy(out, x, shift, wk);
        } else {
            strided_gather_axpy(out, x, stride, shift, wk);
        }
    }
}

fn conv_wgrad_fixed<const K: usize>(
    gw: &mut [f64],
    gy: &[f64],
    x: &[f64],
    pad: usize,
    stride: usize,
) {
    let (lo, hi) = interior(gy.len(), x.len(), K, pad, stride);
    let mut acc = [0.0f64; K];
    for i in (0..lo).chain(hi..gy.len()) {
        for (k, a) in acc.iter_mut().enumerate() {
            let pos = (i * stride + k) as isize - pad as isize;
            if pos >= 0 && (pos as usize) < x.len() {
                *a += gy[i] * x[pos as usize];
            }
        }
    }
    if hi > lo {
        if stride == 1 {
            let base = lo - pad;
            let xs = &x[base..base + (hi - lo) + K - 1];
            for (g, xw) in gy[lo..hi].iter().zip(xs.windows(K)) {
                let xw: &[f64; K] = xw.try_into().expect("window length");
                for k in 0..K {
                    acc[k] = g.mul_add(xw[k], acc[k]);
                }
            }
        } else {
            for (m, g) in gy[lo..hi].iter().enumerate() {
                let base = (lo + m) * stride - pad;
                let xw: &[f64; K] = x[base..base + K].try_into().expect("window length");
                for k in 0..K {
                    acc[k] = g.mul_add(xw[k], acc[k]);
                }
            }
        }
    }
    for (gwk, a) in gw.iter_mut().zip(acc) {
        *gwk += a;
    }
}

fn conv_wgrad_generic(gw: &mut [f64], gy: &[f64], x: &[f64], pad: usize, stride: usize) {
    for (k, gwk) in gw.iter_mut().enumerate() {
        let shift = k as isize - pad as isize;
        *gwk += if stride == 1 {
            shifted_dot(gy, x, shift)
        } else {
            strided_dot(gy, x, stride, shift)
        };
    }
}

/// `dst[n] += w * src[n + shift]` over the valid overlap.
pub fn shifted_axpy(dst: &mut [f64], src: &[f64], shift: isize, w: f64) {
    if w == 0.0 {
        return;
    }
    if shift >= 0 {
        let s = shift as usize;
        if s >= src.len() {
            return;
        }
        let len = dst.len().min(src.len() - s);
        let (d, x) = (&mut dst[..len], &src[s..s + len]);
        for (di, xi) in d.iter_mut().zip(x) {
            *di = w.mul_add(*xi, *di);
        }
    } else {
        let s = (-shift) as usize;
        if s >= dst.len() {
            return;
        }
        let len = (dst.len() - s).min(src.len());
        let (d, x) = (&mut dst[s..s + len], &src[..len]);
        for (di, xi) in d.iter_mut().zip(x) {
            *di = w.mul_add(*xi, *di);
        }
    }
}

/// `sum_n a[n] * b[n + shift]` over the valid overlap.
pub fn shifted_dot(a: &[f64], b: &[f64], shift: isize) -> f64 {
    if shift >= 0 {
        let s = shift as usize;
        if s >= b.len() {
            return 0.0;
        }
        let len = a.len().min(b.len() - s);
        dot(&a[..len], &b[s..s + len])
    } else {
        let s = (-shift) as usize;
        if s >= a.len() {
            return 0.0;
        }
        let len = (a.len() - s).min(b.len());
        dot(&a[s..s + len], &b[..len])
    }
}

/// Dot product with split accumulators so the reduction vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let j = i * 8;
        for lane in 0..8 {
            acc[lane] = a[j + lane].mul_add(b[j + lane], acc[lane]);
        }
    }
    let mut total = acc.iter().sum::<f64>();
    for i in chunks * 8..a.len() {
        total = a[i].mul_add(b[i], total);
    }
    total
}

/// Causal FIR truncated to the input length:
/// `out[n] += sum_k taps[k] * x[n - k]`. Evaluated as contiguous dot
/// products against the reversed input.
pub fn fir_causal_accum(out: &mut [f64], x: &[f64], taps: &[f64]) {
    let n = out.len();
    debug_assert_eq!(n, x.len());
    let xr: Vec<f64> = x.iter().rev().copied().collect();
    for (i, o) in out.iter_mut().enumerate() {
        let kmax = taps.len().min(i + 1);
        let start = n - 1 - i;
        *o += dot(&taps[..kmax], &xr[start..start + kmax]);
    }
}

/// Transpose of [`fir_causal_accum`]: `gx[j] += sum_k taps[k] * gy[j + k]`.
pub fn fir_causal_transpose_accum(gx: &mut [f64], gy: &[f64], taps: &[f64]) {
    let n = gx.len();
    for (j, o) in gx.iter_mut().enumerate() {
        let kmax = taps.len().min(n - j);
        *o += dot(&taps[..kmax], &gy[j..j + kmax]);
    }
}

/// Group-delay-compensated FIR with odd tap count:
/// `out[n] += sum_k taps[k] * x[n + delay - k]` with `delay = (T-1)/2`.
pub fn fir_centered_accum(out: &mut [f64], x: &[f64], taps: &[f64]) {
    let n = out.len();
    debug_assert_eq!(n, x.len());
    let t = taps.len();
    let delay = (t - 1) / 2;
    let xr: Vec<f64> = x.iter().rev().copied().collect();
    for (i, o) in out.iter_mut().enumerate() {
        // x[i + delay - k] = xr[n - 1 - i - delay + k]
        let s = n as isize - 1 - i as isize - delay as isize;
        let k_lo = (-s).max(0) as usize;
        let k_hi = ((n as isize - s).min(t as isize)).max(0) as usize;
        if k_lo < k_hi {
            let start = (s + k_lo as isize) as usize;
            *o += dot(&taps[k_lo..k_hi], &xr[start..start + (k_hi - k_lo)]);
        }
    }
}

/// Transpose of [`fir_centered_accum`]:
/// `gx[j] += sum_k taps[k] * gy[j - delay + k]`.
pub fn fir_centered_transpose_accum(gx: &mut [f64], gy: &[f64], taps: &[f64]) {
    let n = gx.len();
    let t = taps.len();
    let delay = (t - 1) / 2;
    for (j, o) in gx.iter_mut().enumerate() {
        let s = j as isize - delay as isize;
        let k_lo = (-s).max(0) as usize;
        let k_hi = ((n as isize - s).min(t as isize)).max(0) as usize;
        if k_lo < k_hi {
            let start = (s + k_lo as isize) as usize;
            *o += dot(&taps[k_lo..k_hi], &gy[start..start + (k_hi - k_lo)]);
        }
    }
}

/// Strided form of [`shifted_axpy`]: `dst[m] += w * src[m*stride + shift]`.
pub fn strided_gather_axpy(dst: &mut [f64], src: &[f64], stride: usize, shift: isize, w: f64) {
    if w == 0.0 {
        return;
    }
    for (m, d) in dst.iter_mut().enumerate() {
        let pos = m as isize * stride as isize + shift;
        if pos >= 0 && (pos as usize) < src.len() {
            *d += w * src[pos as usize];
        }
    }
}

/// Transpose of [`strided_gather_axpy`]: `dst[m*stride + shift] += w * src[m]`.
pub fn strided_scatter_axpy(dst: &mut [f64], src: &[f64], stride: usize, shift: isize, w: f64) {
    if w == 0.0 {
        return;
    }
    for (m, s) in src.iter().enumerate() {
        let pos = m as isize * stride as isize + shift;
        if pos >= 0 && (pos as usize) < dst.len() {
            dst[pos as usize] += w * s;
        }
    }
}

/// `sum_m a[m] * b[m*stride + shift]` over valid positions.
pub fn strided_dot(a: &[f64], b: &[f64], stride: usize, shift: isize) -> f64 {
    let mut total = 0.0;
    for (m, av) in a.iter().enumerate() {
        let pos = m as isize * stride as isize + shift;
        if pos >= 0 && (pos as usize) < b.len() {
            total += av * b[pos as usize];
        }
    }
    total
}

/// Balanced partition boundaries: `blocks + 1` offsets with block i spanning
/// `[bounds[i], bounds[i+1])`. Earlier blocks take the extra elements, so a
/// length of 8 in 3 blocks splits 3/3/2.
pub fn block_bounds(len: usize, blocks: usize) -> Vec<usize> {
    (0..=blocks).map(|i| (i * len).div_ceil(blocks)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn axpy_positive_shift() {
        let mut dst = vec![0.0; 4];
        shifted_axpy(&mut dst, &[1.0, 2.0, 3.0, 4.0], 1, 2.0);
        assert_eq!(dst, vec![4.0, 6.0, 8.0, 0.0]);
    }

    #[test]
    fn axpy_negative_shift() {
        let mut dst = vec![0.0; 4];
        shifted_axpy(&mut dst, &[1.0, 2.0, 3.0, 4.0], -2, 1.0);
        assert_eq!(dst, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn axpy_out_of_range_shift_is_noop() {
        let mut dst = vec![0.0; 2];
        shifted_axpy(&mut dst, &[1.0, 2.0], 5, 1.0);
        shifted_axpy(&mut dst, &[1.0, 2.0], -5, 1.0);
        assert_eq!(dst, vec![0.0, 0.0]);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..23).map(|i| i as f64 * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..23).map(|i| 1.5 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((shifted_dot(&a, &b, 0) - naive).abs() < 1e-12);
    }

    #[test]
    fn fixed_conv_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 7, 16, 33] {
            for k in [1usize, 3, 5, 9] {
                for stride in [1usize, 2, 3] {
                    let pad = (k - 1) / 2;
                    let n_out = n.div_ceil(stride);
                    let x = rand_vec(&mut rng, n);
                    let w = rand_vec(&mut rng, k);
                    let mut fast = rand_vec(&mut rng, n_out);
                    let mut slow = fast.clone();
                    conv_accum(&mut fast, &x, &w, pad, stride);
                    conv_accum_generic(&mut slow, &x, &w, pad, stride);
                    for (a, b) in fast.iter().zip(&slow) {
                        assert!((a - b).abs() < 1e-12, "n={n} k={k} stride={stride}");
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_wgrad_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1usize, 5, 16, 40] {
            for k in [1usize, 3, 9] {
                for stride in [1usize, 2] {
                    let pad = (k - 1) / 2;
                    let n_out = n.div_ceil(stride);
                    let x = rand_vec(&mut rng, n);
                    let gy = rand_vec(&mut rng, n_out);
                    let mut fast = vec![0.0; k];
                    let mut slow = vec![0.0; k];
                    conv_wgrad(&mut fast, &gy, &x, pad, stride);
                    conv_wgrad_generic(&mut slow, &gy, &x, pad, stride);
                    for (a, b) in fast.iter().zip(&slow) {
                        assert!((a - b).abs() < 1e-12, "n={n} k={k} stride={stride}");
                    }
                }
            }
        }
    }

    #[test]
    fn fir_causal_matches_axpy_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, t) in [(8usize, 3usize), (32, 11), (64, 64), (16, 40)] {
            let x = rand_vec(&mut rng, n);
            let taps = rand_vec(&mut rng, t);
            let mut fast = vec![0.0; n];
            fir_causal_accum(&mut fast, &x, &taps);
            let mut slow = vec![0.0; n];
            for (k, &h) in taps.iter().enumerate() {
                shifted_axpy(&mut slow, &x, -(k as isize), h);
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            // transpose identity: <y, Ax> == <A^T y, x>
            let gy = rand_vec(&mut rng, n);
            let mut gx = vec![0.0; n];
            fir_causal_transpose_accum(&mut gx, &gy, &taps);
            let lhs: f64 = fast.iter().zip(&gy).map(|(a, b)| a * b).sum();
            let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn fir_centered_matches_axpy_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (n, t) in [(8usize, 3usize), (32, 11), (20, 31)] {
            let x = rand_vec(&mut rng, n);
            let taps = rand_vec(&mut rng, t);
            let delay = (t as isize - 1) / 2;
            let mut fast = vec![0.0; n];
            fir_centered_accum(&mut fast, &x, &taps);
            let mut slow = vec![0.0; n];
            for (k, &h) in taps.iter().enumerate() {
                shifted_axpy(&mut slow, &x, delay - k as isize, h);
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            let gy = rand_vec(&mut rng, n);
            let mut gx = vec![0.0; n];
            fir_centered_transpose_accum(&mut gx, &gy, &taps);
            let lhs: f64 = fast.iter().zip(&gy).map(|(a, b)| a * b).sum();
            let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn scatter_is_transpose_of_gather() {
        // <gather(x), y> == <x, scatter(y)> for any shift/stride.
        let x: Vec<f64> = (0..17).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..7).map(|i| (i as f64).cos()).collect();
        for shift in [-3isize, 0, 2] {
            for stride in [1usize, 2, 3] {
                let mut gx = vec![0.0; y.len()];
                strided_gather_axpy(&mut gx, &x, stride, shift, 1.0);
                let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| a * b).sum();

                let mut sy = vec![0.0; x.len()];
                strided_scatter_axpy(&mut sy, &y, stride, shift, 1.0);
                let rhs: f64 = sy.iter().zip(&x).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_bounds_balanced() {
        assert_eq!(block_bounds(8, 3), vec![0, 3, 6, 8]);
        assert_eq!(block_bounds(4, 2), vec![0, 2, 4]);
        assert_eq!(block_bounds(6, 6), vec![0, 1, 2, 3, 4, 5, 6]);
    }
}
