//! Dense f64 kernels behind the tape ops.
//!
//! Every routine is a pure function of its inputs. Parallel paths split work
//! over disjoint output regions and keep all reductions in a fixed order, so
//! the worker count never changes a single bit of the result.

use crate::parallel::for_each_chunk;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for_each_chunk(out, n.max(1), |i, out_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..p * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// out[m,n] = aᵀ @ b, with a[k,m], b[k,n]
pub fn matmul_ta(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for s in 0..k {
        let a_row = &a[s * m..(s + 1) * m];
        let b_row = &b[s * n..(s + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] = a @ bᵀ, with a[m,k], b[n,k]
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk(out, n.max(1), |i, out_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
}

/// Spatial geometry of a stride-1 convolution.
pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> (usize, usize) {
    (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [f64],
) {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, pad);
    debug_assert_eq!(out.len(), batch * co * oh * ow);
    // One task per (batch, out-channel) plane; planes are disjoint.
    for_each_chunk(out, oh * ow, |plane, out_plane| {
        let b = plane / co;
        let o = plane % co;
        out_plane.fill(bias[o]);
        let x_img = &x[b * ci * h * w..(b + 1) * ci * h * w];
        for c in 0..ci {
            let x_chan = &x_img[c * h * w..(c + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let wv = weight[((o * ci + c) * kh + i) * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    // y + i - pad must land in [0, h); likewise for x.
                    let y_lo = pad.saturating_sub(i);
                    let y_hi = (h + pad - i).min(oh);
                    let x_lo = pad.saturating_sub(j);
                    let x_hi = (w + pad - j).min(ow);
                    if x_hi <= x_lo {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let sy = y + i - pad;
                        let src = &x_chan[sy * w + x_lo + j - pad..sy * w + x_hi + j - pad];
                        let dst = &mut out_plane[y * ow + x_lo..y * ow + x_hi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    grad_out: &[f64],
    weight: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    grad_x: &mut [f64],
) {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, pad);
    debug_assert_eq!(grad_x.len(), batch * ci * h * w);
    grad_x.fill(0.0);
    // One task per batch item; each owns its full dx image.
    for_each_chunk(grad_x, ci * h * w, |b, dx_img| {
        let g_img = &grad_out[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            let g_plane = &g_img[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..ci {
                let dx_chan = &mut dx_img[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = weight[((o * ci + c) * kh + i) * kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let y_lo = pad.saturating_sub(i);
                        let y_hi = (h + pad - i).min(oh);
                        let x_lo = pad.saturating_sub(j);
                        let x_hi = (w + pad - j).min(ow);
                        if x_hi <= x_lo {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let sy = y + i - pad;
                            let g_row = &g_plane[y * ow + x_lo..y * ow + x_hi];
                            let dx_row =
                                &mut dx_chan[sy * w + x_lo + j - pad..sy * w + x_hi + j - pad];
                            for (d, &g) in dx_row.iter_mut().zip(g_row) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_weight(
    grad_out: &[f64],
    x: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let (oh, ow) = conv2d_out_hw(h, w, kh, kw, pad);
    debug_assert_eq!(grad_w.len(), co * ci * kh * kw);
    debug_assert_eq!(grad_b.len(), co);
    grad_w.fill(0.0);
    // One task per out-channel; the batch reduction inside stays sequential.
    for_each_chunk(grad_w, ci * kh * kw, |o, dw_chan| {
        for b in 0..batch {
            let g_plane = &grad_out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            let x_img = &x[b * ci * h * w..(b + 1) * ci * h * w];
            for c in 0..ci {
                let x_chan = &x_img[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let y_lo = pad.saturating_sub(i);
                        let y_hi = (h + pad - i).min(oh);
                        let x_lo = pad.saturating_sub(j);
                        let x_hi = (w + pad - j).min(ow);
                        if x_hi <= x_lo {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let sy = y + i - pad;
                            let g_row = &g_plane[y * ow + x_lo..y * ow + x_hi];
                            let x_row =
                                &x_chan[sy * w + x_lo + j - pad..sy * w + x_hi + j - pad];
                            for (&g, &s) in g_row.iter().zip(x_row) {
                                acc += g * s;
                            }
                        }
                        dw_chan[(c * kh + i) * kw + j] += acc;
                    }
                }
            }
        }
    });
    for o in 0..co {
        let mut acc = 0.0;
        for b in 0..batch {
            let g_plane = &grad_out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for &g in g_plane {
                acc += g;
            }
        }
        grad_b[o] = acc;
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order, and `argmax` records the winning flat index for backward.
pub fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), planes * oh * ow);
    for p in 0..planes {
        let x_plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xcol in 0..ow {
                let base = (2 * y) * w + 2 * xcol;
                let idxs = [base, base + 1, base + w, base + w + 1];
                let mut best = idxs[0];
                let mut best_v = x_plane[best];
                for &i in &idxs[1..] {
                    if x_plane[i] > best_v {
                        best_v = x_plane[i];
                        best = i;
                    }
                }
                out[(p * oh + y) * ow + xcol] = best_v;
                argmax[(p * oh + y) * ow + xcol] = p * h * w + best;
            }
        }
    }
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], grad_x: &mut [f64]) {
    grad_x.fill(0.0);
    for (&g, &i) in grad_out.iter().zip(argmax) {
        grad_x[i] += g;
    }
}

/// Normalize each length-`s` row to zero mean / unit variance (biased variance,
/// `eps` inside the square root). Returns per-row (mean, 1/std) for backward.
pub fn row_normalize_forward(x: &[f64], s: usize, eps: f64, out: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / s;
    let mut means = vec![0.0; rows];
    let mut istds = vec![0.0; rows];
    for r in 0..rows {
        let x_row = &x[r * s..(r + 1) * s];
        let mut sum = 0.0;
        for &v in x_row {
            sum += v;
        }
        let mean = sum / s as f64;
        let mut var = 0.0;
        for &v in x_row {
            let d = v - mean;
            var += d * d;
        }
        var /= s as f64;
        let istd = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        istds[r] = istd;
        let out_row = &mut out[r * s..(r + 1) * s];
        for (o, &v) in out_row.iter_mut().zip(x_row) {
            *o = (v - mean) * istd;
        }
    }
    (means, istds)
}

pub fn row_normalize_backward(
    grad_out: &[f64],
    x: &[f64],
    s: usize,
    means: &[f64],
    istds: &[f64],
    grad_x: &mut [f64],
) {
    let rows = x.len() / s;
    for r in 0..rows {
        let g_row = &grad_out[r * s..(r + 1) * s];
        let x_row = &x[r * s..(r + 1) * s];
        let (mean, istd) = (means[r], istds[r]);
        let mut g_sum = 0.0;
        let mut gx_sum = 0.0;
        for (&g, &v) in g_row.iter().zip(x_row) {
            let xh = (v - mean) * istd;
            g_sum += g;
            gx_sum += g * xh;
        }
        let m1 = g_sum / s as f64;
        let m2 = gx_sum / s as f64;
        let dx_row = &mut grad_x[r * s..(r + 1) * s];
        for ((d, &g), &v) in dx_row.iter_mut().zip(g_row).zip(x_row) {
            let xh = (v - mean) * istd;
            *d += istd * (g - m1 - xh * m2);
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (x_row, out_row) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut m = f64::NEG_INFINITY;
        for &v in x_row {
            if v > m {
                m = v;
            }
        }
        let mut z = 0.0;
        for (o, &v) in out_row.iter_mut().zip(x_row) {
            let e = (v - m).exp();
            *o = e;
            z += e;
        }
        for o in out_row.iter_mut() {
            *o /= z;
        }
    }
}

/// Per-row -log softmax(x)[label], computed as logsumexp(x) - x[label].
pub fn softmax_xent_rows(x: &[f64], cols: usize, labels: &[usize], out: &mut [f64]) {
    for ((x_row, &label), o) in x.chunks_exact(cols).zip(labels).zip(out.iter_mut()) {
        let mut m = f64::NEG_INFINITY;
        for &v in x_row {
            if v > m {
                m = v;
            }
        }
        let mut z = 0.0;
        for &v in x_row {
            z += (v - m).exp();
        }
        *o = m + z.ln() - x_row[label];
    }
}
