//! Raw numerical kernels over `[C, H, W]` row-major buffers.
//!
//! These are shared by the graph ops and by graph-free inference, which keeps
//! the two paths bit-identical.

/// Probabilities are clamped to this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn radius(&self) -> usize {
        self.k / 2
    }

    /// Width of a zero-padded row.
    fn padded_width(&self) -> usize {
        self.w + 2 * self.radius()
    }

    /// Length of the flat "wide" output range: rows of `padded_width`
    /// entries, of which the first `w` are real outputs. Reading the padded
    /// input at `i + ky·Wp + kx` stays in bounds for every `i` below it.
    fn wide_len(&self) -> usize {
        self.h * self.padded_width() - 2 * self.radius()
    }
}

/// Copy `[C, H, W]` into a zero border of width `r`.
fn pad(dims: ConvDims, c: usize, x: &[f64]) -> Vec<f64> {
    let (h, w, r, wp) = (dims.h, dims.w, dims.radius(), dims.padded_width());
    let hp = h + 2 * r;
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let dst = ch * hp * wp + (y + r) * wp + r;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    out
}

/// Dot product with four independent partial sums (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[i] = init + Σ_s Σ_t weights[s·T + t] · srcs[s][i + offsets[t]]`,
/// summed in `(s, t)` order.
#[inline(always)]
fn correlate(out: &mut [f64], srcs: &[&[f64]], weights: &[f64], offsets: &[usize], init: f64) {
    let taps = offsets.len();
    let len = out.len();
    out.fill(init);
    for (si, src) in srcs.iter().enumerate() {
        let ws = &weights[si * taps..(si + 1) * taps];
        match taps {
            1 => fused::<1>(out, src, ws, offsets),
            9 => fused::<9>(out, src, ws, offsets),
            25 => fused::<25>(out, src, ws, offsets),
            _ => {
                for (&wv, &off) in ws.iter().zip(offsets) {
                    for (o, &x) in out.iter_mut().zip(&src[off..off + len]) {
                        *o += wv * x;
                    }
                }
            }
        }
    }
}

/// All `T` taps of one source in a single pass over `out`.
#[inline(always)]
fn fused<const T: usize>(out: &mut [f64], src: &[f64], weights: &[f64], offsets: &[usize]) {
    let len = out.len();
    let ws: [f64; T] = weights.try_into().unwrap();
    let rows: [&[f64]; T] = std::array::from_fn(|t| &src[offsets[t]..offsets[t] + len]);
    for (i, o) in out.iter_mut().enumerate() {
        let mut a = *o;
        for t in 0..T {
            a += ws[t] * rows[t][i];
        }
        *o = a;
    }
}

/// Same-size cross-correlation with zero padding.
pub fn conv2d_forward(dims: ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at run time.
        return unsafe { conv2d_forward_avx2(dims, input, kernel, bias) };
    }
    conv2d_forward_generic(dims, input, kernel, bias)
}

/// Wider vectors only; no fused multiply-add, so rounding is unchanged.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv2d_forward_avx2(dims: ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    conv2d_forward_generic(dims, input, kernel, bias)
}

#[inline(always)]
fn conv2d_forward_generic(dims: ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvDims { cin, cout, h, w, k } = dims;
    let wp = dims.padded_width();
    let pplane = (h + 2 * dims.radius()) * wp;
    let padded = pad(dims, cin, input);
    let srcs: Vec<&[f64]> = padded.chunks_exact(pplane).collect();
    let offsets: Vec<usize> = (0..k * k).map(|t| (t / k) * wp + t % k).collect();
    let mut out = vec![0.0; cout * h * w];
    let mut wide = vec![0.0; dims.wide_len()];
    for co in 0..cout {
        correlate(&mut wide, &srcs, &kernel[co * cin * k * k..(co + 1) * cin * k * k], &offsets, bias[co]);
        for y in 0..h {
            out[(co * h + y) * w..(co * h + y + 1) * w].copy_from_slice(&wide[y * wp..y * wp + w]);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. `grad_input` is skipped when `None`
/// (first layer of a network, whose input is data).
pub fn conv2d_backward(
    dims: ConvDims,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at run time.
        return unsafe { conv2d_backward_avx2(dims, input, kernel, grad_out, grad_input, grad_kernel, grad_bias) };
    }
    conv2d_backward_generic(dims, input, kernel, grad_out, grad_input, grad_kernel, grad_bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv2d_backward_avx2(
    dims: ConvDims,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    conv2d_backward_generic(dims, input, kernel, grad_out, grad_input, grad_kernel, grad_bias)
}

#[inline(always)]
fn conv2d_backward_generic(
    dims: ConvDims,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    let ConvDims { cin, cout, h, w, k } = dims;
    let (r, wp) = (dims.radius(), dims.padded_width());
    let pplane = (h + 2 * r) * wp;
    let plane = h * w;
    let len = dims.wide_len();
    let taps = k * k;
    let offsets: Vec<usize> = (0..taps).map(|t| (t / k) * wp + t % k).collect();
    let padded = pad(dims, cin, input);
    // Output gradients on the wide grid, preceded by `reach` zeros so the
    // flipped taps of the input gradient never index below zero.
    let reach = 2 * r * wp + 2 * r;
    let g_ext: Vec<Vec<f64>> = (0..cout)
        .map(|co| {
            let mut v = vec![0.0; reach + len + reach];
            for (y, row) in grad_out[co * plane..(co + 1) * plane].chunks_exact(w).enumerate() {
                v[reach + y * wp..reach + y * wp + w].copy_from_slice(row);
            }
            v
        })
        .collect();
    for co in 0..cout {
        grad_bias[co] += grad_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
        let g = &g_ext[co][reach..reach + len];
        for ci in 0..cin {
            let src = &padded[ci * pplane..(ci + 1) * pplane];
            for (t, &off) in offsets.iter().enumerate() {
                grad_kernel[(co * cin + ci) * taps + t] += dot(g, &src[off..off + len]);
            }
        }
    }
    if let Some(grad_input) = grad_input {
        // grad at padded position p = Σ_co Σ_t w · g[p − off_t]; only the
        // interior p = base + i is needed, base = r·Wp + r.
        let base = r * wp + r;
        let flipped: Vec<usize> = offsets.iter().map(|&off| reach + base - off).collect();
        let srcs: Vec<&[f64]> = g_ext.iter().map(Vec::as_slice).collect();
        let mut weights = vec![0.0; cout * taps];
        let mut wide = vec![0.0; len];
        for ci in 0..cin {
            for co in 0..cout {
                weights[co * taps..(co + 1) * taps]
                    .copy_from_slice(&kernel[(co * cin + ci) * taps..(co * cin + ci + 1) * taps]);
            }
            correlate(&mut wide, &srcs, &weights, &flipped, 0.0);
            for y in 0..h {
                for (d, s) in grad_input[ci * plane + y * w..ci * plane + (y + 1) * w].iter_mut().zip(&wide[y * wp..]) {
                    *d += s;
                }
            }
        }
    }
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    for ((gi, &g), &v) in grad_in.iter_mut().zip(grad_out).zip(x) {
        if v > 0.0 {
            *gi += g;
        }
    }
}

/// Softmax over the channel axis of a `[C, plane]` buffer, max-shifted.
pub fn softmax_forward(c: usize, plane: usize, logits: &[f64]) -> Vec<f64> {
    let mut max = logits[..plane].to_vec();
    for ch in 1..c {
        for (m, &z) in max.iter_mut().zip(&logits[ch * plane..(ch + 1) * plane]) {
            if z > *m {
                *m = z;
            }
        }
    }
    let mut out = vec![0.0; c * plane];
    let mut sum = vec![0.0; plane];
    for ch in 0..c {
        let zs = &logits[ch * plane..(ch + 1) * plane];
        let os = &mut out[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            let e = (zs[p] - max[p]).exp();
            os[p] = e;
            sum[p] += e;
        }
    }
    for ch in 0..c {
        for (o, s) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&sum) {
            *o /= s;
        }
    }
    out
}

pub fn softmax_backward(c: usize, plane: usize, probs: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let mut dot = vec![0.0; plane];
    for ch in 0..c {
        let ys = &probs[ch * plane..(ch + 1) * plane];
        let gs = &grad_out[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            dot[p] += ys[p] * gs[p];
        }
    }
    for ch in 0..c {
        let ys = &probs[ch * plane..(ch + 1) * plane];
        let gs = &grad_out[ch * plane..(ch + 1) * plane];
        let gi = &mut grad_in[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            gi[p] += ys[p] * (gs[p] - dot[p]);
        }
    }
}

/// Output channel `j` is the sum of the input channels listed in `groups[j]`.
pub fn group_sum_forward(plane: usize, input: &[f64], groups: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; groups.len() * plane];
    for (j, group) in groups.iter().enumerate() {
        let dst = &mut out[j * plane..(j + 1) * plane];
        for &ch in group {
            for (d, s) in dst.iter_mut().zip(&input[ch * plane..(ch + 1) * plane]) {
                *d += s;
            }
        }
    }
    out
}

pub fn group_sum_backward(plane: usize, groups: &[Vec<usize>], grad_out: &[f64], grad_in: &mut [f64]) {
    for (j, group) in groups.iter().enumerate() {
        let g = &grad_out[j * plane..(j + 1) * plane];
        for &ch in group {
            for (d, s) in grad_in[ch * plane..(ch + 1) * plane].iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

#[inline]
fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Mean over pixels of `w · (−ln p[label])`.
pub fn weighted_nll(plane: usize, probs: &[f64], labels: &[usize], weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    for p in 0..plane {
        if weights[p] != 0.0 {
            acc += weights[p] * -ln_floor(probs[labels[p] * plane + p]);
        }
    }
    acc / plane as f64
}

pub fn weighted_nll_backward(
    plane: usize,
    probs: &[f64],
    labels: &[usize],
    weights: &[f64],
    upstream: f64,
    grad_in: &mut [f64],
) {
    let scale = upstream / plane as f64;
    for p in 0..plane {
        let idx = labels[p] * plane + p;
        let q = probs[idx];
        if q > PROB_FLOOR {
            grad_in[idx] -= scale * weights[p] / q;
        }
    }
}

/// Mean over pixels of `w · Σ_c t_c ln(t_c / q_c)` with `0·ln 0 = 0`.
pub fn weighted_kl(c: usize, plane: usize, target: &[f64], pred: &[f64], weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ch in 0..c {
        let ts = &target[ch * plane..(ch + 1) * plane];
        let qs = &pred[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            let t = ts[p];
            if t > 0.0 && weights[p] != 0.0 {
                acc += weights[p] * t * (t.ln() - ln_floor(qs[p]));
            }
        }
    }
    acc / plane as f64
}

pub fn weighted_kl_backward(
    c: usize,
    plane: usize,
    target: &[f64],
    pred: &[f64],
    weights: &[f64],
    upstream: f64,
    grad_in: &mut [f64],
) {
    let scale = upstream / plane as f64;
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            let (t, q) = (target[idx], pred[idx]);
            if t > 0.0 && q > PROB_FLOOR {
                grad_in[idx] -= scale * weights[p] * t / q;
            }
        }
    }
}

/// Mean over pixels of `w · Σ_c q_c ln(q_c / g_c)`: the prediction is the
/// first KL argument. `g` must be strictly positive.
pub fn weighted_kl_pred_first(c: usize, plane: usize, pred: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            let q = pred[idx];
            if q > 0.0 && weights[p] != 0.0 {
                acc += weights[p] * q * (ln_floor(q) - target[idx].ln());
            }
        }
    }
    acc / plane as f64
}

pub fn weighted_kl_pred_first_backward(
    c: usize,
    plane: usize,
    pred: &[f64],
    target: &[f64],
    weights: &[f64],
    upstream: f64,
    grad_in: &mut [f64],
) {
    let scale = upstream / plane as f64;
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            let q = pred[idx];
            let d = if q > PROB_FLOOR {
                q.ln() + 1.0 - target[idx].ln()
            } else {
                PROB_FLOOR.ln() - target[idx].ln()
            };
            grad_in[idx] += scale * weights[p] * d;
        }
    }
}

/// Per-pixel argmax over channels; the lowest channel wins ties.
pub fn argmax_channels(c: usize, plane: usize, data: &[f64]) -> Vec<usize> {
    let mut best = vec![0usize; plane];
    let mut best_v = data[..plane].to_vec();
    for ch in 1..c {
        for p in 0..plane {
            let v = data[ch * plane + p];
            if v > best_v[p] {
                best_v[p] = v;
                best[p] = ch;
            }
        }
    }
    best
}
