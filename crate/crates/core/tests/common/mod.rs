#![allow(dead_code)]

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use useg::autodiff::kernels::ConvDims;
use useg::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// Direct six-loop same-size correlation with explicit bounds tests.
pub fn naive_conv(d: ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let r = (d.k / 2) as isize;
    let mut out = vec![0.0; d.cout * d.h * d.w];
    for co in 0..d.cout {
        for y in 0..d.h as isize {
            for x in 0..d.w as isize {
                let mut s = bias[co];
                for ci in 0..d.cin {
                    for ky in 0..d.k as isize {
                        for kx in 0..d.k as isize {
                            let (iy, ix) = (y + ky - r, x + kx - r);
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            let wv = kernel[((co * d.cin + ci) * d.k + ky as usize) * d.k + kx as usize];
                            s += wv * input[(ci * d.h + iy as usize) * d.w + ix as usize];
                        }
                    }
                }
                out[(co * d.h + y as usize) * d.w + x as usize] = s;
            }
        }
    }
    out
}

/// Random distributions over `c` channels at each of `h·w` pixels, with a
/// fraction of exact zeros and near-degenerate pixels mixed in.
pub fn random_simplex(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; c * plane];
    for p in 0..plane {
        let kind = r.gen_range(0..10);
        let raw: Vec<f64> = (0..c)
            .map(|_| match kind {
                0 => if r.gen_bool(0.5) { 0.0 } else { r.gen_range(0.0..1.0) },
                1 => r.gen_range(0.0..1.0f64).powi(12),
                _ => -r.gen_range(1e-9..1.0f64).ln(),
            })
            .collect();
        let mut s: f64 = raw.iter().sum();
        let mut raw = raw;
        if s == 0.0 {
            raw[r.gen_range(0..c)] = 1.0;
            s = 1.0;
        }
        for ch in 0..c {
            data[ch * plane + p] = raw[ch] / s;
        }
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = 1.0f64.max(x.abs()).max(y.abs());
        assert!((x - y).abs() <= tol * scale, "{what}[{i}]: {x} vs {y}");
    }
}
