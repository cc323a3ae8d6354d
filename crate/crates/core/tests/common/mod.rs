//! Oracles shared by the integration tests. None of them call into the
//! autodiff engine or reuse library helpers they are meant to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of a scalar function at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y).collect());
    let scale = norm(a.to_vec()).max(norm(b.to_vec()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Column-wise softmax of a `[classes, pixels]` array, in plain f64.
pub fn softmax_columns(z: &[f64], classes: usize) -> Vec<f64> {
    let pixels = z.len() / classes;
    let mut out = vec![0.0; z.len()];
    for n in 0..pixels {
        let max = (0..classes).map(|c| z[c * pixels + n]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..classes).map(|c| (z[c * pixels + n] - max).exp()).sum();
        for c in 0..classes {
            out[c * pixels + n] = (z[c * pixels + n] - max).exp() / total;
        }
    }
    out
}

/// Random valid probability map `[classes, pixels]` with entries bounded
/// away from 0 and 1.
pub fn random_probs(rng: &mut ChaCha8Rng, classes: usize, pixels: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..classes * pixels).map(|_| rng.random_range(-2.0..2.0)).collect();
    softmax_columns(&z, classes)
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    m[rng.random_range(0..n)] = true;
    m
}

/// Pixels whose value differs from a 4-neighbour.
pub fn brute_boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let v = mask[r * w + c];
            let mut differs = false;
            if r > 0 && mask[(r - 1) * w + c] != v {
                differs = true;
            }
            if r + 1 < h && mask[(r + 1) * w + c] != v {
                differs = true;
            }
            if c > 0 && mask[r * w + c - 1] != v {
                differs = true;
            }
            if c + 1 < w && mask[r * w + c + 1] != v {
                differs = true;
            }
            out[r * w + c] = differs;
        }
    }
    out
}

/// Weight 2 where some boundary pixel lies within Chebyshev distance 3.
pub fn brute_weights(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let boundary = brute_boundary(mask, h, w);
    let mut out = vec![1.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            'scan: for br in (r - 3).max(0)..=(r + 3).min(h as i64 - 1) {
                for bc in (c - 3).max(0)..=(c + 3).min(w as i64 - 1) {
                    if boundary[(br * w as i64 + bc) as usize] {
                        out[(r * w as i64 + c) as usize] = 2.0;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Three-sigma band for a binomial count.
pub fn within_three_sigma(count: usize, trials: usize, p: f64) -> bool {
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sigma
}
