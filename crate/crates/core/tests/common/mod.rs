#![allow(dead_code)]

use pwrd_core::linalg::Matrix;
use pwrd_core::sim::{stream, Assignment, Scenario};
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0, 99)
}

/// `AA' + δI` with uniform(−1, 1) entries in `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, g: usize) -> Matrix {
    let a: Vec<f64> = (0..g * g).map(|_| 2.0 * uniform(rng) - 1.0).collect();
    let mut m = Matrix::zeros(g, g);
    for i in 0..g {
        for j in 0..g {
            m[(i, j)] = (0..g).map(|k| a[i * g + k] * a[j * g + k]).sum();
        }
        m[(i, i)] += 0.05;
    }
    m
}

pub fn random_p0(rng: &mut ChaCha8Rng, g: usize) -> Vec<f64> {
    (0..g).map(|_| 1.0 - uniform(rng).min(0.999)).collect()
}

pub fn slope(sigma: &Matrix, p: &[f64], w: &[f64]) -> f64 {
    let wp: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
    wp / sigma.quad_form(w).sqrt()
}

/// Exact simplex optimum by enumerating supports: the optimum is
/// `Σ_SS⁻¹ p_S` on the support `S` where that vector is positive.
pub fn subset_oracle(sigma: &Matrix, p: &[f64]) -> (f64, Vec<f64>) {
    let g = p.len();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for mask in 1u32..(1 << g) {
        let s: Vec<usize> = (0..g).filter(|i| mask & (1 << i) != 0).collect();
        let mut sub = Matrix::zeros(s.len(), s.len());
        for (a, &i) in s.iter().enumerate() {
            for (b, &j) in s.iter().enumerate() {
                sub[(a, b)] = sigma[(i, j)];
            }
        }
        let rhs: Vec<f64> = s.iter().map(|&i| p[i]).collect();
        let Ok(z) = sub.solve(&rhs) else { continue };
        if z.iter().any(|v| *v <= 0.0) {
            continue;
        }
        let total: f64 = z.iter().sum();
        let mut w = vec![0.0; g];
        for (a, &i) in s.iter().enumerate() {
            w[i] = z[a] / total;
        }
        let h = slope(sigma, p, &w);
        if h > best.0 {
            best = (h, w);
        }
    }
    best
}

/// Small paired design with thresholds at the grade means.
pub fn small_scenario(icc: f64, n_clusters: usize, units: usize, seed: u64) -> Scenario {
    let mut s = Scenario::default_design(icc);
    s.n_clusters = n_clusters;
    s.assignment = if n_clusters % 2 == 0 { Assignment::Pairs } else { Assignment::Complete };
    for c in &mut s.cohorts {
        c.units_per_grade = units;
    }
    s.seed = seed;
    s
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
