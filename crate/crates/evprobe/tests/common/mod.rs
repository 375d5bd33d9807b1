//! Shared helpers for the integration suites: synthetic task generators
//! and independent oracles (quadrature, dense curvature, finite
//! differences) that never call the code paths they are checking.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use evprobe::laplace::logistic;
use evprobe::probes::{forward_batch, softmax_rows, ProbeParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
}

/// Sample one label per row from the softmax of the given logits.
pub fn sample_labels(rng: &mut ChaCha8Rng, logits: &DMatrix<f64>) -> Vec<usize> {
    let probs = {
        let mut p = logits.clone();
        for mut row in p.row_iter_mut() {
            let m = row.max();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
            }
            let s = row.sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        p
    };
    let u = Uniform::new(0.0f64, 1.0);
    (0..logits.nrows())
        .map(|i| {
            let t = u.sample(rng);
            let mut acc = 0.0;
            for c in 0..logits.ncols() {
                acc += probs[(i, c)];
                if t < acc {
                    return c;
                }
            }
            logits.ncols() - 1
        })
        .collect()
}

/// Gaussian inputs with labels sampled from a softmax teacher that only
/// reads the first `relevant` input dimensions. `scale` controls the
/// signal-to-noise ratio of the labels.
pub fn teacher_task(
    seed: u64,
    n: usize,
    d: usize,
    c: usize,
    relevant: usize,
    scale: f64,
) -> (DMatrix<f64>, Vec<usize>) {
    assert!(relevant <= d);
    let mut r = rng(seed ^ 0x7465616368);
    let x = gaussian_matrix(&mut r, n, d);
    let w = gaussian_matrix(&mut r, relevant, c);
    let logits = x.columns(0, relevant) * w * (scale / (relevant as f64).sqrt());
    let y = sample_labels(&mut r, &logits);
    (x, y)
}

/// Balanced labels with no relationship to any input.
pub fn random_labels(seed: u64, n: usize, c: usize) -> Vec<usize> {
    let mut r = rng(seed ^ 0x6c6162);
    let mut y: Vec<usize> = (0..n).map(|i| i % c).collect();
    y.shuffle(&mut r);
    y
}

/// Brute-force log evidence of a binary logistic model by trapezoidal
/// quadrature on a tensor grid centered at the MAP, about 1e5 points in
/// total. Spectrally accurate for the Gaussian-like integrand.
pub fn logistic_quadrature(x: &DMatrix<f64>, y: &[usize], lambda: f64) -> f64 {
    let d = x.ncols();
    let pts_per_dim = match d {
        1 => 100_001,
        2 => 317,
        3 => 47,
        _ => panic!("quadrature oracle covers d in 1..=3"),
    };
    let center = logistic::map(x, y, lambda, 100);
    let half = 12.0 / lambda.sqrt();
    let step = 2.0 * half / (pts_per_dim as f64 - 1.0);
    let log_prior_const =
        0.5 * d as f64 * (lambda.ln() - (2.0 * std::f64::consts::PI).ln());

    let total = (pts_per_dim as usize).pow(d as u32);
    let mut log_vals = Vec::with_capacity(total);
    let mut w = DVector::zeros(d);
    for flat in 0..total {
        let mut rem = flat;
        for k in 0..d {
            let idx = rem % pts_per_dim;
            rem /= pts_per_dim;
            w[k] = center[k] - half + step * idx as f64;
        }
        let log_f = -logistic::nll(&w, x, y) + log_prior_const
            - 0.5 * lambda * w.norm_squared();
        log_vals.push(log_f);
    }
    let m = log_vals.iter().cloned().fold(f64::MIN, f64::max);
    let sum: f64 = log_vals.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln() + d as f64 * step.ln()
}

/// Dense GGN of a probe via a numerically assembled Jacobian. The probe
/// is evaluated through its public forward pass only.
pub fn dense_ggn(params: &ProbeParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let c = params.arch.num_classes;
    let p = params.theta.len();
    let probs = softmax_rows(&forward_batch(params, x).logits);

    // Jacobian per example by central differences on the logits.
    let h = 1e-5;
    let mut jac = vec![DMatrix::zeros(c, p); n];
    for i in 0..p {
        let mut plus = params.clone();
        plus.theta[i] += h;
        let mut minus = params.clone();
        minus.theta[i] -= h;
        let lp = forward_batch(&plus, x).logits;
        let lm = forward_batch(&minus, x).logits;
        for row in 0..n {
            for k in 0..c {
                jac[row][(k, i)] = (lp[(row, k)] - lm[(row, k)]) / (2.0 * h);
            }
        }
    }

    let mut ggn = DMatrix::zeros(p, p);
    for row in 0..n {
        let pr = probs.row(row).transpose();
        let lam = DMatrix::from_diagonal(&pr) - &pr * pr.transpose();
        ggn += jac[row].transpose() * lam * &jac[row];
    }
    ggn
}
