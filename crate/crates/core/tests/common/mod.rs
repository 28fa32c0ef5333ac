//! Straight-line reimplementations used as oracles, plus fixtures.

// The oracles index like the formulas they transcribe.
#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use mibounds::distributions::{stream_rng, DiagGaussianCond};
use mibounds::estimators::{Batch, Critic};
use mibounds::Tensor;
use rand::Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

pub fn uniform(seed: u64, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut rng = stream_rng(seed, 77);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

pub fn batch(seed: u64, n: usize, dx: usize, dy: usize) -> Batch {
    Batch::new(uniform(seed, n, dx, 1.5), uniform(seed + 1000, n, dy, 1.5)).unwrap()
}

pub fn cond(seed: u64, dx: usize, dy: usize) -> DiagGaussianCond {
    DiagGaussianCond::new(dx, dy, 15, &mut stream_rng(seed, 5))
}

pub fn critic(seed: u64, dx: usize, dy: usize) -> Critic {
    Critic::new(dx, dy, 15, &mut stream_rng(seed, 6))
}

/// Scalar Gaussian log-density of one coordinate.
pub fn log_normal(y: f64, mu: f64, logvar: f64) -> f64 {
    -0.5 * (LN_2PI + logvar) - (y - mu) * (y - mu) / (2.0 * logvar.exp())
}

/// Per-row `(μ, log σ²)` of a conditional, read through its networks.
pub fn moments(c: &DiagGaussianCond, x: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mu = c.mu_net.forward(x).unwrap().to_rows();
    let b = c.logvar_bound;
    let lv = c
        .logvar_net
        .forward(x)
        .unwrap()
        .to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(|t| b * (t / b).tanh()).collect())
        .collect();
    (mu, lv)
}

/// `lp[i][j] = log q(y_j | x_i)` by explicit loops.
pub fn log_q_matrix(c: &DiagGaussianCond, b: &Batch) -> Vec<Vec<f64>> {
    let (mu, lv) = moments(c, &b.x);
    let y = b.y.to_rows();
    (0..b.len())
        .map(|i| {
            (0..b.len())
                .map(|j| {
                    (0..y[j].len())
                        .map(|k| log_normal(y[j][k], mu[i][k], lv[i][k]))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Exact conditional `N(ρx, 1 − ρ²)` by explicit loops.
pub fn log_p_matrix(rho: f64, b: &Batch) -> Vec<Vec<f64>> {
    let x = b.x.to_rows();
    let y = b.y.to_rows();
    let lv = (1.0 - rho * rho).ln();
    (0..b.len())
        .map(|i| {
            (0..b.len())
                .map(|j| {
                    (0..y[j].len())
                        .map(|k| log_normal(y[j][k], rho * x[i][k], lv))
                        .sum()
                })
                .collect()
        })
        .collect()
}

pub fn club_loop(lp: &[Vec<f64>]) -> f64 {
    let n = lp.len() as f64;
    let mut total = 0.0;
    for i in 0..lp.len() {
        for j in 0..lp.len() {
            total += lp[i][i] - lp[i][j];
        }
    }
    total / (n * n)
}

pub fn club_sampled_loop(lp: &[Vec<f64>], neg: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..lp.len() {
        total += lp[i][i] - lp[i][neg[i]];
    }
    total / lp.len() as f64
}

pub fn vub_loop(lp: &[Vec<f64>], b: &Batch) -> f64 {
    let y = b.y.to_rows();
    let mut total = 0.0;
    for i in 0..lp.len() {
        let r: f64 = y[i].iter().map(|&v| log_normal(v, 0.0, 0.0)).sum();
        total += lp[i][i] - r;
    }
    total / lp.len() as f64
}

/// Leave-one-out, averaging probabilities directly (fine at these magnitudes).
pub fn l1out_loop(lp: &[Vec<f64>]) -> f64 {
    let n = lp.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut avg = 0.0;
        for j in 0..n {
            if j != i {
                avg += lp[j][i].exp();
            }
        }
        avg /= (n - 1) as f64;
        total += lp[i][i] - avg.ln();
    }
    total / n as f64
}

/// `f[i][j] = f(x_i, y_j)`, one network evaluation per pair.
pub fn scores(c: &Critic, b: &Batch) -> Vec<Vec<f64>> {
    let x = b.x.to_rows();
    let y = b.y.to_rows();
    (0..b.len())
        .map(|i| {
            (0..b.len())
                .map(|j| {
                    let mut row = x[i].clone();
                    row.extend_from_slice(&y[j]);
                    let t = Tensor::matrix(1, row.len(), row);
                    c.net.forward(&t).unwrap().item()
                })
                .collect()
        })
        .collect()
}

pub fn nwj_loop(f: &[Vec<f64>]) -> f64 {
    let n = f.len() as f64;
    let joint: f64 = (0..f.len()).map(|i| f[i][i]).sum::<f64>() / n;
    let marg: f64 = f.iter().flatten().map(|v| (v - 1.0).exp()).sum::<f64>() / (n * n);
    joint - marg
}

pub fn mine_loop(f: &[Vec<f64>]) -> f64 {
    let n = f.len() as f64;
    let joint: f64 = (0..f.len()).map(|i| f[i][i]).sum::<f64>() / n;
    let marg: f64 = f.iter().flatten().map(|v| v.exp()).sum::<f64>() / (n * n);
    joint - marg.ln()
}

pub fn infonce_loop(f: &[Vec<f64>]) -> f64 {
    let n = f.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = f[i].iter().map(|v| v.exp()).sum();
        total += f[i][i] - denom.ln() + (n as f64).ln();
    }
    total / n as f64
}

/// Relative error with an absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
pub mod suite;
