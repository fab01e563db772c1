//! Independent reference computations used by the integration and acceptance
//! tests. Everything here works on dense matrices with textbook formulas.
#![allow(dead_code)]

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random symmetric positive definite matrix `A Aᵀ + n I / 2`.
pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * (0.5 * n as f64)
}

pub fn dense_chol(a: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    Cholesky::new(a.clone()).expect("oracle matrix is positive definite")
}

pub fn dense_logdet(a: &DMatrix<f64>) -> f64 {
    2.0 * dense_chol(a)
        .l()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    dense_chol(a).inverse()
}

/// Log density of a multivariate normal.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let ch = dense_chol(cov);
    let d = x - mean;
    let alpha = ch.l().solve_lower_triangular(&d).unwrap();
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * (2.0 * PI).ln() + logdet + alpha.norm_squared())
}

pub fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (y - mean).powi(2) / var)
}

/// Periodic kernel `v exp(-2 sin^2(pi |a-b| / p) / l^2)`.
pub fn periodic(a: f64, b: f64, period: f64, ls: f64, var: f64) -> f64 {
    let s = (PI * (a - b).abs() / period).sin();
    var * (-2.0 * s * s / (ls * ls)).exp()
}

/// Squared exponential kernel with one lengthscale.
pub fn squared_exp(a: &[f64], b: &[f64], ls: f64, var: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    var * (-0.5 * r2 / (ls * ls)).exp()
}

/// Exact GP regression: predictive latent means and variances at `xs`.
pub fn gp_regression(
    kernel: &dyn Fn(&[f64], &[f64]) -> f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: f64,
    xs: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
    let n = x.nrows();
    let k = DMatrix::from_fn(n, n, |i, j| kernel(&row(x, i), &row(x, j)))
        + DMatrix::identity(n, n) * noise;
    let ks = DMatrix::from_fn(xs.nrows(), n, |i, j| kernel(&row(xs, i), &row(x, j)));
    let ch = dense_chol(&k);
    let alpha = ch.solve(y);
    let mean = &ks * alpha;
    let v = ch.l().solve_lower_triangular(&ks.transpose()).unwrap();
    let var = DVector::from_fn(xs.nrows(), |i, _| {
        let xi = row(xs, i);
        kernel(&xi, &xi) - v.column(i).norm_squared()
    });
    (mean, var)
}

/// Monte Carlo entropy of a Gaussian mixture with its standard error.
pub fn mog_entropy_mc(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut r = rng(seed);
    let chols: Vec<_> = covs.iter().map(dense_chol).collect();
    let logdets: Vec<f64> = chols
        .iter()
        .map(|c| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
        .collect();
    let d = means[0].len();
    let norm = d as f64 * (2.0 * PI).ln();
    let mut vals = Vec::with_capacity(samples);
    let mut lps = vec![0.0; weights.len()];
    for _ in 0..samples {
        let u: f64 = r.random();
        let mut k = 0;
        let mut acc = weights[0];
        while u > acc && k + 1 < weights.len() {
            k += 1;
            acc += weights[k];
        }
        let e = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
        let x = &means[k] + chols[k].l() * e;
        for l in 0..weights.len() {
            let a = chols[l]
                .l()
                .solve_lower_triangular(&(&x - &means[l]))
                .unwrap();
            lps[l] = weights[l].ln() - 0.5 * (norm + logdets[l] + a.norm_squared());
        }
        let mx = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lps.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        vals.push(-lse);
    }
    let n = samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// Average ranks with ties sharing the mean position.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}
