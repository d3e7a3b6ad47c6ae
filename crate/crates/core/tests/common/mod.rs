#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relu_unwrap::data::{self, Dataset, SplitSpec};
use relu_unwrap::network::ReluNetwork;
use relu_unwrap::simplify::{self, MergeConfig, MergedModel};
use relu_unwrap::trainer::{self, TrainConfig};
use relu_unwrap::unwrapper::{self, UnwrapResult};

pub fn gaussian_design(n: usize, d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let beta: Vec<f64> = (0..=d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Irwin-Hall noise keeps the design free of extra dependencies
        let e: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
        y.push(beta[0] + xi.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>() + 0.3 * e);
        x.extend(xi);
    }
    (x, y)
}

pub fn logistic_design(n: usize, d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let beta: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let eta = beta[0] + xi.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        let p = 1.0 / (1.0 + (-eta).exp());
        y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        x.extend(xi);
    }
    (x, y)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..k {
        let p = (c..k).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..k {
            if r != c {
                let f = m[r][c];
                let src = m[c].clone();
                for (v, s) in m[r].iter_mut().zip(src) {
                    *v -= f * s;
                }
            }
        }
    }
    m.into_iter().map(|r| r[k..].to_vec()).collect()
}

fn with_intercept(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect()
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(p, q)| p * q).sum()).collect()
}

/// `(X'X)^{-1} X'y` by explicit inverse.
pub fn normal_equations(x: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
    let xs = with_intercept(x, d);
    let k = d + 1;
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (r, &t) in xs.iter().zip(y) {
        for a in 0..k {
            xty[a] += r[a] * t;
            for b in 0..k {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    mat_vec(&gauss_jordan_inverse(&xtx), &xty)
}

/// Undamped Newton on the logistic log-likelihood.
pub fn newton_logistic(x: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
    let xs = with_intercept(x, d);
    let k = d + 1;
    let mut beta = vec![0.0; k];
    for _ in 0..60 {
        let mut h = vec![vec![0.0; k]; k];
        let mut g = vec![0.0; k];
        for (r, &t) in xs.iter().zip(y) {
            let e: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-e).exp());
            for a in 0..k {
                g[a] += (t - p) * r[a];
                for b in 0..k {
                    h[a][b] += p * (1.0 - p) * r[a] * r[b];
                }
            }
        }
        let step = mat_vec(&gauss_jordan_inverse(&h), &g);
        for (b, s) in beta.iter_mut().zip(step) {
            *b += s;
        }
    }
    beta
}

/// Two-sided Student-t p-value for integer degrees of freedom from the
/// closed-form trigonometric series.
pub fn t_two_sided_oracle(t: f64, nu: u32) -> f64 {
    let theta = (t.abs() / (nu as f64).sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    let a = if nu % 2 == 1 {
        let mut sum = 0.0;
        if nu > 1 {
            let mut term = c;
            sum = term;
            let mut k = 3;
            while k < nu {
                term *= c * c * (k - 1) as f64 / k as f64;
                sum += term;
                k += 2;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 2;
        while k < nu {
            term *= c * c * (k - 1) as f64 / k as f64;
            sum += term;
            k += 2;
        }
        s * sum
    };
    1.0 - a
}

/// `erfc(x)`: Maclaurin series below 2, continued fraction above.
pub fn erfc_oracle(x: f64) -> f64 {
    if x < 2.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        let mut f = 0.0;
        for k in (1..300).rev() {
            f = (k as f64 / 2.0) / (x + f);
        }
        (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
    }
}

/// Trapezoid-rule AUC oracle: share of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0.0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Everything one CoCircles seed produces.
pub struct SeedRun {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub net: ReluNetwork,
    pub result: UnwrapResult,
    pub merged: MergedModel,
    pub relu_auc: f64,
    pub merged_auc: f64,
    pub flat_auc: f64,
    pub slfn_auc: f64,
}

/// Small-budget networks used for FL-Net fine-tuning and the SLFN baseline.
pub fn slfn_config(k: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_sizes: vec![k],
        max_epochs: 200,
        patience: 50,
        seed,
        ..TrainConfig::default()
    }
}

pub fn cocircles_run(seed: u64) -> SeedRun {
    let full = data::gen_cocircles(2000, 0.1, seed);
    let (train, test, _) = data::split_and_scale(&full, &SplitSpec::new(full.task(), seed)).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let net = trainer::train(&train, &cfg).unwrap();
    let result = unwrapper::unwrap(&net, &train).unwrap();
    let merged = simplify::merge(
        &result,
        &train,
        &MergeConfig {
            seed,
            ..MergeConfig::default()
        },
    )
    .unwrap();
    let small = slfn_config(merged.n_clusters(), seed);
    let flat = simplify::flatten(&merged, &train, &small).unwrap();
    let slfn = trainer::train(&train, &small).unwrap();
    let cmp = simplify::compare_models(&net, Some((&merged, &result)), Some(&flat.network), Some(&slfn), &test).unwrap();
    SeedRun {
        seed,
        train,
        test,
        net,
        result,
        merged,
        relu_auc: cmp.relu.unwrap(),
        merged_auc: cmp.merged.unwrap(),
        flat_auc: cmp.flattened.unwrap(),
        slfn_auc: cmp.slfn.unwrap(),
    }
}
