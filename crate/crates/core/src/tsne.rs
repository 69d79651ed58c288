//! Exact t-SNE in two dimensions.
//!
//! Points are processed in a canonical order (lexicographic on features,
//! then on initial position), so the embedding does not depend on the order
//! in which the caller lists them.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output dimensionality.
pub const DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated affinities and initial momentum.
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            seed: 0,
        }
    }
}

/// Row-major `[n, d]` matrix of squared Euclidean distances.
pub fn squared_distances(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

/// Entropy in bits of row `i` at precision `beta`, writing the normalized
/// row into `p`.
fn row_entropy(dist: &[f64], i: usize, beta: f64, dmin: f64, p: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for (j, (pj, &dj)) in p.iter_mut().zip(dist).enumerate() {
        *pj = if j == i { 0.0 } else { (-beta * (dj - dmin)).exp() };
        z += *pj;
    }
    let mut h = 0.0;
    for pj in p.iter_mut() {
        *pj /= z;
        if *pj > 0.0 {
            h -= *pj * pj.log2();
        }
    }
    h
}

/// Conditional Gaussian affinities `p_{j|i}`, row-major `[n, n]`, with each
/// row's bandwidth found by bisection so that `2^H` equals `perplexity`.
pub fn conditional_affinities(x: &[f64], n: usize, d: usize, perplexity: f64) -> Result<Vec<f64>> {
    if n < 2 || x.len() != n * d {
        return Err(Error::Contract(format!("need at least 2 points of dimension {d}, got {} values", x.len())));
    }
    if !(perplexity > 0.0 && perplexity < n as f64) {
        return Err(Error::Config(format!("perplexity {perplexity} must lie in (0, {n})")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("t-SNE input", "non-finite feature"));
    }
    let dist = squared_distances(x, n, d);
    let mut p = vec![0.0; n * n];
    if n == 2 {
        p[1] = 1.0;
        p[2] = 1.0;
        return Ok(p);
    }
    let target = perplexity;
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let others = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v);
        let dmin = others.clone().fold(f64::INFINITY, f64::min);
        let mean = others.map(|v| v - dmin).sum::<f64>() / (n - 1) as f64;
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let mut converged = false;
        for _ in 0..64 {
            let h = row_entropy(row, i, beta, dmin, out);
            let perp = h.exp2();
            if (perp - target).abs() <= 1e-4 {
                converged = true;
                break;
            }
            if perp > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
        if !converged {
            return Err(Error::numeric(
                "t-SNE affinities",
                format!("bandwidth search for row {i} did not reach perplexity {perplexity}"),
            ));
        }
    }
    Ok(p)
}

/// `(P + Pᵀ) / (2n)`.
pub fn symmetrize(pc: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (pc[i * n + j] + pc[j * n + i]) / (2 * n) as f64;
        }
    }
    p
}

/// Student-t kernel `1 / (1 + |y_i - y_j|²)` with a zero diagonal.
fn kernel(y: &[f64], n: usize) -> Vec<f64> {
    let mut num = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i * DIM] - y[j * DIM];
            let dy = y[i * DIM + 1] - y[j * DIM + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
        }
    }
    num
}

/// Low-dimensional joint affinities `Q` of a `[n, 2]` embedding.
pub fn low_dim_affinities(y: &[f64], n: usize) -> Vec<f64> {
    let mut q = kernel(y, n);
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= z);
    q
}

/// `KL(P || Q)`; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("P has {} entries, Q has {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (k, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::numeric("KL divergence", format!("q = 0 where p > 0 at entry {k}")));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Gradient of `KL(P || Q)` with respect to the embedding:
/// `4 Σ_j (p_ij − q_ij)(y_i − y_j) / (1 + |y_i − y_j|²)`.
pub fn kl_gradient(p: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let num = kernel(y, n);
    let z: f64 = num.iter().sum();
    let mut g = vec![0.0; n * DIM];
    for i in 0..n {
        for j in 0..n {
            let w = num[i * n + j];
            let m = 4.0 * (p[i * n + j] - w / z) * w;
            for c in 0..DIM {
                g[i * DIM + c] += m * (y[i * DIM + c] - y[j * DIM + c]);
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// `[n, 2]` embedding in input order.
    pub embedding: Vec<f64>,
    /// `KL(P || Q)` after each iteration, against unexaggerated `P`.
    pub kl_trace: Vec<f64>,
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Seeded `N(0, 1e-4²)` initial embedding.
pub fn initial_embedding(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    (0..n * DIM).map(|_| normal.sample(&mut rng)).collect()
}

pub fn run(x: &[f64], n: usize, d: usize, cfg: &TsneConfig) -> Result<TsneResult> {
    run_with_init(x, n, d, &initial_embedding(n, cfg.seed), cfg)
}

/// Gradient descent with momentum, early exaggeration and per-coordinate
/// adaptive gains, starting from `y0`.
pub fn run_with_init(x: &[f64], n: usize, d: usize, y0: &[f64], cfg: &TsneConfig) -> Result<TsneResult> {
    if y0.len() != n * DIM {
        return Err(Error::Contract(format!("initial embedding has {} values, expected {}", y0.len(), n * DIM)));
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.exaggeration >= 1.0) {
        return Err(Error::Config("learning rate must be positive and exaggeration at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        lex(&x[a * d..(a + 1) * d], &x[b * d..(b + 1) * d])
            .then_with(|| lex(&y0[a * DIM..(a + 1) * DIM], &y0[b * DIM..(b + 1) * DIM]))
    });
    let xs: Vec<f64> = order.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
    let mut y: Vec<f64> = order.iter().flat_map(|&i| y0[i * DIM..(i + 1) * DIM].iter().copied()).collect();

    let p = symmetrize(&conditional_affinities(&xs, n, d, cfg.perplexity)?, n);
    let p_exag: Vec<f64> = p.iter().map(|v| v * cfg.exaggeration).collect();
    let mut velocity = vec![0.0; n * DIM];
    let mut gains = vec![1.0f64; n * DIM];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let momentum = if early { cfg.momentum_initial } else { cfg.momentum_final };
        let grad = kl_gradient(if early { &p_exag } else { &p }, &y, n);
        for k in 0..n * DIM {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8).max(0.01) };
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for c in 0..DIM {
            let mean = (0..n).map(|i| y[i * DIM + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * DIM + c] -= mean);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("t-SNE", format!("embedding diverged at iteration {it}")));
        }
        kl_trace.push(kl_divergence(&p, &low_dim_affinities(&y, n))?);
    }
    let mut embedding = vec![0.0; n * DIM];
    for (k, &i) in order.iter().enumerate() {
        embedding[i * DIM..(i + 1) * DIM].copy_from_slice(&y[k * DIM..(k + 1) * DIM]);
    }
    Ok(TsneResult { embedding, kl_trace })
}

/// Training accuracy of a logistic-regression probe on standardized 2-D
/// points with binary labels.
pub fn linear_probe_accuracy(points: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let mut mean = [0.0; DIM];
    let mut sd = [0.0; DIM];
    for c in 0..DIM {
        mean[c] = (0..n).map(|i| points[i * DIM + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (points[i * DIM + c] - mean[c]).powi(2)).sum::<f64>() / n as f64;
        sd[c] = var.sqrt().max(1e-12);
    }
    let feat = |i: usize, c: usize| (points[i * DIM + c] - mean[c]) / sd[c];
    let mut w = [0.0; DIM + 1];
    for _ in 0..2000 {
        let mut g = [0.0; DIM + 1];
        for i in 0..n {
            let z = w[DIM] + (0..DIM).map(|c| w[c] * feat(i, c)).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - labels[i] as f64;
            (0..DIM).for_each(|c| g[c] += err * feat(i, c));
            g[DIM] += err;
        }
        (0..=DIM).for_each(|c| w[c] -= 0.5 * g[c] / n as f64);
    }
    let hits = (0..n)
        .filter(|&i| {
            let z = w[DIM] + (0..DIM).map(|c| w[c] * feat(i, c)).sum::<f64>();
            usize::from(z > 0.0) == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

/// `x,y,label` CSV of an embedding.
pub fn embedding_csv(embedding: &[f64], labels: &[String]) -> String {
    let mut out = String::from("x,y,label\n");
    for (pt, label) in embedding.chunks(DIM).zip(labels) {
        let _ = writeln!(out, "{},{},{label}", pt[0], pt[1]);
    }
    out
}
