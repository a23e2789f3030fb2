//! Exact t-SNE over feature vectors: Gaussian high-dimensional affinities
//! with perplexity-calibrated bandwidths, Student-t low-dimensional
//! similarities, KL cost, and momentum gradient descent to 2-D.
//!
//! Everything here is f64 and O(n^2); `n` is guarded at 5000.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_POINTS: usize = 5000;
const BISECTION_TOL_BITS: f64 = 1e-7;
const BISECTION_MAX_ITERS: usize = 300;

/// Symmetrized pairwise affinities P with the calibrated per-point sigmas.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    n: usize,
    /// Row-major n x n, zero diagonal, sums to 1.
    p: Vec<f64>,
    perplexity: f64,
    sigmas: Vec<f64>,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn perplexity(&self) -> f64 {
        self.perplexity
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// 2-D embedding state after optimization.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// Row-major n x 2 coordinates.
    pub points: Vec<f64>,
    pub iterations: usize,
    /// KL cost against the true (unexaggerated) P, one entry per iteration.
    pub cost_trace: Vec<f64>,
}

/// Optimization settings. The momentum schedule (0.5 to 0.8 at iteration
/// 250) and the x12 early exaggeration for the first 250 iterations are
/// fixed constants.
#[derive(Debug, Clone, Copy)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions { perplexity: 30.0, iterations: 1000, learning_rate: 200.0, seed: 0 }
    }
}

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MOMENTUM_EARLY: f64 = 0.5;
const MOMENTUM_LATE: f64 = 0.8;
const MOMENTUM_SWITCH: usize = 250;

fn squared_distances(x: &Tensor<f64>) -> (usize, usize, Vec<f64>) {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = x.data()[i * d + k] - x.data()[j * d + k];
                s += diff * diff;
            }
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    (n, d, d2)
}

/// Shannon entropy (bits) and conditional row for a given precision
/// beta = 1 / (2 sigma^2). Distances are shifted by their minimum before
/// exponentiation; the conditional distribution is shift-invariant.
fn conditional_row(d2: &[f64], n: usize, i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let mut dmin = f64::INFINITY;
    for j in 0..n {
        if j != i {
            dmin = dmin.min(d2[i * n + j]);
        }
    }
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i { 0.0 } else { (-beta * (d2[i * n + j] - dmin)).exp() };
        sum += row[j];
    }
    let mut entropy_nats = 0.0;
    for j in 0..n {
        row[j] /= sum;
        if j != i && row[j] > 0.0 {
            entropy_nats -= row[j] * row[j].ln();
        }
    }
    entropy_nats / std::f64::consts::LN_2
}

/// Conditional Gaussian affinities per point with sigma_i found by bisection
/// so that H(P_i) = log2(perplexity), then symmetrized:
/// p_ij = (p_{j|i} + p_{i|j}) / (2n).
pub fn pairwise_affinities(x: &Tensor<f64>, perplexity: f64) -> Result<AffinityMatrix> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: "pairwise_affinities",
            detail: format!("expected [n, d] features, got {:?}", x.shape()),
        });
    }
    let (n, _, d2) = squared_distances(x);
    if n < 3 {
        return Err(Error::Data(format!("pairwise_affinities needs at least 3 points, got {n}")));
    }
    if n > MAX_POINTS {
        return Err(Error::Data(format!(
            "exact t-SNE is O(n^2); {n} points exceeds the {MAX_POINTS} guard"
        )));
    }
    if perplexity <= 1.0 || perplexity >= n as f64 {
        return Err(Error::Data(format!(
            "perplexity {perplexity} must lie in (1, n) for n = {n}"
        )));
    }
    let target_bits = perplexity.log2();

    let mut conditional = vec![0.0; n * n];
    let mut sigmas = vec![0.0; n];
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..n {
        let row = &mut conditional[i * n..(i + 1) * n];

        // A point whose neighbours are all equidistant has an entropy that
        // no bandwidth can move; the conditional row is uniform for any
        // sigma, so accept it as-is.
        let mut dmin = f64::INFINITY;
        let mut dmax = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                dmin = dmin.min(d2[i * n + j]);
                dmax = dmax.max(d2[i * n + j]);
            }
        }
        if dmax - dmin <= 1e-12 * dmax.max(1.0) {
            conditional_row(&d2, n, i, 1.0, row);
            sigmas[i] = (0.5f64).sqrt();
            continue;
        }

        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let mut converged = false;
        for _ in 0..BISECTION_MAX_ITERS {
            let entropy = conditional_row(&d2, n, i, beta, row);
            let diff = entropy - target_bits;
            if diff.abs() < BISECTION_TOL_BITS {
                converged = true;
                break;
            }
            if diff > 0.0 {
                // Too flat: raise beta (shrink sigma).
                beta_min = beta;
                beta = if beta_max.is_infinite() { beta * 2.0 } else { (beta + beta_max) / 2.0 };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() { beta / 2.0 } else { (beta + beta_min) / 2.0 };
            }
        }
        if !converged {
            let achieved = conditional_row(&d2, n, i, beta, row);
            let miss = (achieved - target_bits).abs();
            if worst.map_or(true, |(_, w)| miss > w) {
                worst = Some((i, miss));
            }
        }
        sigmas[i] = (0.5 / beta).sqrt();
    }
    if let Some((i, miss)) = worst {
        return Err(Error::Numeric(format!(
            "perplexity bisection did not converge after {BISECTION_MAX_ITERS} iterations; \
             worst point {i} misses the entropy target by {miss:.3e} bits"
        )));
    }

    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / denom;
            }
        }
    }
    Ok(AffinityMatrix { n, p, perplexity, sigmas })
}

/// Student-t similarities over all ordered pairs: q_ij proportional to
/// (1 + ||y_i - y_j||^2)^-1, normalized to sum to 1 with zero diagonal.
pub fn low_dim_similarities(y: &[f64], n: usize) -> Result<Vec<f64>> {
    if n < 2 || y.len() != 2 * n {
        return Err(Error::Data(format!(
            "low_dim_similarities needs n >= 2 points of dim 2, got n = {n}, len = {}",
            y.len()
        )));
    }
    let (w, sum) = student_weights(y, n);
    Ok(w.iter().map(|&v| v / sum).collect())
}

/// Unnormalized Student-t kernel weights and their total.
fn student_weights(y: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut w = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i * 2] - y[j * 2];
            let dy = y[i * 2 + 1] - y[j * 2 + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = v;
            w[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (w, sum)
}

/// C = sum_ij p_ij ln(p_ij / q_ij); terms with p_ij = 0 contribute 0.
pub fn kl_cost(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Data("kl_cost needs matrices of equal size".into()));
    }
    let mut c = 0.0;
    for (idx, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Numeric(format!(
                    "kl_cost: q underflowed to 0 at index {idx} where p = {pi}"
                )));
            }
            c += pi * (pi / qi).ln();
        }
    }
    Ok(c)
}

/// Analytic gradient of the KL cost:
/// dC/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + ||y_i - y_j||^2)^-1.
pub fn tsne_gradient(p: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let (w, sum) = student_weights(y, n);
    let mut grad = vec![0.0; n * 2];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = w[i * n + j] / sum;
            let k = 4.0 * (p[i * n + j] - q) * w[i * n + j];
            grad[i * 2] += k * (y[i * 2] - y[j * 2]);
            grad[i * 2 + 1] += k * (y[i * 2 + 1] - y[j * 2 + 1]);
        }
    }
    grad
}

/// Full optimization: seeded small-Gaussian init, x12 early exaggeration
/// for the first 250 iterations, momentum 0.5 -> 0.8 at iteration 250.
pub fn run_tsne(x: &Tensor<f64>, opts: TsneOptions) -> Result<Embedding> {
    let n = x.shape()[0];
    if n < 4 {
        return Err(Error::Data(format!("run_tsne needs at least 4 points, got {n}")));
    }
    if opts.iterations == 0 || opts.learning_rate <= 0.0 || opts.perplexity <= 0.0 {
        return Err(Error::Data("run_tsne parameters must be positive".into()));
    }
    // Small-n clamp so the entropy target stays reachable.
    let perplexity = opts.perplexity.min((n as f64 - 1.0) / 3.0).max(2.0);
    let affinities = pairwise_affinities(x, perplexity)?;
    let p = affinities.values();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut y: Vec<f64> = (0..n * 2).map(|_| normal_sample(&mut rng) * 1e-4).collect();
    let mut velocity = vec![0.0; n * 2];
    let mut cost_trace = Vec::with_capacity(opts.iterations);

    let mut p_active = vec![0.0; n * n];
    for iter in 0..opts.iterations {
        let exaggerate = iter < EXAGGERATION_ITERS;
        let factor = if exaggerate { EXAGGERATION } else { 1.0 };
        for (dst, &src) in p_active.iter_mut().zip(p) {
            *dst = src * factor;
        }
        let grad = tsne_gradient(&p_active, &y, n);
        let momentum = if iter < MOMENTUM_SWITCH { MOMENTUM_EARLY } else { MOMENTUM_LATE };
        for k in 0..n * 2 {
            velocity[k] = momentum * velocity[k] - opts.learning_rate * grad[k];
            y[k] += velocity[k];
        }
        // Re-center to keep coordinates bounded; distances are unaffected.
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..n {
            mx += y[i * 2];
            my += y[i * 2 + 1];
        }
        mx /= n as f64;
        my /= n as f64;
        for i in 0..n {
            y[i * 2] -= mx;
            y[i * 2 + 1] -= my;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "t-SNE diverged to a non-finite embedding at iteration {iter}"
            )));
        }
        let q = low_dim_similarities(&y, n)?;
        cost_trace.push(kl_cost(p, &q)?);
    }
    Ok(Embedding { points: y, iterations: opts.iterations, cost_trace })
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
