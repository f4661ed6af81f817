//! Exact t-SNE to two dimensions.
//!
//! Per-point Gaussian bandwidths are calibrated so each conditional
//! distribution has entropy `log2(perplexity)` bits. The low-dimensional map
//! uses Student-t affinities and full O(n²) gradients, optimized with
//! momentum, per-coordinate gains and early exaggeration.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{squared_euclidean, Scalar};

/// Entropy tolerance of the bandwidth search, in bits.
pub const ENTROPY_TOLERANCE: f64 = 1e-5;
/// Bisection steps allowed once the bandwidth is bracketed.
pub const MAX_BISECTION_STEPS: usize = 50;
const MAX_BRACKET_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to `final_momentum`.
    pub momentum_switch: usize,
    pub exaggeration: f64,
    /// Number of initial iterations run with exaggerated affinities.
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 5 {
            return Err(Error::Argument(format!("t-SNE needs at least 5 points, got {n}")));
        }
        if !(self.perplexity > 0.0 && self.perplexity < (n as f64 - 1.0) / 3.0) {
            return Err(Error::Argument(format!(
                "perplexity {} infeasible for {n} points (must be in (0, {}))",
                self.perplexity,
                (n as f64 - 1.0) / 3.0
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Argument("t-SNE needs at least one iteration".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Symmetrized input affinities and the calibration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities<T> {
    pub n: usize,
    /// Joint probabilities, row-major `n x n`, zero diagonal.
    pub p: Vec<T>,
    /// Entropy in bits of each calibrated conditional row.
    pub entropies: Vec<f64>,
    /// Gaussian precision `1 / (2 sigma_i^2)` per point.
    pub betas: Vec<f64>,
}

/// Entropy (bits) and conditional row for one precision on shifted distances.
fn conditional_row(dist: &[f64], beta: f64, row: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for (r, &d) in row.iter_mut().zip(dist) {
        *r = (-beta * d).exp();
        z += *r;
    }
    let mut weighted = 0.0;
    for (r, &d) in row.iter_mut().zip(dist) {
        *r /= z;
        weighted += *r * d;
    }
    (z.ln() + beta * weighted) / std::f64::consts::LN_2
}

/// Calibrates per-point bandwidths to `perplexity` and returns the joint
/// affinity matrix `P = (P_cond + P_condᵀ) / 2n`.
pub fn joint_probabilities<T: Scalar, P: AsRef<[T]>>(points: &[P], perplexity: f64) -> Result<Affinities<T>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Argument("affinities need at least 2 points".into()));
    }
    if !(perplexity > 0.0 && perplexity.is_finite()) {
        return Err(Error::Argument(format!("invalid perplexity {perplexity}")));
    }
    let target = perplexity.log2();
    let mut cond = vec![0.0f64; n * n];
    let mut entropies = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    let mut dist = vec![0.0f64; n - 1];
    let mut row = vec![0.0f64; n - 1];

    for i in 0..n {
        for (slot, j) in (0..n).filter(|&j| j != i).enumerate() {
            dist[slot] = squared_euclidean(points[i].as_ref(), points[j].as_ref()).as_f64();
        }
        // shifting by the minimum leaves the normalized row unchanged
        let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
        dist.iter_mut().for_each(|d| *d -= min);

        let mut beta = 1.0;
        let mut h = conditional_row(&dist, beta, &mut row);
        let (mut lo, mut hi) = (None::<f64>, None::<f64>);
        for _ in 0..MAX_BRACKET_STEPS {
            if (h - target).abs() < ENTROPY_TOLERANCE {
                break;
            }
            if h > target {
                lo = Some(beta);
                if hi.is_some() {
                    break;
                }
                beta *= 2.0;
            } else {
                hi = Some(beta);
                if lo.is_some() {
                    break;
                }
                beta /= 2.0;
            }
            h = conditional_row(&dist, beta, &mut row);
        }
        if let (Some(mut a), Some(mut b)) = (lo, hi) {
            for _ in 0..MAX_BISECTION_STEPS {
                if (h - target).abs() < ENTROPY_TOLERANCE * 1e-3 {
                    break;
                }
                beta = (a * b).sqrt();
                h = conditional_row(&dist, beta, &mut row);
                if h > target {
                    a = beta;
                } else {
                    b = beta;
                }
            }
        }
        for (slot, j) in (0..n).filter(|&j| j != i).enumerate() {
            cond[i * n + j] = row[slot];
        }
        entropies.push(h);
        betas.push(beta);
    }

    let denom = 2.0 * n as f64;
    let mut p = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = T::of((cond[i * n + j] + cond[j * n + i]) / denom);
            }
        }
    }
    Ok(Affinities { n, p, entropies, betas })
}

/// Student-t numerators `1 / (1 + |y_i - y_j|²)` and their sum.
fn student_t<T: Scalar>(y: &[[T; 2]], num: &mut [T]) -> T {
    let n = y.len();
    let mut z = T::zero();
    for i in 0..n {
        num[i * n + i] = T::zero();
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = T::one() / (T::one() + dx * dx + dy * dy);
            num[i * n + j] = q;
            num[j * n + i] = q;
            z += q + q;
        }
    }
    z
}

/// `KL(P || Q)` for a 2-D map `y`; terms with `p = 0` contribute nothing.
pub fn kl_divergence<T: Scalar>(p: &[T], y: &[[T; 2]]) -> T {
    let n = y.len();
    let mut num = vec![T::zero(); n * n];
    let z = student_t(y, &mut num);
    let mut kl = T::zero();
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > T::zero() {
                kl += pij * (pij / (num[i * n + j] / z)).ln();
            }
        }
    }
    kl
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneRun<T> {
    pub coords: Vec<[T; 2]>,
    /// `(iteration, KL)` after every 50th iteration, after the exaggeration
    /// phase, and after the last iteration.
    pub kl_trace: Vec<(usize, T)>,
    pub affinities: Affinities<T>,
}

impl<T: Scalar> TsneRun<T> {
    pub fn kl_at(&self, iteration: usize) -> Option<T> {
        self.kl_trace.iter().find(|(i, _)| *i == iteration).map(|(_, k)| *k)
    }
}

pub fn tsne<T: Scalar, P: AsRef<[T]>>(points: &[P], config: &TsneConfig) -> Result<TsneRun<T>> {
    let n = points.len();
    config.validate(n)?;
    let affinities = joint_probabilities::<T, P>(points, config.perplexity)?;
    let p = &affinities.p;

    let mut rng = crate::seeded_rng(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[T; 2]> = (0..n)
        .map(|_| [T::of(init.sample(&mut rng)), T::of(init.sample(&mut rng))])
        .collect();
    let mut update = vec![[T::zero(); 2]; n];
    let mut gains = vec![[T::one(); 2]; n];
    let mut grad = vec![[T::zero(); 2]; n];
    let mut num = vec![T::zero(); n * n];

    let lr = T::of(config.learning_rate);
    let four = T::of(4.0);
    let min_gain = T::of(0.01);
    let mut kl_trace = Vec::new();

    for iter in 1..=config.iterations {
        let exaggerated = iter <= config.exaggeration_iterations;
        let alpha = if exaggerated { T::of(config.exaggeration) } else { T::one() };
        let momentum = T::of(if iter <= config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        });

        let z = student_t(&y, &mut num);
        for i in 0..n {
            let mut g = [T::zero(); 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let w = (alpha * p[i * n + j] - q / z) * q;
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            grad[i] = [four * g[0], four * g[1]];
        }

        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > T::zero()) == (update[i][d] > T::zero());
                gains[i][d] = if same_sign {
                    (gains[i][d] * T::of(0.8)).max(min_gain)
                } else {
                    gains[i][d] + T::of(0.2)
                };
                update[i][d] = momentum * update[i][d] - lr * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        let n_t = T::of_usize(n);
        let mean = y.iter().fold([T::zero(); 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        let mean = [mean[0] / n_t, mean[1] / n_t];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }

        if iter % 50 == 0 || iter == config.exaggeration_iterations || iter == config.iterations {
            let kl = kl_divergence(p, &y);
            if !kl.is_finite() {
                return Err(Error::Divergence { epoch: iter });
            }
            kl_trace.push((iter, kl));
        }
    }
    Ok(TsneRun {
        coords: y,
        kl_trace,
        affinities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::seeded_rng(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn simplex_rows_are_uniform() {
        // standard basis vectors are pairwise equidistant
        let pts: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let aff = joint_probabilities::<f64, _>(&pts, 2.0).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 0.0 } else { 1.0 / 30.0 };
                assert!((aff.p[i * 6 + j] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn entropy_calibrated_and_p_normalized() {
        let pts = random_points(80, 5, 1);
        let aff = joint_probabilities::<f64, _>(&pts, 15.0).unwrap();
        let target = 15f64.log2();
        assert!(aff.entropies.iter().all(|h| (h - target).abs() < ENTROPY_TOLERANCE));
        let total: f64 = aff.p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for i in 0..80 {
            for j in 0..80 {
                assert!(aff.p[i * 80 + j] >= 0.0);
                assert!((aff.p[i * 80 + j] - aff.p[j * 80 + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kl_translation_invariant() {
        let pts = random_points(30, 3, 2);
        let aff = joint_probabilities::<f64, _>(&pts, 5.0).unwrap();
        let mut rng = crate::seeded_rng(3);
        let y: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
        let shifted: Vec<[f64; 2]> = y.iter().map(|v| [v[0] + 3.7, v[1] - 11.2]).collect();
        assert!((kl_divergence(&aff.p, &y) - kl_divergence(&aff.p, &shifted)).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_descending() {
        let pts = random_points(60, 4, 7);
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 400,
            ..TsneConfig::default()
        };
        let a = tsne::<f64, _>(&pts, &cfg).unwrap();
        let b = tsne::<f64, _>(&pts, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.kl_at(400).unwrap() < a.kl_at(250).unwrap());
        assert!(a.coords.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn infeasible_perplexity() {
        let pts = random_points(10, 2, 0);
        let cfg = TsneConfig {
            perplexity: 3.0,
            ..TsneConfig::default()
        };
        assert!(matches!(tsne::<f64, _>(&pts, &cfg), Err(Error::Argument(_))));
        assert!(matches!(tsne::<f64, _>(&pts[..4], &TsneConfig::default()), Err(Error::Argument(_))));
    }
}
