//! Synthetic stand-in for backbone features and radiologist ratings.
//!
//! Each nodule gets a latent `z ~ U[0,1]^5`. Features are a fixed random
//! linear map of `z` plus small Gaussian noise; each rater reports
//! `clamp(1 + 4z + N(0, sigma), 1, 5)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, FeatureVector, NoduleRecord, Provenance, RatingVector, N_CHARACTERISTICS, RAW_MAX, RAW_MIN};
use crate::error::{Error, Result};

/// Element-wise noise added to every synthetic feature.
pub const FEATURE_NOISE: f64 = 0.05;

/// Nodules per synthetic scan.
pub const NODULES_PER_SCAN: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_nodules: usize,
    pub feature_dim: usize,
    pub doctors_per_nodule: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodules: 1200,
            feature_dim: 128,
            doctors_per_nodule: 4,
            noise_sigma: 0.5,
            seed: crate::DEFAULT_SEED,
        }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_nodules < 1 {
        return Err(Error::Argument("synthetic dataset needs at least one nodule".into()));
    }
    if cfg.feature_dim < N_CHARACTERISTICS {
        return Err(Error::Argument(format!(
            "feature dimension {} must be at least {N_CHARACTERISTICS}",
            cfg.feature_dim
        )));
    }
    if !(3..=4).contains(&cfg.doctors_per_nodule) {
        return Err(Error::Argument(format!(
            "doctors per nodule must be 3 or 4, got {}",
            cfg.doctors_per_nodule
        )));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
        return Err(Error::Argument(format!("noise sigma {} must be finite and >= 0", cfg.noise_sigma)));
    }

    let mut rng = crate::seeded_rng(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let feature_noise = Normal::new(0.0, FEATURE_NOISE).expect("valid normal");
    let rater_noise = Normal::new(0.0, cfg.noise_sigma).expect("valid normal");

    // mixing[i][c]: D_f x 5, row-major
    let mixing: Vec<[f64; N_CHARACTERISTICS]> = (0..cfg.feature_dim)
        .map(|_| std::array::from_fn(|_| unit.sample(&mut rng)))
        .collect();
    let offset: Vec<f64> = (0..cfg.feature_dim).map(|_| unit.sample(&mut rng)).collect();

    let width = digits(cfg.n_nodules);
    let records = (0..cfg.n_nodules)
        .map(|i| {
            let z: [f64; N_CHARACTERISTICS] = std::array::from_fn(|_| rng.random::<f64>());
            let feature = mixing
                .iter()
                .zip(&offset)
                .map(|(row, b)| {
                    row.iter().zip(&z).map(|(a, z)| a * z).sum::<f64>() + b + feature_noise.sample(&mut rng)
                })
                .collect();
            let annotations = (0..cfg.doctors_per_nodule)
                .map(|_| {
                    let values = z.map(|z| {
                        let noise = if cfg.noise_sigma > 0.0 { rater_noise.sample(&mut rng) } else { 0.0 };
                        (RAW_MIN + (RAW_MAX - RAW_MIN) * z + noise).clamp(RAW_MIN, RAW_MAX)
                    });
                    RatingVector::raw(values)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NoduleRecord {
                nodule_id: format!("N{i:0width$}"),
                scan_id: format!("S{:0width$}", i / NODULES_PER_SCAN),
                annotations,
                feature: FeatureVector(feature),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, cfg.feature_dim, Provenance::Synthetic)
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len().max(4)
}
