//! Summary statistics: per-component rating errors and log-normal fits.

use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, LogNormal};

use crate::dataset::{Characteristic, NoduleRecord, RatingVector, Scale, N_CHARACTERISTICS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Arithmetic mean and population standard deviation.
pub fn mean_std(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Argument("statistics of an empty sample".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One value per rating characteristic, in the fixed characteristic order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerCharacteristic {
    pub subtlety: f64,
    pub sphericity: f64,
    pub margin: f64,
    pub lobulation: f64,
    pub malignancy: f64,
}

impl PerCharacteristic {
    pub fn from_array(v: [f64; N_CHARACTERISTICS]) -> Self {
        Self {
            subtlety: v[0],
            sphericity: v[1],
            margin: v[2],
            lobulation: v[3],
            malignancy: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; N_CHARACTERISTICS] {
        [self.subtlety, self.sphericity, self.margin, self.lobulation, self.malignancy]
    }

    pub fn get(&self, c: Characteristic) -> f64 {
        self.to_array()[c.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComponentErrors {
    pub rmse: PerCharacteristic,
    /// Population STD of the signed errors.
    pub std: PerCharacteristic,
}

/// Per-component RMSE and signed-error STD between raw-scale predictions and
/// raw-scale targets.
pub fn component_errors(predictions: &[RatingVector], targets: &[RatingVector]) -> Result<ComponentErrors> {
    if predictions.is_empty() {
        return Err(Error::Argument("rating errors of an empty prediction set".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.iter().chain(targets).any(|r| r.scale() != Scale::Raw) {
        return Err(Error::Argument("rating errors are reported on the raw [1, 5] scale".into()));
    }
    let n = predictions.len() as f64;
    let mut rmse = [0.0; N_CHARACTERISTICS];
    let mut std = [0.0; N_CHARACTERISTICS];
    for c in 0..N_CHARACTERISTICS {
        let errs: Vec<f64> = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| p.values()[c] - t.values()[c])
            .collect();
        rmse[c] = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        std[c] = mean_std(&errs)?.1;
    }
    Ok(ComponentErrors {
        rmse: PerCharacteristic::from_array(rmse),
        std: PerCharacteristic::from_array(std),
    })
}

/// Errors of raw predictions against each record's raw consensus.
pub fn rating_rmse_std_per_component(predictions: &[RatingVector], records: &[&NoduleRecord]) -> Result<ComponentErrors> {
    let targets = records.iter().map(|r| r.consensus()).collect::<Result<Vec<_>>>()?;
    component_errors(predictions, &targets)
}

/// Maximum-likelihood log-normal parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogNormalFit<T> {
    /// Mean of the log-samples.
    pub mu: T,
    /// Population standard deviation of the log-samples.
    pub sigma: T,
}

impl<T: Scalar> LogNormalFit<T> {
    /// Density at `x`; `None` for a degenerate (`sigma == 0`) fit.
    pub fn pdf(&self, x: f64) -> Option<f64> {
        self.distribution().map(|d| d.pdf(x))
    }

    pub fn cdf(&self, x: f64) -> Option<f64> {
        self.distribution().map(|d| d.cdf(x))
    }

    fn distribution(&self) -> Option<LogNormal> {
        LogNormal::new(self.mu.as_f64(), self.sigma.as_f64()).ok()
    }
}

pub fn lognormal_mle_fit<T: Scalar>(samples: &[T]) -> Result<LogNormalFit<T>> {
    if samples.len() < 2 {
        return Err(Error::Argument(format!(
            "log-normal fit needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(x) = samples.iter().find(|x| **x <= T::zero() || !x.is_finite()) {
        return Err(Error::Domain(format!("log-normal fit requires positive samples, got {x}")));
    }
    let n = T::of_usize(samples.len());
    let mu = samples.iter().map(|x| x.ln()).sum::<T>() / n;
    let var = samples.iter().map(|x| (x.ln() - mu).powi(2)).sum::<T>() / n;
    Ok(LogNormalFit { mu, sigma: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(v: [f64; 5]) -> RatingVector {
        RatingVector::raw(v).unwrap()
    }

    #[test]
    fn perfect_predictions_have_zero_error() {
        let t = vec![raw([1.0, 2.0, 3.0, 4.0, 5.0]), raw([2.5; 5])];
        let e = component_errors(&t, &t).unwrap();
        assert_eq!(e.rmse.to_array(), [0.0; 5]);
        assert_eq!(e.std.to_array(), [0.0; 5]);
    }

    #[test]
    fn constant_offset_is_bias_not_spread() {
        let t = vec![raw([1.0, 2.0, 3.0, 4.0, 2.0]), raw([2.5; 5]), raw([3.0; 5])];
        let p: Vec<_> = t
            .iter()
            .map(|r| {
                let mut v = *r.values();
                v[1] += 1.0;
                raw(v)
            })
            .collect();
        let e = component_errors(&p, &t).unwrap();
        assert!((e.rmse.sphericity - 1.0).abs() < 1e-12);
        assert!(e.std.sphericity.abs() < 1e-12);
        assert_eq!(e.rmse.margin, 0.0);
    }

    #[test]
    fn errors_require_raw_scale_and_data() {
        assert!(component_errors(&[], &[]).is_err());
        let n = RatingVector::normalized([0.5; 5]).unwrap();
        assert!(component_errors(&[n], &[n]).is_err());
    }

    #[test]
    fn lognormal_examples() {
        let fit = lognormal_mle_fit(&[1.0f64, 1.0, 1.0]).unwrap();
        assert_eq!((fit.mu, fit.sigma), (0.0, 0.0));
        assert_eq!(fit.pdf(1.0), None);
        let e2 = std::f64::consts::E.powi(2);
        let fit = lognormal_mle_fit(&[1.0, e2]).unwrap();
        assert!((fit.mu - 1.0).abs() < 1e-12 && (fit.sigma - 1.0).abs() < 1e-12);
        assert!((fit.cdf(std::f64::consts::E).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(lognormal_mle_fit(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(lognormal_mle_fit(&[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn lognormal_fit_order_invariant() {
        let xs = [0.3f64, 1.7, 0.05, 2.2, 0.9];
        let mut rev = xs;
        rev.reverse();
        let (a, b) = (lognormal_mle_fit(&xs).unwrap(), lognormal_mle_fit(&rev).unwrap());
        assert!((a.mu - b.mu).abs() < 1e-14 && (a.sigma - b.sigma).abs() < 1e-14);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
    }
}
