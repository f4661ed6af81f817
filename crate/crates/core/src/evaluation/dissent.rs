//! Dissent scores: RMSE on the normalized scale between one rater (human or
//! algorithm) and the relevant consensus.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{consensus, Dataset, NoduleRecord, RatingVector, Scale};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Subject {
    Doctor(usize),
    Method(String),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Doctor(i) => write!(f, "doctor{i}"),
            Subject::Method(m) => f.write_str(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DissentSample {
    pub subject: Subject,
    pub nodule_id: String,
    pub score: f64,
}

/// RMSE over the five components of two vectors on the same scale.
pub fn rating_rmse(a: &RatingVector, b: &RatingVector) -> Result<f64> {
    if a.scale() != b.scale() {
        return Err(Error::Argument("dissent between ratings on different scales".into()));
    }
    let n = a.values().len() as f64;
    let sq: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sq / n).sqrt())
}

/// Raw consensus of every annotation of `record` except `doctor_index`.
pub fn others_consensus(record: &NoduleRecord, doctor_index: usize) -> Result<RatingVector> {
    if record.annotations.len() < 2 {
        return Err(Error::Argument(format!(
            "nodule `{}` needs at least 2 annotations for a doctor dissent score",
            record.nodule_id
        )));
    }
    if doctor_index >= record.annotations.len() {
        return Err(Error::Argument(format!(
            "doctor {doctor_index} out of range for nodule `{}` with {} annotations",
            record.nodule_id,
            record.annotations.len()
        )));
    }
    consensus(
        record
            .annotations
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != doctor_index)
            .map(|(_, a)| a),
    )
}

/// One doctor's normalized rating against the consensus of the others.
pub fn doctor_dissent(record: &NoduleRecord, doctor_index: usize) -> Result<DissentSample> {
    let others = others_consensus(record, doctor_index)?.normalize()?;
    let own = record.annotations[doctor_index].normalize()?;
    Ok(DissentSample {
        subject: Subject::Doctor(doctor_index),
        nodule_id: record.nodule_id.clone(),
        score: rating_rmse(&own, &others)?,
    })
}

/// A normalized prediction against the consensus of all the record's raters.
pub fn algorithm_dissent(method: &str, prediction: &RatingVector, record: &NoduleRecord) -> Result<DissentSample> {
    if prediction.scale() != Scale::Normalized {
        return Err(Error::Argument("algorithm dissent expects a normalized prediction".into()));
    }
    Ok(DissentSample {
        subject: Subject::Method(method.to_owned()),
        nodule_id: record.nodule_id.clone(),
        score: rating_rmse(prediction, &record.target()?)?,
    })
}

/// Predicts a uniformly drawn individual annotation from the whole dataset,
/// ignoring the query.
#[derive(Clone, Debug)]
pub struct RandomBaseline {
    pool: Vec<RatingVector>,
    rng: ChaCha8Rng,
}

impl RandomBaseline {
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let pool: Vec<_> = dataset.records().iter().flat_map(|r| r.annotations.iter().copied()).collect();
        if pool.is_empty() {
            return Err(Error::Argument("random baseline over an empty annotation pool".into()));
        }
        Ok(Self {
            pool,
            rng: crate::seeded_rng(seed),
        })
    }

    pub fn pool(&self) -> &[RatingVector] {
        &self.pool
    }

    /// Next raw-scale pick.
    pub fn random_baseline_prediction(&mut self) -> RatingVector {
        self.pool[self.rng.random_range(0..self.pool.len())]
    }
}
