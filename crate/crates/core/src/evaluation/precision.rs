//! Malignancy retrieval precision.

use serde::Serialize;

use crate::dataset::MalignancyClass;
use crate::error::{Error, Result};
use crate::retrieval::{Exclusions, RetrievalIndex};
use crate::scalar::Scalar;

/// k values over which the mean precision is reported.
pub const PRECISION_KS: [usize; 8] = [1, 3, 5, 7, 9, 11, 13, 15];

/// A query embedding with its own malignancy class.
#[derive(Clone, Debug)]
pub struct ClassQuery<'a, T> {
    pub embedding: &'a [T],
    pub class: MalignancyClass,
    pub exclusions: Exclusions,
}

/// Micro-averaged counts: matching retrieved items over all retrieved items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PrecisionCounts {
    pub correct: usize,
    pub retrieved: usize,
    /// Some query returned fewer than k items.
    pub truncated: bool,
}

impl PrecisionCounts {
    pub fn add(&mut self, other: PrecisionCounts) {
        self.correct += other.correct;
        self.retrieved += other.retrieved;
        self.truncated |= other.truncated;
    }

    pub fn precision(&self) -> Result<f64> {
        if self.retrieved == 0 {
            return Err(Error::Argument("precision over zero retrieved items".into()));
        }
        Ok(self.correct as f64 / self.retrieved as f64)
    }
}

pub fn precision_counts<T: Scalar>(index: &RetrievalIndex<T>, queries: &[ClassQuery<'_, T>], k: usize) -> Result<PrecisionCounts> {
    let mut counts = PrecisionCounts::default();
    for q in queries {
        let res = index.query_top_k(q.embedding, k, &q.exclusions)?;
        counts.truncated |= res.truncated;
        counts.retrieved += res.neighbors.len();
        counts.correct += res
            .neighbors
            .iter()
            .filter(|n| index.entries()[n.position].class == q.class)
            .count();
    }
    Ok(counts)
}

/// Fraction of retrieved items whose class equals their query's class.
pub fn retrieval_precision<T: Scalar>(index: &RetrievalIndex<T>, queries: &[ClassQuery<'_, T>], k: usize) -> Result<f64> {
    precision_counts(index, queries, k)?.precision()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanPrecision {
    pub ks: Vec<usize>,
    pub per_k: Vec<f64>,
    pub mean: f64,
    pub truncated: bool,
}

impl MeanPrecision {
    pub fn from_counts(ks: &[usize], counts: &[PrecisionCounts]) -> Result<Self> {
        if ks.is_empty() || ks.len() != counts.len() {
            return Err(Error::Argument("mean precision needs one count per k".into()));
        }
        let per_k = counts.iter().map(PrecisionCounts::precision).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ks: ks.to_vec(),
            mean: per_k.iter().sum::<f64>() / per_k.len() as f64,
            per_k,
            truncated: counts.iter().any(|c| c.truncated),
        })
    }
}

/// Arithmetic mean of [`retrieval_precision`] over `ks`.
pub fn mean_precision_over_ks<T: Scalar>(
    index: &RetrievalIndex<T>,
    queries: &[ClassQuery<'_, T>],
    ks: &[usize],
) -> Result<MeanPrecision> {
    let counts = ks
        .iter()
        .map(|&k| precision_counts(index, queries, k))
        .collect::<Result<Vec<_>>>()?;
    MeanPrecision::from_counts(ks, &counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_of_mean_malignancy, RatingVector};
    use crate::retrieval::{IndexEntry, Metric};

    fn index(classes: &[f64]) -> RetrievalIndex<f64> {
        let entries = classes
            .iter()
            .enumerate()
            .map(|(i, &m)| IndexEntry {
                nodule_id: format!("e{i}"),
                scan_id: format!("s{i}"),
                embedding: vec![i as f64],
                consensus: RatingVector::raw([3.0, 3.0, 3.0, 3.0, m]).unwrap(),
                class: class_of_mean_malignancy(m),
            })
            .collect();
        RetrievalIndex::from_entries(entries, Metric::Euclidean).unwrap()
    }

    fn query(x: &[f64], class: MalignancyClass) -> ClassQuery<'_, f64> {
        ClassQuery {
            embedding: x,
            class,
            exclusions: Exclusions::none(),
        }
    }

    #[test]
    fn pure_index_is_perfect() {
        let idx = index(&[4.0, 5.0, 4.5, 3.5]);
        let (a, b) = ([0.2], [2.9]);
        let qs = [query(&a, MalignancyClass::Malignant), query(&b, MalignancyClass::Malignant)];
        assert_eq!(retrieval_precision(&idx, &qs, 3).unwrap(), 1.0);
        assert_eq!(mean_precision_over_ks(&idx, &qs, &PRECISION_KS).unwrap().mean, 1.0);
    }

    #[test]
    fn mismatched_neighbour_scores_zero() {
        let idx = index(&[1.0, 5.0]);
        let x = [0.1];
        assert_eq!(retrieval_precision(&idx, &[query(&x, MalignancyClass::Malignant)], 1).unwrap(), 0.0);
    }

    #[test]
    fn truncation_is_flagged() {
        let idx = index(&[1.0, 5.0]);
        let x = [0.1];
        let mp = mean_precision_over_ks(&idx, &[query(&x, MalignancyClass::Benign)], &PRECISION_KS).unwrap();
        // k = 1 hits the benign entry; every larger k returns both entries
        assert_eq!(mp.per_k[0], 1.0);
        assert!(mp.per_k[1..].iter().all(|&p| p == 0.5));
        assert!(mp.truncated);
        assert!((mp.mean - (1.0 + 7.0 * 0.5) / 8.0).abs() < 1e-15);
    }

    #[test]
    fn empty_queries_error() {
        let idx = index(&[1.0]);
        assert!(matches!(retrieval_precision(&idx, &[], 1), Err(Error::Argument(_))));
    }
}
