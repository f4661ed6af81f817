//! Exact nearest-neighbour retrieval over embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{consensus, Dataset, MalignancyClass, RatingVector};
use crate::error::{Error, Result};
use crate::head::Embedding;
use crate::scalar::{dot, squared_euclidean, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Distance between two embeddings.
///
/// Cosine distance is `1 - cos(a, b)`, and exactly 1 when either vector is zero.
pub fn distance<T: Scalar>(a: &[T], b: &[T], metric: Metric) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("distance between {}-D and {}-D vectors", a.len(), b.len())));
    }
    Ok(raw_distance(a, b, metric))
}

fn raw_distance<T: Scalar>(a: &[T], b: &[T], metric: Metric) -> T {
    match metric {
        Metric::Euclidean => squared_euclidean(a, b).sqrt(),
        Metric::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == T::zero() || nb == T::zero() {
                return T::one();
            }
            let d = T::one() - dot(a, b) / (na * nb);
            d.max(T::zero()).min(T::of(2.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry<T> {
    pub nodule_id: String,
    pub scan_id: String,
    pub embedding: Vec<T>,
    /// Raw-scale consensus of the nodule's annotations.
    pub consensus: RatingVector,
    pub class: MalignancyClass,
}

/// Ids and scan excluded from a query's candidates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Exclusions {
    pub ids: BTreeSet<String>,
    pub scan: Option<String>,
}

impl Exclusions {
    pub fn none() -> Self {
        Self::default()
    }

    /// Excludes the query nodule itself and, if given, its whole scan.
    pub fn query_self(nodule_id: &str, scan_id: Option<&str>) -> Self {
        Self {
            ids: BTreeSet::from([nodule_id.to_owned()]),
            scan: scan_id.map(str::to_owned),
        }
    }

    fn admits<T>(&self, e: &IndexEntry<T>) -> bool {
        !self.ids.contains(&e.nodule_id) && self.scan.as_deref() != Some(e.scan_id.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub nodule_id: String,
    pub distance: T,
    /// Position of the entry in the index.
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult<T> {
    pub query_id: Option<String>,
    pub k: usize,
    /// Sorted by `(distance, nodule_id)`.
    pub neighbors: Vec<Neighbor<T>>,
    /// Set when fewer than `k` entries were eligible.
    pub truncated: bool,
}

/// Immutable exact index; entries are kept sorted by nodule id.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex<T> {
    entries: Vec<IndexEntry<T>>,
    metric: Metric,
    dim: usize,
}

impl<T: Scalar> RetrievalIndex<T> {
    /// Builds the index from one embedding per dataset record.
    pub fn build(embeddings: &[Embedding<T>], dataset: &Dataset, metric: Metric) -> Result<Self> {
        if embeddings.len() != dataset.len() {
            return Err(Error::Shape(format!(
                "{} embeddings for {} dataset records",
                embeddings.len(),
                dataset.len()
            )));
        }
        let records: HashMap<&str, _> = dataset.records().iter().map(|r| (r.nodule_id.as_str(), r)).collect();
        let mut entries = Vec::with_capacity(embeddings.len());
        for e in embeddings {
            let r = records.get(e.nodule_id.as_str()).ok_or_else(|| Error::Lookup(e.nodule_id.clone()))?;
            entries.push(IndexEntry {
                nodule_id: e.nodule_id.clone(),
                scan_id: r.scan_id.clone(),
                embedding: e.values.clone(),
                consensus: r.consensus()?,
                class: r.malignancy_class()?,
            });
        }
        Self::from_entries(entries, metric)
    }

    /// Sorts entries by id and checks uniqueness and dimensions.
    pub fn from_entries(mut entries: Vec<IndexEntry<T>>, metric: Metric) -> Result<Self> {
        entries.sort_by(|a, b| a.nodule_id.cmp(&b.nodule_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].nodule_id == w[1].nodule_id) {
            return Err(Error::Duplicate(w[0].nodule_id.clone()));
        }
        let dim = entries.first().map_or(0, |e| e.embedding.len());
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding of `{}` has {} values, index uses {dim}",
                    e.nodule_id,
                    e.embedding.len()
                )));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite embedding for `{}`", e.nodule_id)));
            }
        }
        Ok(Self { entries, metric, dim })
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, nodule_id: &str) -> Option<&IndexEntry<T>> {
        self.entries
            .binary_search_by(|e| e.nodule_id.as_str().cmp(nodule_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Exhaustive top-k scan. Ties in distance go to the smaller nodule id.
    pub fn query_top_k(&self, query: &[T], k: usize, exclusions: &Exclusions) -> Result<RetrievalResult<T>> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if !self.is_empty() && query.len() != self.dim {
            return Err(Error::Shape(format!("{}-D query against a {}-D index", query.len(), self.dim)));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite query embedding".into()));
        }
        let mut scored: Vec<(T, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclusions.admits(e))
            .map(|(i, e)| (raw_distance(query, &e.embedding, self.metric), i))
            .collect();
        // Entries are id-sorted, so position order is id order.
        let by_rank = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        let truncated = scored.len() < k;
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(RetrievalResult {
            query_id: None,
            k,
            neighbors: scored
                .into_iter()
                .map(|(distance, position)| Neighbor {
                    nodule_id: self.entries[position].nodule_id.clone(),
                    distance,
                    position,
                })
                .collect(),
            truncated,
        })
    }

    /// Looks up `nodule_id` in the index and queries with its own embedding,
    /// excluding itself and optionally its scan.
    pub fn query_by_id(&self, nodule_id: &str, k: usize, exclude_same_scan: bool) -> Result<RetrievalResult<T>> {
        let entry = self.get(nodule_id).ok_or_else(|| Error::Lookup(nodule_id.to_owned()))?;
        let exclusions = Exclusions::query_self(nodule_id, exclude_same_scan.then_some(entry.scan_id.as_str()));
        let mut result = self.query_top_k(&entry.embedding, k, &exclusions)?;
        result.query_id = Some(nodule_id.to_owned());
        Ok(result)
    }

    /// Unweighted mean of the retrieved neighbours' raw consensus ratings.
    pub fn predict_ratings_topk(&self, query: &[T], k: usize, exclusions: &Exclusions) -> Result<RatingVector> {
        let result = self.query_top_k(query, k, exclusions)?;
        self.mean_consensus(&result)
    }

    pub fn mean_consensus(&self, result: &RetrievalResult<T>) -> Result<RatingVector> {
        if result.neighbors.is_empty() {
            return Err(Error::Retrieval("no eligible entries to predict from".into()));
        }
        consensus(result.neighbors.iter().map(|n| &self.entries[n.position].consensus))
    }
}
