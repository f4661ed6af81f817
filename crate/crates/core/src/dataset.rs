//! Annotated-nodule data model: ratings, records, filtering and fold assignment.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of rating characteristics kept per annotation.
pub const N_CHARACTERISTICS: usize = 5;

/// Lowest and highest raw rating on the five-point scale.
pub const RAW_MIN: f64 = 1.0;
pub const RAW_MAX: f64 = 5.0;

/// Minimum number of annotations a nodule needs to survive filtering.
pub const MIN_ANNOTATIONS: usize = 3;
pub const MAX_ANNOTATIONS: usize = 4;

/// Mean raw malignancy strictly above this is malignant.
pub const MALIGNANCY_THRESHOLD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Characteristic {
    Subtlety,
    Sphericity,
    Margin,
    Lobulation,
    Malignancy,
}

impl Characteristic {
    pub const ALL: [Characteristic; N_CHARACTERISTICS] = [
        Characteristic::Subtlety,
        Characteristic::Sphericity,
        Characteristic::Margin,
        Characteristic::Lobulation,
        Characteristic::Malignancy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Characteristic::Subtlety => "subtlety",
            Characteristic::Sphericity => "sphericity",
            Characteristic::Margin => "margin",
            Characteristic::Lobulation => "lobulation",
            Characteristic::Malignancy => "malignancy",
        }
    }
}

impl fmt::Display for Characteristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Radiologist scale, every component in [1, 5].
    Raw,
    /// Affinely mapped to [0, 1].
    Normalized,
}

/// Five ordered characteristic scores with their scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingVector {
    values: [f64; N_CHARACTERISTICS],
    scale: Scale,
}

impl RatingVector {
    /// Validated constructor; every component must be finite and inside the
    /// range of `scale`.
    pub fn new(values: [f64; N_CHARACTERISTICS], scale: Scale) -> Result<Self> {
        let (lo, hi) = match scale {
            Scale::Raw => (RAW_MIN, RAW_MAX),
            Scale::Normalized => (0.0, 1.0),
        };
        for (c, &v) in Characteristic::ALL.iter().zip(&values) {
            if !(v >= lo && v <= hi) {
                return Err(Error::Domain(format!(
                    "{c} rating {v} outside [{lo}, {hi}] on the {scale:?} scale"
                )));
            }
        }
        Ok(Self { values, scale })
    }

    pub fn raw(values: [f64; N_CHARACTERISTICS]) -> Result<Self> {
        Self::new(values, Scale::Raw)
    }

    pub fn normalized(values: [f64; N_CHARACTERISTICS]) -> Result<Self> {
        Self::new(values, Scale::Normalized)
    }

    /// Unchecked constructor for algorithm outputs (raw predictions, clamped
    /// later) that are not required to stay inside the scale's range.
    pub fn unchecked(values: [f64; N_CHARACTERISTICS], scale: Scale) -> Self {
        Self { values, scale }
    }

    pub fn values(&self) -> &[f64; N_CHARACTERISTICS] {
        &self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn get(&self, c: Characteristic) -> f64 {
        self.values[c.index()]
    }

    pub fn malignancy(&self) -> f64 {
        self.get(Characteristic::Malignancy)
    }

    /// Maps a raw vector to [0, 1] via `x -> (x - 1) / 4`.
    pub fn normalize(&self) -> Result<Self> {
        match self.scale {
            Scale::Normalized => Ok(*self),
            Scale::Raw => {
                // re-validate; `unchecked` raw vectors must not slip through
                let raw = Self::raw(self.values)?;
                Ok(Self {
                    values: raw.values.map(normalize_value),
                    scale: Scale::Normalized,
                })
            }
        }
    }

    /// Inverse of [`normalize`](Self::normalize): `x -> 1 + 4x`.
    ///
    /// Applied to predictions as well, so it does not range-check.
    pub fn denormalize(&self) -> Self {
        match self.scale {
            Scale::Raw => *self,
            Scale::Normalized => Self {
                values: self.values.map(denormalize_value),
                scale: Scale::Raw,
            },
        }
    }

    /// Component-wise clamp into the scale's range.
    pub fn clamped(&self) -> Self {
        let (lo, hi) = match self.scale {
            Scale::Raw => (RAW_MIN, RAW_MAX),
            Scale::Normalized => (0.0, 1.0),
        };
        Self {
            values: self.values.map(|v| v.clamp(lo, hi)),
            scale: self.scale,
        }
    }
}

#[inline]
pub fn normalize_value(x: f64) -> f64 {
    (x - RAW_MIN) / (RAW_MAX - RAW_MIN)
}

#[inline]
pub fn denormalize_value(x: f64) -> f64 {
    RAW_MIN + (RAW_MAX - RAW_MIN) * x
}

/// Component-wise arithmetic mean. All inputs must share one scale.
pub fn consensus<'a, I>(ratings: I) -> Result<RatingVector>
where
    I: IntoIterator<Item = &'a RatingVector>,
{
    let mut sum = [0.0; N_CHARACTERISTICS];
    let mut count = 0usize;
    let mut scale = None;
    for r in ratings {
        match scale {
            None => scale = Some(r.scale),
            Some(s) if s != r.scale => {
                return Err(Error::Argument(
                    "consensus over ratings with mixed scales".into(),
                ))
            }
            Some(_) => {}
        }
        for (acc, v) in sum.iter_mut().zip(&r.values) {
            *acc += v;
        }
        count += 1;
    }
    let scale = scale.ok_or_else(|| Error::Argument("consensus of an empty rating list".into()))?;
    let n = count as f64;
    Ok(RatingVector {
        values: sum.map(|s| s / n),
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MalignancyClass {
    Benign,
    Malignant,
}

impl MalignancyClass {
    pub fn name(self) -> &'static str {
        match self {
            MalignancyClass::Benign => "benign",
            MalignancyClass::Malignant => "malignant",
        }
    }
}

impl fmt::Display for MalignancyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Malignant iff the mean raw malignancy is strictly greater than 3.
pub fn malignancy_class(ratings: &[RatingVector]) -> Result<MalignancyClass> {
    if ratings.is_empty() {
        return Err(Error::Argument("malignancy class of an empty rating list".into()));
    }
    if ratings.iter().any(|r| r.scale != Scale::Raw) {
        return Err(Error::Argument("malignancy class requires raw-scale ratings".into()));
    }
    let mean = ratings.iter().map(RatingVector::malignancy).sum::<f64>() / ratings.len() as f64;
    Ok(class_of_mean_malignancy(mean))
}

pub(crate) fn class_of_mean_malignancy(mean: f64) -> MalignancyClass {
    if mean > MALIGNANCY_THRESHOLD {
        MalignancyClass::Malignant
    } else {
        MalignancyClass::Benign
    }
}

/// Backbone feature vector for one nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoduleRecord {
    pub nodule_id: String,
    pub scan_id: String,
    /// Raw-scale radiologist annotations.
    pub annotations: Vec<RatingVector>,
    pub feature: FeatureVector,
}

impl NoduleRecord {
    /// Raw-scale consensus of all annotations.
    pub fn consensus(&self) -> Result<RatingVector> {
        consensus(&self.annotations)
    }

    /// Regression target: the consensus mapped to [0, 1].
    pub fn target(&self) -> Result<RatingVector> {
        self.consensus()?.normalize()
    }

    pub fn malignancy_class(&self) -> Result<MalignancyClass> {
        malignancy_class(&self.annotations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<NoduleRecord>,
    feature_dim: usize,
    provenance: Provenance,
}

impl Dataset {
    /// Checks non-emptiness, unique ids, a uniform finite feature dimension,
    /// and raw-scale annotations on every record.
    pub fn new(records: Vec<NoduleRecord>, feature_dim: usize, provenance: Provenance) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset { dropped: 0 });
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.nodule_id.as_str()) {
                return Err(Error::Duplicate(r.nodule_id.clone()));
            }
            if r.feature.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "nodule `{}` has {} features, dataset declares {feature_dim}",
                    r.nodule_id,
                    r.feature.len()
                )));
            }
            if let Some(v) = r.feature.values().iter().find(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "nodule `{}` has non-finite feature {v}",
                    r.nodule_id
                )));
            }
            if r.annotations.is_empty() {
                return Err(Error::Argument(format!("nodule `{}` has no annotations", r.nodule_id)));
            }
            for a in &r.annotations {
                if a.scale() != Scale::Raw {
                    return Err(Error::Argument(format!(
                        "nodule `{}` carries a non-raw annotation",
                        r.nodule_id
                    )));
                }
                RatingVector::raw(*a.values())?;
            }
        }
        Ok(Self {
            records,
            feature_dim,
            provenance,
        })
    }

    pub fn records(&self) -> &[NoduleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<NoduleRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn get(&self, nodule_id: &str) -> Option<&NoduleRecord> {
        self.records.iter().find(|r| r.nodule_id == nodule_id)
    }

    /// Distinct scan ids in ascending order.
    pub fn scan_ids(&self) -> Vec<&str> {
        self.records
            .iter()
            .map(|r| r.scan_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Records selected by `keep`, preserving order.
    pub fn subset(&self, mut keep: impl FnMut(&NoduleRecord) -> bool) -> Result<Self> {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::new(records, self.feature_dim, self.provenance)
    }
}

/// Result of [`filter_dataset`].
#[derive(Clone, Debug)]
pub struct Filtered {
    pub dataset: Dataset,
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps only nodules annotated by three or four radiologists.
pub fn filter_dataset(records: Vec<NoduleRecord>, feature_dim: usize, provenance: Provenance) -> Result<Filtered> {
    let total = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| (MIN_ANNOTATIONS..=MAX_ANNOTATIONS).contains(&r.annotations.len()))
        .collect();
    let dropped = total - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyDataset { dropped });
    }
    let kept_n = kept.len();
    Ok(Filtered {
        dataset: Dataset::new(kept, feature_dim, provenance)?,
        kept: kept_n,
        dropped,
    })
}

/// Scan-grouped assignment of nodules to cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    n_folds: usize,
    seed: u64,
    by_nodule: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, nodule_id: &str) -> Option<usize> {
        self.by_nodule.get(nodule_id).copied()
    }

    /// `(nodule_id, fold)` pairs in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.by_nodule.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_nodule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_nodule.is_empty()
    }

    /// Same partition with fold `f` renamed to `permutation[f]`.
    pub fn renumbered(&self, permutation: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_folds];
        if permutation.len() != self.n_folds
            || !permutation.iter().all(|&f| f < self.n_folds && !std::mem::replace(&mut seen[f], true))
        {
            return Err(Error::Argument(format!(
                "{permutation:?} is not a permutation of 0..{}",
                self.n_folds
            )));
        }
        Ok(Self {
            by_nodule: self.by_nodule.iter().map(|(k, &f)| (k.clone(), permutation[f])).collect(),
            ..self.clone()
        })
    }
}

/// Shuffles distinct scans with a seeded generator and deals them
/// round-robin, so every nodule of a scan lands in the same fold.
pub fn assign_folds(dataset: &Dataset, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    let mut scans = dataset.scan_ids();
    if n_folds < 2 || n_folds > scans.len() {
        return Err(Error::Argument(format!(
            "fold count {n_folds} must lie in [2, {}] (number of scans)",
            scans.len()
        )));
    }
    scans.shuffle(&mut crate::seeded_rng(seed));
    let fold_of_scan: BTreeMap<&str, usize> = scans
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i % n_folds))
        .collect();
    let by_nodule = dataset
        .records()
        .iter()
        .map(|r| (r.nodule_id.clone(), fold_of_scan[r.scan_id.as_str()]))
        .collect();
    Ok(FoldAssignment {
        n_folds,
        seed,
        by_nodule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(v: f64) -> RatingVector {
        RatingVector::raw([v; 5]).unwrap()
    }

    fn record(id: &str, scan: &str, n_annotations: usize) -> NoduleRecord {
        NoduleRecord {
            nodule_id: id.into(),
            scan_id: scan.into(),
            annotations: vec![raw(3.0); n_annotations],
            feature: FeatureVector(vec![0.0; 4]),
        }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        assert_eq!(raw(1.0).normalize().unwrap().values(), &[0.0; 5]);
        assert_eq!(raw(3.0).normalize().unwrap().values(), &[0.5; 5]);
        assert_eq!(raw(5.0).normalize().unwrap().values(), &[1.0; 5]);
    }

    #[test]
    fn out_of_range_rating_names_the_component() {
        let err = RatingVector::raw([1.0, 2.0, 6.0, 3.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(err.to_string().contains("margin"), "{err}");
        let err = RatingVector::unchecked([1.0, 2.0, 3.0, 3.0, 0.5], Scale::Raw)
            .normalize()
            .unwrap_err();
        assert!(err.to_string().contains("malignancy"), "{err}");
    }

    #[test]
    fn consensus_examples() {
        let lo = RatingVector::normalized([0.0; 5]).unwrap();
        let hi = RatingVector::normalized([1.0; 5]).unwrap();
        assert_eq!(consensus(&[lo, hi]).unwrap().values(), &[0.5; 5]);
        assert_eq!(consensus(&[hi]).unwrap(), hi);

        let a = RatingVector::normalized([0.2; 5]).unwrap();
        let b = RatingVector::normalized([0.4; 5]).unwrap();
        let c = RatingVector::normalized([0.9; 5]).unwrap();
        // (0.2 + 0.4 + 0.9) / 3 = 0.5
        for v in consensus(&[a, b, c]).unwrap().values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(matches!(consensus(&[]), Err(Error::Argument(_))));
        assert!(consensus(&[lo, raw(1.0)]).is_err());
    }

    #[test]
    fn malignancy_threshold_is_strict() {
        let with = |ms: &[f64]| -> Vec<RatingVector> {
            ms.iter()
                .map(|&m| RatingVector::raw([3.0, 3.0, 3.0, 3.0, m]).unwrap())
                .collect()
        };
        assert_eq!(malignancy_class(&with(&[4.0, 4.0, 4.0])).unwrap(), MalignancyClass::Malignant);
        assert_eq!(malignancy_class(&with(&[3.0, 3.0, 3.0])).unwrap(), MalignancyClass::Benign);
        // (2 + 3 + 5) / 3 = 3.33
        assert_eq!(malignancy_class(&with(&[2.0, 3.0, 5.0])).unwrap(), MalignancyClass::Malignant);
        assert!(malignancy_class(&[]).is_err());
    }

    #[test]
    fn filter_threshold() {
        let out = filter_dataset(
            vec![record("a", "s", 2), record("b", "s", 3), record("c", "s", 4), record("d", "s", 1)],
            4,
            Provenance::Synthetic,
        )
        .unwrap();
        assert_eq!((out.kept, out.dropped), (2, 2));
        let ids: Vec<_> = out.dataset.records().iter().map(|r| r.nodule_id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);

        let again = filter_dataset(out.dataset.clone().into_records(), 4, Provenance::Synthetic).unwrap();
        assert_eq!(again.dataset, out.dataset);
        assert_eq!(again.dropped, 0);

        let err = filter_dataset(vec![record("a", "s", 2)], 4, Provenance::Synthetic).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset { dropped: 1 }));
    }

    #[test]
    fn dataset_rejects_duplicates_and_ragged_features() {
        let err = Dataset::new(vec![record("a", "s", 3), record("a", "t", 3)], 4, Provenance::Real).unwrap_err();
        assert!(matches!(err, Error::Duplicate(_)));
        let mut r = record("b", "s", 3);
        r.feature = FeatureVector(vec![0.0; 3]);
        assert!(matches!(Dataset::new(vec![r], 4, Provenance::Real), Err(Error::Shape(_))));
        assert!(matches!(Dataset::new(vec![], 4, Provenance::Real), Err(Error::EmptyDataset { .. })));
    }

    fn scans_dataset(n_scans: usize, per_scan: usize) -> Dataset {
        let records = (0..n_scans)
            .flat_map(|s| (0..per_scan).map(move |j| record(&format!("n{s}-{j}"), &format!("s{s}"), 3)))
            .collect();
        Dataset::new(records, 4, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn folds_balance_group_and_determinism() {
        let ds = scans_dataset(10, 2);
        let folds = assign_folds(&ds, 5, 7).unwrap();
        let mut scans_per_fold = vec![BTreeSet::new(); 5];
        for r in ds.records() {
            scans_per_fold[folds.fold_of(&r.nodule_id).unwrap()].insert(r.scan_id.clone());
        }
        assert!(scans_per_fold.iter().all(|s| s.len() == 2));
        for s in 0..10 {
            assert_eq!(folds.fold_of(&format!("n{s}-0")), folds.fold_of(&format!("n{s}-1")));
        }
        assert_eq!(folds, assign_folds(&ds, 5, 7).unwrap());
        assert_eq!(folds.len(), ds.len());
    }

    #[test]
    fn folds_out_of_range() {
        let ds = scans_dataset(3, 1);
        assert!(matches!(assign_folds(&ds, 1, 0), Err(Error::Argument(_))));
        assert!(matches!(assign_folds(&ds, 4, 0), Err(Error::Argument(_))));
        assert!(assign_folds(&ds, 3, 0).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn raw_vec() -> impl Strategy<Value = [f64; 5]> {
            proptest::array::uniform5(1.0f64..=5.0)
        }

        proptest! {
            #[test]
            fn denormalize_inverts_normalize(v in raw_vec()) {
                let r = RatingVector::raw(v).unwrap();
                let back = r.normalize().unwrap().denormalize();
                for (a, b) in back.values().iter().zip(r.values()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn consensus_commutes_with_normalization(vs in proptest::collection::vec(raw_vec(), 1..6)) {
                let raws: Vec<_> = vs.iter().map(|v| RatingVector::raw(*v).unwrap()).collect();
                let norms: Vec<_> = raws.iter().map(|r| r.normalize().unwrap()).collect();
                let lhs = consensus(&raws).unwrap().normalize().unwrap();
                let rhs = consensus(&norms).unwrap();
                for (a, b) in lhs.values().iter().zip(rhs.values()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn consensus_is_permutation_invariant(
                vs in proptest::collection::vec(raw_vec(), 1..6),
                seed in any::<u64>(),
            ) {
                let raws: Vec<_> = vs.iter().map(|v| RatingVector::raw(*v).unwrap()).collect();
                let mut shuffled = raws.clone();
                shuffled.shuffle(&mut crate::seeded_rng(seed));
                let a = consensus(&raws).unwrap();
                let b = consensus(&shuffled).unwrap();
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }

            #[test]
            fn fold_sizes_differ_by_at_most_one(n_scans in 2usize..40, n_folds in 2usize..8, seed in any::<u64>()) {
                prop_assume!(n_folds <= n_scans);
                let ds = scans_dataset(n_scans, 1);
                let folds = assign_folds(&ds, n_folds, seed).unwrap();
                let mut sizes = vec![0usize; n_folds];
                for (_, f) in folds.iter() { sizes[f] += 1; }
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
                prop_assert!(*lo >= 1);
            }
        }
    }
}
