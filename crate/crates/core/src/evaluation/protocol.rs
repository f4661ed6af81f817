//! Cross-validated comparison of the retrieval predictor against raters and
//! a random baseline, assembled into one report.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::dissent::{algorithm_dissent, doctor_dissent, others_consensus, rating_rmse, DissentSample, RandomBaseline};
use super::precision::{MeanPrecision, PrecisionCounts, PRECISION_KS};
use super::stats::{component_errors, lognormal_mle_fit, mean_std, ComponentErrors, PerCharacteristic};
use crate::dataset::{assign_folds, Dataset, FoldAssignment, Provenance, RatingVector};
use crate::error::{Error, Result};
use crate::head::{embed_all, train, HeadConfig, HeadModel};
use crate::retrieval::{Exclusions, Metric, RetrievalIndex};
use crate::scalar::Scalar;

pub const DEFAULT_K_LIST: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_FOLDS: usize = 5;

pub const REPORT_FORMAT: &str = "nodule-cbir-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Head template; `seed` is the base training seed, offset by fold index.
    pub head: HeadConfig,
    pub metric: Metric,
    pub k_list: Vec<usize>,
    pub precision_ks: Vec<usize>,
    pub n_folds: usize,
    pub fold_seed: u64,
    pub random_seed: u64,
}

impl EvalConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            head: HeadConfig::new(input_dim),
            metric: Metric::default(),
            k_list: DEFAULT_K_LIST.to_vec(),
            precision_ks: PRECISION_KS.to_vec(),
            n_folds: DEFAULT_FOLDS,
            fold_seed: crate::DEFAULT_SEED,
            random_seed: crate::DEFAULT_SEED,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Config("k list must be non-empty with every k >= 1".into()));
        }
        if self.precision_ks.contains(&0) {
            return Err(Error::Config("precision k values must be >= 1".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("fold count must be >= 2".into()));
        }
        self.head.validate()
    }
}

/// Pooled per-k outcome for the retrieval predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct KOutcome {
    pub k: usize,
    /// Sorted by nodule id.
    pub samples: Vec<DissentSample>,
    /// Raw-scale predictions aligned with `samples`.
    pub predictions: Vec<RatingVector>,
    /// Raw consensus of each query nodule, aligned with `samples`.
    pub targets: Vec<RatingVector>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Final training loss; absent when a pretrained model was used.
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOutcome {
    pub per_k: Vec<KOutcome>,
    /// Pooled precision counts for every k in `k_list` and `precision_ks`.
    pub precision: BTreeMap<usize, PrecisionCounts>,
    pub folds: Vec<FoldSummary>,
}

pub fn cbir_method_name(k: usize) -> String {
    format!("cbir_k{k}")
}

/// For each fold: train on the other folds (unless `pretrained` is given),
/// index the training nodules only, and score every test nodule's top-k
/// prediction for each k.
pub fn cross_validated_cbir_dissent<T: Scalar>(
    dataset: &Dataset,
    folds: &FoldAssignment,
    config: &EvalConfig,
    pretrained: Option<&HeadModel<T>>,
) -> Result<CvOutcome> {
    config.validate()?;
    let fold_of = |id: &str| folds.fold_of(id).ok_or_else(|| Error::Lookup(id.to_owned()));
    for r in dataset.records() {
        fold_of(&r.nodule_id)?;
    }
    let k_max = config.k_list.iter().chain(&config.precision_ks).copied().max().unwrap_or(1);
    let all_ks: BTreeSet<usize> = config.k_list.iter().chain(&config.precision_ks).copied().collect();
    let mut precision: BTreeMap<usize, PrecisionCounts> = all_ks.iter().map(|&k| (k, PrecisionCounts::default())).collect();

    // (nodule_id, per-k raw prediction, raw target, normalized-scale record)
    let mut pooled: Vec<(String, Vec<RatingVector>, usize)> = Vec::with_capacity(dataset.len());
    let mut fold_summaries = Vec::with_capacity(folds.n_folds());
    let position: BTreeMap<&str, usize> = dataset.records().iter().enumerate().map(|(i, r)| (r.nodule_id.as_str(), i)).collect();

    for fold in 0..folds.n_folds() {
        let n_test = dataset.records().iter().filter(|r| folds.fold_of(&r.nodule_id) == Some(fold)).count();
        if n_test == 0 {
            return Err(Error::Protocol(format!("fold {fold} has no test nodules")));
        }
        if n_test == dataset.len() {
            return Err(Error::Protocol(format!("fold {fold} leaves no training nodules")));
        }
        let train_ds = dataset.subset(|r| folds.fold_of(&r.nodule_id) != Some(fold))?;
        let test_ds = dataset.subset(|r| folds.fold_of(&r.nodule_id) == Some(fold))?;

        let (model, final_loss) = match pretrained {
            Some(m) => (m.clone(), None),
            None => {
                let cfg = HeadConfig {
                    input_dim: dataset.feature_dim(),
                    seed: config.head.seed.wrapping_add(fold as u64),
                    ..config.head.clone()
                };
                let (m, report) = train::<T>(&train_ds, &cfg)?;
                (m, Some(report.final_loss))
            }
        };
        let index = RetrievalIndex::build(&embed_all(&model, &train_ds)?, &train_ds, config.metric)?;
        let test_embs = embed_all(&model, &test_ds)?;

        for (record, emb) in test_ds.records().iter().zip(&test_embs) {
            let result = index.query_top_k(&emb.values, k_max, &Exclusions::none())?;
            let class = record.malignancy_class()?;
            for (&k, counts) in precision.iter_mut() {
                let top = &result.neighbors[..k.min(result.neighbors.len())];
                counts.add(PrecisionCounts {
                    correct: top.iter().filter(|n| index.entries()[n.position].class == class).count(),
                    retrieved: top.len(),
                    truncated: top.len() < k,
                });
            }
            let mut predictions = Vec::with_capacity(config.k_list.len());
            for &k in &config.k_list {
                let mut prefix = result.clone();
                prefix.neighbors.truncate(k);
                predictions.push(index.mean_consensus(&prefix)?);
            }
            pooled.push((record.nodule_id.clone(), predictions, position[record.nodule_id.as_str()]));
        }
        fold_summaries.push(FoldSummary {
            fold,
            n_train: train_ds.len(),
            n_test,
            final_loss,
        });
    }

    pooled.sort_by(|a, b| a.0.cmp(&b.0));
    let per_k = config
        .k_list
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let method = cbir_method_name(k);
            let mut out = KOutcome {
                k,
                samples: Vec::with_capacity(pooled.len()),
                predictions: Vec::with_capacity(pooled.len()),
                targets: Vec::with_capacity(pooled.len()),
            };
            for (_, preds, pos) in &pooled {
                let record = &dataset.records()[*pos];
                let pred = preds[ki];
                out.samples.push(algorithm_dissent(&method, &pred.normalize()?, record)?);
                out.predictions.push(pred);
                out.targets.push(record.consensus()?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CvOutcome {
        per_k,
        precision,
        folds: fold_summaries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitRow {
    pub mu: f64,
    pub sigma: f64,
    pub n_used: usize,
    /// Zero scores cannot enter a log-normal fit and are left out.
    pub n_excluded_zero: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub n_samples: usize,
    pub dissent_mean: f64,
    pub dissent_std: f64,
    /// Per-component errors on the raw [1, 5] scale.
    pub rating: ComponentErrors,
    pub precision: Option<f64>,
    pub lognormal: Option<FitRow>,
}

/// Published figures of a 2-D slice-based rating regressor, carried as
/// fixed constants for side-by-side display only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishedBaseline {
    pub rating_rmse: PerCharacteristic,
    pub rating_std: PerCharacteristic,
    pub mean_precision: f64,
}

impl PublishedBaseline {
    pub fn slice_regression() -> Self {
        Self {
            rating_rmse: PerCharacteristic {
                subtlety: 0.93,
                sphericity: 0.83,
                margin: 0.94,
                lobulation: 0.89,
                malignancy: 0.68,
            },
            rating_std: PerCharacteristic {
                subtlety: 0.84,
                sphericity: 0.47,
                margin: 0.37,
                lobulation: 0.27,
                malignancy: 0.84,
            },
            mean_precision: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Seeds {
    pub fold: u64,
    pub train: u64,
    pub random: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldEntry {
    pub nodule_id: String,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub format: String,
    pub version: u32,
    pub tool: String,
    pub provenance: Provenance,
    pub n_nodules: usize,
    pub n_folds: usize,
    pub metric: Metric,
    pub k_list: Vec<usize>,
    pub seeds: Seeds,
    pub head: HeadConfig,
    pub pretrained_model: bool,
    pub methods: Vec<MethodRow>,
    pub cbir_mean_precision: MeanPrecision,
    pub published_baseline: PublishedBaseline,
    pub folds: Vec<FoldSummary>,
    pub fold_assignment: Vec<FoldEntry>,
}

impl EvaluationReport {
    pub fn method(&self, name: &str) -> Option<&MethodRow> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Report plus the pooled per-method dissent samples behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvaluationReport,
    /// `(method, samples)` in report row order.
    pub samples: Vec<(String, Vec<DissentSample>)>,
}

fn method_row(method: &str, samples: &[DissentSample], rating: ComponentErrors, precision: Option<f64>) -> Result<MethodRow> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let (dissent_mean, dissent_std) = mean_std(&scores)?;
    let positive: Vec<f64> = scores.iter().copied().filter(|s| *s > 0.0).collect();
    let lognormal = if positive.len() >= 2 {
        let fit = lognormal_mle_fit(&positive)?;
        Some(FitRow {
            mu: fit.mu,
            sigma: fit.sigma,
            n_used: positive.len(),
            n_excluded_zero: scores.len() - positive.len(),
        })
    } else {
        None
    };
    Ok(MethodRow {
        method: method.to_owned(),
        n_samples: samples.len(),
        dissent_mean,
        dissent_std,
        rating,
        precision,
        lognormal,
    })
}

/// Every doctor of every nodule against the consensus of the others.
pub fn doctor_rows(dataset: &Dataset) -> Result<(Vec<DissentSample>, Vec<RatingVector>, Vec<RatingVector>)> {
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for r in dataset.records() {
        for d in 0..r.annotations.len() {
            samples.push(doctor_dissent(r, d)?);
            preds.push(r.annotations[d]);
            targets.push(others_consensus(r, d)?);
        }
    }
    Ok((samples, preds, targets))
}

/// One random pick per nodule, in dataset order.
pub fn random_rows(dataset: &Dataset, seed: u64) -> Result<(Vec<DissentSample>, Vec<RatingVector>, Vec<RatingVector>)> {
    let mut baseline = RandomBaseline::new(dataset, seed)?;
    let mut samples = Vec::with_capacity(dataset.len());
    let mut preds = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        let pick = baseline.random_baseline_prediction();
        samples.push(DissentSample {
            subject: super::dissent::Subject::Method("random".into()),
            nodule_id: r.nodule_id.clone(),
            score: rating_rmse(&pick.normalize()?, &r.target()?)?,
        });
        preds.push(pick);
        targets.push(r.consensus()?);
    }
    Ok((samples, preds, targets))
}

/// Runs the whole protocol: fold assignment, random and doctor baselines,
/// cross-validated retrieval for each k, precision and log-normal fits.
pub fn build_report<T: Scalar>(dataset: &Dataset, config: &EvalConfig, pretrained: Option<&HeadModel<T>>) -> Result<Evaluation> {
    config.validate()?;
    if let Some(m) = pretrained {
        if m.input_dim() != dataset.feature_dim() {
            return Err(Error::Config(format!(
                "model expects {}-D features, dataset has {}",
                m.input_dim(),
                dataset.feature_dim()
            )));
        }
    }
    let folds = assign_folds(dataset, config.n_folds, config.fold_seed)?;
    let cv = cross_validated_cbir_dissent(dataset, &folds, config, pretrained)?;

    let mut methods = Vec::new();
    let mut samples = Vec::new();

    let (rs, rp, rt) = random_rows(dataset, config.random_seed)?;
    methods.push(method_row("random", &rs, component_errors(&rp, &rt)?, None)?);
    samples.push(("random".to_owned(), rs));

    let (ds, dp, dt) = doctor_rows(dataset)?;
    methods.push(method_row("doctors", &ds, component_errors(&dp, &dt)?, None)?);
    samples.push(("doctors".to_owned(), ds));

    for k in &cv.per_k {
        let name = cbir_method_name(k.k);
        let precision = cv.precision[&k.k].precision()?;
        methods.push(method_row(&name, &k.samples, component_errors(&k.predictions, &k.targets)?, Some(precision))?);
        samples.push((name, k.samples.clone()));
    }

    let precision_counts: Vec<PrecisionCounts> = config.precision_ks.iter().map(|k| cv.precision[k]).collect();
    let cbir_mean_precision = MeanPrecision::from_counts(&config.precision_ks, &precision_counts)?;

    let report = EvaluationReport {
        format: REPORT_FORMAT.to_owned(),
        version: REPORT_VERSION,
        tool: crate::io::tool_version(),
        provenance: dataset.provenance(),
        n_nodules: dataset.len(),
        n_folds: config.n_folds,
        metric: config.metric,
        k_list: config.k_list.clone(),
        seeds: Seeds {
            fold: config.fold_seed,
            train: config.head.seed,
            random: config.random_seed,
        },
        head: HeadConfig {
            input_dim: dataset.feature_dim(),
            ..config.head.clone()
        },
        pretrained_model: pretrained.is_some(),
        methods,
        cbir_mean_precision,
        published_baseline: PublishedBaseline::slice_regression(),
        folds: cv.folds,
        fold_assignment: folds
            .iter()
            .map(|(id, fold)| FoldEntry {
                nodule_id: id.to_owned(),
                fold,
            })
            .collect(),
    };
    Ok(Evaluation { report, samples })
}
