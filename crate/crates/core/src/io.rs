//! On-disk formats.
//!
//! Annotations, features and embeddings are line-delimited JSON: the first
//! line is a [`Manifest`], every further line one nodule. The head model is a
//! versioned plain-text file. Plot data is CSV with a `manifest.json` beside
//! it. Reals are written in shortest round-trip form, so reading back
//! reproduces the in-memory values exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::ward::{Dendrogram, SplitSummary};
use crate::analysis::ProjectedPoint;
use crate::dataset::{filter_dataset, Dataset, FeatureVector, Filtered, NoduleRecord, Provenance, RatingVector, N_CHARACTERISTICS};
use crate::error::{Error, Result};
use crate::evaluation::protocol::Evaluation;
use crate::head::{Dense, EmbeddingTap, Embedding, HeadConfig, HeadModel, EMBED_DIM, OUTPUT_DIM};
use crate::scalar::Scalar;


pub const FORMAT_VERSION: u32 = 1;
pub const ANNOTATIONS_FORMAT: &str = "nodule-cbir-annotations";
pub const FEATURES_FORMAT: &str = "nodule-cbir-features";
pub const EMBEDDINGS_FORMAT: &str = "nodule-cbir-embeddings";
pub const MODEL_FORMAT: &str = "nodule-cbir-head";
pub const PLOT_DATA_FORMAT: &str = "nodule-cbir-plot-data";

pub fn tool_version() -> String {
    format!("nodule-cbir {}", env!("CARGO_PKG_VERSION"))
}

/// Header written by every writer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool: String,
    #[serde(default)]
    pub provenance: Option<Provenance>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    /// Vector width for features and embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_tap: Option<EmbeddingTap>,
}

impl Manifest {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_owned(),
            version: FORMAT_VERSION,
            tool: tool_version(),
            provenance: None,
            seeds: BTreeMap::new(),
            dim: None,
            embedding_tap: None,
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_owned(), seed);
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    fn check(&self, path: &Path, expected: &str) -> Result<()> {
        if self.format != expected {
            return Err(Error::format(path, 1, format!("expected a `{expected}` file, found `{}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                1,
                format!("unsupported {expected} format version {} (reader supports {FORMAT_VERSION})", self.version),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    nodule_id: String,
    scan_id: String,
    ratings: Vec<[f64; N_CHARACTERISTICS]>,
}

#[derive(Serialize, Deserialize)]
struct VectorLine<V> {
    nodule_id: String,
    values: Vec<V>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("in-memory values serialize")
}

/// Parses a manifest line followed by one JSON record per non-empty line.
fn read_jsonl<R: DeserializeOwned>(path: &Path, format: &str) -> Result<(Manifest, Vec<R>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| Error::format(path, 1, "missing manifest line"))?;
    let manifest: Manifest = serde_json::from_str(head).map_err(|e| Error::format(path, 1, format!("bad manifest: {e}")))?;
    manifest.check(path, format)?;
    let rows = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, i + 1, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, rows))
}

fn write_jsonl<R: Serialize>(path: &Path, manifest: &Manifest, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut out = to_json(manifest);
    out.push('\n');
    for r in rows {
        out.push_str(&to_json(&r));
        out.push('\n');
    }
    write_string(path, &out)
}

/// Writes the annotation and feature files for `dataset`.
pub fn write_dataset(dataset: &Dataset, annotations: &Path, features: &Path, seeds: &BTreeMap<String, u64>) -> Result<()> {
    let mut manifest = Manifest::new(ANNOTATIONS_FORMAT).with_provenance(dataset.provenance());
    manifest.seeds = seeds.clone();
    write_jsonl(
        annotations,
        &manifest,
        dataset.records().iter().map(|r| AnnotationLine {
            nodule_id: r.nodule_id.clone(),
            scan_id: r.scan_id.clone(),
            ratings: r.annotations.iter().map(|a| *a.values()).collect(),
        }),
    )?;
    let mut manifest = Manifest::new(FEATURES_FORMAT).with_provenance(dataset.provenance());
    manifest.seeds = seeds.clone();
    manifest.dim = Some(dataset.feature_dim());
    write_jsonl(
        features,
        &manifest,
        dataset.records().iter().map(|r| VectorLine {
            nodule_id: r.nodule_id.clone(),
            values: r.feature.values().to_vec(),
        }),
    )
}

/// Reads and joins annotations with features, then keeps nodules with three
/// or four annotations.
pub fn read_dataset(annotations: &Path, features: &Path) -> Result<Filtered> {
    let (amanifest, arows) = read_jsonl::<AnnotationLine>(annotations, ANNOTATIONS_FORMAT)?;
    let (fmanifest, frows) = read_jsonl::<VectorLine<f64>>(features, FEATURES_FORMAT)?;
    let dim = fmanifest
        .dim
        .ok_or_else(|| Error::format(features, 1, "features manifest lacks `dim`"))?;
    let mut by_id: HashMap<String, Vec<f64>> = HashMap::with_capacity(frows.len());
    for (i, row) in frows.into_iter().enumerate() {
        if row.values.len() != dim {
            return Err(Error::format(
                features,
                i + 2,
                format!("`{}` has {} values, manifest declares {dim}", row.nodule_id, row.values.len()),
            ));
        }
        if by_id.insert(row.nodule_id.clone(), row.values).is_some() {
            return Err(Error::Duplicate(row.nodule_id));
        }
    }
    let n_features = by_id.len();
    let mut records = Vec::with_capacity(arows.len());
    for (i, row) in arows.into_iter().enumerate() {
        let feature = by_id.remove(&row.nodule_id).ok_or_else(|| Error::Lookup(row.nodule_id.clone()))?;
        let annotations = row
            .ratings
            .into_iter()
            .map(RatingVector::raw)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(annotations, i + 2, format!("`{}`: {e}", row.nodule_id)))?;
        records.push(NoduleRecord {
            nodule_id: row.nodule_id,
            scan_id: row.scan_id,
            annotations,
            feature: FeatureVector(feature),
        });
    }
    if let Some(extra) = by_id.into_keys().min() {
        return Err(Error::Config(format!(
            "features file has {n_features} rows; `{extra}` has no annotations"
        )));
    }
    filter_dataset(records, dim, amanifest.provenance.unwrap_or(Provenance::Real))
}

pub fn write_embeddings<T: Scalar + Serialize>(path: &Path, embeddings: &[Embedding<T>], tap: EmbeddingTap, seed: Option<u64>) -> Result<()> {
    let mut manifest = Manifest::new(EMBEDDINGS_FORMAT);
    manifest.dim = Some(embeddings.first().map_or(EMBED_DIM, |e| e.values.len()));
    manifest.embedding_tap = Some(tap);
    if let Some(s) = seed {
        manifest = manifest.with_seed("train", s);
    }
    write_jsonl(
        path,
        &manifest,
        embeddings.iter().map(|e| VectorLine {
            nodule_id: e.nodule_id.clone(),
            values: e.values.clone(),
        }),
    )
}

pub fn read_embeddings<T: Scalar + DeserializeOwned>(path: &Path) -> Result<Vec<Embedding<T>>> {
    let (manifest, rows) = read_jsonl::<VectorLine<T>>(path, EMBEDDINGS_FORMAT)?;
    let dim = manifest.dim.ok_or_else(|| Error::format(path, 1, "embeddings manifest lacks `dim`"))?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.values.len() != dim {
                return Err(Error::format(path, i + 2, format!("`{}` has {} values, expected {dim}", r.nodule_id, r.values.len())));
            }
            Ok(Embedding {
                nodule_id: r.nodule_id,
                values: r.values,
            })
        })
        .collect()
}

fn join<T: Scalar>(values: &[T]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v}").expect("write to String");
    }
    s
}

/// Serializes a model to its text form.
pub fn model_to_string<T: Scalar>(model: &HeadModel<T>, provenance: Option<Provenance>) -> String {
    let c = model.config();
    let mut out = String::new();
    writeln!(out, "format {MODEL_FORMAT} {FORMAT_VERSION}").unwrap();
    writeln!(out, "tool {}", tool_version()).unwrap();
    if let Some(p) = provenance {
        writeln!(out, "provenance {p}").unwrap();
    }
    writeln!(out, "seed {}", c.seed).unwrap();
    writeln!(out, "dims {} {} {EMBED_DIM} {OUTPUT_DIM}", c.input_dim, c.hidden_dim).unwrap();
    writeln!(out, "embedding {}", c.embedding_tap.name()).unwrap();
    writeln!(out, "learning_rate {}", c.learning_rate).unwrap();
    writeln!(out, "epochs {}", c.epochs).unwrap();
    writeln!(out, "batch_size {}", c.batch_size).unwrap();
    for (i, layer) in model.layers().iter().enumerate() {
        writeln!(out, "layer{}.weight {}", i + 1, join(&layer.weights)).unwrap();
        writeln!(out, "layer{}.bias {}", i + 1, join(&layer.bias)).unwrap();
    }
    out
}

pub fn write_model<T: Scalar>(path: &Path, model: &HeadModel<T>, provenance: Option<Provenance>) -> Result<()> {
    write_string(path, &model_to_string(model, provenance))
}

pub fn read_model<T: Scalar>(path: &Path) -> Result<HeadModel<T>> {
    parse_model(&read_to_string(path)?, path)
}

pub fn parse_model<T: Scalar>(text: &str, path: &Path) -> Result<HeadModel<T>> {
    let mut fields: HashMap<&str, (usize, &str)> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if fields.insert(key, (i + 1, rest.trim())).is_some() {
            return Err(Error::format(path, i + 1, format!("repeated field `{key}`")));
        }
    }
    let field = |key: &str| fields.get(key).copied().ok_or_else(|| Error::format(path, 0, format!("missing field `{key}`")));
    let parse_usize = |key: &str| -> Result<usize> {
        let (line, v) = field(key)?;
        v.parse().map_err(|_| Error::format(path, line, format!("`{key}` is not an integer: {v}")))
    };

    let (line, fmt) = field("format")?;
    match fmt.split_once(' ') {
        Some((name, _)) if name != MODEL_FORMAT => return Err(Error::format(path, line, format!("not a head model file: `{name}`"))),
        Some((_, ver)) if ver.trim() == FORMAT_VERSION.to_string() => {}
        _ => return Err(Error::format(path, line, format!("unsupported head model format `{fmt}`"))),
    }

    let (line, dims) = field("dims")?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|d| d.parse().map_err(|_| Error::format(path, line, format!("bad dimension `{d}`"))))
        .collect::<Result<_>>()?;
    if dims.len() != 4 || dims[2] != EMBED_DIM || dims[3] != OUTPUT_DIM {
        return Err(Error::format(path, line, format!("dims must be `D_f h1 {EMBED_DIM} {OUTPUT_DIM}`")));
    }
    let (line, tap) = field("embedding")?;
    let embedding_tap = EmbeddingTap::parse(tap).ok_or_else(|| Error::format(path, line, format!("unknown embedding tap `{tap}`")))?;
    let (line, lr) = field("learning_rate")?;
    let learning_rate: f64 = lr.parse().map_err(|_| Error::format(path, line, "bad learning rate"))?;
    let seed = parse_usize("seed")? as u64;

    let config = HeadConfig {
        input_dim: dims[0],
        hidden_dim: dims[1],
        learning_rate,
        epochs: parse_usize("epochs")?,
        batch_size: parse_usize("batch_size")?,
        seed,
        embedding_tap,
    };
    let shapes = [(dims[0], dims[1]), (dims[1], EMBED_DIM), (EMBED_DIM, OUTPUT_DIM)];
    let mut layers = Vec::with_capacity(3);
    for (i, (inp, out)) in shapes.into_iter().enumerate() {
        let values = |key: String, len: usize| -> Result<Vec<T>> {
            let (line, raw) = field(&key)?;
            let v: Vec<T> = raw
                .split_whitespace()
                .map(|x| x.parse::<T>().map_err(|_| Error::format(path, line, format!("bad number `{x}` in `{key}`"))))
                .collect::<Result<_>>()?;
            if v.len() != len {
                return Err(Error::format(path, line, format!("`{key}` has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        layers.push(Dense {
            in_dim: inp,
            out_dim: out,
            weights: values(format!("layer{}.weight", i + 1), inp * out)?,
            bias: values(format!("layer{}.bias", i + 1), out)?,
        });
    }
    let layers: [Dense<T>; 3] = layers.try_into().map_err(|_| Error::format(path, 0, "expected three layers"))?;
    HeadModel::from_layers(config, layers)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, 0, format!("{other:?}")),
    }
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_string(&dir.join("manifest.json"), &text)
}

/// Grid on which fitted log-normal curves are tabulated.
pub fn dissent_grid() -> impl Iterator<Item = f64> {
    (1..=200).map(|i| i as f64 * 0.005)
}

/// Writes `report.json`, one `dissent_<method>.csv` per method,
/// `lognormal_fits.csv`, `lognormal_curves.csv` and `manifest.json` into `dir`.
pub fn write_evaluation(dir: &Path, evaluation: &Evaluation, manifest: &Manifest) -> Result<()> {
    let mut report = serde_json::to_string_pretty(&evaluation.report).expect("report serializes");
    report.push('\n');
    write_string(&dir.join("report.json"), &report)?;

    #[derive(Serialize)]
    struct SampleRow<'a> {
        method: &'a str,
        subject: String,
        nodule_id: &'a str,
        score: f64,
    }
    for (method, samples) in &evaluation.samples {
        write_rows(
            &dir.join(format!("dissent_{method}.csv")),
            samples.iter().map(|s| SampleRow {
                method,
                subject: s.subject.to_string(),
                nodule_id: &s.nodule_id,
                score: s.score,
            }),
        )?;
    }

    #[derive(Serialize)]
    struct FitCsv<'a> {
        method: &'a str,
        mu: Option<f64>,
        sigma: Option<f64>,
        n_used: usize,
        n_excluded_zero: usize,
    }
    write_rows(
        &dir.join("lognormal_fits.csv"),
        evaluation.report.methods.iter().map(|m| FitCsv {
            method: &m.method,
            mu: m.lognormal.as_ref().map(|f| f.mu),
            sigma: m.lognormal.as_ref().map(|f| f.sigma),
            n_used: m.lognormal.as_ref().map_or(0, |f| f.n_used),
            n_excluded_zero: m.lognormal.as_ref().map_or(0, |f| f.n_excluded_zero),
        }),
    )?;

    #[derive(Serialize)]
    struct CurveRow<'a> {
        method: &'a str,
        x: f64,
        pdf: f64,
        cdf: f64,
    }
    let mut curves = Vec::new();
    for m in &evaluation.report.methods {
        let Some(fit) = &m.lognormal else { continue };
        let fit = crate::evaluation::stats::LogNormalFit { mu: fit.mu, sigma: fit.sigma };
        for x in dissent_grid() {
            if let (Some(pdf), Some(cdf)) = (fit.pdf(x), fit.cdf(x)) {
                curves.push(CurveRow { method: &m.method, x, pdf, cdf });
            }
        }
    }
    write_rows(&dir.join("lognormal_curves.csv"), curves)?;
    write_manifest(dir, manifest)
}

/// Writes `dendrogram.csv` (one row per merge) and `splits.json`.
pub fn write_clustering<T: Scalar + Serialize>(
    dir: &Path,
    dendrogram: &Dendrogram<T>,
    leaf_ids: &[String],
    summary: &SplitSummary<T>,
    manifest: &Manifest,
) -> Result<()> {
    #[derive(Serialize)]
    struct MergeRow<T> {
        step: usize,
        cluster_a: usize,
        cluster_b: usize,
        height: T,
        size: usize,
    }
    write_rows(
        &dir.join("dendrogram.csv"),
        dendrogram.merges().iter().enumerate().map(|(step, m)| MergeRow {
            step,
            cluster_a: m.a,
            cluster_b: m.b,
            height: m.height,
            size: m.size,
        }),
    )?;
    #[derive(Serialize)]
    struct LeafRow<'a> {
        leaf: usize,
        nodule_id: &'a str,
    }
    write_rows(
        &dir.join("leaves.csv"),
        leaf_ids.iter().enumerate().map(|(leaf, id)| LeafRow { leaf, nodule_id: id }),
    )?;

    #[derive(Serialize)]
    struct SideJson<'a> {
        node: usize,
        size: usize,
        mean_rating: crate::evaluation::stats::PerCharacteristic,
        nodule_ids: &'a [String],
    }
    #[derive(Serialize)]
    struct SplitJson<'a, T> {
        node: usize,
        height: T,
        left: SideJson<'a>,
        right: SideJson<'a>,
    }
    let side = |s: &'_ crate::analysis::ward::SplitSide| SideJson {
        node: s.node,
        size: s.nodule_ids.len(),
        mean_rating: crate::evaluation::stats::PerCharacteristic::from_array(*s.mean_rating.values()),
        nodule_ids: &[],
    };
    let splits: Vec<_> = summary
        .splits
        .iter()
        .map(|sp| SplitJson {
            node: sp.node,
            height: sp.height,
            left: SideJson {
                nodule_ids: &sp.left.nodule_ids,
                ..side(&sp.left)
            },
            right: SideJson {
                nodule_ids: &sp.right.nodule_ids,
                ..side(&sp.right)
            },
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&splits).expect("splits serialize");
    text.push('\n');
    write_string(&dir.join("splits.json"), &text)?;
    write_manifest(dir, manifest)
}

/// Writes `projection.csv` and `kl_trace.csv`.
pub fn write_projection<T: Scalar + Serialize>(
    dir: &Path,
    points: &[ProjectedPoint<T>],
    kl_trace: &[(usize, T)],
    manifest: &Manifest,
) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a, T> {
        nodule_id: &'a str,
        x: T,
        y: T,
        class: &'static str,
    }
    write_rows(
        &dir.join("projection.csv"),
        points.iter().map(|p| Row {
            nodule_id: &p.nodule_id,
            x: p.coords[0],
            y: p.coords[1],
            class: p.class.map_or("unknown", |c| c.name()),
        }),
    )?;
    #[derive(Serialize)]
    struct KlRow<T> {
        iteration: usize,
        kl: T,
    }
    write_rows(
        &dir.join("kl_trace.csv"),
        kl_trace.iter().map(|&(iteration, kl)| KlRow { iteration, kl }),
    )?;
    write_manifest(dir, manifest)
}
