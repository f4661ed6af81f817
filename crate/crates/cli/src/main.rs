use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nodule_cbir::analysis::{self, ward, TsneConfig};
use nodule_cbir::dataset::{assign_folds, Dataset};
use nodule_cbir::evaluation::protocol::{build_report, EvalConfig, DEFAULT_FOLDS, DEFAULT_K_LIST};
use nodule_cbir::evaluation::PRECISION_KS;
use nodule_cbir::head::{embed_all, train, EmbeddingTap, HeadConfig};
use nodule_cbir::io::{self, Manifest};
use nodule_cbir::retrieval::Metric;
use nodule_cbir::synth::{generate_synthetic, SynthConfig};
use nodule_cbir::{Embedding, Error, HeadModel, Result, RetrievalIndex, DEFAULT_QUERY_K, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "nodule-cbir", version, about = "Embedding-based retrieval of similar lung nodules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Train the regression head on all nodules.
    Train(TrainArgs),
    /// Write the embedding of every nodule.
    Embed(EmbedArgs),
    /// Retrieve the nearest nodules to one nodule.
    Query(QueryArgs),
    /// Cross-validated dissent evaluation.
    Evaluate(EvaluateArgs),
    /// Ward clustering of embeddings and the top splits.
    Cluster(ClusterArgs),
    /// 2-D t-SNE projection of embeddings.
    Tsne(TsneArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    features: PathBuf,
}

#[derive(Args)]
struct HeadArgs {
    #[arg(long, default_value_t = nodule_cbir::head::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = nodule_cbir::head::DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = nodule_cbir::head::DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = nodule_cbir::head::DEFAULT_BATCH)]
    batch: usize,
    /// Embedding taken after (`post`) or before (`pre`) the second activation.
    #[arg(long, default_value = "post", value_parser = parse_tap)]
    embedding: EmbeddingTap,
}

impl HeadArgs {
    fn config(&self, input_dim: usize, seed: u64) -> HeadConfig {
        HeadConfig {
            hidden_dim: self.hidden,
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            seed,
            embedding_tap: self.embedding,
            ..HeadConfig::new(input_dim)
        }
    }
}

fn parse_tap(s: &str) -> std::result::Result<EmbeddingTap, String> {
    match s {
        "post" => Ok(EmbeddingTap::PostActivation),
        "pre" => Ok(EmbeddingTap::PreActivation),
        other => EmbeddingTap::parse(other).ok_or_else(|| format!("unknown embedding tap `{other}` (use post or pre)")),
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1200)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    doctors: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Directory receiving annotations.jsonl and features.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    head: HeadArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    query_id: String,
    #[arg(long, default_value_t = DEFAULT_QUERY_K)]
    k: usize,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    /// Also exclude nodules from the query's own scan.
    #[arg(long)]
    exclude_same_scan: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    head: HeadArgs,
    /// Use this model in every fold instead of training per fold.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_LIST)]
    k_list: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Seed for fold assignment, training and the random baseline.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    embeddings: PathBuf,
    /// Number of top-down splits to summarize.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Cluster a seeded random subset of this size.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TsneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let filtered = io::read_dataset(&data.annotations, &data.features)?;
    if filtered.dropped > 0 {
        eprintln!(
            "kept {} nodules, dropped {} without three or four annotations",
            filtered.kept, filtered.dropped
        );
    }
    Ok(filtered.dataset)
}

/// Embeddings restricted to nodules present in the dataset, which must
/// cover every one of them.
fn load_embeddings(path: &Path, dataset: &Dataset) -> Result<Vec<Embedding>> {
    let embeddings: Vec<Embedding> = io::read_embeddings(path)?;
    let kept: Vec<Embedding> = embeddings.into_iter().filter(|e| dataset.get(&e.nodule_id).is_some()).collect();
    if kept.len() != dataset.len() {
        let missing = dataset
            .records()
            .iter()
            .find(|r| !kept.iter().any(|e| e.nodule_id == r.nodule_id))
            .map(|r| r.nodule_id.clone())
            .unwrap_or_default();
        return Err(Error::Lookup(format!("no embedding for `{missing}`")));
    }
    Ok(kept)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let config = SynthConfig {
                n_nodules: a.n,
                feature_dim: a.dim,
                doctors_per_nodule: a.doctors,
                noise_sigma: a.sigma,
                seed: a.seed,
            };
            let dataset = generate_synthetic(&config)?;
            io::write_dataset(
                &dataset,
                &a.out.join("annotations.jsonl"),
                &a.out.join("features.jsonl"),
                &BTreeMap::from([("synth".to_owned(), a.seed)]),
            )?;
            println!("wrote {} synthetic nodules to {}", dataset.len(), a.out.display());
        }
        Command::Train(a) => {
            let dataset = load(&a.data)?;
            let config = a.head.config(dataset.feature_dim(), a.seed);
            let (model, report) = train::<f64>(&dataset, &config)?;
            io::write_model(&a.out, &model, Some(dataset.provenance()))?;
            println!(
                "trained on {} nodules for {} epochs: final loss {:.6}",
                dataset.len(),
                report.epochs_run,
                report.final_loss
            );
        }
        Command::Embed(a) => {
            let dataset = load(&a.data)?;
            let model: HeadModel = io::read_model(&a.model)?;
            let embeddings = embed_all(&model, &dataset)?;
            io::write_embeddings(&a.out, &embeddings, model.embedding_tap(), Some(model.config().seed))?;
            println!("wrote {} embeddings to {}", embeddings.len(), a.out.display());
        }
        Command::Query(a) => {
            let dataset = load(&a.data)?;
            let embeddings = load_embeddings(&a.embeddings, &dataset)?;
            let index = RetrievalIndex::build(&embeddings, &dataset, a.metric)?;
            let result = index.query_by_id(&a.query_id, a.k, a.exclude_same_scan)?;
            let prediction = index.mean_consensus(&result)?;
            let neighbors: Vec<_> = result
                .neighbors
                .iter()
                .map(|n| {
                    let e = &index.entries()[n.position];
                    json!({
                        "nodule_id": n.nodule_id,
                        "scan_id": e.scan_id,
                        "distance": n.distance,
                        "consensus": e.consensus.values(),
                        "class": e.class.name(),
                    })
                })
                .collect();
            let out = json!({
                "query_id": a.query_id,
                "k": a.k,
                "metric": a.metric.name(),
                "exclude_same_scan": a.exclude_same_scan,
                "truncated": result.truncated,
                "neighbors": neighbors,
                "predicted_ratings": prediction.values(),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("query output serializes"));
        }
        Command::Evaluate(a) => {
            let dataset = load(&a.data)?;
            let config = EvalConfig {
                head: a.head.config(dataset.feature_dim(), a.seed),
                metric: a.metric,
                k_list: a.k_list,
                precision_ks: PRECISION_KS.to_vec(),
                n_folds: a.folds,
                fold_seed: a.seed,
                random_seed: a.seed,
            };
            let pretrained: Option<HeadModel> = a.model.as_deref().map(io::read_model).transpose()?;
            // fail on a bad fold count before any training starts
            assign_folds(&dataset, config.n_folds, config.fold_seed)?;
            let evaluation = build_report(&dataset, &config, pretrained.as_ref())?;
            let manifest = Manifest::new(io::PLOT_DATA_FORMAT)
                .with_provenance(dataset.provenance())
                .with_seed("fold", a.seed)
                .with_seed("train", a.seed)
                .with_seed("random", a.seed);
            io::write_evaluation(&a.out, &evaluation, &manifest)?;
            println!("{:<10} {:>9} {:>9} {:>9}", "method", "samples", "mean", "std");
            for m in &evaluation.report.methods {
                println!("{:<10} {:>9} {:>9.4} {:>9.4}", m.method, m.n_samples, m.dissent_mean, m.dissent_std);
            }
            println!("wrote evaluation to {}", a.out.display());
        }
        Command::Cluster(a) => {
            let dataset = load(&a.data)?;
            let embeddings = analysis::sample_embeddings(&load_embeddings(&a.embeddings, &dataset)?, a.sample, a.seed);
            let points: Vec<&[f64]> = embeddings.iter().map(|e| e.values.as_slice()).collect();
            let dendrogram = ward::ward_cluster(&points)?;
            let ids: Vec<String> = embeddings.iter().map(|e| e.nodule_id.clone()).collect();
            let summary = ward::top_splits_summary(&dendrogram, &ids, &dataset, a.depth)?;
            let manifest = Manifest::new(io::PLOT_DATA_FORMAT)
                .with_provenance(dataset.provenance())
                .with_seed("sample", a.seed);
            io::write_clustering(&a.out, &dendrogram, &ids, &summary, &manifest)?;
            for split in &summary.splits {
                println!(
                    "split node {} at height {:.4}: {} | {} nodules",
                    split.node,
                    split.height,
                    split.left.nodule_ids.len(),
                    split.right.nodule_ids.len()
                );
            }
        }
        Command::Tsne(a) => {
            let dataset = load(&a.data)?;
            let embeddings = analysis::sample_embeddings(&load_embeddings(&a.embeddings, &dataset)?, a.sample, a.seed);
            let config = TsneConfig {
                perplexity: a.perplexity,
                iterations: a.iterations,
                seed: a.seed,
                ..TsneConfig::default()
            };
            let (mut points, run) = analysis::project(&embeddings, &config)?;
            analysis::color_by_malignancy(&mut points, &dataset)?;
            let manifest = Manifest::new(io::PLOT_DATA_FORMAT)
                .with_provenance(dataset.provenance())
                .with_seed("tsne", a.seed);
            io::write_projection(&a.out, &points, &run.kl_trace, &manifest)?;
            if let Some((iteration, kl)) = run.kl_trace.last() {
                println!("projected {} nodules; KL {kl:.4} after {iteration} iterations", points.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error category=argument: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error category={}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
