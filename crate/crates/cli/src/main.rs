//! `focuschain` command-line entry point.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use focuschain::annotate::annotate_edges;
use focuschain::backend::{BackendConfig, BackendKind, ModelClient};
use focuschain::chain::{run_chain, ChainConfig};
use focuschain::connect::{connect, CandidatePair, DEFAULT_GROUP_SIZE};
use focuschain::dataset::{export_conversations, read_records, sample_subset, stats, write_records};
use focuschain::extract::extract_profiles;
use focuschain::model::{canonical_json, ImageProfile, ImageStore, Provenance, RelevanceGraph};
use focuschain::pathgen::LengthDistribution;
use focuschain::pipeline::{run_pipeline, synthesize, PipelineOptions};
use focuschain::quality::{live_report, stratified_sample};
use focuschain::question::{lint_question, SynthesisRecord};
use focuschain::stage::{append_quarantine, QuarantineEntry};
use focuschain_review::{read_judgment_log, ReviewConfig, ReviewState, DEFAULT_RATERS};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "focuschain",
    version,
    about = "Multi-image reasoning data synthesis, chain execution and review"
)]
struct Cli {
    /// Backend configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the scripted backend with this playlist file.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Override the backend endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Override the model for every stage.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Override the number of concurrent backend requests.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Quarantine file for items that fail parsing (default: next to --out).
    #[arg(long, global = true)]
    quarantine: Option<PathBuf>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a profile for every image in a directory.
    Extract {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propose related image pairs from profiles.
    Connect {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Annotate candidate pairs and write the relevance graph.
    Annotate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample paths from a graph and generate records.
    Synthesize {
        #[arg(long)]
        graph: PathBuf,
        /// Number of paths; each yields up to three records.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fix the path length instead of drawing it.
        #[arg(long)]
        path_length: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run extract, connect, annotate and synthesize in one go.
    Run {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long)]
        path_length: Option<usize>,
        /// Also write the relevance graph here.
        #[arg(long)]
        graph_out: Option<PathBuf>,
    },
    /// Answer a question over images with the focus chain executor.
    Chain {
        #[arg(long)]
        question: String,
        /// Comma-separated image paths, relative to --image-root.
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<String>,
        #[arg(long, default_value = ".")]
        image_root: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_steps: usize,
        /// Error out instead of forcing a final answer at the step limit.
        #[arg(long)]
        no_stop_forcing: bool,
        /// Append the trace to this JSONL file.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Check every record of a shard.
    Validate(InArg),
    /// Corpus statistics as JSON.
    Stats(InArg),
    /// Uniform random subset of a shard.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export records as conversation documents (JSONL).
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Human review service.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
}

#[derive(Args)]
struct InArg {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct ReviewSet {
    /// Dataset shard to draw the review set from.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 200)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "judgments.jsonl")]
    judgments: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RATERS)]
    raters: usize,
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Serve the review API (and optionally the UI bundle).
    Serve {
        #[command(flatten)]
        set: ReviewSet,
        /// Image directory the dataset paths are relative to.
        #[arg(long, default_value = ".")]
        images: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Built UI bundle served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Agreement report computed from the judgment log.
    Report {
        #[command(flatten)]
        set: ReviewSet,
    },
}

struct Ctx {
    config: BackendConfig,
    quarantine: Option<PathBuf>,
    json: bool,
}

impl Ctx {
    fn client(&self, store: &ImageStore) -> Result<ModelClient> {
        Ok(ModelClient::from_config(self.config.clone(), store.clone())?)
    }

    fn quarantine(&self, out: &Path, entries: &[QuarantineEntry]) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let path = self.quarantine.clone().unwrap_or_else(|| {
            let mut p = out.as_os_str().to_owned();
            p.push(".quarantine.jsonl");
            PathBuf::from(p)
        });
        append_quarantine(&path, entries).with_context(|| format!("writing {}", path.display()))
    }

    fn report(&self, summary: serde_json::Value, human: String) {
        if self.json {
            println!("{summary}");
        } else {
            println!("{human}");
        }
    }
}

fn backend_config(cli: &Cli) -> Result<BackendConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BackendConfig::default(),
    };
    if let Some(s) = &cli.script {
        config.kind = BackendKind::Scripted;
        config.script = Some(s.clone());
        if cli.config.is_none() {
            config = BackendConfig {
                script: config.script,
                ..BackendConfig::scripted()
            };
        }
    }
    if let Some(e) = &cli.endpoint {
        config.endpoint = e.clone();
    }
    if let Some(m) = &cli.model {
        config.model = m.clone();
        config.stage_models.clear();
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = p;
    }
    config.validate()?;
    Ok(config)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&canonical_json(item)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
        .collect()
}

fn load_shard(path: &Path) -> Result<Vec<SynthesisRecord>> {
    let report = read_records(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(e) = report.errors.first() {
        bail!(
            "{} line {}: {} ({} bad line(s))",
            path.display(),
            e.line,
            e.message,
            report.errors.len()
        );
    }
    Ok(report.records)
}

fn lengths(path_length: Option<usize>) -> Result<LengthDistribution> {
    Ok(match path_length {
        Some(k) => LengthDistribution::fixed(k)?,
        None => LengthDistribution::default(),
    })
}

fn source_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn lint_warnings(records: &[SynthesisRecord]) {
    for r in records {
        for w in lint_question(&r.question) {
            tracing::warn!("record {}: {w}", &r.id[..12.min(r.id.len())]);
        }
    }
}

fn review_records(set: &ReviewSet) -> Result<Vec<SynthesisRecord>> {
    let corpus = load_shard(&set.dataset)?;
    let n = set.sample.min(corpus.len());
    Ok(stratified_sample(&corpus, n, set.seed)?)
}

async fn execute(cli: Cli) -> Result<()> {
    let needs_backend = matches!(
        cli.command,
        Command::Extract { .. }
            | Command::Connect { .. }
            | Command::Annotate { .. }
            | Command::Synthesize { .. }
            | Command::Run { .. }
            | Command::Chain { .. }
    );
    let config = if needs_backend {
        backend_config(&cli)?
    } else {
        BackendConfig::default()
    };
    let ctx = Ctx {
        config,
        quarantine: cli.quarantine.clone(),
        json: cli.json,
    };
    match cli.command {
        Command::Extract { images, out } => {
            let store = ImageStore::new(&images);
            let refs = store.ingest_all()?;
            let client = ctx.client(&store)?;
            let outcome = extract_profiles(&refs, &client, &store).await?;
            for (id, w) in &outcome.warnings {
                tracing::warn!("{}: {w}", &id[..12.min(id.len())]);
            }
            write_jsonl(&out, &outcome.profiles)?;
            ctx.quarantine(&out, &outcome.quarantine)?;
            ctx.report(
                json!({"profiles": outcome.profiles.len(), "quarantined": outcome.quarantine.len()}),
                format!("{} profiles written to {}", outcome.profiles.len(), out.display()),
            );
        }
        Command::Connect {
            profiles,
            out,
            group_size,
            seed,
        } => {
            let nodes: Vec<ImageProfile> = read_jsonl(&profiles)?;
            let client = ctx.client(&ImageStore::new("."))?;
            let outcome = connect(&nodes, &client, group_size, seed).await?;
            write_jsonl(&out, &outcome.pairs)?;
            ctx.quarantine(&out, &outcome.quarantine)?;
            ctx.report(
                json!({"pairs": outcome.pairs.len(), "dropped": outcome.dropped, "quarantined": outcome.quarantine.len()}),
                format!("{} candidate pairs written to {}", outcome.pairs.len(), out.display()),
            );
        }
        Command::Annotate {
            pairs,
            profiles,
            images,
            out,
        } => {
            let nodes: Vec<ImageProfile> = read_jsonl(&profiles)?;
            let pairs: Vec<CandidatePair> = read_jsonl(&pairs)?;
            let pairs: Vec<(usize, usize)> = pairs.iter().map(|p| (p.i, p.j)).collect();
            let store = ImageStore::new(&images);
            let client = ctx.client(&store)?;
            let provenance = Provenance {
                models: client.config().model_map(),
                created_at: None,
                seed: None,
            };
            let outcome = annotate_edges(&pairs, nodes, &client, &store, provenance).await?;
            std::fs::write(&out, serde_json::to_string_pretty(&outcome.graph)? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            ctx.quarantine(&out, &outcome.quarantine)?;
            ctx.report(
                json!({"edges": outcome.graph.edges.len(), "dropped": outcome.dropped(), "quarantined": outcome.quarantine.len()}),
                format!("graph with {} edges written to {}", outcome.graph.edges.len(), out.display()),
            );
        }
        Command::Synthesize {
            graph,
            count,
            seed,
            path_length,
            out,
        } => {
            let text = std::fs::read_to_string(&graph).with_context(|| format!("reading {}", graph.display()))?;
            let g: RelevanceGraph =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", graph.display()))?;
            let client = ctx.client(&ImageStore::new("."))?;
            let outcome = synthesize(&g, &client, count, seed, &lengths(path_length)?, &source_name(&graph)).await?;
            lint_warnings(&outcome.records);
            write_records(&outcome.records, &out)?;
            ctx.quarantine(&out, &outcome.quarantine)?;
            ctx.report(
                json!({"records": outcome.records.len(), "quarantined": outcome.quarantine.len()}),
                format!("{} records written to {}", outcome.records.len(), out.display()),
            );
        }
        Command::Run {
            images,
            out,
            count,
            seed,
            group_size,
            path_length,
            graph_out,
        } => {
            let store = ImageStore::new(&images);
            let client = ctx.client(&store)?;
            let options = PipelineOptions {
                group_size,
                seed,
                count,
                lengths: lengths(path_length)?,
                source: source_name(&images),
            };
            let output = run_pipeline(&store, &client, &options).await?;
            if let Some(g) = graph_out {
                std::fs::write(&g, serde_json::to_string_pretty(output.graph())? + "\n")?;
            }
            let records = &output.synthesis.records;
            lint_warnings(records);
            write_records(records, &out)?;
            let quarantine = output.quarantine();
            ctx.quarantine(&out, &quarantine)?;
            ctx.report(
                json!({
                    "profiles": output.extract.profiles.len(),
                    "edges": output.graph().edges.len(),
                    "records": records.len(),
                    "quarantined": quarantine.len(),
                }),
                format!("{} records written to {}", records.len(), out.display()),
            );
        }
        Command::Chain {
            question,
            images,
            image_root,
            max_steps,
            no_stop_forcing,
            trace_out,
        } => {
            let store = ImageStore::new(&image_root);
            let refs = images
                .iter()
                .map(|p| store.ingest_file(p.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            let client = ctx.client(&store)?;
            let config = ChainConfig {
                max_steps,
                stop_forcing: !no_stop_forcing,
            };
            let trace = run_chain(&question, &refs, &config, &client).await?;
            if let Some(p) = trace_out {
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&p)?;
                writeln!(f, "{}", canonical_json(&trace)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&trace)?);
        }
        Command::Validate(InArg { input }) => {
            let report = read_records(&input).with_context(|| format!("reading {}", input.display()))?;
            let summary = json!({
                "valid": report.records.len(),
                "invalid": report.errors.len(),
                "errors": report.errors,
            });
            ctx.report(
                summary,
                format!("{} valid, {} invalid", report.records.len(), report.errors.len()),
            );
            if !report.errors.is_empty() {
                bail!("{} invalid line(s) in {}", report.errors.len(), input.display());
            }
        }
        Command::Stats(InArg { input }) => {
            let records = load_shard(&input)?;
            println!("{}", serde_json::to_string_pretty(&stats(&records))?);
        }
        Command::Sample { input, n, seed, out } => {
            let records = load_shard(&input)?;
            let subset = sample_subset(&records, n, seed)?;
            write_records(&subset, &out)?;
            ctx.report(
                json!({"records": subset.len()}),
                format!("{} records written to {}", subset.len(), out.display()),
            );
        }
        Command::Export { input, out } => {
            let records = load_shard(&input)?;
            let docs = export_conversations(&records);
            write_jsonl(&out, &docs)?;
            ctx.report(
                json!({"documents": docs.len()}),
                format!("{} documents written to {}", docs.len(), out.display()),
            );
        }
        Command::Review { command } => match command {
            ReviewCommand::Serve {
                set,
                images,
                port,
                host,
                static_dir,
            } => {
                let review_set = review_records(&set)?;
                let state = ReviewState::open(ReviewConfig {
                    review_set,
                    store: ImageStore::new(images),
                    log_path: set.judgments.clone(),
                    n_raters: set.raters,
                    static_dir,
                })?;
                let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host/port")?;
                eprintln!("serving {} review items on http://{addr}", state.review_ids().len());
                focuschain_review::serve(state, addr).await?;
            }
            ReviewCommand::Report { set } => {
                let ids: Vec<String> = review_records(&set)?.into_iter().map(|r| r.id).collect();
                let judgments = read_judgment_log(&set.judgments)?;
                let report = live_report(&judgments, &ids, set.raters)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", json!({"error": e.to_string()}));
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": e.to_string(), "causes": chain}));
            ExitCode::from(1)
        }
    }
}
