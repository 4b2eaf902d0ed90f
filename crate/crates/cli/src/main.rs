use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use serde_json::json;

use tadge::checkpoint::Checkpoint;
use tadge::config::{Profile, RunConfig};
use tadge::eval::{self, Task};
use tadge::graph::{ingest_edge_list, DynamicGraph, Schema};
use tadge::pipeline::{self, Manifest};
use tadge::sampler::Corpus;

#[derive(Parser)]
#[command(name = "tadge", version, about = "Time-aware dynamic graph embedding")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a delimited temporal edge list into a graph file.
    Ingest(IngestArgs),
    /// Sample train and test edge-sequence corpora.
    Sample(SampleArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test corpus.
    Eval(EvalArgs),
    /// Summarize run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named defaults: transaction, hyperlink or discussion.
    #[arg(long)]
    profile: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct IngestArgs {
    /// Edge list file.
    input: PathBuf,
    /// Column mapping, e.g. `src,dst,ts,weight`.
    #[arg(long, default_value = "src,dst,ts")]
    schema: String,
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// First row is a header.
    #[arg(long)]
    header: bool,
    /// `vertex,class` sidecar file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output graph file.
    #[arg(short, long, default_value = "graph.bin")]
    output: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Training corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test corpus.
    #[arg(long)]
    test: PathBuf,
    /// Training corpus, used for the mean-ToE baseline.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of toe,static,timeaware,classify.
    #[arg(long)]
    tasks: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories written by sample, train or eval.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
}

/// Profile defaults, then the config file, then `--set`, then dedicated flags.
fn build_config(run: &RunArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = match &run.profile {
        Some(p) => RunConfig::profile(p.parse::<Profile>()?),
        None => RunConfig::default(),
    };
    if let Some(path) = &run.config {
        cfg.apply_file(path)?;
    }
    for item in &run.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| tadge::Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = run.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(t) = run.threads {
        cfg.set("threads", &t.to_string())?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    pipeline::configure_threads(cfg.threads);
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let delimiter = u8::try_from(a.delimiter).map_err(|_| tadge::Error::Schema("delimiter must be ASCII".into()))?;
    let schema = Schema::parse(&a.schema)?.with_delimiter(delimiter).with_header(a.header);
    let graph = ingest_edge_list(&a.input, &schema, a.labels.as_deref())?;
    graph.save(&a.output)?;
    let s = graph.stats();
    println!(
        "|V|={} |E|={} mean_degree={:.3} mean_distinct_degree={:.3} mean_toe_days={:.3} std_toe_days={:.3} classes={}",
        s.vertices, s.edges, s.mean_degree, s.mean_distinct_degree, s.mean_toe_days, s.std_toe_days, s.classes
    );
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let cfg = build_config(&a.run, &[])?;
    let graph = DynamicGraph::load(&a.graph)?;
    create_dir(&a.out)?;
    let (train, test, stats) = pipeline::sample(&graph, &cfg)?;
    let (train_path, test_path) = (a.out.join("train.corpus"), a.out.join("test.corpus"));
    train.save(&train_path)?;
    test.save(&test_path)?;
    let mut m = Manifest::new("sample", &cfg);
    m.input(&a.graph)?;
    m.output(&train_path)?;
    m.output(&test_path)?;
    m.details = serde_json::to_value(&stats)?;
    m.write(&a.out.join("manifest.json"))?;
    println!(
        "train_sequences={} test_sequences={} test_starts={} rejected={} edge_disjoint={}",
        stats.train_sequences,
        stats.test_sequences,
        stats.test_starts,
        stats.rejected_train + stats.rejected_test,
        stats.edge_disjoint
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let extra: Vec<(&str, String)> = a.epochs.map(|e| ("epochs", e.to_string())).into_iter().collect();
    let cfg = build_config(&a.run, &extra)?;
    let graph = DynamicGraph::load(&a.graph)?;
    let corpus = Corpus::load(&a.corpus)?;
    create_dir(&a.out)?;
    let result = pipeline::train_run(&graph, &corpus, &cfg, Some(&a.out), |epoch, reports, ms| {
        let n = reports.len().max(1) as f64;
        let mean = reports.iter().map(|r| r.total).sum::<f64>() / n;
        println!("epoch={epoch} wall_ms={ms:.1} mean_loss={mean:.6}");
    });
    let out = match result {
        Ok(out) => out,
        Err(e @ tadge::Error::NonFiniteLoss { .. }) => {
            return Err(anyhow!(e).context(format!(
                "training aborted; last good state saved to {}",
                a.out.join("last-good.bin").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let mut m = Manifest::new("train", &cfg);
    m.input(&a.graph)?;
    m.input(&a.corpus)?;
    for p in &out.checkpoints {
        m.output(p)?;
    }
    m.output(&a.out.join("loss.csv"))?;
    m.details = json!({ "epochs_done": out.state.epochs_done, "epoch_ms": out.epoch_ms });
    m.write(&a.out.join("manifest.json"))?;
    println!("checkpoint={}", a.out.join("checkpoint.bin").display());
    Ok(())
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let extra: Vec<(&str, String)> = a.tasks.iter().map(|t| ("tasks", t.clone())).collect();
    let cfg = build_config(&a.run, &extra)?;
    let graph = DynamicGraph::load(&a.graph)?;
    if cfg.tasks.contains(&Task::Classify) && (0..graph.num_vertices()).all(|v| graph.class_label(tadge::VertexId(v as u32)).is_none()) {
        return Err(anyhow!("classify requested but the graph has no vertex labels (ingest with --labels)"));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.table.num_vertices() != graph.num_vertices() {
        return Err(anyhow!(
            "checkpoint has {} vertices but the graph has {}",
            ck.table.num_vertices(),
            graph.num_vertices()
        ));
    }
    let test = Corpus::load(&a.test)?;
    let train = a.train.as_deref().map(Corpus::load).transpose()?;
    create_dir(&a.out)?;
    let reports = pipeline::evaluate(&graph, &ck, train.as_ref(), &test, &cfg)?;

    let mut m = Manifest::new("eval", &cfg);
    for p in [&a.graph, &a.checkpoint, &a.test].into_iter().chain(a.train.as_ref()) {
        m.input(p)?;
    }
    let json_path = a.out.join("report.json");
    let text_path = a.out.join("report.txt");
    write(&json_path, &eval::reports_to_json(&reports))?;
    let text = eval::reports_to_text(&reports);
    write(&text_path, &text)?;
    m.output(&json_path)?;
    m.output(&text_path)?;
    if let Some(r) = reports.iter().find(|r| !r.sweep.is_empty()) {
        let p = a.out.join("sweep.csv");
        write(&p, &eval::sweep_csv(&r.sweep))?;
        m.output(&p)?;
    }
    m.write(&a.out.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    for dir in &a.dirs {
        let manifest = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
        let m: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
        println!("== {}", dir.display());
        println!("command={} seed={} config_hash={}", m["command"].as_str().unwrap_or("?"), m["seed"], m["config_hash"].as_str().unwrap_or("?"));
        if let Some(outputs) = m["outputs"].as_object() {
            for (name, sum) in outputs {
                println!("  {name} sha256={}", sum.as_str().unwrap_or("?"));
            }
        }
        let loss = dir.join("loss.csv");
        if let Ok(csv) = std::fs::read_to_string(&loss) {
            let rows = csv.lines().count().saturating_sub(1);
            match csv.lines().nth(1).zip(csv.lines().last().filter(|_| rows > 0)) {
                Some((first, last)) => println!("loss rows={rows}\n  first {first}\n  last  {last}"),
                None => println!("loss rows=0"),
            }
        }
        if let Ok(r) = std::fs::read_to_string(dir.join("report.txt")) {
            print!("{r}");
        }
    }
    Ok(())
}

/// Usage and parse failures map to 2, everything else to 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<tadge::Error>() {
        Some(tadge::Error::Parse { .. } | tadge::Error::Schema(_) | tadge::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
