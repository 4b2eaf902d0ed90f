//! Sample, train and evaluate stages shared by the CLI and the acceptance suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::codec::sha256_hex;
use crate::config::{InitMode, RunConfig};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{self, CandidateSample, EvalReport, Task};
use crate::graph::DynamicGraph;
use crate::model::Model;
use crate::sampler::{build_corpora, Corpus, SampleStats};
use crate::training::{self, LossReport, TrainState};

/// Everything needed to reproduce a stage: canonical config, its hash and
/// checksums of every input and output file.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let config = cfg
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    fn checksum(path: &Path) -> Result<(String, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok((name, sha256_hex(&bytes)))
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let (k, v) = Self::checksum(path)?;
        self.inputs.insert(k, v);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let (k, v) = Self::checksum(path)?;
        self.outputs.insert(k, v);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Caps the global worker pool; 0 leaves the default.
pub fn configure_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

pub fn sample(graph: &DynamicGraph, cfg: &RunConfig) -> Result<(Corpus, Corpus, SampleStats)> {
    cfg.validate()?;
    let (train, test, stats) = build_corpora(graph, &cfg.walk, cfg.test_fraction)?;
    if !stats.edge_disjoint {
        return Err(Error::Corpus("train and test corpora share edges".into()));
    }
    Ok((train, test, stats))
}

pub fn init_table(graph: &DynamicGraph, cfg: &RunConfig) -> Result<EmbeddingTable> {
    match &cfg.init {
        InitMode::Random => Ok(EmbeddingTable::random(graph.num_vertices(), cfg.model.k, cfg.seed)),
        InitMode::File(path) => EmbeddingTable::load_text(path, graph, cfg.model.k),
    }
}

pub fn new_state(graph: &DynamicGraph, cfg: &RunConfig) -> Result<TrainState> {
    let table = init_table(graph, cfg)?;
    let model = Model::new(cfg.model.clone(), table.as_mat())?;
    Ok(TrainState::new(model, table, cfg.train.lr))
}

pub fn checkpoint_of(state: &TrainState) -> Checkpoint {
    Checkpoint {
        model: state.model.clone(),
        table: state.table.clone(),
        epochs_done: state.epochs_done,
    }
}

pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
    pub epoch_ms: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from a fresh state. With `out`, writes `checkpoint-0000.bin`
/// before training, `checkpoint-EEEE.bin` every `checkpoint_every` epochs,
/// `checkpoint.bin` at the end and `loss.csv`. A non-finite loss saves
/// `last-good.bin` before the error is returned.
pub fn train_run(
    graph: &DynamicGraph,
    corpus: &Corpus,
    cfg: &RunConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(usize, &[LossReport], f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut state = new_state(graph, cfg)?;
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState, name: &str, list: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out {
            let p = dir.join(name);
            checkpoint_of(state).save(&p)?;
            list.push(p);
        }
        Ok(())
    };
    save(&state, "checkpoint-0000.bin", &mut checkpoints)?;
    let mut epoch_ms = Vec::new();
    let mut reports = Vec::new();
    if cfg.train.epochs > 0 {
        let every = cfg.train.checkpoint_every;
        let mut started = Instant::now();
        let mut periodic = Vec::new();
        let result = training::train(graph, corpus, &mut state, &cfg.train, |s, batch_reports| {
            let ms = started.elapsed().as_secs_f64() * 1e3;
            epoch_ms.push(ms);
            on_epoch(s.epochs_done, batch_reports, ms);
            if every > 0 && s.epochs_done % every == 0 {
                save(s, &format!("checkpoint-{:04}.bin", s.epochs_done), &mut periodic)?;
            }
            started = Instant::now();
            Ok(())
        });
        checkpoints.extend(periodic);
        match result {
            Ok(r) => reports = r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                save(&state, "last-good.bin", &mut checkpoints)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    save(&state, "checkpoint.bin", &mut checkpoints)?;
    if let Some(dir) = out {
        let p = dir.join("loss.csv");
        std::fs::write(&p, loss_csv(&reports)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutput {
        state,
        reports,
        epoch_ms,
        checkpoints,
    })
}

/// Runs the configured tasks. The ToE baseline predicts the mean normalized
/// ToE of `train` when given, else of `test`.
pub fn evaluate(
    graph: &DynamicGraph,
    ck: &Checkpoint,
    train: Option<&Corpus>,
    test: &Corpus,
    cfg: &RunConfig,
) -> Result<Vec<EvalReport>> {
    let scale = ck.model.cfg.time_scale;
    let pos = eval::positives(test, &scale);
    if pos.is_empty() && cfg.tasks.iter().any(|t| *t != Task::Classify) {
        return Err(Error::Empty("test corpus has no edges"));
    }
    let w_toe = ck.model.params.value(ck.model.head_toe()).column(0).to_owned();
    let sample = (cfg.candidates > 0).then_some(CandidateSample {
        size: cfg.candidates,
        seed: cfg.seed,
    });
    let mut out = Vec::new();
    for &task in &cfg.tasks {
        let started = Instant::now();
        let mut report = match task {
            Task::Toe => {
                let base = eval::mean_delta(train.unwrap_or(test), &scale);
                eval::toe_prediction(&pos, &ck.table, w_toe.view(), base, &scale)?
            }
            Task::Static => eval::static_edge_prediction(&pos, &ck.table, sample)?,
            Task::TimeAware => {
                eval::time_aware_edge_prediction(&pos, &ck.table, w_toe.view(), &eval::default_thresholds(), sample)?
            }
            Task::Classify => {
                let (tr, te, classes) = eval::split_labels(graph, cfg.label_test_fraction, cfg.seed)?;
                eval::vertex_classification(&tr, &te, classes.len(), &ck.table, cfg.ridge_lambda)?
            }
        };
        report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        info!("{} evaluated in {:.1} ms", task.name(), report.wall_ms);
        out.push(report);
    }
    Ok(out)
}
