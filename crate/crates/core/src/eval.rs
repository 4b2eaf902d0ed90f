//! Downstream tasks: ToE regression, static and time-aware edge prediction,
//! and vertex classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use log::info;
use nalgebra::DMatrix;
use ndarray::{s, Array1, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, VertexId};
use crate::sampler::Corpus;
use crate::time::TimeScale;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn from_predictions(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut c = Self::new(classes);
        for (truth, pred) in pairs {
            c.record(truth, pred);
        }
        c
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        if truth == pred {
            self.tp[truth] += 1;
        } else {
            self.fp[pred] += 1;
            self.fn_[truth] += 1;
        }
    }

    /// Instances recorded; each contributes one TP or one FN.
    pub fn instances(&self) -> u64 {
        self.tp.iter().sum::<u64>() + self.fn_.iter().sum::<u64>()
    }
}

/// Micro and macro F1. Macro averages over classes with any TP, FP or FN.
pub fn micro_macro_f1(conf: &ConfusionCounts) -> Result<(f64, f64)> {
    let mut num = 0u64;
    let mut den = 0u64;
    let mut macro_sum = 0.0;
    let mut active = 0usize;
    for i in 0..conf.classes() {
        let (tp, fp, fn_) = (conf.tp[i], conf.fp[i], conf.fn_[i]);
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            continue;
        }
        active += 1;
        num += 2 * tp;
        den += d;
        macro_sum += (2 * tp) as f64 / d as f64;
    }
    if active == 0 {
        return Err(Error::Empty("confusion counts are all zero"));
    }
    Ok((num as f64 / den as f64, macro_sum / active as f64))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("rmse of empty lists"));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `w_ToEᵀ(r_i + r_j)` in normalized time.
pub fn predict_toe(ri: ArrayView1<f64>, rj: ArrayView1<f64>, w_toe: ArrayView1<f64>) -> f64 {
    ri.iter().zip(rj).zip(w_toe).map(|((a, b), w)| (a + b) * w).sum()
}

/// A held-out edge: consecutive steps of a test sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub query: usize,
    pub partner: usize,
    /// Normalized ToE of the partner step.
    pub delta: f64,
}

pub fn positives(corpus: &Corpus, scale: &TimeScale) -> Vec<Positive> {
    corpus
        .sequences
        .iter()
        .flat_map(|s| s.pairs())
        .map(|(a, b)| Positive {
            query: a.vertex as usize,
            partner: b.vertex as usize,
            delta: scale.normalize(b.toe),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Toe,
    Static,
    TimeAware,
    Classify,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Toe, Task::Static, Task::TimeAware, Task::Classify];

    pub fn name(self) -> &'static str {
        match self {
            Task::Toe => "toe",
            Task::Static => "static",
            Task::TimeAware => "timeaware",
            Task::Classify => "classify",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Task>> {
        let mut tasks: Vec<Task> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(Task::from_str).collect::<Result<_>>()?;
        tasks.sort();
        tasks.dedup();
        if tasks.is_empty() {
            return Err(Error::Config("no evaluation tasks selected".into()));
        }
        Ok(tasks)
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected toe, static, timeaware or classify)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    /// `(epsilon, precision)` rows, time-aware task only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<(f64, f64)>,
    /// Kept out of serialized output so reruns are byte-identical.
    #[serde(skip)]
    pub wall_ms: f64,
}

impl EvalReport {
    fn new(task: Task) -> Self {
        Self {
            task: task.name().into(),
            metrics: BTreeMap::new(),
            sweep: Vec::new(),
            wall_ms: 0.0,
        }
    }

    fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn reports_to_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}

pub fn reports_to_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "[{}]", r.task);
        for (k, v) in &r.metrics {
            let _ = writeln!(out, "  {k:<18} {v:.6}");
        }
        if !r.sweep.is_empty() {
            let _ = writeln!(out, "  {:<8} precision", "epsilon");
            for (e, p) in &r.sweep {
                let _ = writeln!(out, "  {e:<8.2} {p:.6}");
            }
        }
    }
    out
}

pub fn sweep_csv(sweep: &[(f64, f64)]) -> String {
    let mut out = String::from("epsilon,precision\n");
    for (e, p) in sweep {
        let _ = writeln!(out, "{e},{p}");
    }
    out
}

/// `0.05, 0.10, .., 0.50`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 20.0).collect()
}

pub fn toe_prediction(
    pos: &[Positive],
    table: &EmbeddingTable,
    w_toe: ArrayView1<f64>,
    baseline_mean: f64,
    scale: &TimeScale,
) -> Result<EvalReport> {
    let pred: Vec<f64> = pos
        .iter()
        .map(|p| predict_toe(table.row(p.query), table.row(p.partner), w_toe))
        .collect();
    let truth: Vec<f64> = pos.iter().map(|p| p.delta).collect();
    let baseline = rmse(&vec![baseline_mean; truth.len()], &truth)?;
    let days = TimeScale::days().seconds_per_unit;
    let clamp = |y: f64| scale.denormalize(y.clamp(0.0, 0.999_999)) * scale.seconds_per_unit / days;
    let pred_days: Vec<f64> = pred.iter().map(|&y| clamp(y)).collect();
    let truth_days: Vec<f64> = truth.iter().map(|&y| clamp(y)).collect();
    Ok(EvalReport::new(Task::Toe)
        .metric("rmse", rmse(&pred, &truth)?)
        .metric("baseline_rmse", baseline)
        .metric("rmse_days", rmse(&pred_days, &truth_days)?)
        .metric("instances", pos.len() as f64))
}

/// Mean normalized ToE of a corpus, the constant baseline predictor.
pub fn mean_delta(corpus: &Corpus, scale: &TimeScale) -> f64 {
    let p = positives(corpus, scale);
    p.iter().map(|x| x.delta).sum::<f64>() / p.len().max(1) as f64
}

/// Restricts the static-edge argmax to a random candidate subset that always
/// contains the true partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateSample {
    pub size: usize,
    pub seed: u64,
}

/// Argmax of `sigmoid(cos(r_q, r_c))` over all vertices except the query.
/// Ties go to the lowest index; zero-norm rows have cosine 0.
pub fn predict_partners(pos: &[Positive], table: &EmbeddingTable, sample: Option<CandidateSample>) -> Vec<usize> {
    let n = table.num_vertices();
    let real = table.as_mat().slice(s![..n, ..]);
    let norms: Array1<f64> = real.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let unit_all: Mat = Mat::from_shape_fn(real.raw_dim(), |(i, j)| if norms[i] > 0.0 { real[[i, j]] / norms[i] } else { 0.0 });
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    pos.par_chunks(512)
        .enumerate()
        .flat_map_iter(|(ci, chunk)| {
            let idx: Vec<usize> = chunk.iter().map(|p| p.query).collect();
            let q = unit_all.select(Axis(0), &idx);
            let scores = q.dot(&unit_all.t());
            let mut out = Vec::with_capacity(chunk.len());
            for (i, p) in chunk.iter().enumerate() {
                let row = scores.row(i);
                let candidates: Box<dyn Iterator<Item = usize>> = match sample {
                    Some(cs) if cs.size < n => {
                        let mut rng = ChaCha8Rng::seed_from_u64(cs.seed);
                        rng.set_stream((ci * 512 + i) as u64);
                        let mut c: Vec<usize> = (0..n).collect();
                        c.partial_shuffle(&mut rng, cs.size);
                        let mut c = c[..cs.size].to_vec();
                        if !c.contains(&p.partner) {
                            c[0] = p.partner;
                        }
                        c.sort_unstable();
                        Box::new(c.into_iter())
                    }
                    _ => Box::new(0..n),
                };
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for c in candidates {
                    if c == p.query {
                        continue;
                    }
                    let s = sigmoid(row[c]);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                out.push(if best.0 == usize::MAX { p.query } else { best.0 });
            }
            out
        })
        .collect()
}

pub fn static_edge_prediction(pos: &[Positive], table: &EmbeddingTable, sample: Option<CandidateSample>) -> Result<EvalReport> {
    let pred = predict_partners(pos, table, sample);
    let conf = ConfusionCounts::from_predictions(table.num_vertices(), pos.iter().zip(&pred).map(|(p, &c)| (p.partner, c)));
    let (micro, macro_) = micro_macro_f1(&conf)?;
    Ok(EvalReport::new(Task::Static)
        .metric("micro_f1", micro)
        .metric("macro_f1", macro_)
        .metric("chance", 1.0 / (table.num_vertices().max(2) - 1) as f64)
        .metric("instances", pos.len() as f64))
}

/// Precision at each threshold: partner argmax correct and ToE error within ε.
pub fn time_aware_edge_prediction(
    pos: &[Positive],
    table: &EmbeddingTable,
    w_toe: ArrayView1<f64>,
    thresholds: &[f64],
    sample: Option<CandidateSample>,
) -> Result<EvalReport> {
    if pos.is_empty() {
        return Err(Error::Empty("no positive edges to evaluate"));
    }
    let pred = predict_partners(pos, table, sample);
    let errors: Vec<Option<f64>> = pos
        .iter()
        .zip(&pred)
        .map(|(p, &c)| (c == p.partner).then(|| (predict_toe(table.row(p.query), table.row(c), w_toe) - p.delta).abs()))
        .collect();
    let accuracy = errors.iter().filter(|e| e.is_some()).count() as f64 / pos.len() as f64;
    let sweep: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&eps| {
            let hits = errors.iter().filter(|e| e.is_some_and(|d| d <= eps)).count();
            (eps, hits as f64 / pos.len() as f64)
        })
        .collect();
    let monotone = sweep.windows(2).all(|w| w[0].0 > w[1].0 || w[0].1 <= w[1].1);
    let mut r = EvalReport::new(Task::TimeAware)
        .metric("static_accuracy", accuracy)
        .metric("monotone", if monotone { 1.0 } else { 0.0 })
        .metric("instances", pos.len() as f64);
    r.sweep = sweep;
    Ok(r)
}

/// `(vertex, class index)` pairs.
pub type Labelled = Vec<(usize, usize)>;

/// Labelled vertices split into train and test, plus the sorted class names.
pub fn split_labels(graph: &DynamicGraph, test_fraction: f64, seed: u64) -> Result<(Labelled, Labelled, Vec<String>)> {
    let mut classes: Vec<String> = (0..graph.num_vertices())
        .filter_map(|v| graph.class_label(VertexId(v as u32)).map(str::to_owned))
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Config("vertex classification needs class labels".into()));
    }
    let mut labelled: Vec<(usize, usize)> = Vec::new();
    let mut skipped = 0;
    for v in 0..graph.num_vertices() {
        match graph.class_label(VertexId(v as u32)) {
            Some(c) => labelled.push((v, classes.binary_search_by(|x| x.as_str().cmp(c)).expect("collected"))),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        info!("{skipped} vertices without a class label skipped");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labelled.shuffle(&mut rng);
    let n_test = ((labelled.len() as f64) * test_fraction).round() as usize;
    let test = labelled.split_off(labelled.len() - n_test.min(labelled.len()));
    Ok((labelled, test, classes))
}

/// One-vs-rest ridge regression on `[r_v, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeClassifier {
    weights: DMatrix<f64>,
}

impl RidgeClassifier {
    pub fn fit(x: &[ArrayView1<f64>], y: &[usize], classes: usize, lambda: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Empty("no training vertices for classification"));
        }
        let d = x[0].len() + 1;
        let xm = DMatrix::from_fn(x.len(), d, |i, j| if j + 1 == d { 1.0 } else { x[i][j] });
        let ym = DMatrix::from_fn(x.len(), classes, |i, c| if y[i] == c { 1.0 } else { 0.0 });
        let mut gram = xm.transpose() * &xm;
        for i in 0..d - 1 {
            gram[(i, i)] += lambda;
        }
        gram[(d - 1, d - 1)] += 1e-9;
        let rhs = xm.transpose() * ym;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Config("classifier normal equations are singular".into()))?;
        Ok(Self { weights: chol.solve(&rhs) })
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let d = self.weights.nrows();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..self.weights.ncols() {
            let s: f64 = (0..d - 1).map(|j| x[j] * self.weights[(j, c)]).sum::<f64>() + self.weights[(d - 1, c)];
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    }
}

pub fn vertex_classification(
    train: &[(usize, usize)],
    test: &[(usize, usize)],
    classes: usize,
    table: &EmbeddingTable,
    lambda: f64,
) -> Result<EvalReport> {
    let x: Vec<ArrayView1<f64>> = train.iter().map(|&(v, _)| table.row(v)).collect();
    let y: Vec<usize> = train.iter().map(|&(_, c)| c).collect();
    let clf = RidgeClassifier::fit(&x, &y, classes, lambda)?;
    let conf = ConfusionCounts::from_predictions(classes, test.iter().map(|&(v, c)| (c, clf.predict(table.row(v)))));
    let (micro, macro_) = micro_macro_f1(&conf)?;
    let mut counts = vec![0usize; classes];
    for &(_, c) in test {
        counts[c] += 1;
    }
    let majority = *counts.iter().max().unwrap_or(&0) as f64 / test.len().max(1) as f64;
    Ok(EvalReport::new(Task::Classify)
        .metric("micro_f1", micro)
        .metric("macro_f1", macro_)
        .metric("majority_rate", majority)
        .metric("instances", test.len() as f64))
}
