//! Joint self-supervised objective, Adam, and the epoch loop.
//!
//! A batch is processed in three passes so that only one sequence's tape is
//! alive at a time: per-sequence forwards produce `r̂` values, one batch tape
//! over those values computes the structure stack, fusion and all losses, and
//! per-sequence re-forwards push the `r̂` gradients into the sequence
//! parameters.

use std::time::Instant;

use log::warn;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat, ParamKind, ParamSet, Tape, Var};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, VertexId};
use crate::model::{visibility_weights, Model};
use crate::sampler::{window_pairs, Corpus, EdgeSequence, WindowConfig, WindowPair};
use crate::time::TimeScale;

pub use crate::time::normalize_time;

/// Which loss terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub v: bool,
    /// Also switches the structure branch itself.
    pub s: bool,
    pub edg: bool,
    pub toe: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            v: true,
            s: true,
            edg: true,
            toe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Negatives per target for the self-identification loss; 0 = full softmax.
    pub neg_samples: usize,
    /// Negatives per positive edge; 0 = full softmax.
    pub edge_negatives: usize,
    pub window: WindowConfig,
    pub seed: u64,
    pub losses: LossSwitches,
    /// Checkpoint period in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            lr: 0.005,
            epochs: 10,
            neg_samples: 5,
            edge_negatives: 5,
            window: WindowConfig::default(),
            seed: 0,
            losses: LossSwitches::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let l = self.losses;
        if !(l.v || l.s || l.edg || l.toe) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        self.window.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub batch: usize,
    pub l_v: f64,
    pub l_s: f64,
    pub l_edg: f64,
    pub l_toe: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,batch,l_v,l_s,l_edg,l_toe,total,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.3}",
            self.epoch, self.batch, self.l_v, self.l_s, self.l_edg, self.l_toe, self.total, self.wall_ms
        )
    }

    fn is_finite(&self) -> bool {
        [self.l_v, self.l_s, self.l_edg, self.l_toe, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `R_v` as seen by the scoring losses: a tape matrix plus the row holding
/// each vertex. Rows written by the current batch are live fused outputs.
#[derive(Debug, Clone)]
pub struct Bank {
    pub var: Var,
    pub index: Vec<usize>,
}

impl Bank {
    /// A detached table, row `v` for vertex `v`.
    pub fn constant(t: &mut Tape, table: &Mat) -> Self {
        Self {
            var: t.constant(table.clone()),
            index: (0..table.nrows()).collect(),
        }
    }

    /// Stored rows overlaid with `live` rows; `(vertex, row of live)` pairs
    /// apply in order so the last write wins.
    pub fn overlaid(t: &mut Tape, table: &Mat, live: Var, writes: &[(usize, usize)]) -> Self {
        let stored = t.constant(table.clone());
        let offset = t.value(live).nrows();
        let mut index: Vec<usize> = (0..table.nrows()).map(|v| offset + v).collect();
        for &(v, row) in writes {
            index[v] = row;
        }
        Self {
            var: t.concat_rows(&[live, stored]),
            index,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.index.len() - 1
    }

    pub fn rows(&self, t: &mut Tape, vertices: &[usize]) -> Var {
        let idx: Vec<usize> = vertices.iter().map(|&v| self.index[v]).collect();
        t.select_rows(self.var, &idx)
    }
}

/// Self-identification: cross-entropy of each row of `r` scored against
/// `bank`. With `negatives`, candidates are the target followed by that row's
/// negatives; otherwise all `|V|` real rows.
pub fn self_id_loss(t: &mut Tape, r: Var, targets: &[usize], negatives: Option<&[Vec<u32>]>, bank: &Bank) -> Var {
    let n = bank.num_vertices();
    match negatives {
        Some(negs) if negs.first().is_some_and(|row| !row.is_empty()) => {
            let rows: Vec<Vec<usize>> = std::iter::once(targets.to_vec())
                .chain((0..negs[0].len()).map(|c| negs.iter().map(|row| row[c] as usize).collect()))
                .collect();
            let logits = candidate_scores(t, r, &rows, bank);
            t.cross_entropy(logits, &vec![0; targets.len()])
        }
        Some(_) => {
            let zero = t.constant(Mat::zeros((1, 1)));
            t.scale(zero, 1.0)
        }
        None => {
            let all: Vec<usize> = (0..n).collect();
            let real = bank.rows(t, &all);
            let logits = t.matmul_t(r, real);
            t.cross_entropy(logits, targets)
        }
    }
}

/// Column `c` holds `r_i · R_v[rows[c][i]]`.
fn candidate_scores(t: &mut Tape, r: Var, rows: &[Vec<usize>], bank: &Bank) -> Var {
    let cols: Vec<Var> = rows
        .iter()
        .map(|idx| {
            let c = bank.rows(t, idx);
            let m = t.mul(r, c);
            t.sum_cols(m)
        })
        .collect();
    t.concat_cols(&cols)
}

/// Mean squared error of `w_sᵀ(r̂_t + r̂_t') - Δ` over window pairs.
pub fn interval_loss(t: &mut Tape, rs: Var, pairs: &[WindowPair], w_s: Var) -> Var {
    if pairs.is_empty() {
        warn!("no structure pairs in batch; interval loss is zero");
        let zero = t.constant(Mat::zeros((1, 1)));
        return t.scale(zero, 1.0);
    }
    let later: Vec<usize> = pairs.iter().map(|p| p.later).collect();
    let earlier: Vec<usize> = pairs.iter().map(|p| p.earlier).collect();
    let a = t.select_rows(rs, &later);
    let b = t.select_rows(rs, &earlier);
    let sum = t.add(a, b);
    let pred = t.matmul(sum, w_s);
    let target = t.constant(Mat::from_shape_fn((pairs.len(), 1), |(i, _)| pairs[i].delta));
    let diff = t.sub(pred, target);
    let sq = t.mul(diff, diff);
    let total = t.sum_all(sq);
    t.scale(total, 1.0 / pairs.len() as f64)
}

/// Edge reconstruction: the true partner's score `q·p` against sampled
/// negatives, or against every other vertex when `negatives` is `None`.
pub fn edge_loss(
    t: &mut Tape,
    q: Var,
    p: Var,
    queries: &[usize],
    partners: &[usize],
    negatives: Option<&[Vec<u32>]>,
    bank: &Bank,
) -> Var {
    let n = bank.num_vertices();
    let qp = t.mul(q, p);
    let pos = t.sum_cols(qp);
    let rest = match negatives {
        Some(negs) => {
            let width = negs.first().map_or(0, |r| r.len());
            let rows: Vec<Vec<usize>> = (0..width)
                .map(|c| negs.iter().map(|row| row[c] as usize).collect())
                .collect();
            (width > 0).then(|| candidate_scores(t, q, &rows, bank))
        }
        None => {
            let all: Vec<usize> = (0..n).collect();
            let real = bank.rows(t, &all);
            let all = t.matmul_t(q, real);
            let mut mask = Mat::zeros((queries.len(), n));
            for (i, (&a, &b)) in queries.iter().zip(partners).enumerate() {
                mask[[i, a]] = f64::NEG_INFINITY;
                mask[[i, b]] = f64::NEG_INFINITY;
            }
            let mask = t.constant(mask);
            Some(t.add(all, mask))
        }
    };
    let logits = match rest {
        Some(r) => t.concat_cols(&[pos, r]),
        None => pos,
    };
    t.cross_entropy(logits, &vec![0; queries.len()])
}

/// `Σ (w_ToEᵀ(r_i + r_j) - δ)² / (2 m̂)`.
pub fn toe_loss(t: &mut Tape, q: Var, p: Var, deltas: &[f64], w: Var) -> Var {
    let sum = t.add(q, p);
    let pred = t.matmul(sum, w);
    let target = t.constant(Mat::from_shape_vec((deltas.len(), 1), deltas.to_vec()).expect("column"));
    let diff = t.sub(pred, target);
    let sq = t.mul(diff, diff);
    let total = t.sum_all(sq);
    t.scale(total, 0.5 / deltas.len().max(1) as f64)
}

/// Random choices for one batch, fixed up front so the batch loss is a pure
/// function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub seqs: Vec<usize>,
    /// `[seq][position][c]` negatives for self-identification.
    pub v_negs: Vec<Vec<Vec<u32>>>,
    /// `[seq][edge][c]` negatives for the edge at positions `(i, i+1)`.
    pub e_negs: Vec<Vec<Vec<u32>>>,
    pub dropout_seeds: Vec<u64>,
    pub structure_seed: u64,
    pub pairs: Vec<WindowPair>,
    pub train: bool,
}

fn draw_other(rng: &mut ChaCha8Rng, n: usize, avoid: usize) -> u32 {
    let v = rng.random_range(0..n - 1);
    (if v >= avoid { v + 1 } else { v }) as u32
}

fn draw_non_adjacent(rng: &mut ChaCha8Rng, graph: &DynamicGraph, query: usize, partner: usize) -> u32 {
    let n = graph.num_vertices();
    for _ in 0..64 {
        let v = draw_other(rng, n, query);
        if v as usize != partner && !graph.are_adjacent(VertexId(query as u32), VertexId(v)) {
            return v;
        }
    }
    draw_other(rng, n, query)
}

#[allow(clippy::too_many_arguments)]
pub fn plan_batch(
    graph: &DynamicGraph,
    corpus: &Corpus,
    seqs: std::ops::Range<usize>,
    cfg: &TrainConfig,
    scale: &TimeScale,
    epoch: usize,
    batch: usize,
    train: bool,
) -> BatchPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    let n = graph.num_vertices();
    let v_k = if n > 1 { cfg.neg_samples } else { 0 };
    let e_k = if n > 1 { cfg.edge_negatives } else { 0 };
    let mut v_negs = Vec::with_capacity(seqs.len());
    let mut e_negs = Vec::with_capacity(seqs.len());
    let mut dropout_seeds = Vec::with_capacity(seqs.len());
    for i in seqs.clone() {
        let seq = &corpus.sequences[i];
        let real = seq.real_steps();
        v_negs.push(
            real.iter()
                .map(|st| (0..v_k).map(|_| draw_other(&mut rng, n, st.vertex as usize)).collect())
                .collect(),
        );
        e_negs.push(
            real.windows(2)
                .map(|w| {
                    (0..e_k)
                        .map(|_| draw_non_adjacent(&mut rng, graph, w[0].vertex as usize, w[1].vertex as usize))
                        .collect()
                })
                .collect(),
        );
        dropout_seeds.push(rng.random());
    }
    let starts: Vec<i64> = seqs.clone().map(|i| corpus.sequences[i].start_time).collect();
    BatchPlan {
        pairs: window_pairs(&starts, &cfg.window, scale),
        seqs: seqs.collect(),
        v_negs,
        e_negs,
        dropout_seeds,
        structure_seed: rng.random(),
        train,
    }
}

pub struct BatchResult {
    pub report: LossReport,
    pub grads: Option<Grads>,
    /// Fused representations in sequence-then-position order.
    pub fused: Vec<(usize, Array1<f64>)>,
}

fn dropout_rng(model: &Model, plan: &BatchPlan, seed: u64) -> Option<ChaCha8Rng> {
    (plan.train && model.cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed))
}

/// Joint loss of one batch and, optionally, its parameter gradients.
pub fn batch_loss(
    model: &Model,
    table: &EmbeddingTable,
    corpus: &Corpus,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<BatchResult> {
    let seqs: Vec<&EdgeSequence> = plan.seqs.iter().map(|&i| &corpus.sequences[i]).collect();
    let k = model.cfg.k;
    let ell = model.cfg.max_len;
    let scale = model.cfg.time_scale;
    let tab = table.as_mat();
    let on = cfg.losses;
    let structure_on = model.cfg.structure && on.s;

    let rhats: Vec<Mat> = seqs
        .par_iter()
        .enumerate()
        .map(|(b, seq)| {
            let mut t = Tape::new(&model.params);
            let mut rng = dropout_rng(model, plan, plan.dropout_seeds[b]);
            let out = model.forward_sequence(&mut t, seq, rng.as_mut());
            t.value(out.rhat).clone()
        })
        .collect();

    let mut t = Tape::new(&model.params);
    let rin: Vec<Var> = rhats.iter().map(|r| t.input(r.clone())).collect();
    let mut terms: Vec<Var> = Vec::new();
    let mut values = [0.0; 4];

    let max_real = seqs.iter().map(|s| s.real_len).max().unwrap_or(0);
    let mut rs_at: Vec<Option<Var>> = vec![None; ell];
    if structure_on {
        let mut srng = dropout_rng(model, plan, plan.structure_seed);
        for (i, slot) in rs_at.iter_mut().enumerate() {
            if i >= max_real && i != ell - 1 {
                continue;
            }
            let w = visibility_weights(ell, i);
            let rows: Vec<Var> = rin
                .iter()
                .map(|&r| {
                    let wv = t.constant(w.clone());
                    t.matmul(wv, r)
                })
                .collect();
            let hs = t.concat_rows(&rows);
            *slot = Some(model.structure(&mut t, hs, srng.as_mut()));
        }
        let w_s = t.param(model.head_s());
        let l = interval_loss(&mut t, rs_at[ell - 1].expect("full visibility pass"), &plan.pairs, w_s);
        values[1] = t.scalar(l);
        terms.push(l);
    }

    // Fused rows, grouped by position; `row_of[b][i]` indexes into `fused_all`.
    let mut fused_parts = Vec::new();
    let mut row_of = vec![vec![0usize; ell]; seqs.len()];
    let mut next = 0;
    for i in 0..max_real {
        let active: Vec<usize> = (0..seqs.len()).filter(|&b| seqs[b].real_len > i).collect();
        let rv_rows: Vec<Var> = active.iter().map(|&b| t.slice_rows(rin[b], i, 1)).collect();
        let rv = t.concat_rows(&rv_rows);
        let rs = match rs_at[i] {
            Some(all) => t.select_rows(all, &active),
            None => t.constant(Mat::zeros((active.len(), k))),
        };
        fused_parts.push(model.fuse(&mut t, rv, rs));
        for &b in &active {
            row_of[b][i] = next;
            next += 1;
        }
    }
    let fused_all = t.concat_rows(&fused_parts);
    let mut writes = Vec::with_capacity(next);
    for (b, seq) in seqs.iter().enumerate() {
        for (i, st) in seq.real_steps().iter().enumerate() {
            writes.push((st.vertex as usize, row_of[b][i]));
        }
    }
    let bank = Bank::overlaid(&mut t, tab, fused_all, &writes);

    if on.v {
        let parts: Vec<Var> = seqs
            .iter()
            .zip(&rin)
            .map(|(s, &r)| t.slice_rows(r, 0, s.real_len))
            .collect();
        let r_all = t.concat_rows(&parts);
        let targets: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.real_steps().iter().map(|st| st.vertex as usize))
            .collect();
        let negs: Vec<Vec<u32>> = plan.v_negs.iter().flatten().cloned().collect();
        let full = cfg.neg_samples == 0;
        let l = self_id_loss(&mut t, r_all, &targets, (!full).then_some(negs.as_slice()), &bank);
        values[0] = t.scalar(l);
        terms.push(l);
    }


    if on.edg || on.toe {
        let mut q_idx = Vec::new();
        let mut p_idx = Vec::new();
        let mut queries = Vec::new();
        let mut partners = Vec::new();
        let mut deltas = Vec::new();
        let mut negs = Vec::new();
        for (b, seq) in seqs.iter().enumerate() {
            for (i, (a, c)) in seq.pairs().enumerate() {
                q_idx.push(row_of[b][i]);
                p_idx.push(row_of[b][i + 1]);
                queries.push(a.vertex as usize);
                partners.push(c.vertex as usize);
                deltas.push(scale.normalize(c.toe));
                negs.push(plan.e_negs[b][i].clone());
            }
        }
        let q = t.select_rows(fused_all, &q_idx);
        let p = t.select_rows(fused_all, &p_idx);
        if on.edg {
            let full = cfg.edge_negatives == 0;
            let l = edge_loss(&mut t, q, p, &queries, &partners, (!full).then_some(negs.as_slice()), &bank);
            values[2] = t.scalar(l);
            terms.push(l);
        }
        if on.toe {
            let w = t.param(model.head_toe());
            let l = toe_loss(&mut t, q, p, &deltas, w);
            values[3] = t.scalar(l);
            terms.push(l);
        }
    }

    let total_var = terms[1..].iter().fold(terms[0], |acc, &x| t.add(acc, x));
    let fused_value = t.value(fused_all).clone();
    let report = LossReport {
        epoch: 0,
        batch: 0,
        l_v: values[0],
        l_s: values[1],
        l_edg: values[2],
        l_toe: values[3],
        total: values.iter().sum(),
        wall_ms: 0.0,
    };

    let grads = if with_grads && report.is_finite() {
        let mut grads = Grads::new(&model.params);
        let d_rhat = t.backward(&[(total_var, Mat::ones((1, 1)))], &mut grads, &rin)?;
        drop(t);
        for (b, seq) in seqs.iter().enumerate() {
            let mut tape = Tape::new(&model.params);
            let mut rng = dropout_rng(model, plan, plan.dropout_seeds[b]);
            let out = model.forward_sequence(&mut tape, seq, rng.as_mut());
            debug_assert_eq!(tape.value(out.rhat), &rhats[b]);
            tape.backward(&[(out.rhat, d_rhat[b].clone())], &mut grads, &[])?;
        }
        Some(grads)
    } else {
        None
    };

    let fused = writes
        .iter()
        .map(|&(v, row)| (v, fused_value.row(row).to_owned()))
        .collect();
    Ok(BatchResult { report, grads, fused })
}

/// Adam with lazily updated table rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for id in params.ids() {
            let shape = params.value(id).raw_dim();
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(shape));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(shape));
            let value = params.value_mut(id);
            match params_kind(grads, id.0) {
                ParamKind::Dense => {
                    let Some(g) = &grads.dense[id.0] else { continue };
                    ndarray::Zip::from(value)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
                ParamKind::Table => {
                    for (&r, g) in &grads.rows[id.0] {
                        ndarray::Zip::from(value.row_mut(r))
                            .and(m.row_mut(r))
                            .and(v.row_mut(r))
                            .and(g)
                            .for_each(|p, m, v, &g| update(p, m, v, g));
                    }
                }
            }
        }
    }
}

fn params_kind(grads: &Grads, i: usize) -> ParamKind {
    if grads.rows[i].is_empty() {
        ParamKind::Dense
    } else {
        ParamKind::Table
    }
}

/// Everything the optimizer mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub table: EmbeddingTable,
    pub adam: Adam,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: Model, table: EmbeddingTable, lr: f64) -> Self {
        Self {
            model,
            table,
            adam: Adam::new(lr),
            epochs_done: 0,
        }
    }
}

/// Batch boundaries over a start-time ordered corpus.
pub fn batches(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..len)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(len))
        .collect()
}

/// Runs `cfg.epochs` epochs, calling `after_epoch` with the state and that
/// epoch's reports. On a non-finite loss the state is left as it was before
/// the failing batch.
pub fn train(
    graph: &DynamicGraph,
    corpus: &Corpus,
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&TrainState, &[LossReport]) -> Result<()>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus is empty"));
    }
    if corpus.max_len != state.model.cfg.max_len {
        return Err(Error::Config(format!(
            "corpus max_len {} differs from model max_len {}",
            corpus.max_len, state.model.cfg.max_len
        )));
    }
    let mut all = Vec::new();
    for _ in 0..cfg.epochs {
        let epoch = state.epochs_done;
        let mut reports = Vec::new();
        for (bi, range) in batches(corpus.len(), cfg.batch_size).into_iter().enumerate() {
            let started = Instant::now();
            let plan = plan_batch(graph, corpus, range, cfg, &state.model.cfg.time_scale, epoch, bi, true);
            let res = batch_loss(&state.model, &state.table, corpus, &plan, cfg, true)?;
            let mut report = res.report;
            report.epoch = epoch;
            report.batch = bi;
            if !report.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = res.grads.expect("finite loss has gradients");
            state.adam.step(&mut state.model.params, &grads);
            for (v, row) in &res.fused {
                state.table.set_row(*v, row.view());
            }
            report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
            reports.push(report);
        }
        state.epochs_done += 1;
        after_epoch(state, &reports)?;
        all.extend(reports);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sampler::{CorpusRole, Step};

    fn hand_ce(scores: &[f64], target: usize) -> f64 {
        let lse = scores.iter().map(|s| s.exp()).sum::<f64>().ln();
        lse - scores[target]
    }

    #[test]
    fn self_id_three_vertex_hand_calculation() {
        let table = Mat::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 9.0, 9.0]).unwrap();
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let r = t.input(Mat::from_shape_vec((2, 2), vec![0.5, 0.2, -0.3, 0.8]).unwrap());
        let bank = Bank::constant(&mut t, &table);
        let full = self_id_loss(&mut t, r, &[0, 2], None, &bank);
        let want = (hand_ce(&[0.5, 0.2, -0.3], 0) + hand_ce(&[-0.3, 0.8, 1.1], 2)) / 2.0;
        assert!((t.scalar(full) - want).abs() < 1e-10);

        let negs = vec![vec![1u32], vec![0u32]];
        let sampled = self_id_loss(&mut t, r, &[0, 2], Some(&negs), &bank);
        let want = (hand_ce(&[0.5, 0.2], 0) + hand_ce(&[1.1, -0.3], 0)) / 2.0;
        assert!((t.scalar(sampled) - want).abs() < 1e-10);
    }

    #[test]
    fn uniform_scores_give_log_c() {
        let table = Mat::zeros((6, 3));
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let r = t.input(Mat::ones((1, 3)));
        let bank = Bank::constant(&mut t, &table);
        let l = self_id_loss(&mut t, r, &[2], None, &bank);
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    fn window_pair(later: usize, earlier: usize, delta: f64) -> WindowPair {
        WindowPair { later, earlier, delta }
    }

    #[test]
    fn interval_loss_cases() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let rs = t.input(Mat::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.1));
        let w0 = t.input(Mat::zeros((2, 1)));
        let pairs: Vec<WindowPair> = (0..4)
            .flat_map(|a| (0..a).map(move |b| window_pair(a, b, 0.5)))
            .collect();
        assert_eq!(pairs.len(), 6);
        let l = interval_loss(&mut t, rs, &pairs, w0);
        assert!((t.scalar(l) - 0.25).abs() < 1e-15);

        let w = t.input(Mat::from_shape_vec((2, 1), vec![0.7, -0.2]).unwrap());
        let pairs: Vec<WindowPair> = (0..4)
            .flat_map(|a| (0..a).map(move |b| window_pair(a, b, 0.1 * (a + b) as f64)))
            .collect();
        let l = interval_loss(&mut t, rs, &pairs, w);
        let rsv = t.value(rs).clone();
        let brute = pairs
            .iter()
            .map(|pp| {
                let pred: f64 = (0..2).map(|j| (rsv[[pp.later, j]] + rsv[[pp.earlier, j]]) * [0.7, -0.2][j]).sum();
                (pred - pp.delta).powi(2)
            })
            .sum::<f64>()
            / 6.0;
        assert!((t.scalar(l) - brute).abs() < 1e-14);
    }

    #[test]
    fn edge_and_toe_hand_calculation() {
        let table = Mat::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0, 0.0]).unwrap();
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let q = t.input(Mat::from_shape_vec((1, 2), vec![0.4, -0.6]).unwrap());
        let pp = t.input(Mat::from_shape_vec((1, 2), vec![0.2, 0.3]).unwrap());
        let w = t.input(Mat::from_shape_vec((2, 1), vec![1.0, 0.5]).unwrap());
        let bank = Bank::constant(&mut t, &table);
        let edg = edge_loss(&mut t, q, pp, &[0], &[1], None, &bank);
        let pos = 0.4 * 0.2 - 0.6 * 0.3;
        let want_edg = hand_ce(&[pos, 0.4 * 0.5 - 0.6 * 0.5], 0);
        assert!((t.scalar(edg) - want_edg).abs() < 1e-10);
        let delta = 0.3;
        let toe = toe_loss(&mut t, q, pp, &[delta], w);
        let pred = 0.6 * 1.0 + (-0.3) * 0.5;
        let want_toe = (pred - delta).powi(2) / 2.0;
        assert!((t.scalar(toe) - want_toe).abs() < 1e-10);

        let exact = toe_loss(&mut t, q, pp, &[pred], w);
        assert!(t.scalar(exact) < 1e-30);
    }

    #[test]
    fn toe_head_gradient_is_row_sum() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let q = t.input(Mat::from_shape_vec((1, 3), vec![0.1, 0.2, 0.3]).unwrap());
        let pp = t.input(Mat::from_shape_vec((1, 3), vec![1.0, -1.0, 0.5]).unwrap());
        let w = t.input(Mat::from_shape_vec((3, 1), vec![0.3, 0.1, -0.4]).unwrap());
        let sum = t.add(q, pp);
        let pred = t.matmul(sum, w);
        let g = t.backward(&[(pred, Mat::ones((1, 1)))], &mut Grads::new(&p), &[w]).unwrap();
        assert_eq!(g[0].column(0).to_vec(), vec![1.1, -0.8, 0.8]);
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut p = ParamSet::new();
        let id = p.add("w", ParamKind::Dense, Mat::from_elem((2, 2), 0.3));
        let tab = p.add("t", ParamKind::Table, Mat::from_elem((3, 2), -0.1));
        let before = p.clone();
        let mut g = Grads::new(&p);
        g.dense[id.0] = Some(Mat::from_elem((2, 2), 5.0));
        g.rows[tab.0].insert(1, Array1::from_elem(2, -2.0));
        let mut adam = Adam::new(0.0);
        adam.step(&mut p, &g);
        assert_eq!(p, before);
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g);
        assert!((p.value(id)[[0, 0]] - 0.2).abs() < 1e-9);
        assert_eq!(p.value(tab).row(0), before.value(tab).row(0));
        assert!((p.value(tab)[[1, 0]] - 0.0).abs() < 1e-9);
    }

    fn toy_setup() -> (DynamicGraph, Corpus, Model, EmbeddingTable) {
        let g = DynamicGraph::from_labelled_rows(&[
            ("a", "b", 10, 1.0),
            ("b", "c", 20, 1.0),
            ("c", "d", 30, 1.0),
            ("d", "e", 40, 1.0),
        ]);
        let seq = |id: u64, vs: &[u32], t0: i64| {
            let walked = vs
                .iter()
                .enumerate()
                .map(|(i, &v)| Step {
                    vertex: v,
                    tov: t0 + 86_400 * i as i64,
                    toe: if i == 0 { 0 } else { 3_600 * i as i64 },
                    edge: None,
                })
                .collect();
            EdgeSequence::from_steps(id, walked, 3, 5)
        };
        let corpus = Corpus {
            sequences: vec![seq(0, &[0, 1, 2], 0), seq(1, &[1, 2], 100), seq(2, &[2, 3, 4], 200)],
            role: CorpusRole::Train,
            num_vertices: 5,
            max_len: 3,
        };
        let table = EmbeddingTable::random(5, 4, 2);
        let cfg = ModelConfig {
            k: 4,
            heads: 2,
            blocks: 1,
            max_len: 3,
            dropout: 0.0,
            seed: 3,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, table.as_mat()).unwrap();
        (g, corpus, model, table)
    }

    #[test]
    fn report_is_additive_and_structure_switch_zeroes_its_gradients() {
        let (g, corpus, model, table) = toy_setup();
        let cfg = TrainConfig {
            window: WindowConfig { len: 2, step: 1 },
            ..TrainConfig::default()
        };
        let plan = plan_batch(&g, &corpus, 0..3, &cfg, &model.cfg.time_scale, 0, 0, true);
        let res = batch_loss(&model, &table, &corpus, &plan, &cfg, true).unwrap();
        let r = &res.report;
        assert!((r.total - (r.l_v + r.l_s + r.l_edg + r.l_toe)).abs() < 1e-12);
        let grads = res.grads.unwrap();
        assert!(!grads.is_zero(model.head_s()));

        let mut off = cfg.clone();
        off.losses.s = false;
        let res = batch_loss(&model, &table, &corpus, &plan, &off, true).unwrap();
        assert_eq!(res.report.l_s, 0.0);
        let grads = res.grads.unwrap();
        for id in model.params.ids() {
            if model.is_structure_param(id) {
                assert!(grads.is_zero(id), "{}", model.params.name(id));
            }
        }

        let mut no_toe = cfg.clone();
        no_toe.losses.toe = false;
        let res = batch_loss(&model, &table, &corpus, &plan, &no_toe, true).unwrap();
        assert!(res.grads.unwrap().is_zero(model.head_toe()));
    }

    #[test]
    fn untouched_rows_stay_bit_identical() {
        let (g, corpus, model, table) = toy_setup();
        let small = corpus.truncated(2);
        let mut state = TrainState::new(model, table.clone(), 0.005);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            window: WindowConfig { len: 2, step: 1 },
            ..TrainConfig::default()
        };
        let reports = train(&g, &small, &mut state, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(reports.len(), 2);
        for v in [3usize, 4, 5] {
            assert_eq!(state.table.row(v), table.row(v));
        }
        assert_ne!(state.table.row(0), table.row(0));
    }

    #[test]
    fn empty_corpus_rejected() {
        let (g, corpus, model, table) = toy_setup();
        let mut state = TrainState::new(model, table, 0.005);
        let empty = corpus.truncated(0);
        assert!(train(&g, &empty, &mut state, &TrainConfig::default(), |_, _| Ok(())).is_err());
    }

    #[test]
    fn batch_boundaries() {
        assert_eq!(batches(5, 2), vec![0..2, 2..4, 4..5]);
        assert!(batches(0, 3).is_empty());
    }
}
