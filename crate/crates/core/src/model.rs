//! The embedding network: a time-aware LSTM over each edge sequence, a masked
//! encoder/decoder on top of it, an unmasked structure stack over batches of
//! sequences, and the fusion head.
//!
//! Row-vector convention throughout: a linear layer is `x W + b`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{causal_mask, Mat, ParamId, ParamKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::sampler::EdgeSequence;
use crate::time::TimeScale;

/// What the t-LSTM decay sees as the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayInput {
    Normalized,
    RawSeconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Maximum real vertices per sequence `ℓ`; sequences have `ℓ + 1` slots.
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
    pub decay: DecayInput,
    /// Structure branch on; when off the structure embedding is zero.
    pub structure: bool,
    pub time_scale: TimeScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 128,
            heads: 8,
            blocks: 6,
            max_len: 5,
            dropout: 0.1,
            seed: 0,
            decay: DecayInput::Normalized,
            structure: true,
            time_scale: TimeScale::days(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.heads == 0 || self.blocks == 0 {
            return Err(Error::Config("k, heads and blocks must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.time_scale.seconds_per_unit.is_nan() || self.time_scale.seconds_per_unit <= 0.0 {
            return Err(Error::Config("time unit must be positive".into()));
        }
        Ok(())
    }

    /// Padded slots per sequence, `ℓ + 1`.
    pub fn slots(&self) -> usize {
        self.max_len + 1
    }

    fn wide(&self) -> usize {
        self.heads * self.k
    }
}

/// Outputs of one sequence's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SeqOutput {
    /// t-LSTM states, `(ℓ + 2) × k` (all slots plus one trailing EOS step).
    pub hidden: Var,
    pub encoded: Var,
    /// Edge-formation embeddings, one row per slot.
    pub rhat: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    num_vertices: usize,
    input_table: ParamId,
    head_toe: ParamId,
    head_s: ParamId,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn weight(&mut self, rows: usize, cols: usize) -> Mat {
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
        Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut self.rng))
    }

    fn bias(&mut self, cols: usize) -> Mat {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Array2::from_shape_fn((1, cols), |_| normal.sample(&mut self.rng))
    }
}

fn add_ln(params: &mut ParamSet, prefix: &str, width: usize) {
    params.add(format!("{prefix}.g"), ParamKind::Dense, Mat::ones((1, width)));
    params.add(format!("{prefix}.b"), ParamKind::Dense, Mat::zeros((1, width)));
}

fn add_ffn(params: &mut ParamSet, init: &mut Init, prefix: &str, wide: usize, k: usize) {
    params.add(format!("{prefix}.w1"), ParamKind::Dense, init.weight(wide, wide));
    params.add(format!("{prefix}.b1"), ParamKind::Dense, init.bias(wide));
    params.add(format!("{prefix}.w2"), ParamKind::Dense, init.weight(wide, k));
    params.add(format!("{prefix}.b2"), ParamKind::Dense, init.bias(k));
    add_ln(params, &format!("{prefix}.ln2"), k);
}

fn add_attention(params: &mut ParamSet, init: &mut Init, prefix: &str, q_in: usize, kv_in: usize, wide: usize) {
    params.add(format!("{prefix}.wq"), ParamKind::Dense, init.weight(q_in, wide));
    params.add(format!("{prefix}.wk"), ParamKind::Dense, init.weight(kv_in, wide));
    params.add(format!("{prefix}.wv"), ParamKind::Dense, init.weight(kv_in, wide));
    add_ln(params, &format!("{prefix}.ln1"), wide);
}

impl Model {
    /// Fresh parameters; the input table starts as a copy of `initial`
    /// (`(|V| + 1) × k`, EOS last).
    pub fn new(cfg: ModelConfig, initial: &Mat) -> Result<Self> {
        cfg.validate()?;
        let (rows, k) = initial.dim();
        if k != cfg.k || rows == 0 {
            return Err(Error::Embedding(format!(
                "initial table is {rows}x{k}, expected (|V|+1)x{}",
                cfg.k
            )));
        }
        let wide = cfg.wide();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let mut p = ParamSet::new();
        let input_table = p.add("x", ParamKind::Table, initial.clone());

        p.add("lstm.wd", ParamKind::Dense, init.weight(k, k));
        p.add("lstm.bd", ParamKind::Dense, init.bias(k));
        // Gate columns in order f, g, o, c.
        p.add("lstm.w", ParamKind::Dense, init.weight(k, 4 * k));
        p.add("lstm.u", ParamKind::Dense, init.weight(k, 4 * k));
        p.add("lstm.b", ParamKind::Dense, init.bias(4 * k));

        for b in 0..cfg.blocks {
            let pre = format!("enc.{b}");
            add_attention(&mut p, &mut init, &pre, k, k, wide);
            add_ffn(&mut p, &mut init, &pre, wide, k);
        }
        for b in 0..cfg.blocks {
            let pre = format!("dec.{b}");
            add_attention(&mut p, &mut init, &format!("{pre}.self"), k, k, wide);
            add_attention(&mut p, &mut init, &format!("{pre}.cross"), wide, k, wide);
            add_ffn(&mut p, &mut init, &pre, wide, k);
        }
        for b in 0..cfg.blocks {
            let pre = format!("st.{b}");
            add_attention(&mut p, &mut init, &pre, k, k, wide);
            add_ffn(&mut p, &mut init, &pre, wide, k);
        }
        p.add("fuse.w7", ParamKind::Dense, init.weight(k, k));
        p.add("fuse.b7", ParamKind::Dense, init.bias(k));
        p.add("fuse.w8", ParamKind::Dense, init.weight(k, k));
        p.add("fuse.b8", ParamKind::Dense, init.bias(k));
        add_ln(&mut p, "fuse.ln", k);
        let head_toe = p.add("head.toe", ParamKind::Dense, init.weight(k, 1));
        let head_s = p.add("head.s", ParamKind::Dense, init.weight(k, 1));

        Ok(Self {
            cfg,
            params: p,
            num_vertices: rows - 1,
            input_table,
            head_toe,
            head_s,
        })
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let template = Self::new(cfg.clone(), &Mat::zeros((1, cfg.k)))?;
        for id in template.params.ids() {
            let name = template.params.name(id);
            let got = params
                .id(name)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    message: format!("missing parameter {name}"),
                })?;
            let (want, have) = (template.params.value(id).dim(), params.value(got).dim());
            let table = name == "x";
            if (table && want.1 != have.1) || (!table && want != have) {
                return Err(Error::Format {
                    what: "checkpoint",
                    message: format!("parameter {name} has shape {have:?}, expected {want:?}"),
                });
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                message: "unexpected extra parameters".into(),
            });
        }
        let input_table = params.id("x").expect("checked");
        let num_vertices = params.value(input_table).nrows() - 1;
        Ok(Self {
            head_toe: params.id("head.toe").expect("checked"),
            head_s: params.id("head.s").expect("checked"),
            cfg,
            params,
            num_vertices,
            input_table,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn eos(&self) -> usize {
        self.num_vertices
    }

    pub fn input_table(&self) -> ParamId {
        self.input_table
    }

    pub fn head_toe(&self) -> ParamId {
        self.head_toe
    }

    pub fn head_s(&self) -> ParamId {
        self.head_s
    }

    /// Whether a parameter belongs to the structure stack or its head.
    pub fn is_structure_param(&self, id: ParamId) -> bool {
        let name = self.params.name(id);
        name.starts_with("st.") || name == "head.s"
    }

    fn decay_input(&self, toe: i64) -> f64 {
        match self.cfg.decay {
            DecayInput::Normalized => self.cfg.time_scale.normalize(toe),
            DecayInput::RawSeconds => toe.max(0) as f64,
        }
    }

    /// One t-LSTM transition. `prev` is `None` for a fresh cell.
    pub fn tlstm_step(&self, t: &mut Tape, x_proj: Var, prev: Option<(Var, Var)>, delta: f64) -> (Var, Var) {
        let k = self.cfg.k;
        let b = t.named("lstm.b");
        let mut pre = t.add_row(x_proj, b);
        let mut c_tilde = None;
        if let Some((h_prev, c_prev)) = prev {
            let u = t.named("lstm.u");
            let hu = t.matmul(h_prev, u);
            pre = t.add(pre, hu);
            c_tilde = Some(if delta == 0.0 {
                c_prev
            } else {
                self.decay(t, c_prev, delta)
            });
        }
        let f = t.slice_cols(pre, 0, k);
        let f = t.sigmoid(f);
        let g = t.slice_cols(pre, k, k);
        let g = t.sigmoid(g);
        let o = t.slice_cols(pre, 2 * k, k);
        let o = t.sigmoid(o);
        let cand = t.slice_cols(pre, 3 * k, k);
        let cand = t.sigmoid(cand);
        let fresh = t.mul(g, cand);
        let c = match c_tilde {
            Some(ct) => {
                let kept = t.mul(f, ct);
                t.add(kept, fresh)
            }
            None => fresh,
        };
        let tc = t.tanh(c);
        let h = t.mul(o, tc);
        (h, c)
    }

    /// `(c - c^S) + c^S / ln(e + δ)` with `c^S = tanh(c W_d + b_d)`.
    pub fn decay(&self, t: &mut Tape, c: Var, delta: f64) -> Var {
        let wd = t.named("lstm.wd");
        let bd = t.named("lstm.bd");
        let cw = t.matmul(c, wd);
        let cw = t.add_row(cw, bd);
        let short = t.tanh(cw);
        let long = t.sub(c, short);
        let damped = t.scale(short, 1.0 / (std::f64::consts::E + delta).ln());
        t.add(long, damped)
    }

    /// t-LSTM over the sequence slots plus one trailing EOS step.
    pub fn tlstm(&self, t: &mut Tape, seq: &EdgeSequence) -> Var {
        let mut ids: Vec<usize> = seq.steps.iter().map(|s| s.vertex as usize).collect();
        ids.push(self.eos());
        let mut deltas: Vec<f64> = seq.steps.iter().map(|s| self.decay_input(s.toe)).collect();
        deltas.push(0.0);
        deltas[0] = 0.0;
        let x = t.gather(self.input_table, &ids);
        let w = t.named("lstm.w");
        let xw = t.matmul(x, w);
        let mut state = None;
        let mut rows = Vec::with_capacity(ids.len());
        for (i, &delta) in deltas.iter().enumerate() {
            let xi = t.slice_rows(xw, i, 1);
            let (h, c) = self.tlstm_step(t, xi, state, delta);
            rows.push(h);
            state = Some((h, c));
        }
        t.concat_rows(&rows)
    }

    fn heads_attention(&self, t: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Mat>) -> Var {
        let d = self.cfg.k;
        let scale = 1.0 / (d as f64).sqrt();
        let mut zs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = t.slice_cols(q, h * d, d);
            let kh = t.slice_cols(k, h * d, d);
            let vh = t.slice_cols(v, h * d, d);
            let s = t.matmul_t(qh, kh);
            let s = t.scale(s, scale);
            let a = t.softmax(s, mask);
            zs.push(t.matmul(a, vh));
        }
        t.concat_cols(&zs)
    }

    /// Multi-head attention with the query residual: `LN(Z + Q)`.
    fn attention(&self, t: &mut Tape, prefix: &str, q_src: Var, kv_src: Var, mask: Option<&Mat>) -> Var {
        let wq = t.named(&format!("{prefix}.wq"));
        let wk = t.named(&format!("{prefix}.wk"));
        let wv = t.named(&format!("{prefix}.wv"));
        let q = t.matmul(q_src, wq);
        let k = t.matmul(kv_src, wk);
        let v = t.matmul(kv_src, wv);
        let z = self.heads_attention(t, q, k, v, mask);
        let zq = t.add(z, q);
        let g = t.named(&format!("{prefix}.ln1.g"));
        let b = t.named(&format!("{prefix}.ln1.b"));
        t.layer_norm(zq, g, b)
    }

    /// `LN(dropout(ReLU(Ẑ W1 + b1 + Ẑ) W2 + b2))`.
    fn ffn(&self, t: &mut Tape, prefix: &str, z: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let w1 = t.named(&format!("{prefix}.w1"));
        let b1 = t.named(&format!("{prefix}.b1"));
        let w2 = t.named(&format!("{prefix}.w2"));
        let b2 = t.named(&format!("{prefix}.b2"));
        let a = t.matmul(z, w1);
        let a = t.add_row(a, b1);
        let a = t.add(a, z);
        let a = t.relu(a);
        let y = t.matmul(a, w2);
        let y = t.add_row(y, b2);
        let y = self.dropout(t, y, rng);
        let g = t.named(&format!("{prefix}.ln2.g"));
        let b = t.named(&format!("{prefix}.ln2.b"));
        t.layer_norm(y, g, b)
    }

    fn dropout(&self, t: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.cfg.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask = t
                    .value(x)
                    .mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
                let m = t.constant(mask);
                t.mul(x, m)
            }
            _ => x,
        }
    }

    /// Masked encoder over `L × k` states.
    pub fn encode(&self, t: &mut Tape, h: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let mask = causal_mask(t.value(h).nrows());
        let mut x = h;
        for b in 0..self.cfg.blocks {
            let pre = format!("enc.{b}");
            let z = self.attention(t, &pre, x, x, Some(&mask));
            x = self.ffn(t, &pre, z, rng.as_deref_mut());
        }
        x
    }

    /// Masked decoder: own self-attention for queries, encoder output as
    /// keys and values.
    pub fn decode(&self, t: &mut Tape, h_shifted: Var, encoded: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let mask = causal_mask(t.value(h_shifted).nrows());
        let mut x = h_shifted;
        for b in 0..self.cfg.blocks {
            let pre = format!("dec.{b}");
            let zq = self.attention(t, &format!("{pre}.self"), x, x, Some(&mask));
            let z = self.attention(t, &format!("{pre}.cross"), zq, encoded, Some(&mask));
            x = self.ffn(t, &pre, z, rng.as_deref_mut());
        }
        x
    }

    /// Full per-sequence pass. Dropout is active iff `rng` is given.
    pub fn forward_sequence(&self, t: &mut Tape, seq: &EdgeSequence, mut rng: Option<&mut ChaCha8Rng>) -> SeqOutput {
        let slots = self.cfg.slots();
        assert_eq!(seq.steps.len(), slots, "sequence length does not match model");
        let hidden = self.tlstm(t, seq);
        let h_en = t.slice_rows(hidden, 0, slots);
        let h_de = t.slice_rows(hidden, 1, slots);
        let encoded = self.encode(t, h_en, rng.as_deref_mut());
        let rhat = self.decode(t, h_de, encoded, rng);
        SeqOutput { hidden, encoded, rhat }
    }

    /// Unmasked attention stack over a batch of initial structure embeddings.
    pub fn structure(&self, t: &mut Tape, hs: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let mut x = hs;
        for b in 0..self.cfg.blocks {
            let pre = format!("st.{b}");
            let z = self.attention(t, &pre, x, x, None);
            x = self.ffn(t, &pre, z, rng.as_deref_mut());
        }
        x
    }

    /// `LN(ReLU(ŕ W7 + b7 + ŕ) W8 + b8)` with `ŕ = r̂_v + r̂_s`.
    pub fn fuse(&self, t: &mut Tape, rv: Var, rs: Var) -> Var {
        let r = t.add(rv, rs);
        let w7 = t.named("fuse.w7");
        let b7 = t.named("fuse.b7");
        let w8 = t.named("fuse.w8");
        let b8 = t.named("fuse.b8");
        let a = t.matmul(r, w7);
        let a = t.add_row(a, b7);
        let a = t.add(a, r);
        let a = t.relu(a);
        let y = t.matmul(a, w8);
        let y = t.add_row(y, b8);
        let g = t.named("fuse.ln.g");
        let b = t.named("fuse.ln.b");
        t.layer_norm(y, g, b)
    }
}

/// Coefficients turning a sequence's `r̂` rows into its initial structure
/// embedding as seen from position `visible`: rows `0..=visible` count once
/// and each hidden row among the first `ℓ` is replaced by the EOS slot row.
pub fn visibility_weights(max_len: usize, visible: usize) -> Mat {
    assert!(visible < max_len);
    let mut w = Mat::zeros((1, max_len + 1));
    for j in 0..=visible {
        w[[0, j]] = 1.0;
    }
    w[[0, max_len]] = (max_len - 1 - visible) as f64;
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Grads;
    use crate::sampler::Step;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            k: 4,
            heads: 2,
            blocks: 1,
            max_len: 3,
            dropout: 0.0,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn toy_model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = Mat::from_shape_fn((11, 4), |_| rng.random_range(-0.5..0.5));
        Model::new(toy_cfg(), &table).unwrap()
    }

    fn toy_seq(vs: &[u32], toes: &[i64]) -> EdgeSequence {
        let walked = vs
            .iter()
            .zip(toes)
            .enumerate()
            .map(|(i, (&v, &toe))| Step {
                vertex: v,
                tov: 100 * i as i64,
                toe,
                edge: None,
            })
            .collect();
        EdgeSequence::from_steps(0, walked, 3, 10)
    }

    #[test]
    fn zero_interval_decay_is_identity() {
        let model = toy_model();
        let mut t = Tape::new(&model.params);
        let c = t.input(Mat::from_shape_fn((1, 4), |(_, j)| j as f64 - 1.5));
        let d = model.decay(&mut t, c, 0.0);
        let diff = (t.value(d) - t.value(c)).mapv(f64::abs).sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn decay_halves_short_term_at_e_squared() {
        let model = toy_model();
        let e = std::f64::consts::E;
        let mut t = Tape::new(&model.params);
        let c = t.input(Mat::from_elem((1, 4), 0.3));
        let wd = t.named("lstm.wd");
        let bd = t.named("lstm.bd");
        let cw = t.matmul(c, wd);
        let cw = t.add_row(cw, bd);
        let short = t.tanh(cw);
        let full = model.decay(&mut t, c, e * e - e);
        let expected = t.value(c) - t.value(short) + &(t.value(short) / 2.0);
        assert!((t.value(full) - &expected).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn decay_shrinks_with_interval() {
        let model = toy_model();
        let c0 = Mat::from_shape_fn((1, 4), |(_, j)| 0.4 - 0.3 * j as f64);
        let mut t = Tape::new(&model.params);
        let c = t.input(c0.clone());
        let undamped = model.decay(&mut t, c, std::f64::consts::E - 1.0);
        let _ = undamped;
        let mut prev = f64::INFINITY;
        for delta in [0.0, 0.1, 1.0, 10.0, 1e4] {
            let mut t = Tape::new(&model.params);
            let c = t.input(c0.clone());
            let full = model.decay(&mut t, c, delta + 1e-300);
            let far = model.decay(&mut t, c, f64::MAX);
            let short_norm = (t.value(full) - t.value(far)).mapv(|v| v * v).sum().sqrt();
            assert!(short_norm < prev);
            prev = short_norm;
        }
    }

    #[test]
    fn first_step_is_standard_lstm() {
        let model = toy_model();
        let mut t = Tape::new(&model.params);
        let x = t.input(Mat::from_elem((1, 16), 0.2));
        let (h, c) = model.tlstm_step(&mut t, x, None, 5.0);
        let b = model.params.value(model.params.id("lstm.b").unwrap());
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..4 {
            let g = s(0.2 + b[[0, 4 + j]]);
            let cand = s(0.2 + b[[0, 12 + j]]);
            let o = s(0.2 + b[[0, 8 + j]]);
            let cj = g * cand;
            assert!((t.value(c)[[0, j]] - cj).abs() < 1e-14);
            assert!((t.value(h)[[0, j]] - o * cj.tanh()).abs() < 1e-14);
        }
    }

    #[test]
    fn shapes_and_finiteness_with_padding() {
        let model = toy_model();
        let seq = toy_seq(&[1, 2], &[0, 86_400]);
        let mut t = Tape::new(&model.params);
        let out = model.forward_sequence(&mut t, &seq, None);
        assert_eq!(t.value(out.hidden).dim(), (5, 4));
        assert_eq!(t.value(out.encoded).dim(), (4, 4));
        assert_eq!(t.value(out.rhat).dim(), (4, 4));
        assert!(t.value(out.rhat).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_and_decoder_are_causal() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let base = Mat::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
            let enc_in = Mat::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
            let j = rng.random_range(1..4);
            let mut bumped = base.clone();
            bumped.row_mut(j).mapv_inplace(|v| v + 0.7);

            let run = |h: &Mat, e: &Mat| {
                let mut t = Tape::new(&model.params);
                let hv = t.input(h.clone());
                let ev = t.input(e.clone());
                let enc = model.encode(&mut t, hv, None);
                let dec = model.decode(&mut t, hv, ev, None);
                (t.value(enc).clone(), t.value(dec).clone())
            };
            let (e0, d0) = run(&base, &enc_in);
            let (e1, d1) = run(&bumped, &enc_in);
            let mut enc_bumped = enc_in.clone();
            enc_bumped.row_mut(j).mapv_inplace(|v| v - 0.4);
            let (_, d2) = run(&base, &enc_bumped);
            for i in 0..j {
                assert_eq!(e0.row(i), e1.row(i));
                assert_eq!(d0.row(i), d1.row(i));
                assert_eq!(d0.row(i), d2.row(i));
            }
            assert_ne!(e0.row(j), e1.row(j));
        }
    }

    #[test]
    fn single_row_attention_is_value_projection() {
        let model = toy_model();
        let mut t = Tape::new(&model.params);
        let x = t.input(Mat::from_shape_fn((1, 4), |(_, j)| 0.1 * j as f64));
        let q = t.named("st.0.wq");
        let k = t.named("st.0.wk");
        let v = t.named("st.0.wv");
        let qv = t.matmul(x, q);
        let kv = t.matmul(x, k);
        let vv = t.matmul(x, v);
        let z = model.heads_attention(&mut t, qv, kv, vv, None);
        assert!((t.value(z) - t.value(vv)).mapv(f64::abs).sum() < 1e-15);
    }

    #[test]
    fn structure_stack_is_permutation_equivariant() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hs = Mat::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = hs.select(ndarray::Axis(0), &perm);
        let run = |m: &Mat| {
            let mut t = Tape::new(&model.params);
            let x = t.input(m.clone());
            let y = model.structure(&mut t, x, None);
            t.value(y).clone()
        };
        let (a, b) = (run(&hs), run(&permuted));
        for (i, &p) in perm.iter().enumerate() {
            assert!((&a.row(p) - &b.row(i)).mapv(f64::abs).sum() < 1e-12);
        }
    }

    #[test]
    fn visibility_weights_replace_hidden_rows_with_eos() {
        assert_eq!(visibility_weights(3, 0).row(0).to_vec(), vec![1.0, 0.0, 0.0, 2.0]);
        assert_eq!(visibility_weights(3, 2).row(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0]);
    }

    /// Direct loop evaluation of the fusion head.
    fn naive_fuse(model: &Model, rv: &[f64], rs: &[f64]) -> Vec<f64> {
        let p = |n: &str| model.params.value(model.params.id(n).unwrap()).clone();
        let (w7, b7, w8, b8, g, b) = (p("fuse.w7"), p("fuse.b7"), p("fuse.w8"), p("fuse.b8"), p("fuse.ln.g"), p("fuse.ln.b"));
        let k = rv.len();
        let r: Vec<f64> = (0..k).map(|i| rv[i] + rs[i]).collect();
        let mut a = vec![0.0; k];
        for j in 0..k {
            let mut s = b7[[0, j]] + r[j];
            for i in 0..k {
                s += r[i] * w7[[i, j]];
            }
            a[j] = s.max(0.0);
        }
        let mut y = vec![0.0; k];
        for j in 0..k {
            let mut s = b8[[0, j]];
            for i in 0..k {
                s += a[i] * w8[[i, j]];
            }
            y[j] = s;
        }
        let mean = y.iter().sum::<f64>() / k as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
        (0..k)
            .map(|j| g[[0, j]] * (y[j] - mean) / (var + 1e-5).sqrt() + b[[0, j]])
            .collect()
    }

    #[test]
    fn fuse_matches_loop_oracle_and_fixture() {
        let model = toy_model();
        let run = |rv: &Mat, rs: &Mat| {
            let mut t = Tape::new(&model.params);
            let a = t.input(rv.clone());
            let b = t.input(rs.clone());
            let y = model.fuse(&mut t, a, b);
            t.value(y).clone()
        };
        let zero = Mat::zeros((1, 4));
        let out = run(&zero, &zero);
        let oracle = naive_fuse(&model, &[0.0; 4], &[0.0; 4]);
        for j in 0..4 {
            assert!((out[[0, j]] - oracle[j]).abs() < 1e-12);
            assert!((out[[0, j]] - FUSE_ZERO_FIXTURE[j]).abs() < 1e-9, "{:?}", out.row(0));
        }
        assert_eq!(out, run(&zero, &zero));

        let rv = Mat::from_shape_vec((1, 4), vec![0.3, -1.2, 0.5, 0.9]).unwrap();
        let rs = Mat::from_shape_vec((1, 4), vec![-0.1, 0.4, 0.2, -0.7]).unwrap();
        let got = run(&rv, &rs);
        let want = naive_fuse(&model, rv.as_slice().unwrap(), rs.as_slice().unwrap());
        for j in 0..4 {
            assert!((got[[0, j]] - want[j]).abs() < 1e-12);
        }
    }

    const FUSE_ZERO_FIXTURE: [f64; 4] = [1.368857684356295, -0.9901979600421132, 0.4709860647762562, -0.8496457890904383];

    #[test]
    fn gradients_reach_every_sequence_parameter() {
        let model = toy_model();
        let seq = toy_seq(&[1, 2, 3], &[0, 3600, 7200]);
        let mut t = Tape::new(&model.params);
        let out = model.forward_sequence(&mut t, &seq, None);
        let sq = t.mul(out.rhat, out.rhat);
        let s = t.sum_all(sq);
        let mut grads = Grads::new(&model.params);
        t.backward(&[(s, Mat::ones((1, 1)))], &mut grads, &[]).unwrap();
        for id in model.params.ids() {
            let name = model.params.name(id);
            let used = !(name.starts_with("st.") || name.starts_with("fuse.") || name.starts_with("head."));
            assert_eq!(!grads.is_zero(id), used, "{name}");
        }
    }
}
