//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every operation records its output value and enough state to push a
//! gradient back to its inputs. Parameters live in a [`ParamSet`] borrowed by
//! the tape; table parameters accessed through [`Tape::gather`] receive
//! row-sparse gradients.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    /// Row-indexed lookup table; only gathered rows receive gradient.
    Table,
}

/// Named trainable matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Mat>,
    lookup: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Accumulated parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub dense: Vec<Option<Mat>>,
    pub rows: Vec<BTreeMap<usize, Array1<f64>>>,
}

impl Grads {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            dense: vec![None; params.len()],
            rows: vec![BTreeMap::new(); params.len()],
        }
    }

    fn add_dense(&mut self, id: ParamId, g: &Mat) {
        match &mut self.dense[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    fn add_row(&mut self, id: ParamId, row: usize, g: ndarray::ArrayView1<f64>) {
        self.rows[id.0]
            .entry(row)
            .and_modify(|acc| *acc += &g)
            .or_insert_with(|| g.to_owned());
    }

    /// Gradient of one scalar coordinate, zero when never touched.
    pub fn get(&self, id: ParamId, r: usize, c: usize) -> f64 {
        if let Some(d) = &self.dense[id.0] {
            return d[[r, c]];
        }
        self.rows[id.0].get(&r).map_or(0.0, |row| row[c])
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        let dense_zero = self.dense[id.0].as_ref().is_none_or(|d| d.iter().all(|&x| x == 0.0));
        dense_zero && self.rows[id.0].values().all(|r| r.iter().all(|&x| x == 0.0))
    }

    pub fn check_finite(&self, params: &ParamSet) -> Result<()> {
        for id in params.ids() {
            let bad_dense = self.dense[id.0].as_ref().is_some_and(|d| d.iter().any(|x| !x.is_finite()));
            let bad_rows = self.rows[id.0].values().any(|r| r.iter().any(|x| !x.is_finite()));
            if bad_dense || bad_rows {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Input,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Normalize(Var, Vec<f64>),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    CrossEntropy(Var, Vec<usize>, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax; entries at `-inf` get exactly zero weight.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() });
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Additive causal mask: `-inf` strictly above the diagonal.
pub fn causal_mask(n: usize) -> Mat {
    Mat::from_shape_fn((n, n), |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A leaf whose gradient is returned by [`Tape::backward`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.params.value(id).clone();
        self.push(v, Op::Param(id), true)
    }

    /// Parameter by name; panics when the name is unknown.
    pub fn named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let value = self.params.value(id).select(Axis(0), rows);
        self.push(value, Op::Gather(id, rows.to_vec()), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let g = self.g(a) || self.g(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let g = self.g(a) || self.g(row);
        self.push(v, Op::MulRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.g(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let g = self.g(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.g(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let g = self.g(a);
        self.push(v, Op::Relu(a), g)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row *= s;
            inv.push(s);
        }
        let g = self.g(a);
        self.push(out, Op::Normalize(a, inv), g)
    }

    /// Layer norm with `1×c` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let n = self.normalize(a);
        let scaled = self.mul_row(n, gain);
        self.add_row(scaled, bias)
    }

    /// Row-wise softmax of `a + mask` where `mask` holds `0` or `-inf`.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mat>) -> Var {
        let v = match mask {
            Some(m) => softmax_rows(&(self.value(a) + m)),
            None => softmax_rows(self.value(a)),
        };
        let g = self.g(a);
        self.push(v, Op::Softmax(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        let g = parts.iter().any(|&p| self.g(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        let g = parts.iter().any(|&p| self.g(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let g = self.g(a);
        self.push(v, Op::SliceRows(a, start), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let g = self.g(a);
        self.push(v, Op::SliceCols(a, start), g)
    }

    /// Rows of `a` by index, repeats allowed.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        let g = self.g(a);
        self.push(v, Op::SelectRows(a, rows.to_vec()), g)
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let g = self.g(a);
        self.push(v, Op::SumRows(a), g)
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.g(a);
        self.push(v, Op::SumCols(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let g = self.g(a);
        self.push(v, Op::SumAll(a), g)
    }

    /// Mean softmax cross-entropy of each logit row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        let probs = softmax_rows(x);
        let n = targets.len().max(1) as f64;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let g = self.g(logits);
        self.push(
            Mat::from_elem((1, 1), loss / n),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            g,
        )
    }

    /// Reverse pass from the seeded outputs.
    ///
    /// Parameter gradients are added into `grads`; the returned matrices are
    /// the gradients of the requested `inputs` (zero when unreachable).
    pub fn backward(&self, seeds: &[(Var, Mat)], grads: &mut Grads, inputs: &[Var]) -> Result<Vec<Mat>> {
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            accumulate(&mut adj, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for idx in (0..top).rev() {
            if !self.nodes[idx].grad {
                continue;
            }
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Input => adj[idx] = Some(dy),
                Op::Param(id) => grads.add_dense(*id, &dy),
                Op::Gather(id, rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        grads.add_row(*id, r, dy.row(i));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut adj, *a, dy.dot(&self.value(*b).t()));
                    }
                    if self.g(*b) {
                        accumulate(&mut adj, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut adj, *a, dy.dot(self.value(*b)));
                    }
                    if self.g(*b) {
                        accumulate(&mut adj, *b, dy.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*b) {
                        accumulate(&mut adj, *b, dy.clone());
                    }
                    if self.g(*a) {
                        accumulate(&mut adj, *a, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.g(*b) {
                        accumulate(&mut adj, *b, -&dy);
                    }
                    if self.g(*a) {
                        accumulate(&mut adj, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut adj, *a, &dy * self.value(*b));
                    }
                    if self.g(*b) {
                        accumulate(&mut adj, *b, &dy * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.g(*row) {
                        accumulate(&mut adj, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*a) {
                        accumulate(&mut adj, *a, dy);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.g(*row) {
                        let g = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj, *row, g);
                    }
                    if self.g(*a) {
                        accumulate(&mut adj, *a, &dy * self.value(*row));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, dy * *c),
                Op::Sigmoid(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut adj, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut adj, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(&node.value).for_each(|g, &y| {
                        if y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut adj, *a, g);
                }
                Op::Normalize(a, inv) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut g = dy;
                    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let mean_dy = row.sum() / n;
                        let mean_dyy = row.dot(&yr) / n;
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|d, &yv| *d = inv[i] * (*d - mean_dy - yv * mean_dyy));
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut g = dy;
                    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let dot = row.dot(&yr);
                        Zip::from(&mut row).and(&yr).for_each(|d, &yv| *d = yv * (*d - dot));
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.g(p) {
                            accumulate(&mut adj, p, dy.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.g(p) {
                            accumulate(&mut adj, p, dy.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Mat::zeros(self.value(*a).raw_dim());
                    g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    accumulate(&mut adj, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Mat::zeros(self.value(*a).raw_dim());
                    g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    accumulate(&mut adj, *a, g);
                }
                Op::SelectRows(a, rows) => {
                    let mut g = Mat::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = g.row_mut(r);
                        dst += &dy.row(i);
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::SumRows(a) => {
                    let shape = self.value(*a).raw_dim();
                    let g = dy.broadcast(shape).expect("row broadcast").to_owned();
                    accumulate(&mut adj, *a, g);
                }
                Op::SumCols(a) => {
                    let shape = self.value(*a).raw_dim();
                    let g = dy.broadcast(shape).expect("column broadcast").to_owned();
                    accumulate(&mut adj, *a, g);
                }
                Op::SumAll(a) => {
                    let g = Mat::from_elem(self.value(*a).raw_dim(), dy[[0, 0]]);
                    accumulate(&mut adj, *a, g);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let scale = dy[[0, 0]] / targets.len().max(1) as f64;
                    let mut g = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        g[[i, t]] -= 1.0;
                    }
                    g *= scale;
                    accumulate(&mut adj, *a, g);
                }
            }
        }
        grads.check_finite(self.params)?;
        inputs
            .iter()
            .map(|&v| {
                let g = adj[v.0]
                    .clone()
                    .unwrap_or_else(|| Mat::zeros(self.value(v).raw_dim()));
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("input #{}", v.0)));
                }
                Ok(g)
            })
            .collect()
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every parameter coordinate of `f` against central differences.
    fn check(params: &mut ParamSet, f: impl Fn(&mut Tape) -> Var) {
        let (grads, _) = {
            let mut tape = Tape::new(params);
            let out = f(&mut tape);
            let mut grads = Grads::new(params);
            let seed = Mat::ones((1, 1));
            tape.backward(&[(out, seed)], &mut grads, &[]).unwrap();
            (grads, tape.scalar(out))
        };
        let eval = |p: &ParamSet| {
            let mut tape = Tape::new(p);
            let out = f(&mut tape);
            tape.scalar(out)
        };
        let h = 1e-5;
        for id in params.ids().collect::<Vec<_>>() {
            let (r, c) = params.value(id).dim();
            for i in 0..r {
                for j in 0..c {
                    let orig = params.value(id)[[i, j]];
                    params.value_mut(id)[[i, j]] = orig + h;
                    let up = eval(params);
                    params.value_mut(id)[[i, j]] = orig - h;
                    let down = eval(params);
                    params.value_mut(id)[[i, j]] = orig;
                    let num = (up - down) / (2.0 * h);
                    let ana = grads.get(id, i, j);
                    let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    assert!(err < 1e-5, "{}[{i},{j}] numeric {num} analytic {ana}", params.name(id));
                }
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let a = p.add("a", ParamKind::Dense, random(&mut rng, 3, 4));
        let b = p.add("b", ParamKind::Dense, random(&mut rng, 4, 2));
        let c = p.add("c", ParamKind::Dense, random(&mut rng, 3, 4));
        let r = p.add("r", ParamKind::Dense, random(&mut rng, 1, 4));
        check(&mut p, |t| {
            let (a, b, c, r) = (t.param(a), t.param(b), t.param(c), t.param(r));
            let ab = t.matmul(a, b);
            let act = t.tanh(ab);
            let ac = t.matmul_t(a, c);
            let sg = t.sigmoid(ac);
            let m = t.mul(a, c);
            let m = t.add_row(m, r);
            let m = t.mul_row(m, r);
            let m = t.sub(m, c);
            let m = t.relu(m);
            let m = t.scale(m, 0.7);
            let x = t.sum_all(act);
            let y = t.sum_all(sg);
            let z = t.sum_all(m);
            let sq = t.mul(x, y);
            t.add(sq, z)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let a = p.add("a", ParamKind::Dense, random(&mut rng, 4, 3));
        let b = p.add("b", ParamKind::Dense, random(&mut rng, 4, 2));
        let w = p.add("w", ParamKind::Dense, random(&mut rng, 5, 1));
        check(&mut p, |t| {
            let (a, b, w) = (t.param(a), t.param(b), t.param(w));
            let cat = t.concat_cols(&[a, b]);
            let top = t.slice_rows(cat, 1, 2);
            let both = t.concat_rows(&[cat, top]);
            let pick = t.select_rows(both, &[0, 5, 5, 2]);
            let cols = t.slice_cols(pick, 1, 3);
            let rs = t.sum_rows(cols);
            let cs = t.sum_cols(pick);
            let pw = t.matmul(pick, w);
            let sq = t.mul(pw, cs);
            let x = t.sum_all(sq);
            let y = t.sum_all(rs);
            let y = t.tanh(y);
            t.add(x, y)
        });
    }

    #[test]
    fn normalization_softmax_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let a = p.add("a", ParamKind::Dense, random(&mut rng, 4, 4));
        let g = p.add("g", ParamKind::Dense, random(&mut rng, 1, 4));
        let b = p.add("b", ParamKind::Dense, random(&mut rng, 1, 4));
        let mask = causal_mask(4);
        check(&mut p, |t| {
            let (a, g, b) = (t.param(a), t.param(g), t.param(b));
            let ln = t.layer_norm(a, g, b);
            let sm = t.softmax(ln, Some(&mask));
            let mixed = t.matmul(sm, a);
            t.cross_entropy(mixed, &[0, 3, 1, 2])
        });
    }

    #[test]
    fn gather_gives_sparse_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let tab = p.add("tab", ParamKind::Table, random(&mut rng, 6, 3));
        check(&mut p, |t| {
            let x = t.gather(tab, &[1, 4, 1]);
            let y = t.tanh(x);
            let s = t.mul(y, x);
            t.sum_all(s)
        });
        let mut tape = Tape::new(&p);
        let x = tape.gather(tab, &[2, 2]);
        let s = tape.sum_all(x);
        let mut grads = Grads::new(&p);
        tape.backward(&[(s, Mat::ones((1, 1)))], &mut grads, &[]).unwrap();
        assert_eq!(grads.rows[tab.0].keys().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(grads.rows[tab.0][&2].to_vec(), vec![2.0; 3]);
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let x = tape.input(Mat::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64));
        let y = tape.softmax(x, Some(&causal_mask(3)));
        let v = tape.value(y);
        for i in 0..3 {
            assert!((v.row(i).sum() - 1.0).abs() < 1e-15);
            for j in i + 1..3 {
                assert_eq!(v[[i, j]], 0.0);
            }
        }
        let mut grads = Grads::new(&p);
        let seed = Mat::from_elem((3, 3), 1.0);
        let gx = tape.backward(&[(y, seed)], &mut grads, &[x]).unwrap();
        assert_eq!(gx[0][[0, 2]], 0.0);
    }

    #[test]
    fn normalize_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let x = tape.input(random(&mut rng, 5, 16) * 7.0 + 3.0);
        let y = tape.normalize(x);
        for row in tape.value(y).rows() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn input_gradients_and_non_finite_detection() {
        let mut p = ParamSet::new();
        let w = p.add("w", ParamKind::Dense, Mat::ones((2, 1)));
        let mut tape = Tape::new(&p);
        let x = tape.input(Mat::from_elem((1, 2), f64::NAN));
        let wv = tape.param(w);
        let y = tape.matmul(x, wv);
        let mut grads = Grads::new(&p);
        let err = tape.backward(&[(y, Mat::ones((1, 1)))], &mut grads, &[x]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));

        let p = ParamSet::new();
        let mut tape = Tape::new(&p);
        let x = tape.input(Mat::from_elem((1, 2), 3.0));
        let y = tape.mul(x, x);
        let s = tape.sum_all(y);
        let g = tape.backward(&[(s, Mat::ones((1, 1)))], &mut Grads::new(&p), &[x]).unwrap();
        assert_eq!(g[0], Mat::from_elem((1, 2), 6.0));
    }
}
