//! Time/centrality biased temporal random walks, the train/test corpus
//! split, and sliding-window pairing of sequences.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::{DynamicGraph, Timestamp, VertexId, VertexOccurrence};
use crate::time::TimeScale;

const CORPUS_MAGIC: &[u8; 8] = b"TADGECRP";
const CORPUS_VERSION: u32 = 1;
const NO_EDGE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    /// Number of start occurrences `m`.
    pub num_starts: usize,
    /// Maximum vertices per sequence `ℓ`.
    pub max_len: usize,
    pub min_len: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            num_starts: 10_000,
            max_len: 5,
            min_len: 3,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "walk lengths must satisfy 1 < min_len <= max_len (got {} and {})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Checks `|V| <= m < Σ|T_v|` against a concrete graph.
    pub fn validate_for(&self, graph: &DynamicGraph) -> Result<()> {
        self.validate()?;
        let occ = graph.num_occurrences();
        if self.num_starts < graph.num_vertices() || self.num_starts >= occ {
            return Err(Error::Config(format!(
                "number of starts must satisfy |V| <= m < total occurrences ({} <= {} < {})",
                graph.num_vertices(),
                self.num_starts,
                occ
            )));
        }
        Ok(())
    }
}

/// One slot of a padded sequence. EOS slots use `vertex == |V|` and carry zero ToE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub vertex: u32,
    pub tov: Timestamp,
    /// ToE of the edge used to reach this slot (0 for the start and EOS).
    pub toe: i64,
    /// Index of the traversed edge in the graph the walk ran on, when known.
    pub edge: Option<u32>,
}

impl Step {
    fn eos(num_vertices: u32) -> Self {
        Self {
            vertex: num_vertices,
            tov: 0,
            toe: 0,
            edge: None,
        }
    }
}

/// A temporal edge sequence padded to `max_len + 1` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSequence {
    pub id: u64,
    pub steps: Vec<Step>,
    pub start_time: Timestamp,
    pub real_len: usize,
}

impl EdgeSequence {
    /// Builds a padded sequence from the walked steps.
    pub fn from_steps(id: u64, walked: Vec<Step>, max_len: usize, num_vertices: u32) -> Self {
        assert!(!walked.is_empty() && walked.len() <= max_len);
        let start_time = walked[0].tov;
        let real_len = walked.len();
        let mut steps = walked;
        steps.resize(max_len + 1, Step::eos(num_vertices));
        Self {
            id,
            steps,
            start_time,
            real_len,
        }
    }

    pub fn real_steps(&self) -> &[Step] {
        &self.steps[..self.real_len]
    }

    /// Consecutive `(earlier, later)` step pairs, i.e. the traversed edges.
    pub fn pairs(&self) -> impl Iterator<Item = (&Step, &Step)> {
        self.real_steps().windows(2).map(|w| (&w[0], &w[1]))
    }

    /// Slot count including the appended EOS.
    pub fn padded_len(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<EdgeSequence>,
    pub role: CorpusRole,
    pub num_vertices: u32,
    pub max_len: usize,
}

/// A possible next occurrence together with its transition probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub occurrence: VertexOccurrence,
    pub edge: u32,
    pub toe: i64,
    pub probability: f64,
}

/// Transition distribution out of `current`.
///
/// Candidates are the occurrences reachable over one incident edge whose ToV
/// is later than `current.tov`. Each gets
/// `degree / Σdegree * (1 - toe / Σtoe)`; the weights are renormalized and
/// fall back to uniform when they are all zero (a lone candidate, or equal
/// shares that cancel).
pub fn transition_weights(graph: &DynamicGraph, current: VertexOccurrence) -> Vec<Candidate> {
    let adj = graph.adjacent(current.vertex);
    let first = adj.partition_point(|a| graph.edge(a.edge as usize).t <= current.tov);
    let mut cands: Vec<Candidate> = adj[first..]
        .iter()
        .filter(|a| a.neighbor_tov > current.tov)
        .map(|a| Candidate {
            occurrence: VertexOccurrence {
                vertex: a.neighbor,
                tov: a.neighbor_tov,
            },
            edge: a.edge,
            toe: graph.edge(a.edge as usize).toe,
            probability: 0.0,
        })
        .collect();
    if cands.is_empty() {
        return cands;
    }
    let deg_sum: f64 = cands
        .iter()
        .map(|c| graph.degree(c.occurrence.vertex) as f64)
        .sum();
    let toe_sum: f64 = cands.iter().map(|c| c.toe as f64).sum();
    let mut total = 0.0;
    for c in &mut cands {
        let centrality = graph.degree(c.occurrence.vertex) as f64 / deg_sum;
        let recency = if toe_sum > 0.0 {
            1.0 - c.toe as f64 / toe_sum
        } else {
            1.0
        };
        c.probability = centrality * recency;
        total += c.probability;
    }
    if total > 0.0 {
        for c in &mut cands {
            c.probability /= total;
        }
    } else {
        let u = 1.0 / cands.len() as f64;
        for c in &mut cands {
            c.probability = u;
        }
    }
    cands
}

/// Draws an index from a probability vector.
fn draw(cands: &[Candidate], rng: &mut impl Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, c) in cands.iter().enumerate() {
        acc += c.probability;
        if x < acc {
            return i;
        }
    }
    cands.len() - 1
}

/// Walks from `start`; `None` when fewer than `min_len` vertices are reached.
pub fn sample_walk(
    graph: &DynamicGraph,
    start: VertexOccurrence,
    id: u64,
    cfg: &WalkConfig,
    rng: &mut impl Rng,
) -> Option<EdgeSequence> {
    let mut walked = vec![Step {
        vertex: start.vertex.0,
        tov: start.tov,
        toe: 0,
        edge: None,
    }];
    let mut current = start;
    while walked.len() < cfg.max_len {
        let cands = transition_weights(graph, current);
        if cands.is_empty() {
            break;
        }
        let next = cands[draw(&cands, rng)];
        walked.push(Step {
            vertex: next.occurrence.vertex.0,
            tov: next.occurrence.tov,
            toe: next.toe,
            edge: Some(next.edge),
        });
        current = next.occurrence;
    }
    if walked.len() < cfg.min_len {
        return None;
    }
    Some(EdgeSequence::from_steps(
        id,
        walked,
        cfg.max_len,
        graph.num_vertices() as u32,
    ))
}

/// Independent RNG stream for the walk started by draw number `index`.
fn walk_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

fn walk_all(
    graph: &DynamicGraph,
    starts: &[(u64, VertexOccurrence)],
    cfg: &WalkConfig,
) -> (Vec<EdgeSequence>, usize) {
    let walks: Vec<Option<EdgeSequence>> = starts
        .par_iter()
        .map(|&(id, occ)| sample_walk(graph, occ, id, cfg, &mut walk_rng(cfg.seed, id)))
        .collect();
    let rejected = walks.iter().filter(|w| w.is_none()).count();
    (walks.into_iter().flatten().collect(), rejected)
}

/// Bookkeeping written to the sampling manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub starts: usize,
    pub test_starts: usize,
    pub train_starts: usize,
    pub test_sequences: usize,
    pub train_sequences: usize,
    pub rejected_test: usize,
    pub rejected_train: usize,
    pub removed_edges: usize,
    pub edge_disjoint: bool,
}

/// Samples start occurrences, walks the test share on the full graph, removes
/// every test edge, then walks the remaining starts on the pruned graph.
pub fn build_corpora(
    graph: &DynamicGraph,
    cfg: &WalkConfig,
    test_fraction: f64,
) -> Result<(Corpus, Corpus, SampleStats)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    cfg.validate_for(graph)?;

    let occurrences = graph.occurrences();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let drawn = rand::seq::index::sample(&mut rng, occurrences.len(), cfg.num_starts);
    let starts: Vec<(u64, VertexOccurrence)> = drawn
        .iter()
        .enumerate()
        .map(|(j, i)| (j as u64, occurrences[i]))
        .collect();
    let n_test = ((test_fraction * cfg.num_starts as f64).round() as usize).clamp(1, cfg.num_starts - 1);
    let (test_starts, train_starts) = starts.split_at(n_test);

    let (mut test, rejected_test) = walk_all(graph, test_starts, cfg);
    let test_edges: HashSet<u32> = test
        .iter()
        .flat_map(|s| s.steps.iter().filter_map(|st| st.edge))
        .collect();
    let keep: Vec<bool> = (0..graph.num_edges())
        .map(|i| !test_edges.contains(&(i as u32)))
        .collect();
    let (pruned, origin) = graph.retain_edges(&keep);

    let (mut train, rejected_train) = walk_all(&pruned, train_starts, cfg);
    for seq in &mut train {
        for st in &mut seq.steps {
            st.edge = st.edge.map(|e| origin[e as usize]);
        }
    }
    if rejected_test + rejected_train > 0 {
        info!(
            "dropped {rejected_test} test and {rejected_train} train starts with walks shorter than {}",
            cfg.min_len
        );
    }

    let edge_disjoint = train
        .iter()
        .flat_map(|s| s.steps.iter().filter_map(|st| st.edge))
        .all(|e| !test_edges.contains(&e));
    if !edge_disjoint {
        return Err(Error::Corpus("a test edge appears in the training corpus".into()));
    }
    let mut seen = HashSet::new();
    for s in test.iter().chain(train.iter()) {
        let key: Vec<(u32, Timestamp)> = s.real_steps().iter().map(|st| (st.vertex, st.tov)).collect();
        if !seen.insert(key) {
            return Err(Error::Corpus(format!("sequence {} is duplicated", s.id)));
        }
    }

    let by_start = |a: &EdgeSequence, b: &EdgeSequence| (a.start_time, a.id).cmp(&(b.start_time, b.id));
    test.sort_by(by_start);
    train.sort_by(by_start);
    debug!("{} test / {} train sequences", test.len(), train.len());

    let stats = SampleStats {
        starts: cfg.num_starts,
        test_starts: test_starts.len(),
        train_starts: train_starts.len(),
        test_sequences: test.len(),
        train_sequences: train.len(),
        rejected_test,
        rejected_train,
        removed_edges: test_edges.len(),
        edge_disjoint,
    };
    let n = graph.num_vertices() as u32;
    Ok((
        Corpus {
            sequences: train,
            role: CorpusRole::Train,
            num_vertices: n,
            max_len: cfg.max_len,
        },
        Corpus {
            sequences: test,
            role: CorpusRole::Test,
            num_vertices: n,
            max_len: cfg.max_len,
        },
        stats,
    ))
}

/// Sliding window over the start-time ordered corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window length `ℓ_s`.
    pub len: usize,
    /// Stride `õ`; must be below `len` so consecutive windows overlap.
    pub step: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { len: 5, step: 2 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.len < 2 || self.step < 1 || self.step >= self.len {
            return Err(Error::Config(format!(
                "window must satisfy 1 <= step < len with len >= 2 (got len {} step {})",
                self.len, self.step
            )));
        }
        Ok(())
    }

    /// Whether `ℓ_s² - 3ℓ_s + 3 < m`, the condition under which windowing is
    /// meant to use fewer pairs than all `m(m-1)/2`.
    pub fn reduces_pairs(&self, m: usize) -> bool {
        let l = self.len as i64;
        l * l - 3 * l + 3 < m as i64
    }

    /// Window start offsets over a corpus of `m` sequences.
    pub fn offsets(&self, m: usize) -> Vec<usize> {
        if m <= self.len {
            return vec![0];
        }
        (0..=m - self.len).step_by(self.step).collect()
    }
}

/// An ordered pair of sequences inside one window, `earlier < later`, with
/// the normalized difference of their start times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPair {
    pub later: usize,
    pub earlier: usize,
    pub delta: f64,
}

/// Emits every within-window pair for each window position. Pairs shared by
/// overlapping windows are emitted once per window.
pub fn window_pairs(start_times: &[Timestamp], wcfg: &WindowConfig, scale: &TimeScale) -> Vec<WindowPair> {
    let m = start_times.len();
    if m < 2 {
        return Vec::new();
    }
    let width = wcfg.len.min(m);
    let mut out = Vec::new();
    for off in wcfg.offsets(m) {
        for later in off..off + width {
            for earlier in off..later {
                let gap = start_times[later] - start_times[earlier];
                out.push(WindowPair {
                    later,
                    earlier,
                    delta: scale.normalize(gap),
                });
            }
        }
    }
    out
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn start_times(&self) -> Vec<Timestamp> {
        self.sequences.iter().map(|s| s.start_time).collect()
    }

    /// Copy restricted to the first `n` sequences.
    pub fn truncated(&self, n: usize) -> Corpus {
        Corpus {
            sequences: self.sequences[..n.min(self.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(match self.role {
            CorpusRole::Train => 0,
            CorpusRole::Test => 1,
        });
        w.u32(self.num_vertices);
        w.u32(self.max_len as u32);
        w.u64(self.sequences.len() as u64);
        for s in &self.sequences {
            w.u64(s.id);
            w.i64(s.start_time);
            w.u32(s.real_len as u32);
            for st in &s.steps {
                w.u32(st.vertex);
                w.i64(st.tov);
                w.i64(st.toe);
                w.u32(st.edge.unwrap_or(NO_EDGE));
            }
        }
        w.finish(CORPUS_MAGIC, CORPUS_VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("corpus", bytes, CORPUS_MAGIC, CORPUS_VERSION)?;
        let role = match r.u8()? {
            0 => CorpusRole::Train,
            _ => CorpusRole::Test,
        };
        let num_vertices = r.u32()?;
        let max_len = r.u32()? as usize;
        let n = r.u64()? as usize;
        let mut sequences = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u64()?;
            let start_time = r.i64()?;
            let real_len = r.u32()? as usize;
            let steps = (0..=max_len)
                .map(|_| {
                    Ok(Step {
                        vertex: r.u32()?,
                        tov: r.i64()?,
                        toe: r.i64()?,
                        edge: Some(r.u32()?).filter(|&e| e != NO_EDGE),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(EdgeSequence {
                id,
                steps,
                start_time,
                real_len,
            });
        }
        r.finish()?;
        let corpus = Self {
            sequences,
            role,
            num_vertices,
            max_len,
        };
        corpus.check()?;
        Ok(corpus)
    }

    /// Structural invariants: monotone ToVs, EOS padding, lengths, ordering.
    pub fn check(&self) -> Result<()> {
        let eos = self.num_vertices;
        for s in &self.sequences {
            if s.steps.len() != self.max_len + 1 || s.real_len < 2 || s.real_len > self.max_len {
                return Err(Error::Corpus(format!("sequence {} has bad length", s.id)));
            }
            let real = s.real_steps();
            if real.iter().any(|st| st.vertex >= eos) || real[0].tov != s.start_time {
                return Err(Error::Corpus(format!("sequence {} has bad vertices", s.id)));
            }
            if real.windows(2).any(|w| w[1].tov <= w[0].tov) {
                return Err(Error::Corpus(format!("sequence {} is not time-increasing", s.id)));
            }
            if s.steps[s.real_len..].iter().any(|st| st.vertex != eos || st.toe != 0) {
                return Err(Error::Corpus(format!("sequence {} has bad padding", s.id)));
            }
        }
        if self
            .sequences
            .windows(2)
            .any(|w| (w[0].start_time, w[0].id) >= (w[1].start_time, w[1].id))
        {
            return Err(Error::Corpus("sequences not ordered by start time".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    /// One line per sequence: `start_time real_len | vertex:tov:toe ...`,
    /// EOS written as vertex id `|V|`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# tadge corpus v{CORPUS_VERSION} role={:?} vertices={} max_len={}",
            self.role, self.num_vertices, self.max_len
        );
        for s in &self.sequences {
            let _ = write!(out, "{} {} {} |", s.id, s.start_time, s.real_len);
            for st in &s.steps {
                let _ = write!(out, " {}:{}:{}", st.vertex, st.tov, st.toe);
            }
            out.push('\n');
        }
        out
    }

    /// Vertices that occur at a real slot of any sequence.
    pub fn vertices(&self) -> HashSet<VertexId> {
        self.sequences
            .iter()
            .flat_map(|s| s.real_steps().iter().map(|st| VertexId(st.vertex)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph() -> DynamicGraph {
        DynamicGraph::from_labelled_rows(&[("b", "a", 10, 1.0), ("c", "b", 20, 1.0)])
    }

    #[test]
    fn worked_example_weights() {
        // center x at t=0; candidates y (toe 1) and z (toe 2), both of degree 2.
        let g = DynamicGraph::from_labelled_rows(&[
            ("x", "x", 0, 1.0),
            ("y", "x", 1, 1.0),
            ("z", "x", 2, 1.0),
            ("y", "p", 50, 1.0),
            ("z", "q", 60, 1.0),
        ]);
        let x = g.vertex("x").unwrap();
        let w = transition_weights(&g, VertexOccurrence { vertex: x, tov: 0 });
        let y = g.vertex("y").unwrap();
        let z = g.vertex("z").unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(g.degree(y), 2);
        assert_eq!(g.degree(z), 2);
        let py = w.iter().find(|c| c.occurrence.vertex == y).unwrap().probability;
        let pz = w.iter().find(|c| c.occurrence.vertex == z).unwrap().probability;
        assert!((py - 2.0 / 3.0).abs() < 1e-15);
        assert!((pz - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lone_candidate_falls_back_to_uniform() {
        let g = path_graph();
        let a = g.vertex("a").unwrap();
        let w = transition_weights(&g, VertexOccurrence { vertex: a, tov: 10 });
        assert_eq!(w.len(), 0);
        let b = g.vertex("b").unwrap();
        let w = transition_weights(&g, VertexOccurrence { vertex: b, tov: 10 });
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].probability, 1.0);
    }

    #[test]
    fn path_walk_is_deterministic() {
        // a joins at 10, b links to a at 10... a -> b -> c in time order.
        let g = DynamicGraph::from_labelled_rows(&[("a", "a", 5, 1.0), ("b", "a", 10, 1.0), ("c", "b", 20, 1.0)]);
        let a = g.vertex("a").unwrap();
        let cfg = WalkConfig {
            num_starts: 1,
            max_len: 5,
            min_len: 3,
            seed: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = sample_walk(&g, VertexOccurrence { vertex: a, tov: 5 }, 0, &cfg, &mut rng).unwrap();
        let eos = g.num_vertices() as u32;
        let ids: Vec<u32> = seq.steps.iter().map(|s| s.vertex).collect();
        let b = g.vertex("b").unwrap().0;
        let c = g.vertex("c").unwrap().0;
        assert_eq!(ids, vec![a.0, b, c, eos, eos, eos]);
        assert_eq!(seq.real_len, 3);
        assert_eq!(seq.steps[3..].iter().map(|s| s.toe).sum::<i64>(), 0);
    }

    #[test]
    fn isolated_start_rejected() {
        let g = DynamicGraph::from_labelled_rows(&[("a", "b", 10, 1.0)]);
        let b = g.vertex("b").unwrap();
        let cfg = WalkConfig {
            num_starts: 1,
            max_len: 5,
            min_len: 3,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_walk(&g, VertexOccurrence { vertex: b, tov: 10 }, 0, &cfg, &mut rng).is_none());
    }

    #[test]
    fn test_fraction_bounds() {
        let g = path_graph();
        let cfg = WalkConfig {
            num_starts: 3,
            max_len: 3,
            min_len: 2,
            seed: 0,
        };
        assert!(build_corpora(&g, &cfg, 0.0).is_err());
        assert!(build_corpora(&g, &cfg, 1.0).is_err());
    }

    #[test]
    fn window_example() {
        let w = WindowConfig { len: 4, step: 2 };
        assert_eq!(w.offsets(10), vec![0, 2, 4, 6]);
        let times: Vec<i64> = (0..10).collect();
        assert_eq!(window_pairs(&times, &w, &TimeScale::seconds()).len(), 24);
        assert!(WindowConfig { len: 4, step: 4 }.validate().is_err());
        assert!(WindowConfig { len: 5, step: 1 }.reduces_pairs(100));
    }

    #[test]
    fn short_corpus_single_window() {
        let w = WindowConfig { len: 5, step: 2 };
        let pairs = window_pairs(&[0, 86_400, 2 * 86_400], &w, &TimeScale::days());
        assert_eq!(pairs.len(), 3);
        let p = pairs.iter().find(|p| p.later == 1 && p.earlier == 0).unwrap();
        assert_eq!(p.delta, 0.5);
    }
}
