//! Dynamic graph model: vertices with sets of joining times (ToV) and
//! temporal edges carrying their timespan (ToE).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};

pub type Timestamp = i64;

const GRAPH_MAGIC: &[u8; 8] = b"TADGEGRF";
const GRAPH_VERSION: u32 = 1;

/// Dense vertex index in `0..|V|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexId(pub u32);

impl VertexId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A vertex at one of its joining times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexOccurrence {
    pub vertex: VertexId,
    pub tov: Timestamp,
}

/// Edge formed at `t` by the upcoming vertex `src` with the existing vertex
/// `dst`, whose latest joining time at or before `t` is `t - toe`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalEdge {
    pub src: VertexId,
    pub dst: VertexId,
    pub t: Timestamp,
    pub toe: i64,
    pub weight: f64,
}

/// An ingested row before ToE derivation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEdge {
    pub src: VertexId,
    pub dst: VertexId,
    pub t: Timestamp,
    pub weight: f64,
}

/// One adjacency entry: following `edge` from the indexed vertex reaches
/// `neighbor` at joining time `neighbor_tov`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Adjacent {
    pub neighbor: VertexId,
    pub edge: u32,
    pub neighbor_tov: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraph {
    labels: Vec<String>,
    class_labels: Vec<Option<String>>,
    index: HashMap<String, VertexId>,
    tov_sets: Vec<Vec<Timestamp>>,
    edges: Vec<TemporalEdge>,
    adjacency: Vec<Vec<Adjacent>>,
    degrees: Vec<u32>,
}

/// Summary statistics in the shape of a dataset table row.
#[derive(Debug, Clone, Serialize)]
pub struct GraphStats {
    pub vertices: usize,
    pub edges: usize,
    pub occurrences: usize,
    /// Mean number of incident edge events per vertex (`2|E| / |V|`).
    pub mean_degree: f64,
    /// Mean number of distinct neighbours per vertex.
    pub mean_distinct_degree: f64,
    pub mean_toe_days: f64,
    pub std_toe_days: f64,
    pub classes: usize,
}

/// Inserts `t` into a sorted, duplicate-free ToV list.
fn insert_tov(set: &mut Vec<Timestamp>, t: Timestamp) {
    if let Err(pos) = set.binary_search(&t) {
        set.insert(pos, t);
    }
}

fn latest_at_or_before(set: &[Timestamp], t: Timestamp) -> Option<Timestamp> {
    let n = set.partition_point(|&x| x <= t);
    (n > 0).then(|| set[n - 1])
}

fn latest_before(set: &[Timestamp], t: Timestamp) -> Option<Timestamp> {
    let n = set.partition_point(|&x| x < t);
    (n > 0).then(|| set[n - 1])
}

/// Derives the ToE of every edge and completes the ToV sets.
///
/// Each row's source gains its forming time `t`. The partner ToV is the
/// latest occurrence of `dst` at or before `t`. When `dst` has none but `src`
/// was already present strictly before `t`, the row is read the other way
/// round: `dst` is the upcoming vertex and `src` the existing one. When
/// neither endpoint existed before, `toe = 0` and `t` joins `T_dst`.
///
/// `raw` must be sorted by forming time.
pub fn derive_toe(raw: &[RawEdge], tov_sets: &mut [Vec<Timestamp>]) -> Vec<TemporalEdge> {
    debug_assert!(raw.windows(2).all(|w| w[0].t <= w[1].t));
    for e in raw {
        insert_tov(&mut tov_sets[e.src.index()], e.t);
    }
    raw.iter()
        .map(|e| {
            if let Some(prev) = latest_at_or_before(&tov_sets[e.dst.index()], e.t) {
                TemporalEdge {
                    src: e.src,
                    dst: e.dst,
                    t: e.t,
                    toe: e.t - prev,
                    weight: e.weight,
                }
            } else if let Some(prev) = latest_before(&tov_sets[e.src.index()], e.t) {
                insert_tov(&mut tov_sets[e.dst.index()], e.t);
                TemporalEdge {
                    src: e.dst,
                    dst: e.src,
                    t: e.t,
                    toe: e.t - prev,
                    weight: e.weight,
                }
            } else {
                insert_tov(&mut tov_sets[e.dst.index()], e.t);
                TemporalEdge {
                    src: e.src,
                    dst: e.dst,
                    t: e.t,
                    toe: 0,
                    weight: e.weight,
                }
            }
        })
        .collect()
}

fn build_adjacency(n: usize, edges: &[TemporalEdge]) -> (Vec<Vec<Adjacent>>, Vec<u32>) {
    let mut adjacency = vec![Vec::new(); n];
    for (i, e) in edges.iter().enumerate() {
        adjacency[e.src.index()].push(Adjacent {
            neighbor: e.dst,
            edge: i as u32,
            neighbor_tov: e.t - e.toe,
        });
        adjacency[e.dst.index()].push(Adjacent {
            neighbor: e.src,
            edge: i as u32,
            neighbor_tov: e.t,
        });
    }
    for list in &mut adjacency {
        list.sort_by_key(|a| (edges[a.edge as usize].t, a.edge, a.neighbor_tov));
    }
    let degrees = adjacency.iter().map(|l| l.len() as u32).collect();
    (adjacency, degrees)
}

/// Canonical vertex order: numeric when every label is an integer, else lexicographic.
fn canonical_labels(labels: BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = labels.into_iter().collect();
    if out.iter().all(|l| l.parse::<i64>().is_ok()) {
        out.sort_by_key(|l| l.parse::<i64>().unwrap());
    }
    out
}

impl DynamicGraph {
    pub fn empty() -> Self {
        Self::from_raw(Vec::new(), Vec::new(), Vec::new())
    }

    /// Builds a graph from labelled vertices and raw rows; rows are put in
    /// canonical order before ToE derivation.
    pub fn from_raw(
        labels: Vec<String>,
        class_labels: Vec<Option<String>>,
        mut raw: Vec<RawEdge>,
    ) -> Self {
        assert_eq!(labels.len(), class_labels.len());
        raw.sort_by(|a, b| {
            (a.t, a.src, a.dst)
                .cmp(&(b.t, b.src, b.dst))
                .then(a.weight.total_cmp(&b.weight))
        });
        let mut tov_sets = vec![Vec::new(); labels.len()];
        let edges = derive_toe(&raw, &mut tov_sets);
        Self::assemble(labels, class_labels, tov_sets, edges)
    }

    /// Builds a graph from string-labelled rows `(src, dst, t, weight)`.
    pub fn from_labelled_rows<S: AsRef<str>>(rows: &[(S, S, Timestamp, f64)]) -> Self {
        let names: BTreeSet<String> = rows
            .iter()
            .flat_map(|(a, b, _, _)| [a.as_ref().to_string(), b.as_ref().to_string()])
            .collect();
        let labels = canonical_labels(names);
        let index: HashMap<&str, VertexId> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), VertexId(i as u32)))
            .collect();
        let raw = rows
            .iter()
            .map(|(a, b, t, w)| RawEdge {
                src: index[a.as_ref()],
                dst: index[b.as_ref()],
                t: *t,
                weight: *w,
            })
            .collect();
        let n = labels.len();
        Self::from_raw(labels, vec![None; n], raw)
    }

    fn assemble(
        labels: Vec<String>,
        class_labels: Vec<Option<String>>,
        tov_sets: Vec<Vec<Timestamp>>,
        edges: Vec<TemporalEdge>,
    ) -> Self {
        let (adjacency, degrees) = build_adjacency(labels.len(), &edges);
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), VertexId(i as u32)))
            .collect();
        Self {
            labels,
            class_labels,
            index,
            tov_sets,
            edges,
            adjacency,
            degrees,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_occurrences(&self) -> usize {
        self.tov_sets.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    pub fn edge(&self, i: usize) -> &TemporalEdge {
        &self.edges[i]
    }

    pub fn label(&self, v: VertexId) -> &str {
        &self.labels[v.index()]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn class_label(&self, v: VertexId) -> Option<&str> {
        self.class_labels[v.index()].as_deref()
    }

    pub fn vertex(&self, label: &str) -> Option<VertexId> {
        self.index.get(label).copied()
    }

    pub fn tovs(&self, v: VertexId) -> &[Timestamp] {
        &self.tov_sets[v.index()]
    }

    pub fn degree(&self, v: VertexId) -> u32 {
        self.degrees[v.index()]
    }

    /// Incident edges of `v`, sorted by forming time.
    pub fn adjacent(&self, v: VertexId) -> &[Adjacent] {
        &self.adjacency[v.index()]
    }

    /// All `(vertex, tov)` pairs, vertex-major and time-ascending.
    pub fn occurrences(&self) -> Vec<VertexOccurrence> {
        self.tov_sets
            .iter()
            .enumerate()
            .flat_map(|(v, ts)| {
                ts.iter().map(move |&tov| VertexOccurrence {
                    vertex: VertexId(v as u32),
                    tov,
                })
            })
            .collect()
    }

    /// Whether `a` and `b` share at least one edge.
    pub fn are_adjacent(&self, a: VertexId, b: VertexId) -> bool {
        let (small, other) = if self.adjacency[a.index()].len() <= self.adjacency[b.index()].len() {
            (a, b)
        } else {
            (b, a)
        };
        self.adjacency[small.index()]
            .iter()
            .any(|adj| adj.neighbor == other)
    }

    /// Copy of the graph keeping only edges with `keep[i]`; ToV sets are
    /// unchanged. Returns the original index of each retained edge.
    pub fn retain_edges(&self, keep: &[bool]) -> (DynamicGraph, Vec<u32>) {
        assert_eq!(keep.len(), self.edges.len());
        let mut origin = Vec::new();
        let mut edges = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            if keep[i] {
                origin.push(i as u32);
                edges.push(*e);
            }
        }
        let g = Self::assemble(
            self.labels.clone(),
            self.class_labels.clone(),
            self.tov_sets.clone(),
            edges,
        );
        (g, origin)
    }

    pub fn stats(&self) -> GraphStats {
        let n = self.num_vertices();
        let toes: Vec<f64> = self
            .edges
            .iter()
            .map(|e| e.toe as f64 / 86_400.0)
            .collect();
        let mean = if toes.is_empty() {
            0.0
        } else {
            toes.iter().sum::<f64>() / toes.len() as f64
        };
        let var = if toes.is_empty() {
            0.0
        } else {
            toes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / toes.len() as f64
        };
        let distinct: usize = self
            .adjacency
            .iter()
            .map(|l| l.iter().map(|a| a.neighbor).collect::<BTreeSet<_>>().len())
            .sum();
        let classes = self
            .class_labels
            .iter()
            .flatten()
            .collect::<BTreeSet<_>>()
            .len();
        GraphStats {
            vertices: n,
            edges: self.edges.len(),
            occurrences: self.num_occurrences(),
            mean_degree: if n == 0 { 0.0 } else { 2.0 * self.edges.len() as f64 / n as f64 },
            mean_distinct_degree: if n == 0 { 0.0 } else { distinct as f64 / n as f64 },
            mean_toe_days: mean,
            std_toe_days: var.sqrt(),
            classes,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.labels.len() as u64);
        w.u64(self.edges.len() as u64);
        for (i, label) in self.labels.iter().enumerate() {
            w.str(label);
            match &self.class_labels[i] {
                Some(c) => {
                    w.u8(1);
                    w.str(c);
                }
                None => w.u8(0),
            }
            w.u32(self.tov_sets[i].len() as u32);
            for &t in &self.tov_sets[i] {
                w.i64(t);
            }
        }
        for e in &self.edges {
            w.u32(e.src.0);
            w.u32(e.dst.0);
            w.i64(e.t);
            w.i64(e.toe);
            w.f64(e.weight);
        }
        w.finish(GRAPH_MAGIC, GRAPH_VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("graph", bytes, GRAPH_MAGIC, GRAPH_VERSION)?;
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let mut labels = Vec::with_capacity(n);
        let mut class_labels = Vec::with_capacity(n);
        let mut tov_sets = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.str()?);
            class_labels.push(match r.u8()? {
                0 => None,
                _ => Some(r.str()?),
            });
            let k = r.u32()? as usize;
            tov_sets.push((0..k).map(|_| r.i64()).collect::<Result<Vec<_>>>()?);
        }
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let src = VertexId(r.u32()?);
            let dst = VertexId(r.u32()?);
            if src.index() >= n || dst.index() >= n {
                return Err(Error::Format {
                    what: "graph",
                    message: "edge endpoint out of range".into(),
                });
            }
            edges.push(TemporalEdge {
                src,
                dst,
                t: r.i64()?,
                toe: r.i64()?,
                weight: r.f64()?,
            });
        }
        r.finish()?;
        Ok(Self::assemble(labels, class_labels, tov_sets, edges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    /// Line-oriented dump for diffing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# tadge graph v{GRAPH_VERSION}");
        let _ = writeln!(out, "vertices {}", self.labels.len());
        for (i, label) in self.labels.iter().enumerate() {
            let tovs: Vec<String> = self.tov_sets[i].iter().map(|t| t.to_string()).collect();
            let _ = writeln!(
                out,
                "v {i} {label} {} {}",
                self.class_labels[i].as_deref().unwrap_or("-"),
                tovs.join(",")
            );
        }
        let _ = writeln!(out, "edges {}", self.edges.len());
        for e in &self.edges {
            let _ = writeln!(
                out,
                "e {} {} {} {} {}",
                e.src.0, e.dst.0, e.t, e.toe, e.weight
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Src,
    Dst,
    Ts,
    Weight,
    Skip,
}

/// Positional column mapping for delimited edge lists, e.g. `"src,dst,ts,weight"`.
#[derive(Debug, Clone)]
pub struct Schema {
    columns: Vec<Column>,
    pub delimiter: u8,
    pub has_header: bool,
}

impl Schema {
    pub fn parse(spec: &str) -> Result<Self> {
        let columns = spec
            .split(',')
            .map(|tok| match tok.trim().to_ascii_lowercase().as_str() {
                "src" | "source" => Ok(Column::Src),
                "dst" | "target" => Ok(Column::Dst),
                "ts" | "t" | "time" | "timestamp" => Ok(Column::Ts),
                "weight" | "w" => Ok(Column::Weight),
                "_" | "skip" => Ok(Column::Skip),
                other => Err(Error::Schema(format!("unknown column `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        for (required, name) in [(Column::Src, "src"), (Column::Dst, "dst"), (Column::Ts, "ts")] {
            match columns.iter().filter(|&&c| c == required).count() {
                1 => {}
                0 => return Err(Error::Schema(format!("missing `{name}` column"))),
                _ => return Err(Error::Schema(format!("duplicate `{name}` column"))),
            }
        }
        if columns.iter().filter(|&&c| c == Column::Weight).count() > 1 {
            return Err(Error::Schema("duplicate `weight` column".into()));
        }
        Ok(Self {
            columns,
            delimiter: b',',
            has_header: false,
        })
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }

    pub fn with_header(mut self, has_header: bool) -> Self {
        self.has_header = has_header;
        self
    }

    fn position(&self, c: Column) -> Option<usize> {
        self.columns.iter().position(|&x| x == c)
    }
}

fn parse_timestamp(s: &str) -> Option<Timestamp> {
    s.parse::<i64>()
        .ok()
        .or_else(|| s.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| x.floor() as i64))
}

fn csv_reader(path: &Path, delimiter: u8, has_header: bool) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.into(),
                row: 0,
                message: format!("{other:?}"),
            },
        })
}

/// Reads a delimited temporal edge list and an optional
/// `vertex_label,class_label` sidecar into a [`DynamicGraph`].
pub fn ingest_edge_list(path: &Path, schema: &Schema, labels: Option<&Path>) -> Result<DynamicGraph> {
    let src_col = schema.position(Column::Src).unwrap();
    let dst_col = schema.position(Column::Dst).unwrap();
    let ts_col = schema.position(Column::Ts).unwrap();
    let w_col = schema.position(Column::Weight);

    let mut rows: Vec<(String, String, Timestamp, f64)> = Vec::new();
    let mut reader = csv_reader(path, schema.delimiter, schema.has_header)?;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            row,
            message,
        };
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(format!("missing `{name}` column")))
        };
        let src = field(src_col, "src")?.to_string();
        let dst = field(dst_col, "dst")?.to_string();
        let ts = field(ts_col, "ts")?;
        let t = parse_timestamp(ts).ok_or_else(|| parse_err(format!("bad timestamp `{ts}`")))?;
        let w = match w_col {
            Some(c) => {
                let s = field(c, "weight")?;
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(format!("bad weight `{s}`")))?
            }
            None => 1.0,
        };
        rows.push((src, dst, t, w));
    }

    let mut classes: HashMap<String, String> = HashMap::new();
    if let Some(lpath) = labels {
        let mut reader = csv_reader(lpath, b',', false)?;
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                path: lpath.into(),
                row: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() == 1 && record[0].is_empty() {
                continue;
            }
            match (record.get(0), record.get(1)) {
                (Some(v), Some(c)) if !v.is_empty() && !c.is_empty() => {
                    classes.insert(v.to_string(), c.to_string());
                }
                _ => {
                    return Err(Error::Parse {
                        path: lpath.into(),
                        row,
                        message: "expected `vertex_label,class_label`".into(),
                    })
                }
            }
        }
    }

    let names: BTreeSet<String> = rows
        .iter()
        .flat_map(|(a, b, _, _)| [a.clone(), b.clone()])
        .chain(classes.keys().cloned())
        .collect();
    let labels = canonical_labels(names);
    let index: HashMap<&str, VertexId> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), VertexId(i as u32)))
        .collect();
    let raw = rows
        .iter()
        .map(|(a, b, t, w)| RawEdge {
            src: index[a.as_str()],
            dst: index[b.as_str()],
            t: *t,
            weight: *w,
        })
        .collect();
    let class_labels = labels.iter().map(|l| classes.get(l).cloned()).collect();
    Ok(DynamicGraph::from_raw(labels, class_labels, raw))
}
