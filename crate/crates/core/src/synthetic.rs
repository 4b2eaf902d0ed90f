//! Planted-community dynamic graphs for end-to-end checks.
//!
//! Each community forms a chain of edges: every new edge links a random member
//! to the source of the previous edge, after a Gamma distributed gap whose
//! mean is set by the community's tier. The ToE of an edge is that gap, so it
//! depends on the community. Communities start at staggered times. A vertex's
//! class label is its tier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::graph::{DynamicGraph, RawEdge, VertexId};

const DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub vertices: usize,
    pub communities: usize,
    pub tiers: usize,
    /// Mean gap in days between consecutive edges of a community, per tier.
    pub tier_gap_days: Vec<f64>,
    /// Gamma shape of the gaps; larger is more regular.
    pub gap_shape: f64,
    pub events_per_vertex: usize,
    /// Share of edges whose source is drawn from another community.
    pub cross_fraction: f64,
    /// Community start times are uniform in `[0, stagger_days)`.
    pub stagger_days: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vertices: 500,
            communities: 50,
            tiers: 5,
            tier_gap_days: vec![0.2, 0.5, 1.0, 2.5, 6.0],
            gap_shape: 6.0,
            events_per_vertex: 8,
            cross_fraction: 0.1,
            stagger_days: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub graph: DynamicGraph,
    pub community: Vec<usize>,
    pub tier: Vec<usize>,
}

impl SyntheticConfig {
    pub fn community_of(&self, v: usize) -> usize {
        v % self.communities
    }

    pub fn tier_of_community(&self, c: usize) -> usize {
        c % self.tiers
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Synthetic {
    assert!(cfg.communities > 0 && cfg.vertices >= 2 * cfg.communities, "communities need at least two members");
    assert_eq!(cfg.tier_gap_days.len(), cfg.tiers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let community: Vec<usize> = (0..cfg.vertices).map(|v| cfg.community_of(v)).collect();
    let tier: Vec<usize> = community.iter().map(|&c| cfg.tier_of_community(c)).collect();
    let members: Vec<Vec<usize>> = (0..cfg.communities)
        .map(|c| (0..cfg.vertices).filter(|&v| community[v] == c).collect())
        .collect();

    let mut raw = Vec::new();
    for (c, group) in members.iter().enumerate() {
        let gap = cfg.tier_gap_days[cfg.tier_of_community(c)];
        let gaps = Gamma::new(cfg.gap_shape, gap / cfg.gap_shape).expect("positive gap");
        let mut t = rng.random_range(0.0..cfg.stagger_days.max(f64::MIN_POSITIVE));
        let mut prev = group[rng.random_range(0..group.len())];
        for _ in 0..group.len() * cfg.events_per_vertex / 2 {
            t += gaps.sample(&mut rng);
            let a = if rng.random::<f64>() < cfg.cross_fraction {
                let mut o = rng.random_range(0..cfg.vertices);
                while community[o] == c {
                    o = rng.random_range(0..cfg.vertices);
                }
                o
            } else {
                let mut o = group[rng.random_range(0..group.len())];
                while o == prev {
                    o = group[rng.random_range(0..group.len())];
                }
                o
            };
            raw.push(RawEdge {
                src: VertexId(a as u32),
                dst: VertexId(prev as u32),
                t: (t * DAY).round() as i64,
                weight: 1.0,
            });
            if community[a] == c {
                prev = a;
            }
        }
    }
    let labels = (0..cfg.vertices).map(|v| v.to_string()).collect();
    let classes = tier.iter().map(|t| Some(format!("tier{t}"))).collect();
    Synthetic {
        graph: DynamicGraph::from_raw(labels, classes, raw),
        community,
        tier,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_community_dependent() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg);
        assert_eq!(a.graph, generate(&cfg).graph);
        assert_eq!(a.graph.num_vertices(), 500);
        assert_eq!(a.graph.num_edges(), 2000);

        let mut sum = vec![0.0; cfg.tiers];
        let mut count = vec![0usize; cfg.tiers];
        let mut intra = 0;
        for e in a.graph.edges() {
            if a.community[e.src.index()] == a.community[e.dst.index()] {
                intra += 1;
                let t = a.tier[e.dst.index()];
                sum[t] += e.toe as f64 / DAY;
                count[t] += 1;
            }
        }
        assert!(intra as f64 > 0.85 * a.graph.num_edges() as f64);
        let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }
}
