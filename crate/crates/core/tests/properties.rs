use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tadge::graph::{DynamicGraph, VertexOccurrence};
use tadge::sampler::{build_corpora, sample_walk, transition_weights, window_pairs, Corpus, WalkConfig, WindowConfig};
use tadge::time::{normalize_time, TimeScale};

fn graph_from(rows: &[(u8, u8, u16)]) -> DynamicGraph {
    let rows: Vec<(String, String, i64, f64)> = rows
        .iter()
        .map(|&(a, b, t)| (format!("v{a}"), format!("v{b}"), t as i64 * 60, 1.0))
        .collect();
    DynamicGraph::from_labelled_rows(&rows)
}

fn edge_rows() -> impl Strategy<Value = Vec<(u8, u8, u16)>> {
    prop::collection::vec((0u8..12, 0u8..12, 0u16..500), 5..80)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toe_is_non_negative_and_graph_round_trips(rows in edge_rows()) {
        let g = graph_from(&rows);
        prop_assert_eq!(g.num_edges(), rows.len());
        for e in g.edges() {
            prop_assert!(e.toe >= 0);
            prop_assert!(g.tovs(e.src).contains(&e.t));
            prop_assert!(g.tovs(e.dst).contains(&(e.t - e.toe)));
        }
        for v in 0..g.num_vertices() {
            let t = g.tovs(tadge::VertexId(v as u32));
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert_eq!(DynamicGraph::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn transition_weights_form_a_distribution(rows in edge_rows()) {
        let g = graph_from(&rows);
        for occ in g.occurrences() {
            let w = transition_weights(&g, occ);
            if w.is_empty() {
                continue;
            }
            let total: f64 = w.iter().map(|c| c.probability).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for c in &w {
                prop_assert!(c.probability >= 0.0);
                prop_assert!(c.occurrence.tov > occ.tov);
            }
        }
    }

    #[test]
    fn walks_are_time_respecting_and_padded(rows in edge_rows(), seed in any::<u64>(), max_len in 2usize..7) {
        let g = graph_from(&rows);
        let cfg = WalkConfig { num_starts: 1, max_len, min_len: 2, seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eos = g.num_vertices() as u32;
        for occ in g.occurrences() {
            let Some(seq) = sample_walk(&g, occ, 0, &cfg, &mut rng) else { continue };
            prop_assert_eq!(seq.steps.len(), max_len + 1);
            prop_assert!((2..=max_len).contains(&seq.real_len));
            prop_assert_eq!(seq.start_time, occ.tov);
            let real = seq.real_steps();
            prop_assert!(real.windows(2).all(|w| w[0].tov < w[1].tov));
            for w in real.windows(2) {
                let e = g.edge(w[1].edge.unwrap() as usize);
                prop_assert_eq!(e.toe, w[1].toe);
                let ends = [e.src.0, e.dst.0];
                prop_assert!(ends.contains(&w[0].vertex) && ends.contains(&w[1].vertex));
            }
            prop_assert!(seq.steps[seq.real_len..].iter().all(|s| s.vertex == eos && s.toe == 0));
            let _ = VertexOccurrence { vertex: occ.vertex, tov: occ.tov };
        }
    }

    #[test]
    fn corpora_are_edge_disjoint_and_reproducible(rows in prop::collection::vec((0u8..12, 0u8..12, 0u16..500), 40..120), seed in any::<u64>()) {
        let g = graph_from(&rows);
        let m = g.num_vertices().max(2);
        prop_assume!(m < g.num_occurrences());
        let cfg = WalkConfig { num_starts: m, max_len: 4, min_len: 2, seed };
        let (train, test, stats) = build_corpora(&g, &cfg, 0.3).unwrap();
        prop_assert!(stats.edge_disjoint);
        let test_edges: std::collections::HashSet<u32> =
            test.sequences.iter().flat_map(|s| s.steps.iter().filter_map(|st| st.edge)).collect();
        for s in &train.sequences {
            for st in &s.steps {
                prop_assert!(st.edge.is_none_or(|e| !test_edges.contains(&e)));
            }
        }
        prop_assert!(train.sequences.windows(2).all(|w| w[0].start_time <= w[1].start_time));
        let (again, _, _) = build_corpora(&g, &cfg, 0.3).unwrap();
        prop_assert_eq!(again.to_bytes(), train.to_bytes());
        prop_assert_eq!(Corpus::from_bytes(&train.to_bytes()).unwrap(), train);
    }

    #[test]
    fn window_pairs_count(m in 0usize..60, len in 2usize..9, step_frac in 0.0f64..1.0) {
        let step = 1 + ((len - 1) as f64 * step_frac) as usize % (len - 1);
        let w = WindowConfig { len, step };
        let times: Vec<i64> = (0..m as i64).map(|i| i * 3_600).collect();
        let pairs = window_pairs(&times, &w, &TimeScale::days());
        let width = len.min(m);
        let expected = if m < 2 { 0 } else { w.offsets(m).len() * width * (width - 1) / 2 };
        prop_assert_eq!(pairs.len(), expected);
        for p in &pairs {
            prop_assert!(p.earlier < p.later && p.later < m);
            prop_assert!((0.0..1.0).contains(&p.delta));
        }
    }

    #[test]
    fn normalization_is_monotone(a in 0.0f64..1e6, b in 0.0f64..1e6) {
        let (fa, fb) = (normalize_time(a).unwrap(), normalize_time(b).unwrap());
        prop_assert!((0.0..1.0).contains(&fa));
        if a < b {
            prop_assert!(fa <= fb);
        }
        let back = TimeScale::seconds().denormalize(fa);
        prop_assert!((back - a).abs() <= 1e-6 * a.max(1.0));
    }
}
