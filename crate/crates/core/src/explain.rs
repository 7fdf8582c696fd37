//! Relation-path explanations weighted by normalized attention.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::entity_updater::AttentionRecord;
use crate::error::{Error, NumError, Result};
use crate::kgdata::{ExtendedGraph, Triple, Vocabulary};

/// Per-layer edge weights, each target's incoming weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAttention {
    pub layers: Vec<Vec<f64>>,
}

/// `|α_e| / Σ_{e′ → t} |α_e′|` for every edge `e → t` and layer.
///
/// A target whose incoming attentions are all zero gets uniform weights.
pub fn normalize_attentions(
    record: &AttentionRecord,
    graph: &ExtendedGraph,
) -> Result<NormalizedAttention, NumError> {
    let mut layers = Vec::with_capacity(record.num_layers());
    for (l, alpha) in record.layers.iter().enumerate() {
        if alpha.len() != graph.num_edges() {
            return Err(NumError::Shape {
                op: "normalize_attentions",
                lhs: (alpha.len(), 1),
                rhs: (graph.num_edges(), 1),
            });
        }
        let mut weights = vec![0.0; alpha.len()];
        for t in 0..graph.num_entities() {
            let edges = graph.incoming_edges(t);
            let total: f64 = edges.iter().map(|&e| alpha[e].abs()).sum();
            if total > 0.0 {
                for &e in edges {
                    weights[e] = alpha[e].abs() / total;
                }
            } else {
                log::warn!("layer {l}: all attentions into entity {t} are zero; using uniform weights");
                for &e in edges {
                    weights[e] = 1.0 / edges.len() as f64;
                }
            }
        }
        layers.push(weights);
    }
    Ok(NormalizedAttention { layers })
}

/// A simple path as a sequence of extended-graph edge indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub start: usize,
    pub edges: Vec<usize>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `(relation, entity)` for every hop.
    pub fn hops(&self, graph: &ExtendedGraph) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .map(|&e| {
                let t = graph.triples()[e];
                (t.relation, t.tail)
            })
            .collect()
    }
}

fn out_edges(graph: &ExtendedGraph) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); graph.num_entities()];
    let self_loop = graph.self_loop_relation();
    for (e, t) in graph.triples().iter().enumerate() {
        if t.relation != self_loop {
            out[t.head].push(e);
        }
    }
    for edges in &mut out {
        edges.sort_by_key(|&e| {
            let t = graph.triples()[e];
            (t.relation, t.tail)
        });
    }
    out
}

/// Every simple path from `s` to `t` with at most `max_len` hops, skipping
/// self-loops, in lexicographic order of `(relation, entity)` hops.
pub fn enumerate_paths(graph: &ExtendedGraph, s: usize, t: usize, max_len: usize) -> Result<Vec<Path>> {
    let n = graph.num_entities();
    for id in [s, t] {
        if id >= n {
            return Err(Error::Argument(format!("entity id {id} out of range for {n} entities")));
        }
    }
    if s == t {
        return Ok(Vec::new());
    }
    let out = out_edges(graph);
    let mut found = Vec::new();
    let mut visited = vec![false; n];
    visited[s] = true;
    walk(graph, &out, s, t, max_len, &mut visited, &mut Vec::new(), &mut found);
    let mut paths: Vec<Path> = found.into_iter().map(|edges| Path { start: s, edges }).collect();
    paths.sort_by_cached_key(|p| p.hops(graph));
    Ok(paths)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    graph: &ExtendedGraph,
    out: &[Vec<usize>],
    at: usize,
    goal: usize,
    budget: usize,
    visited: &mut [bool],
    stack: &mut Vec<usize>,
    found: &mut Vec<Vec<usize>>,
) {
    if budget == 0 {
        return;
    }
    for &e in &out[at] {
        let next = graph.triples()[e].tail;
        if next == goal {
            stack.push(e);
            found.push(stack.clone());
            stack.pop();
            continue;
        }
        if visited[next] {
            continue;
        }
        visited[next] = true;
        stack.push(e);
        walk(graph, out, next, goal, budget - 1, visited, stack, found);
        stack.pop();
        visited[next] = false;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathExplanation {
    pub path: Path,
    /// Normalized weight of hop `k`, read from layer `k`.
    pub weights: Vec<f64>,
    pub score: f64,
}

/// Product of layer-matched normalized weights along `path`.
pub fn score_path(path: &Path, normalized: &NormalizedAttention) -> Result<PathExplanation> {
    if path.len() > normalized.layers.len() {
        return Err(Error::Argument(format!(
            "path of {} hops exceeds the {} recorded layers",
            path.len(),
            normalized.layers.len()
        )));
    }
    let weights: Vec<f64> = path
        .edges
        .iter()
        .enumerate()
        .map(|(k, &e)| normalized.layers[k][e])
        .collect();
    Ok(PathExplanation {
        path: path.clone(),
        score: weights.iter().product(),
        weights,
    })
}

/// Top-`k` paths from `query.head` to `query.tail`, best first.
///
/// Ties keep lexicographic path order. An empty result is not an error.
pub fn explain(
    graph: &ExtendedGraph,
    record: &AttentionRecord,
    query: Triple,
    k: usize,
    max_len: usize,
) -> Result<Vec<PathExplanation>> {
    if max_len == 0 || max_len > record.num_layers() {
        return Err(Error::Argument(format!(
            "max_len must lie in 1..={} (the number of layers), got {max_len}",
            record.num_layers()
        )));
    }
    let normalized = normalize_attentions(record, graph)?;
    let mut ranked = enumerate_paths(graph, query.head, query.tail, max_len)?
        .iter()
        .map(|p| score_path(p, &normalized))
        .collect::<Result<Vec<_>>>()?;
    if ranked.is_empty() {
        log::warn!(
            "no path of at most {max_len} hops from entity {} to entity {}",
            query.head,
            query.tail
        );
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub source: String,
    pub relation: String,
    pub target: String,
    pub layer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub rank: usize,
    pub score: f64,
    pub hops: Vec<HopRecord>,
}

pub fn path_records(
    explanations: &[PathExplanation],
    graph: &ExtendedGraph,
    vocab: &Vocabulary,
) -> Vec<PathRecord> {
    explanations
        .iter()
        .enumerate()
        .map(|(i, x)| PathRecord {
            rank: i + 1,
            score: x.score,
            hops: x
                .path
                .edges
                .iter()
                .zip(&x.weights)
                .enumerate()
                .map(|(layer, (&e, &weight))| {
                    let t = graph.triples()[e];
                    HopRecord {
                        source: vocab.entity_name(t.head).to_string(),
                        relation: vocab.extended_relation_name(t.relation),
                        target: vocab.entity_name(t.tail).to_string(),
                        layer,
                        weight,
                    }
                })
                .collect(),
        })
        .collect()
}

pub fn to_json(records: &[PathRecord]) -> Result<String> {
    serde_json::to_string_pretty(records).map_err(|e| Error::Argument(format!("json export: {e}")))
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Graphviz rendering: entity nodes, weighted relation edges, and the query
/// as a dashed edge.
pub fn to_dot(
    explanations: &[PathExplanation],
    graph: &ExtendedGraph,
    vocab: &Vocabulary,
    query: Triple,
) -> String {
    let mut nodes = BTreeMap::new();
    nodes.insert(query.head, ());
    nodes.insert(query.tail, ());
    // Edges shared between paths are drawn once per layer.
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for x in explanations {
        for (layer, (&e, &w)) in x.path.edges.iter().zip(&x.weights).enumerate() {
            let t = graph.triples()[e];
            nodes.insert(t.head, ());
            nodes.insert(t.tail, ());
            edges.insert((e, layer), w);
        }
    }
    let mut out = String::from("digraph explanation {\n  rankdir=LR;\n  node [shape=box];\n");
    for &id in nodes.keys() {
        let _ = writeln!(out, "  e{id} [label={}];", quote(vocab.entity_name(id)));
    }
    for (&(e, _), &w) in &edges {
        let t = graph.triples()[e];
        let label = format!("{} ({w:.3})", vocab.extended_relation_name(t.relation));
        let _ = writeln!(
            out,
            "  e{} -> e{} [label={}, penwidth={:.3}];",
            t.head,
            t.tail,
            quote(&label),
            1.0 + 4.0 * w
        );
    }
    let _ = writeln!(
        out,
        "  e{} -> e{} [label={}, style=dashed];",
        query.head,
        query.tail,
        quote(&format!("{} ?", vocab.extended_relation_name(query.relation)))
    );
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// a→b→c plus a→c, one relation.
    fn triangle() -> ExtendedGraph {
        ExtendedGraph::new(
            &[Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(0, 0, 2)],
            3,
            1,
        )
    }

    fn uniform_record(g: &ExtendedGraph, layers: usize, value: f64) -> AttentionRecord {
        AttentionRecord {
            layers: vec![vec![value; g.num_edges()]; layers],
        }
    }

    #[test]
    fn triangle_has_two_paths() {
        let g = triangle();
        let paths = enumerate_paths(&g, 0, 2, 2).unwrap();
        assert_eq!(paths.len(), 2);
        let hops: Vec<_> = paths.iter().map(|p| p.hops(&g)).collect();
        assert_eq!(hops, vec![vec![(0, 1), (0, 2)], vec![(0, 2)]]);
        assert_eq!(enumerate_paths(&g, 0, 2, 1).unwrap().len(), 1);
        assert!(enumerate_paths(&g, 0, 0, 1).unwrap().is_empty());
        assert!(enumerate_paths(&g, 0, 3, 2).is_err());
    }

    #[test]
    fn disconnected_entities_have_no_paths() {
        let g = ExtendedGraph::new(&[Triple::new(0, 0, 1)], 4, 1);
        assert!(enumerate_paths(&g, 0, 3, 2).unwrap().is_empty());
        let rec = uniform_record(&g, 2, 0.5);
        assert!(explain(&g, &rec, Triple::new(0, 0, 3), 5, 2).unwrap().is_empty());
    }

    #[test]
    fn normalization_examples() {
        // Entity 2 of the isolated pair receives only its self-loop.
        let g = ExtendedGraph::new(&[Triple::new(0, 0, 1)], 3, 1);
        let rec = uniform_record(&g, 1, 0.3);
        let norm = normalize_attentions(&rec, &g).unwrap();
        let only = g.incoming_edges(2);
        assert_eq!(only.len(), 1);
        assert_eq!(norm.layers[0][only[0]], 1.0);

        // Entity 1 receives (0, r) and its self-loop: α = 0.6 and −0.6.
        let mut alpha = vec![0.0; g.num_edges()];
        let into = g.incoming_edges(1);
        assert_eq!(into.len(), 2);
        alpha[into[0]] = 0.6;
        alpha[into[1]] = -0.6;
        let norm = normalize_attentions(&AttentionRecord { layers: vec![alpha] }, &g).unwrap();
        assert_eq!(norm.layers[0][into[0]], 0.5);
        assert_eq!(norm.layers[0][into[1]], 0.5);
        // Entity 0's incoming attentions are all zero: uniform.
        let into0 = g.incoming_edges(0);
        for &e in into0 {
            assert_eq!(norm.layers[0][e], 1.0 / into0.len() as f64);
        }
    }

    #[test]
    fn three_edge_target_by_hand() {
        let g = triangle();
        // Entity 2 receives from 1, from 0, and its self-loop.
        let into = g.incoming_edges(2).to_vec();
        assert_eq!(into.len(), 3);
        let mut alpha = vec![0.1; g.num_edges()];
        let raw = [0.2, -0.5, 0.3];
        for (&e, &a) in into.iter().zip(&raw) {
            alpha[e] = a;
        }
        let norm = normalize_attentions(&AttentionRecord { layers: vec![alpha] }, &g).unwrap();
        for (&e, expect) in into.iter().zip([0.2, 0.5, 0.3]) {
            assert!((norm.layers[0][e] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_by_weight_product() {
        // Two 2-hop routes 0→1→3 and 0→2→3.
        let g = ExtendedGraph::new(
            &[
                Triple::new(0, 0, 1),
                Triple::new(1, 0, 3),
                Triple::new(0, 1, 2),
                Triple::new(2, 1, 3),
            ],
            4,
            2,
        );
        let paths = enumerate_paths(&g, 0, 3, 2).unwrap();
        assert_eq!(paths.len(), 2);
        let mut norm = NormalizedAttention {
            layers: vec![vec![0.0; g.num_edges()]; 2],
        };
        let (p, q) = (&paths[0], &paths[1]);
        norm.layers[0][p.edges[0]] = 0.9;
        norm.layers[1][p.edges[1]] = 0.3;
        norm.layers[0][q.edges[0]] = 0.8;
        norm.layers[1][q.edges[1]] = 0.5;
        let mut scored: Vec<_> = paths.iter().map(|p| score_path(p, &norm).unwrap()).collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score));
        assert!((scored[0].score - 0.40).abs() < 1e-12);
        assert!((scored[1].score - 0.27).abs() < 1e-12);
        assert_eq!(scored[0].path, *q);
    }

    #[test]
    fn unique_path_with_unit_weights_scores_one() {
        let g = ExtendedGraph::new(&[Triple::new(0, 0, 1)], 2, 1);
        // Entity 1 has two incoming edges; give its self-loop zero attention.
        let mut alpha = vec![0.7; g.num_edges()];
        for &e in g.incoming_edges(1) {
            if g.triples()[e].relation == g.self_loop_relation() {
                alpha[e] = 0.0;
            }
        }
        let rec = AttentionRecord {
            layers: vec![alpha.clone(), alpha],
        };
        let top = explain(&g, &rec, Triple::new(0, 0, 1), 10, 2).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].score, 1.0);
        assert!(explain(&g, &rec, Triple::new(0, 0, 1), 10, 3).is_err());
    }

    #[test]
    fn k_truncates_and_ties_keep_path_order() {
        let g = triangle();
        let rec = uniform_record(&g, 2, 0.5);
        let all = explain(&g, &rec, Triple::new(0, 0, 2), 10, 2).unwrap();
        assert_eq!(all.len(), 2);
        let top = explain(&g, &rec, Triple::new(0, 0, 2), 1, 2).unwrap();
        assert_eq!(top.len(), 1);
        assert!(all[0].score >= all[1].score);
    }

    #[test]
    fn dot_and_json_exports() {
        let g = triangle();
        let mut vocab = Vocabulary::new();
        for n in ["a", "b", "c \"q\""] {
            vocab.intern_entity(n);
        }
        vocab.intern_relation("r");
        let rec = uniform_record(&g, 2, 0.5);
        let q = Triple::new(0, 0, 2);
        let top = explain(&g, &rec, q, 5, 2).unwrap();
        let dot = to_dot(&top, &g, &vocab, q);
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("style=dashed"));
        assert!(dot.contains("\\\"q\\\""));
        let records = path_records(&top, &g, &vocab);
        assert_eq!(records.len(), 2);
        let json = to_json(&records).unwrap();
        let back: Vec<PathRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, records);
    }

    /// Counts simple paths by brute force over all entity sequences.
    fn adjacency_oracle(adj: &[Vec<usize>], s: usize, t: usize, max_len: usize) -> usize {
        fn go(adj: &[Vec<usize>], seq: &mut Vec<usize>, t: usize, left: usize) -> usize {
            let at = *seq.last().unwrap();
            let mut count = 0;
            for (next, &mult) in adj[at].iter().enumerate() {
                if mult == 0 {
                    continue;
                }
                if next == t {
                    count += mult;
                } else if left > 1 && !seq.contains(&next) {
                    seq.push(next);
                    count += mult * go(adj, seq, t, left - 1);
                    seq.pop();
                }
            }
            count
        }
        if max_len == 0 {
            return 0;
        }
        go(adj, &mut vec![s], t, max_len)
    }

    proptest! {
        #[test]
        fn path_count_matches_oracle(
            edges in prop::collection::vec((0usize..7, 0usize..2, 0usize..7), 1..14),
            s in 0usize..7,
            t in 0usize..7,
            max_len in 1usize..4,
        ) {
            let mut train: Vec<Triple> = edges.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect();
            train.sort();
            train.dedup();
            let g = ExtendedGraph::new(&train, 7, 2);
            let mut adj = vec![vec![0usize; 7]; 7];
            for tr in g.triples() {
                if tr.relation != g.self_loop_relation() {
                    adj[tr.head][tr.tail] += 1;
                }
            }
            let paths = enumerate_paths(&g, s, t, max_len).unwrap();
            let expect = if s == t { 0 } else { adjacency_oracle(&adj, s, t, max_len) };
            prop_assert_eq!(paths.len(), expect);
            prop_assert!(paths.iter().all(|p| !p.is_empty() && p.len() <= max_len));
            let rec = AttentionRecord { layers: vec![vec![0.4; g.num_edges()]; 3] };
            let norm = normalize_attentions(&rec, &g).unwrap();
            for p in &paths {
                let x = score_path(p, &norm).unwrap();
                prop_assert!((0.0..=1.0).contains(&x.score));
                let mut running = 1.0;
                for w in &x.weights {
                    prop_assert!(running * w <= running);
                    running *= w;
                }
            }
            for layer in &norm.layers {
                for tt in 0..7 {
                    let sum: f64 = g.incoming_edges(tt).iter().map(|&e| layer[e]).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
