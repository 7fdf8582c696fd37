//! Weight-free, attention-weighted aggregation of composed neighbor messages.
//!
//! For every entity `t`,
//! `h'_t = Σ_{(s,r) ∈ N_t} α_srt / sqrt(d_s d_t) · (h_s ⊙ z_r)` with
//! `α_srt = tanh(⟨h_s ⊙ z_r, h_t ⊙ z_r⟩)`. Degrees are taken in the extended
//! graph, so the self-loop keeps every degree at least 1.

use serde::{Deserialize, Serialize};

use crate::error::NumError;
use crate::kgdata::ExtendedGraph;
use crate::numcore::{DenseMatrix, Tape, Var};

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<(), NumError> {
    if a.len() != b.len() {
        return Err(NumError::Shape {
            op,
            lhs: (1, a.len()),
            rhs: (1, b.len()),
        });
    }
    Ok(())
}

/// Hadamard composition `h ⊙ z`.
pub fn compose(h: &[f64], z: &[f64]) -> Result<Vec<f64>, NumError> {
    check_len("compose", h, z)?;
    Ok(h.iter().zip(z).map(|(a, b)| a * b).collect())
}

/// `tanh(⟨h_s ⊙ z_r, h_t ⊙ z_r⟩)`.
pub fn attention(h_s: &[f64], z_r: &[f64], h_t: &[f64]) -> Result<f64, NumError> {
    check_len("attention", h_s, z_r)?;
    check_len("attention", h_t, z_r)?;
    let dot: f64 = h_s
        .iter()
        .zip(z_r)
        .zip(h_t)
        .map(|((s, z), t)| (s * z) * (t * z))
        .sum();
    Ok(dot.tanh())
}

/// Entity and relation states after `layer` propagation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub h: DenseMatrix,
    pub z: DenseMatrix,
    pub layer: usize,
}

/// Attention values per layer, indexed like [`ExtendedGraph::triples`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }
}

/// `1 / sqrt(d_s · d_t)` for every extended edge.
pub fn edge_scaling(graph: &ExtendedGraph) -> DenseMatrix {
    let deg = graph.degrees();
    let values: Vec<f64> = graph
        .sources()
        .iter()
        .zip(graph.targets().iter())
        .map(|(&s, &t)| 1.0 / ((deg[s] * deg[t]) as f64).sqrt())
        .collect();
    DenseMatrix::column(&values)
}

/// Aggregation recorded on a tape. Returns `(H_next, α)` with `α` an `E×1` column.
pub fn aggregate_on_tape(
    tape: &mut Tape,
    h: Var,
    z: Var,
    graph: &ExtendedGraph,
    scaling: Var,
) -> Result<(Var, Var), NumError> {
    let n = graph.num_entities();
    let (hr, zr) = (tape.shape(h).0, tape.shape(z).0);
    if hr != n || zr != graph.num_extended_relations() || tape.shape(h).1 != tape.shape(z).1 {
        return Err(NumError::Shape {
            op: "aggregate",
            lhs: tape.shape(h),
            rhs: tape.shape(z),
        });
    }
    let h_src = tape.gather_rows(h, graph.sources().clone())?;
    let z_rel = tape.gather_rows(z, graph.relations().clone())?;
    let h_dst = tape.gather_rows(h, graph.targets().clone())?;
    let msg = tape.mul(h_src, z_rel)?;
    let key = tape.mul(h_dst, z_rel)?;
    let prod = tape.mul(msg, key)?;
    let logits = tape.row_sum(prod)?;
    let alpha = tape.tanh(logits)?;
    let coef = tape.mul(alpha, scaling)?;
    let weighted = tape.mul_column(msg, coef)?;
    let next = tape.scatter_add_rows(weighted, graph.targets().clone(), n)?;
    Ok((next, alpha))
}

/// One propagation step on plain matrices.
pub fn aggregate(
    states: &LayerStates,
    graph: &ExtendedGraph,
) -> Result<(DenseMatrix, Vec<f64>), NumError> {
    let mut tape = Tape::new();
    let h = tape.constant(states.h.clone())?;
    let z = tape.constant(states.z.clone())?;
    let scaling = tape.constant(edge_scaling(graph))?;
    let (next, alpha) = aggregate_on_tape(&mut tape, h, z, graph, scaling)?;
    Ok((tape.value(next).clone(), tape.value(alpha).as_slice().to_vec()))
}
