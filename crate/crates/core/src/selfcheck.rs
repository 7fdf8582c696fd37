//! Runtime verification of gradients and of the fast paths against direct
//! loop implementations.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use crate::entity_updater::{aggregate, attention, LayerStates};
use crate::error::NumError;
use crate::evaluation::{filtered_rank, oracle_rank, KnownFacts};
use crate::kgdata::{ExtendedGraph, Triple};
use crate::model::{Model, Variant, ENTITY_PARAM, RELATION_PARAM};
use crate::numcore::{
    finite_difference_check, gelu, inject_adjoint_fault, DenseMatrix, FdOptions, FdReport, OpKind,
    ParameterStore, Tape, Var,
};
use crate::relation_reasoner::{reason_matrix, MixerMatrices};
use crate::rng::{stream, Rng, Stream};
use crate::scoring::{score_batch, ScoreHead};
use crate::training::{batch_loss, build_queries, TrainConfig};

/// Largest side length used for random primitive inputs.
pub const PRIMITIVE_MAX_DIM: usize = 16;

/// Overwrites the embedding tables with values of magnitude in `[0.7, 1.3]`
/// and random sign.
///
/// The aggregation is multiplicative, so small initial values make
/// gradients shrink geometrically with depth. Below about `1e-8` they sink
/// into central-difference round-off, and the relative error stops
/// measuring anything.
pub fn unit_magnitude_embeddings(model: &mut Model, rng: &mut Rng) {
    for p in model.params.iter_mut() {
        if p.name != ENTITY_PARAM && p.name != RELATION_PARAM {
            continue;
        }
        let (r, c) = p.value.shape();
        p.value = DenseMatrix::from_fn(r, c, |_, _| {
            let m = rng.gen_range(0.7..1.3);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
    }
}

fn uniform(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
}

/// Values on two interleaved grids, so any difference between an entry of
/// the first and one of the second is at least `0.03`.
fn gridded(rng: &mut Rng, r: usize, c: usize, offset: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| {
        rng.gen_range(-10i32..10) as f64 * 0.1 + offset + rng.gen_range(0.0..0.02)
    })
}

fn dim(rng: &mut Rng) -> usize {
    rng.gen_range(1..=PRIMITIVE_MAX_DIM)
}

fn indices(rng: &mut Rng, len: usize, bound: usize) -> Arc<[usize]> {
    (0..len).map(|_| rng.gen_range(0..bound)).collect()
}

/// Central-difference check of one primitive on random shapes.
///
/// The op output is contracted with a random probe so that every output
/// entry carries a distinct weight.
pub fn check_primitive(kind: OpKind, rng: &mut Rng, opts: &FdOptions) -> Result<FdReport, NumError> {
    let (r, c, k) = (dim(rng), dim(rng), dim(rng));
    let mut store = ParameterStore::new();
    let a = match kind {
        OpKind::Log => store.add("a", uniform(rng, r, c, 0.5, 2.0)),
        OpKind::RowL1Norm => store.add("a", gridded(rng, r, c, 0.05)),
        OpKind::L1Distance => store.add("a", gridded(rng, r, c, 0.0)),
        OpKind::ScatterAddRows | OpKind::MatMul => store.add("a", uniform(rng, r, k, -1.0, 1.0)),
        _ => store.add("a", uniform(rng, r, c, -2.0, 2.0)),
    };
    let b = match kind {
        OpKind::MatMul => Some(store.add("b", uniform(rng, k, c, -1.0, 1.0))),
        OpKind::Add | OpKind::Sub | OpKind::Mul => Some(store.add("b", uniform(rng, r, c, -2.0, 2.0))),
        OpKind::MulColumn => Some(store.add("b", uniform(rng, r, 1, -2.0, 2.0))),
        OpKind::L1Distance => Some(store.add("b", gridded(rng, k, c, 0.05))),
        _ => None,
    };
    let scale = rng.gen_range(-2.0..2.0);
    let index = match kind {
        OpKind::GatherRows => indices(rng, k, r),
        OpKind::ScatterAddRows => indices(rng, r, c),
        _ => Arc::from(Vec::new()),
    };
    let build = |s: &ParameterStore, t: &mut Tape| -> Result<Var, NumError> {
        let av = t.param(s, a)?;
        let bv = match b {
            Some(id) => Some(t.param(s, id)?),
            None => None,
        };
        let b = || bv.expect("binary op without second operand");
        match kind {
            OpKind::MatMul => t.matmul(av, b()),
            OpKind::Transpose => t.transpose(av),
            OpKind::Add => t.add(av, b()),
            OpKind::Sub => t.sub(av, b()),
            OpKind::Mul => t.mul(av, b()),
            OpKind::Scale => t.scale(av, scale),
            OpKind::MulColumn => t.mul_column(av, b()),
            OpKind::GatherRows => t.gather_rows(av, index.clone()),
            OpKind::ScatterAddRows => t.scatter_add_rows(av, index.clone(), c),
            OpKind::RowSum => t.row_sum(av),
            OpKind::Sum => t.sum(av),
            OpKind::Mean => t.mean(av),
            OpKind::Tanh => t.tanh(av),
            OpKind::Gelu => t.gelu(av),
            OpKind::Sigmoid => t.sigmoid(av),
            OpKind::LogSigmoid => t.log_sigmoid(av),
            OpKind::Log => t.log(av),
            OpKind::Exp => t.exp(av),
            OpKind::RowL1Norm => t.row_l1_norm(av),
            OpKind::L1Distance => t.l1_distance(av, b()),
            OpKind::NormalizeRows => t.normalize_rows(av),
            OpKind::RowLogSumExp => t.row_logsumexp(av),
            OpKind::Leaf => Err(NumError::Argument("leaves have no adjoint".into())),
        }
    };
    // Draw the probe once, from the output shape of an unperturbed pass.
    let mut tape = Tape::new();
    let out = build(&store, &mut tape)?;
    let (pr, pc) = tape.shape(out);
    let probe = uniform(rng, pr, pc, -1.0, 1.0);
    finite_difference_check(
        &store,
        |s, t| {
            let out = build(s, t)?;
            let p = t.constant(probe.clone())?;
            let weighted = t.mul(out, p)?;
            t.sum(weighted)
        },
        opts,
    )
}

/// Small connected graph: a ring over `n` entities plus a few random chords.
pub fn random_small_graph(rng: &mut Rng, n: usize, m: usize) -> ExtendedGraph {
    let mut train: Vec<Triple> = (0..n)
        .map(|i| Triple::new(i, rng.gen_range(0..m), (i + 1) % n))
        .collect();
    for _ in 0..n / 2 {
        let (h, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if h != t {
            train.push(Triple::new(h, rng.gen_range(0..m), t));
        }
    }
    train.sort();
    train.dedup();
    ExtendedGraph::new(&train, n, m)
}

/// Central-difference check of the whole training objective on a 6-entity,
/// 2-relation graph with `d = 4`, `L = 2`, and the contrastive term on.
pub fn check_full_model(
    head: ScoreHead,
    mask_ratio: f64,
    seed: u64,
    opts: &FdOptions,
) -> Result<FdReport, crate::Error> {
    let mut rng = stream(seed, Stream::Synthetic);
    let graph = random_small_graph(&mut rng, 6, 2);
    let config = TrainConfig {
        dim: 4,
        layers: 2,
        mask_ratio,
        head,
        variant: Variant::Full,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(config.model_config(6, 2), &mut stream(seed, Stream::Init))?;
    unit_magnitude_embeddings(&mut model, &mut rng);
    let masks = model.draw_masks(config.mask_ratio, &mut stream(seed, Stream::Masking))?;
    let queries = build_queries(&graph);
    let report = finite_difference_check(
        &model.params,
        |s, t| batch_loss(&model, s, t, &graph, &queries, &masks, &config),
        opts,
    )?;
    Ok(report)
}

/// `h'_t` by direct iteration over each entity's neighbors.
pub fn entity_update_oracle(h: &DenseMatrix, z: &DenseMatrix, graph: &ExtendedGraph) -> DenseMatrix {
    let deg = graph.degrees();
    let mut out = DenseMatrix::zeros(h.rows(), h.cols());
    for t in 0..h.rows() {
        for (s, r) in graph.neighbors(t) {
            let a = attention(h.row(s), z.row(r), h.row(t)).expect("shapes checked by caller");
            let c = a / ((deg[s] * deg[t]) as f64).sqrt();
            for i in 0..h.cols() {
                let v = out.get(t, i) + c * h.get(s, i) * z.get(r, i);
                out.set(t, i, v);
            }
        }
    }
    out
}

/// Unmasked reasoning step by explicit index loops.
pub fn reasoning_oracle(z: &DenseMatrix, w: &MixerMatrices) -> DenseMatrix {
    let (m, d) = z.shape();
    let f1 = w.w1.cols();
    let f2 = w.w3.cols();
    let mut inter = z.clone();
    for i in 0..d {
        let hidden: Vec<f64> = (0..f1)
            .map(|f| gelu((0..m).map(|r| z.get(r, i) * w.w1.get(r, f)).sum()))
            .collect();
        for r in 0..m {
            let v: f64 = (0..f1).map(|f| hidden[f] * w.w2.get(f, r)).sum();
            inter.set(r, i, inter.get(r, i) + v);
        }
    }
    let mut out = inter.clone();
    for r in 0..m {
        let hidden: Vec<f64> = (0..f2)
            .map(|f| gelu((0..d).map(|i| inter.get(r, i) * w.w3.get(i, f)).sum()))
            .collect();
        for i in 0..d {
            let v: f64 = (0..f2).map(|f| hidden[f] * w.w4.get(f, i)).sum();
            out.set(r, i, out.get(r, i) + v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<28} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfCheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

impl fmt::Display for SelfCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} checks, {failed} failed, {:.2}s",
            self.results.len(),
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Deliberately corrupt the adjoint of this op; the run must then fail.
    pub inject_fault: Option<OpKind>,
}

fn fd_result(name: String, outcome: Result<FdReport, impl fmt::Display>) -> CheckResult {
    match outcome {
        Ok(r) => CheckResult {
            name,
            passed: true,
            detail: format!("{} coords, max rel err {:.2e}", r.checked, r.max_rel_error),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn oracle_result(name: &str, max_diff: f64, tol: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: max_diff <= tol,
        detail: format!("max abs diff {max_diff:.2e} (tol {tol:.0e})"),
    }
}

fn oracle_checks(rng: &mut Rng) -> Result<Vec<CheckResult>, crate::Error> {
    let mut results = Vec::new();
    let (n, m, d) = (9, 3, 5);
    let graph = random_small_graph(rng, n, m);
    let m_ext = graph.num_extended_relations();
    let states = LayerStates {
        h: uniform(rng, n, d, -1.0, 1.0),
        z: uniform(rng, m_ext, d, -1.0, 1.0),
        layer: 0,
    };

    let (fast, _) = aggregate(&states, &graph)?;
    let slow = entity_update_oracle(&states.h, &states.z, &graph);
    results.push(oracle_result("oracle/entity-update", fast.max_abs_diff(&slow), 1e-12));

    let w = MixerMatrices {
        w1: uniform(rng, m_ext, m_ext, -0.5, 0.5),
        w2: uniform(rng, m_ext, m_ext, -0.5, 0.5),
        w3: uniform(rng, d, 2 * d, -0.5, 0.5),
        w4: uniform(rng, 2 * d, d, -0.5, 0.5),
    };
    let (fast, _) = reason_matrix(&states.z, &w, m_ext - 1, 0.0, rng, false)?;
    let slow = reasoning_oracle(&states.z, &w);
    results.push(oracle_result("oracle/relation-reasoning", fast.max_abs_diff(&slow), 1e-12));

    for head in [ScoreHead::TransE, ScoreHead::DistMult] {
        let queries: Vec<(usize, usize)> = (0..6)
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..m_ext)))
            .collect();
        let batch = score_batch(head, &queries, &states)?;
        let mut diff: f64 = 0.0;
        for (i, &(s, r)) in queries.iter().enumerate() {
            for o in 0..n {
                let single = head.score(states.h.row(s), states.z.row(r), states.h.row(o))?;
                diff = diff.max((batch.get(i, o) - single).abs());
            }
        }
        results.push(oracle_result(&format!("oracle/score-{head}"), diff, 1e-10));
    }

    // Integer-valued scores keep both rank paths exact, ties included.
    let facts: Vec<Triple> = graph.triples().iter().filter(|t| t.relation < m).copied().collect();
    let known = KnownFacts::new(&facts, m);
    let fact_set = facts.iter().copied().collect();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3i32..3) as f64).collect();
        let q = Triple::new(rng.gen_range(0..n), rng.gen_range(0..2 * m), rng.gen_range(0..n));
        let fast = filtered_rank(q, &scores, &known)?;
        let slow = oracle_rank(q, n, m, &fact_set, |o| scores[o]);
        worst = worst.max((fast - slow).abs());
    }
    results.push(oracle_result("oracle/filtered-rank", worst, 0.0));
    Ok(results)
}

/// Runs every primitive check, the full-model check for both score heads,
/// and the oracle comparisons.
pub fn run_selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let started = Instant::now();
    inject_adjoint_fault(opts.inject_fault);
    let fd = FdOptions::default();
    let mut rng = stream(opts.seed, Stream::Synthetic);
    let mut results = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let outcome = check_primitive(kind, &mut rng, &fd);
        results.push(fd_result(format!("grad/{}", kind.name()), outcome));
    }
    for head in [ScoreHead::TransE, ScoreHead::DistMult] {
        let outcome = check_full_model(head, 0.25, opts.seed, &fd);
        results.push(fd_result(format!("grad/model-{head}"), outcome));
    }
    inject_adjoint_fault(None);
    match oracle_checks(&mut rng) {
        Ok(r) => results.extend(r),
        Err(e) => results.push(CheckResult {
            name: "oracle".into(),
            passed: false,
            detail: e.to_string(),
        }),
    }
    SelfCheckReport {
        results,
        seconds: started.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_on_several_seeds() {
        let fd = FdOptions::default();
        for seed in 0..5 {
            let mut rng = stream(seed, Stream::Synthetic);
            for kind in OpKind::DIFFERENTIABLE {
                let report = check_primitive(kind, &mut rng, &fd);
                assert!(report.is_ok(), "{} seed {seed}: {report:?}", kind.name());
            }
        }
    }

    #[test]
    fn injected_fault_is_caught_per_primitive() {
        let fd = FdOptions::default();
        for kind in OpKind::DIFFERENTIABLE {
            let mut rng = stream(7, Stream::Synthetic);
            inject_adjoint_fault(Some(kind));
            let report = check_primitive(kind, &mut rng, &fd);
            inject_adjoint_fault(None);
            assert!(
                matches!(report, Err(NumError::GradientCheck { .. })),
                "{} fault went unnoticed",
                kind.name()
            );
        }
    }

    #[test]
    fn full_selfcheck_passes_and_fault_fails() {
        let clean = run_selfcheck(&SelfCheckOptions::default());
        assert!(clean.passed(), "{clean}");
        let broken = run_selfcheck(&SelfCheckOptions {
            seed: 0,
            inject_fault: Some(OpKind::Gelu),
        });
        assert!(!broken.passed());
        assert!(broken.failures().any(|r| r.name == "grad/gelu"));
        assert!(broken.failures().any(|r| r.name.starts_with("grad/model")));
    }

    #[test]
    fn ring_graph_is_connected() {
        let g = random_small_graph(&mut stream(1, Stream::Synthetic), 6, 2);
        assert!(g.degrees().iter().all(|&d| d >= 3));
    }
}
