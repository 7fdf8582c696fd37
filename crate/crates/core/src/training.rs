//! Losses, mini-batching, and the training loop with early stopping.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::entity_updater::LayerStates;
use crate::error::{Error, NumError, Result};
use crate::evaluation::{evaluate_split, Directions, KnownFacts};
use crate::kgdata::{Dataset, ExtendedGraph};
use crate::model::{Model, ModelConfig, Variant};
use crate::numcore::{adam_step, AdamConfig, DenseMatrix, OptimizerState, ParameterStore, Tape, Var};
use crate::relation_reasoner::MaskDraw;
use crate::rng::{stream, Stream};
use crate::scoring::{score_batch, score_batch_on_tape, ScoreHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub layers: usize,
    pub dim: usize,
    /// Fraction of non-self-loop relations masked per layer and step.
    pub mask_ratio: f64,
    pub temperature: f64,
    /// Weight of the relation-contrastive term.
    pub aux_weight: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub head: ScoreHead,
    pub variant: Variant,
    /// Defaults to the extended relation count.
    pub mixer_f1: Option<usize>,
    /// Defaults to twice the embedding dimension.
    pub mixer_f2: Option<usize>,
    pub eval_directions: Directions,
    pub init_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            layers: 2,
            dim: 100,
            mask_ratio: 0.1,
            temperature: 1.0,
            aux_weight: 0.1,
            max_epochs: 500,
            patience: 25,
            seed: 0,
            head: ScoreHead::DistMult,
            variant: Variant::Full,
            mixer_f1: None,
            mixer_f2: None,
            eval_directions: Directions::Both,
            init_gain: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Argument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.layers == 0 || self.dim == 0 || self.max_epochs == 0 {
            return fail("batch size, layers, dimension, and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return fail(format!("aux weight must be non-negative, got {}", self.aux_weight));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return fail(format!("init gain must be positive, got {}", self.init_gain));
        }
        Ok(())
    }

    pub fn model_config(&self, num_entities: usize, num_relations: usize) -> ModelConfig {
        let m_ext = 2 * num_relations + 1;
        ModelConfig {
            num_entities,
            num_relations,
            dim: self.dim,
            layers: self.layers,
            mixer_f1: self.mixer_f1.unwrap_or(m_ext),
            mixer_f2: self.mixer_f2.unwrap_or(2 * self.dim),
            head: self.head,
            variant: self.variant,
            init_gain: self.init_gain,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// A 1-vs-all training query `(s, r, ?)` with every true tail in the extended graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub head: usize,
    pub relation: usize,
    pub tails: Vec<usize>,
}

/// Unique `(s, r)` queries of the extended graph, ordered by `(s, r)`.
pub fn build_queries(graph: &ExtendedGraph) -> Vec<Query> {
    let mut grouped: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for t in graph.triples() {
        grouped.entry((t.head, t.relation)).or_default().push(t.tail);
    }
    grouped
        .into_iter()
        .map(|((head, relation), mut tails)| {
            tails.sort_unstable();
            tails.dedup();
            Query {
                head,
                relation,
                tails,
            }
        })
        .collect()
}

/// Multi-hot `B×N` target matrix.
pub fn targets(batch: &[Query], num_entities: usize) -> DenseMatrix {
    let mut y = DenseMatrix::zeros(batch.len(), num_entities);
    for (i, q) in batch.iter().enumerate() {
        for &o in &q.tails {
            y.set(i, o, 1.0);
        }
    }
    y
}

/// Mean binary cross-entropy of logits against `targets`, on the tape.
pub fn bce_on_tape(tape: &mut Tape, scores: Var, targets: &DenseMatrix) -> Result<Var, NumError> {
    if tape.shape(scores) != targets.shape() {
        return Err(NumError::Shape {
            op: "bce_loss",
            lhs: tape.shape(scores),
            rhs: targets.shape(),
        });
    }
    let y = tape.constant(targets.clone())?;
    let not_y = tape.constant(targets.map(|v| 1.0 - v))?;
    let log_p = tape.log_sigmoid(scores)?;
    let neg = tape.neg(scores)?;
    let log_q = tape.log_sigmoid(neg)?;
    let pos = tape.mul(log_p, y)?;
    let negs = tape.mul(log_q, not_y)?;
    let ll = tape.add(pos, negs)?;
    let mean = tape.mean(ll)?;
    tape.neg(mean)
}

/// Plain BCE for queries `(s, r)` with `B×N` targets.
pub fn bce_loss(
    head: ScoreHead,
    queries: &[(usize, usize)],
    targets: &DenseMatrix,
    states: &LayerStates,
) -> Result<f64, NumError> {
    let expected = (queries.len(), states.h.rows());
    if targets.shape() != expected {
        return Err(NumError::Shape {
            op: "bce_loss",
            lhs: expected,
            rhs: targets.shape(),
        });
    }
    let scores = score_batch(head, queries, states)?;
    let mut tape = Tape::new();
    let s = tape.constant(scores)?;
    let loss = bce_on_tape(&mut tape, s, targets)?;
    Ok(tape.value(loss).item())
}

/// Relation-contrastive loss: each relation is its own positive among all
/// relations under temperature-scaled cosine similarity.
pub fn infonce_on_tape(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var, NumError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(NumError::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let rows = tape.shape(z).0;
    let cos = tape.cosine_similarity(z, z)?;
    let logits = tape.scale(cos, 1.0 / temperature)?;
    let lse = tape.row_logsumexp(logits)?;
    let eye = tape.constant(DenseMatrix::identity(rows))?;
    let diag_full = tape.mul(logits, eye)?;
    let diag = tape.row_sum(diag_full)?;
    let per_row = tape.sub(lse, diag)?;
    tape.sum(per_row)
}

pub fn infonce_loss(z: &DenseMatrix, temperature: f64) -> Result<f64, NumError> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let loss = infonce_on_tape(&mut tape, zv, temperature)?;
    Ok(tape.value(loss).item())
}

/// `bce + weight · infonce(z)`; a zero weight skips the contrastive term entirely.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    bce: Var,
    z: Var,
    temperature: f64,
    weight: f64,
) -> Result<Var, NumError> {
    if weight < 0.0 || weight.is_nan() {
        return Err(NumError::Argument(format!(
            "contrastive weight must be non-negative, got {weight}"
        )));
    }
    if weight == 0.0 {
        return Ok(bce);
    }
    let rel = infonce_on_tape(tape, z, temperature)?;
    let weighted = tape.scale(rel, weight)?;
    tape.add(bce, weighted)
}

pub fn total_loss(bce: f64, infonce: f64, weight: f64) -> Result<f64, NumError> {
    if weight < 0.0 || weight.is_nan() {
        return Err(NumError::Argument(format!(
            "contrastive weight must be non-negative, got {weight}"
        )));
    }
    Ok(bce + weight * infonce)
}

/// Records the full training objective for one batch.
pub fn batch_loss(
    model: &Model,
    store: &ParameterStore,
    tape: &mut Tape,
    graph: &ExtendedGraph,
    batch: &[Query],
    masks: &[MaskDraw],
    config: &TrainConfig,
) -> Result<Var, NumError> {
    let out = model.forward_with(store, tape, graph, masks)?;
    let heads: Arc<[usize]> = batch.iter().map(|q| q.head).collect();
    let rels: Arc<[usize]> = batch.iter().map(|q| q.relation).collect();
    let scores = score_batch_on_tape(tape, model.config.head, out.h, out.z, heads, rels)?;
    let y = targets(batch, graph.num_entities());
    let bce = bce_on_tape(tape, scores, &y)?;
    total_loss_on_tape(tape, bce, out.z, config.temperature, config.aux_weight)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_mrr: f64,
    pub best_valid_mrr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Epoch-log line with round-trip exact floats. Everything before
    /// ` seconds=` is identical across runs with the same seed.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={} valid_mrr={} best_valid_mrr={} seconds={:.3}",
            self.epoch, self.loss, self.valid_mrr, self.best_valid_mrr, self.seconds
        )
    }
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} valid_mrr={:.4} best_valid_mrr={:.4} seconds={:.2}",
            self.epoch, self.loss, self.valid_mrr, self.best_valid_mrr, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model restored to the best validation epoch.
    pub model: Model,
    pub optimizer: OptimizerState,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

fn diverged(epoch: usize, batch: usize, e: NumError) -> Error {
    match e {
        NumError::NonFinite { .. } | NumError::NonFiniteGradient { .. } => Error::Diverged {
            epoch,
            batch,
            detail: e.to_string(),
        },
        other => Error::Num(other),
    }
}

/// Trains on `dataset.store.train`, selecting the epoch with the best
/// validation MRR and stopping after `patience` epochs without improvement.
pub fn fit(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.store.valid.is_empty() {
        return Err(Error::EmptySplit("valid"));
    }
    let graph = dataset.extended_graph()?;
    let model_config =
        config.model_config(dataset.vocab.num_entities(), dataset.vocab.num_relations());
    let mut model = Model::new(model_config, &mut stream(config.seed, Stream::Init))?;
    let mut optimizer = OptimizerState::new(config.adam(), &model.params);
    let known = KnownFacts::from_store(&dataset.store, dataset.vocab.num_relations());
    let mut queries = build_queries(&graph);
    let mut shuffle_rng = stream(config.seed, Stream::Shuffling);
    let mut mask_rng = stream(config.seed, Stream::Masking);

    let mut best = (model.clone(), optimizer.clone(), 0usize, f64::NEG_INFINITY);
    let mut history = Vec::new();
    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        queries.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in queries.chunks(config.batch_size).enumerate() {
            let masks = model.draw_masks(config.mask_ratio, &mut mask_rng)?;
            let mut tape = Tape::new();
            let step = batch_loss(&model, &model.params, &mut tape, &graph, batch, &masks, config)
                .and_then(|loss| {
                    let value = tape.value(loss).item();
                    tape.backward(loss)?.accumulate_into(&mut model.params);
                    adam_step(&mut model.params, &mut optimizer)?;
                    Ok(value)
                })
                .map_err(|e| diverged(epoch, b, e))?;
            loss_sum += step;
            batches += 1;
        }
        let (states, _) = model.encode(&graph).map_err(|e| diverged(epoch, batches, e))?;
        let report = evaluate_split(
            &states,
            model.config.head,
            &dataset.store.valid,
            &known,
            config.eval_directions,
        )?;
        if report.mrr > best.3 {
            best = (model.clone(), optimizer.clone(), epoch, report.mrr);
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            valid_mrr: report.mrr,
            best_valid_mrr: best.3,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{record}");
        on_epoch(&record);
        history.push(record);
        if stale >= config.patience {
            log::info!("early stop after {epoch} epochs (best epoch {})", best.2);
            break;
        }
    }
    let epochs_run = history.len();
    let (model, optimizer, best_epoch, best_valid_mrr) = best;
    Ok(TrainOutcome {
        model,
        optimizer,
        best_epoch,
        best_valid_mrr,
        epochs_run,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::{Triple, TripleStore, Vocabulary};
    use crate::numcore::{finite_difference_check, FdOptions};
    use crate::selfcheck::unit_magnitude_embeddings;

    #[test]
    fn bce_examples() {
        let states = LayerStates {
            h: DenseMatrix::zeros(3, 2),
            z: DenseMatrix::zeros(1, 2),
            layer: 0,
        };
        // All-zero embeddings give logit 0 everywhere: loss is ln 2 whatever the targets.
        let y = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]);
        let loss = bce_loss(ScoreHead::DistMult, &[(0, 0)], &y, &states).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let short = DenseMatrix::zeros(1, 2);
        assert!(bce_loss(ScoreHead::DistMult, &[(0, 0)], &short, &states).is_err());

        let mut tape = Tape::new();
        let s = tape.constant(DenseMatrix::from_rows(&[vec![800.0, -800.0]])).unwrap();
        let y = DenseMatrix::from_rows(&[vec![1.0, 0.0]]);
        let l = bce_on_tape(&mut tape, s, &y).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn infonce_examples() {
        // Orthonormal rows: each row costs log(e + (M − 1)) − 1.
        let z = DenseMatrix::identity(3);
        let expect = 3.0 * ((1f64.exp() + 2.0).ln() - 1.0);
        assert!((infonce_loss(&z, 1.0).unwrap() - expect).abs() < 1e-12);
        // Identical rows: every row costs log M.
        let same = DenseMatrix::filled(4, 2, 0.7);
        assert!((infonce_loss(&same, 0.5).unwrap() - 4.0 * 4f64.ln()).abs() < 1e-12);
        // A zero row is treated as cosine 0 rather than NaN.
        let zero_row = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert!(infonce_loss(&zero_row, 1.0).unwrap().is_finite());
        assert!(infonce_loss(&z, 0.0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 2.0, 0.0).unwrap(), 0.7);
        assert!((total_loss(0.7, 2.0, 0.1).unwrap() - 0.9).abs() < 1e-15);
        assert!(total_loss(0.7, 2.0, -0.1).is_err());
    }

    #[test]
    fn queries_cover_extended_graph() {
        let g = ExtendedGraph::new(&[Triple::new(0, 0, 1), Triple::new(0, 0, 2)], 3, 1);
        let q = build_queries(&g);
        // (0, r) → {1, 2}; (1, r⁻¹) and (2, r⁻¹) → {0}; three self-loops.
        assert_eq!(q.len(), 6);
        assert_eq!(q[0].tails, vec![1, 2]);
        assert!(q.iter().any(|q| q.head == 1 && q.relation == 1 && q.tails == vec![0]));
        let y = targets(&q[..1], 3);
        assert_eq!(y.row(0), &[0.0, 1.0, 1.0]);
    }

    fn tiny_dataset() -> Dataset {
        let mut vocab = Vocabulary::new();
        let names = ["a", "b", "c", "d", "e", "f"];
        for n in names {
            vocab.intern_entity(n);
        }
        vocab.intern_relation("r");
        vocab.intern_relation("s");
        let t = Triple::new;
        Dataset {
            vocab,
            store: TripleStore {
                train: vec![t(0, 0, 1), t(1, 0, 2), t(2, 1, 3), t(3, 1, 4), t(4, 0, 5)],
                valid: vec![t(0, 1, 2)],
                test: vec![t(5, 0, 0)],
            },
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            batch_size: 4,
            max_epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_objective_passes_fd_check() {
        let data = tiny_dataset();
        let graph = data.extended_graph().unwrap();
        let config = TrainConfig {
            mask_ratio: 0.25,
            ..small_config()
        };
        for head in [ScoreHead::TransE, ScoreHead::DistMult] {
            let mc = TrainConfig { head, ..config.clone() }.model_config(6, 2);
            let mut model = Model::new(mc, &mut stream(1, Stream::Init)).unwrap();
            unit_magnitude_embeddings(&mut model, &mut stream(2, Stream::Init));
            let masks = model.draw_masks(0.25, &mut stream(1, Stream::Masking)).unwrap();
            assert!(masks.iter().all(|m| m.masked.len() == 1));
            let batch = build_queries(&graph);
            finite_difference_check(
                &model.params,
                |s, t| batch_loss(&model, s, t, &graph, &batch, &masks, &config),
                &FdOptions::default(),
            )
            .unwrap();
        }
    }

    #[test]
    fn zero_weight_never_touches_contrastive_path() {
        let mut tape = Tape::new();
        let bce = tape.variable(DenseMatrix::scalar(0.3)).unwrap();
        let z = tape.variable(DenseMatrix::identity(2)).unwrap();
        let before = tape.len();
        let out = total_loss_on_tape(&mut tape, bce, z, 1.0, 0.0).unwrap();
        assert_eq!(out, bce);
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn fit_is_deterministic_and_restores_best() {
        let data = tiny_dataset();
        let mut seen = Vec::new();
        let a = fit(&data, &small_config(), |r| seen.push(r.epoch)).unwrap();
        let b = fit(&data, &small_config(), |_| {}).unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history.len(), 3);
        let best = a.history[a.best_epoch - 1].valid_mrr;
        assert_eq!(best, a.best_valid_mrr);
        assert!(a.history.iter().all(|r| r.valid_mrr <= best));
    }

    #[test]
    fn early_stopping_honours_patience() {
        let config = TrainConfig {
            max_epochs: 50,
            patience: 2,
            learning_rate: 1e-9,
            ..small_config()
        };
        let out = fit(&tiny_dataset(), &config, |_| {}).unwrap();
        assert!(out.epochs_run < 50);
        assert_eq!(out.epochs_run, out.best_epoch + 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let data = tiny_dataset();
        for bad in [
            TrainConfig { aux_weight: -0.1, ..small_config() },
            TrainConfig { mask_ratio: 1.0, ..small_config() },
            TrainConfig { batch_size: 0, ..small_config() },
            TrainConfig { temperature: 0.0, ..small_config() },
        ] {
            assert!(matches!(fit(&data, &bad, |_| {}), Err(Error::Argument(_))));
        }
        let mut no_valid = tiny_dataset();
        no_valid.store.valid.clear();
        assert!(matches!(fit(&no_valid, &small_config(), |_| {}), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let config = TrainConfig {
            learning_rate: 1e200,
            max_epochs: 5,
            ..small_config()
        };
        match fit(&tiny_dataset(), &config, |_| {}) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
