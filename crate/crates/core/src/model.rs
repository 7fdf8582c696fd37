//! The full encoder: `L` rounds of entity updating followed by relation
//! reasoning, with all trainable values held in one [`ParameterStore`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entity_updater::{aggregate_on_tape, edge_scaling, AttentionRecord, LayerStates};
use crate::error::{Error, NumError};
use crate::kgdata::ExtendedGraph;
use crate::numcore::{embedding_init, xavier_init, ParamId, ParameterStore, Tape, Var};
use crate::relation_reasoner::{draw_mask, reason, MaskDraw, MixerVars, MixerWeights};
use crate::rng::Rng;
use crate::scoring::ScoreHead;

/// Full model, or the ablation with relation reasoning removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "hogrn")]
    Full,
    #[serde(rename = "hogrn-r")]
    WithoutReasoning,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "hogrn",
            Variant::WithoutReasoning => "hogrn-r",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hogrn" | "full" | "none" => Ok(Variant::Full),
            "hogrn-r" | "hogrn_r" => Ok(Variant::WithoutReasoning),
            other => Err(format!("unknown variant `{other}` (expected hogrn or hogrn-r)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_entities: usize,
    /// Raw relation count `M`; the model holds `2M + 1` relation rows.
    pub num_relations: usize,
    pub dim: usize,
    pub layers: usize,
    /// Hidden width of inter-relation mixing.
    pub mixer_f1: usize,
    /// Hidden width of intra-relation mixing.
    pub mixer_f2: usize,
    pub head: ScoreHead,
    pub variant: Variant,
    /// Multiplier on the entity and relation table init bound.
    pub init_gain: f64,
}

impl ModelConfig {
    pub fn num_extended_relations(&self) -> usize {
        2 * self.num_relations + 1
    }

    fn validate(&self) -> Result<(), Error> {
        if self.num_entities == 0 || self.dim == 0 || self.layers == 0 {
            return Err(Error::Argument(
                "entities, dimension, and layer count must be positive".into(),
            ));
        }
        if self.mixer_f1 == 0 || self.mixer_f2 == 0 {
            return Err(Error::Argument("mixer widths must be positive".into()));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::Argument(format!(
                "init gain must be positive, got {}",
                self.init_gain
            )));
        }
        Ok(())
    }
}

pub const ENTITY_PARAM: &str = "entity_embedding";
pub const RELATION_PARAM: &str = "relation_embedding";

fn mixer_name(layer: usize, w: &str) -> String {
    format!("layer{layer}.{w}")
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    entity: ParamId,
    relation: ParamId,
    mixers: Vec<MixerWeights>,
}

/// Handles to the outputs of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub h: Var,
    pub z: Var,
    /// `E×1` attention column per layer.
    pub attention: Vec<Var>,
}

impl Model {
    /// Embedding tables from [`embedding_init`], mixer weights Xavier.
    /// HoGRN-R carries no mixer weights.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, Error> {
        config.validate()?;
        let m_ext = config.num_extended_relations();
        let d = config.dim;
        let mut params = ParameterStore::new();
        let g = config.init_gain;
        let entity = params.add(ENTITY_PARAM, embedding_init(config.num_entities, d, g, rng));
        let relation = params.add(RELATION_PARAM, embedding_init(m_ext, d, g, rng));
        let mut mixers = Vec::new();
        if config.variant == Variant::Full {
            for l in 0..config.layers {
                let (f1, f2) = (config.mixer_f1, config.mixer_f2);
                mixers.push(MixerWeights {
                    w1: params.add(mixer_name(l, "w1"), xavier_init(m_ext, f1, rng)),
                    w2: params.add(mixer_name(l, "w2"), xavier_init(f1, m_ext, rng)),
                    w3: params.add(mixer_name(l, "w3"), xavier_init(d, f2, rng)),
                    w4: params.add(mixer_name(l, "w4"), xavier_init(f2, d, rng)),
                });
            }
        }
        Ok(Self {
            config,
            params,
            entity,
            relation,
            mixers,
        })
    }

    /// Rebinds a model to stored parameters, validating names and shapes.
    pub fn from_params(config: ModelConfig, params: ParameterStore) -> Result<Self, Error> {
        config.validate()?;
        let m_ext = config.num_extended_relations();
        let d = config.dim;
        let lookup = |name: &str, shape: (usize, usize)| -> Result<ParamId, Error> {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let got = params.value(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        let entity = lookup(ENTITY_PARAM, (config.num_entities, d))?;
        let relation = lookup(RELATION_PARAM, (m_ext, d))?;
        let mut mixers = Vec::new();
        if config.variant == Variant::Full {
            let (f1, f2) = (config.mixer_f1, config.mixer_f2);
            for l in 0..config.layers {
                mixers.push(MixerWeights {
                    w1: lookup(&mixer_name(l, "w1"), (m_ext, f1))?,
                    w2: lookup(&mixer_name(l, "w2"), (f1, m_ext))?,
                    w3: lookup(&mixer_name(l, "w3"), (d, f2))?,
                    w4: lookup(&mixer_name(l, "w4"), (f2, d))?,
                });
            }
        }
        let expected = 2 + 4 * mixers.len();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters, found {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            entity,
            relation,
            mixers,
        })
    }

    pub fn entity_param(&self) -> ParamId {
        self.entity
    }

    pub fn relation_param(&self) -> ParamId {
        self.relation
    }

    pub fn mixer_params(&self) -> &[MixerWeights] {
        &self.mixers
    }

    fn check_graph(&self, graph: &ExtendedGraph) -> Result<(), NumError> {
        if graph.num_entities() != self.config.num_entities
            || graph.num_relations() != self.config.num_relations
        {
            return Err(NumError::Argument(format!(
                "graph has {} entities / {} relations, model expects {} / {}",
                graph.num_entities(),
                graph.num_relations(),
                self.config.num_entities,
                self.config.num_relations
            )));
        }
        Ok(())
    }

    /// One mask per layer; all empty for HoGRN-R or a zero ratio.
    pub fn draw_masks(&self, ratio: f64, rng: &mut Rng) -> Result<Vec<MaskDraw>, NumError> {
        let m_ext = self.config.num_extended_relations();
        if self.config.variant == Variant::WithoutReasoning {
            return Ok(vec![MaskDraw::empty(); self.config.layers]);
        }
        (0..self.config.layers)
            .map(|_| draw_mask(m_ext, m_ext - 1, ratio, rng))
            .collect()
    }

    /// Records the forward pass on `tape`, reading parameters from `store`.
    ///
    /// `store` is usually `self.params`; gradient checks pass perturbed copies.
    pub fn forward_with(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        graph: &ExtendedGraph,
        masks: &[MaskDraw],
    ) -> Result<ForwardVars, NumError> {
        self.check_graph(graph)?;
        let scaling = tape.constant(edge_scaling(graph))?;
        let mut h = tape.param(store, self.entity)?;
        let mut z = tape.param(store, self.relation)?;
        let mut attention = Vec::with_capacity(self.config.layers);
        let no_mask = MaskDraw::empty();
        for l in 0..self.config.layers {
            let (h_next, alpha) = aggregate_on_tape(tape, h, z, graph, scaling)?;
            attention.push(alpha);
            if let Some(w) = self.mixers.get(l) {
                let vars = MixerVars {
                    w1: tape.param(store, w.w1)?,
                    w2: tape.param(store, w.w2)?,
                    w3: tape.param(store, w.w3)?,
                    w4: tape.param(store, w.w4)?,
                };
                z = reason(tape, z, &vars, masks.get(l).unwrap_or(&no_mask))?;
            }
            h = h_next;
        }
        Ok(ForwardVars { h, z, attention })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &ExtendedGraph,
        masks: &[MaskDraw],
    ) -> Result<ForwardVars, NumError> {
        self.forward_with(&self.params, tape, graph, masks)
    }

    /// Evaluation-mode forward (no masking): final states and attentions.
    pub fn encode(&self, graph: &ExtendedGraph) -> Result<(LayerStates, AttentionRecord), NumError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, graph, &[])?;
        let states = LayerStates {
            h: tape.value(out.h).clone(),
            z: tape.value(out.z).clone(),
            layer: self.config.layers,
        };
        let attention = AttentionRecord {
            layers: out
                .attention
                .iter()
                .map(|&a| tape.value(a).as_slice().to_vec())
                .collect(),
        };
        Ok((states, attention))
    }
}
