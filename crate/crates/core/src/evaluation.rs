//! Filtered link-prediction ranking and the usual summary metrics.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::entity_updater::LayerStates;
use crate::error::{Error, NumError};
use crate::kgdata::{Triple, TripleStore};
use crate::scoring::{score_batch, ScoreHead};

/// Which queries a test triple `(s, r, o)` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Directions {
    /// `(s, r, ?)` and `(o, r⁻¹, ?)`.
    #[default]
    Both,
    /// `(s, r, ?)` only.
    TailOnly,
}

impl std::str::FromStr for Directions {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Directions::Both),
            "tail-only" | "tail" => Ok(Directions::TailOnly),
            other => Err(format!("unknown directions `{other}` (expected both or tail-only)")),
        }
    }
}

/// True answers of every `(s, r)` query, inverse queries included.
#[derive(Debug, Clone, Default)]
pub struct KnownFacts {
    num_relations: usize,
    answers: HashMap<(usize, usize), HashSet<usize>>,
}

impl KnownFacts {
    pub fn new<'a>(facts: impl IntoIterator<Item = &'a Triple>, num_relations: usize) -> Self {
        let mut answers: HashMap<(usize, usize), HashSet<usize>> = HashMap::new();
        for t in facts {
            answers.entry((t.head, t.relation)).or_default().insert(t.tail);
            answers
                .entry((t.tail, t.relation + num_relations))
                .or_default()
                .insert(t.head);
        }
        Self {
            num_relations,
            answers,
        }
    }

    /// Facts from all three splits.
    pub fn from_store(store: &TripleStore, num_relations: usize) -> Self {
        Self::new(
            store.train.iter().chain(&store.valid).chain(&store.test),
            num_relations,
        )
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn is_known(&self, s: usize, r: usize, o: usize) -> bool {
        self.answers.get(&(s, r)).is_some_and(|set| set.contains(&o))
    }

    pub fn answers(&self, s: usize, r: usize) -> Option<&HashSet<usize>> {
        self.answers.get(&(s, r))
    }
}

/// Tie-averaged filtered rank of `query.tail` among `scores`.
///
/// Other known answers of `(query.head, query.relation)` are removed first;
/// the gold entity itself is always kept.
pub fn filtered_rank(query: Triple, scores: &[f64], known: &KnownFacts) -> Result<f64, NumError> {
    let gold = query.tail;
    if gold >= scores.len() {
        return Err(NumError::Index {
            op: "filtered_rank",
            index: gold,
            len: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(NumError::NonFinite { op: "filtered_rank" });
    }
    let target = scores[gold];
    let filtered = known.answers(query.head, query.relation);
    let (mut greater, mut ties) = (0usize, 0usize);
    for (o, &s) in scores.iter().enumerate() {
        if o == gold || filtered.is_some_and(|f| f.contains(&o)) {
            continue;
        }
        if s > target {
            greater += 1;
        } else if s == target {
            ties += 1;
        }
    }
    Ok(1.0 + greater as f64 + ties as f64 / 2.0)
}

/// Reference rank computed one candidate triple at a time.
///
/// `score(o)` must return the model score of `(s, r, o)`; `facts` holds raw
/// triples and inverse queries are resolved by flipping them here.
pub fn oracle_rank(
    query: Triple,
    num_entities: usize,
    num_relations: usize,
    facts: &HashSet<Triple>,
    score: impl Fn(usize) -> f64,
) -> f64 {
    let Triple {
        head: s,
        relation: r,
        tail: gold,
    } = query;
    let is_fact = |o: usize| {
        if r < num_relations {
            facts.contains(&Triple::new(s, r, o))
        } else if r < 2 * num_relations {
            facts.contains(&Triple::new(o, r - num_relations, s))
        } else {
            o == s
        }
    };
    let gold_score = score(gold);
    let mut rank = 1.0;
    for o in 0..num_entities {
        if o == gold || is_fact(o) {
            continue;
        }
        let v = score(o);
        if v > gold_score {
            rank += 1.0;
        } else if v == gold_score {
            rank += 0.5;
        }
    }
    rank
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub queries: usize,
    #[serde(skip)]
    pub ranks: Vec<f64>,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<f64>) -> Result<Self, Error> {
        if ranks.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits_at_1: hits(1.0),
            hits_at_3: hits(3.0),
            hits_at_10: hits(10.0),
            queries: ranks.len(),
            ranks,
        })
    }

    fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("mrr", self.mrr),
            ("hits@1", self.hits_at_1),
            ("hits@3", self.hits_at_3),
            ("hits@10", self.hits_at_10),
        ]
    }

    /// `key=value` lines, metrics scaled to percent.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.rows() {
            out.push_str(&format!("{k}={:.2}\n", v * 100.0));
        }
        out.push_str(&format!("queries={}\n", self.queries));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>7}", "metric", "value")?;
        for (k, v) in self.rows() {
            writeln!(f, "{k:<8} {:>7.2}", v * 100.0)?;
        }
        write!(f, "{:<8} {:>7}", "queries", self.queries)
    }
}

/// The `(query, gold)` pairs a split produces, as triples over extended ids.
pub fn split_queries(split: &[Triple], num_relations: usize, directions: Directions) -> Vec<Triple> {
    let mut out = Vec::with_capacity(split.len() * 2);
    for t in split {
        out.push(*t);
        if directions == Directions::Both {
            out.push(Triple::new(t.tail, t.relation + num_relations, t.head));
        }
    }
    out
}

const EVAL_CHUNK: usize = 256;

/// Filtered ranking of every query of `split`.
pub fn evaluate_split(
    states: &LayerStates,
    head: ScoreHead,
    split: &[Triple],
    known: &KnownFacts,
    directions: Directions,
) -> Result<EvalReport, Error> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let queries = split_queries(split, known.num_relations(), directions);
    let mut ranks = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_CHUNK) {
        let pairs: Vec<(usize, usize)> = chunk.iter().map(|q| (q.head, q.relation)).collect();
        let scores = score_batch(head, &pairs, states)?;
        for (i, q) in chunk.iter().enumerate() {
            ranks.push(filtered_rank(*q, scores.row(i), known)?);
        }
    }
    EvalReport::from_ranks(ranks)
}
