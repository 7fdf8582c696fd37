//! A small knowledge graph whose third relation is the composition of the
//! first two, for checking that multi-hop reasoning is learnable.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::evaluation::{split_queries, Directions, KnownFacts};
use crate::kgdata::{Dataset, Triple, TripleStore, Vocabulary};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleKgConfig {
    pub entities: usize,
    /// Fraction of composed facts moved to the test split.
    pub test_fraction: f64,
    /// Fraction of composed facts moved to the validation split.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for RuleKgConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            test_fraction: 0.2,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

pub const BASE_RELATIONS: [&str; 2] = ["r1", "r2"];
pub const COMPOSED_RELATION: &str = "r3";

fn other_entity(rng: &mut crate::rng::Rng, n: usize, not: usize) -> usize {
    loop {
        let e = rng.gen_range(0..n);
        if e != not {
            return e;
        }
    }
}

/// Every entity `x` gets one `r1` edge and one `r2` edge to random other
/// entities; `r3(x, z)` holds exactly when `r1(x, y)` and `r2(y, z)`.
///
/// All `r1`/`r2` facts are training facts. The `r3` facts are shuffled and
/// split into test, validation, and training portions.
pub fn rule_kg(config: &RuleKgConfig) -> Result<Dataset> {
    let n = config.entities;
    if n < 3 {
        return Err(Error::Argument(format!("need at least 3 entities, got {n}")));
    }
    let (ft, fv) = (config.test_fraction, config.valid_fraction);
    if !(ft > 0.0 && fv >= 0.0 && ft + fv < 1.0) {
        return Err(Error::Argument(format!(
            "held-out fractions must be positive and sum below 1, got {ft} and {fv}"
        )));
    }
    let mut vocab = Vocabulary::new();
    let width = (n - 1).to_string().len();
    for i in 0..n {
        vocab.intern_entity(&format!("e{i:0width$}"));
    }
    let r1 = vocab.intern_relation(BASE_RELATIONS[0]);
    let r2 = vocab.intern_relation(BASE_RELATIONS[1]);
    let r3 = vocab.intern_relation(COMPOSED_RELATION);

    let mut rng = stream(config.seed, Stream::Synthetic);
    let first: Vec<usize> = (0..n).map(|x| other_entity(&mut rng, n, x)).collect();
    let second: Vec<usize> = (0..n).map(|y| other_entity(&mut rng, n, y)).collect();
    let mut train = Vec::with_capacity(3 * n);
    for x in 0..n {
        train.push(Triple::new(x, r1, first[x]));
        train.push(Triple::new(x, r2, second[x]));
    }
    let mut composed: Vec<Triple> = (0..n)
        .map(|x| Triple::new(x, r3, second[first[x]]))
        .filter(|t| t.head != t.tail)
        .collect();
    composed.shuffle(&mut rng);
    let n_test = ((composed.len() as f64) * ft).round() as usize;
    let n_valid = ((composed.len() as f64) * fv).round() as usize;
    let test = composed[..n_test].to_vec();
    let valid = composed[n_test..n_test + n_valid].to_vec();
    train.extend_from_slice(&composed[n_test + n_valid..]);
    Ok(Dataset {
        vocab,
        store: TripleStore { train, valid, test },
    })
}

/// Expected MRR of a model that scores every candidate equally: a query
/// with `C` unfiltered candidates then ranks `(C + 1) / 2`.
pub fn tie_baseline_mrr(dataset: &Dataset, directions: Directions) -> Result<f64> {
    let m = dataset.vocab.num_relations();
    let n = dataset.vocab.num_entities();
    let known = KnownFacts::from_store(&dataset.store, m);
    let queries = split_queries(&dataset.store.test, m, directions);
    if queries.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let total: f64 = queries
        .iter()
        .map(|q| {
            let others = known
                .answers(q.head, q.relation)
                .map_or(0, |a| a.len() - usize::from(a.contains(&q.tail)));
            let candidates = (n - others) as f64;
            2.0 / (candidates + 1.0)
        })
        .sum();
    Ok(total / queries.len() as f64)
}
