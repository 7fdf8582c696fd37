//! Triple plausibility scores. Higher is more plausible.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::entity_updater::LayerStates;
use crate::error::NumError;
use crate::numcore::{DenseMatrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreHead {
    /// `−‖h_s + z_r − h_t‖₁`
    TransE,
    /// `Σ_i h_s(i) z_r(i) h_t(i)`
    DistMult,
}

impl fmt::Display for ScoreHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreHead::TransE => "transe",
            ScoreHead::DistMult => "distmult",
        })
    }
}

impl FromStr for ScoreHead {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(ScoreHead::TransE),
            "distmult" => Ok(ScoreHead::DistMult),
            other => Err(format!("unknown score head `{other}` (expected transe or distmult)")),
        }
    }
}

fn check3(op: &'static str, a: &[f64], b: &[f64], c: &[f64]) -> Result<(), NumError> {
    if a.len() != b.len() || b.len() != c.len() {
        return Err(NumError::Shape {
            op,
            lhs: (1, a.len()),
            rhs: (b.len(), c.len()),
        });
    }
    Ok(())
}

pub fn score_transe(h_s: &[f64], z_r: &[f64], h_t: &[f64]) -> Result<f64, NumError> {
    check3("score_transe", h_s, z_r, h_t)?;
    let dist: f64 = h_s
        .iter()
        .zip(z_r)
        .zip(h_t)
        .map(|((s, z), t)| ((s + z) - t).abs())
        .sum();
    Ok(-dist)
}

pub fn score_distmult(h_s: &[f64], z_r: &[f64], h_t: &[f64]) -> Result<f64, NumError> {
    check3("score_distmult", h_s, z_r, h_t)?;
    Ok(h_s
        .iter()
        .zip(z_r)
        .zip(h_t)
        .map(|((s, z), t)| (s * z) * t)
        .sum())
}

impl ScoreHead {
    pub fn score(self, h_s: &[f64], z_r: &[f64], h_t: &[f64]) -> Result<f64, NumError> {
        match self {
            ScoreHead::TransE => score_transe(h_s, z_r, h_t),
            ScoreHead::DistMult => score_distmult(h_s, z_r, h_t),
        }
    }
}

fn check_ids(states: &LayerStates, s: usize, r: usize) -> Result<(), NumError> {
    if s >= states.h.rows() {
        return Err(NumError::Index {
            op: "score_all_tails",
            index: s,
            len: states.h.rows(),
        });
    }
    if r >= states.z.rows() {
        return Err(NumError::Index {
            op: "score_all_tails",
            index: r,
            len: states.z.rows(),
        });
    }
    Ok(())
}

/// Scores `(s, r, o)` for every entity `o`.
pub fn score_all_tails(
    head: ScoreHead,
    s: usize,
    r: usize,
    states: &LayerStates,
) -> Result<Vec<f64>, NumError> {
    check_ids(states, s, r)?;
    Ok(score_batch(head, &[(s, r)], states)?.into_vec())
}

/// `B×N` score matrix for a batch of `(s, r)` queries.
pub fn score_batch(
    head: ScoreHead,
    queries: &[(usize, usize)],
    states: &LayerStates,
) -> Result<DenseMatrix, NumError> {
    for &(s, r) in queries {
        check_ids(states, s, r)?;
    }
    let d = states.h.cols();
    let mut q = DenseMatrix::zeros(queries.len(), d);
    for (i, &(s, r)) in queries.iter().enumerate() {
        let (hs, zr) = (states.h.row(s), states.z.row(r));
        for (k, o) in q.row_mut(i).iter_mut().enumerate() {
            *o = match head {
                ScoreHead::DistMult => hs[k] * zr[k],
                ScoreHead::TransE => hs[k] + zr[k],
            };
        }
    }
    match head {
        ScoreHead::DistMult => q.matmul_nt(&states.h),
        ScoreHead::TransE => {
            let n = states.h.rows();
            Ok(DenseMatrix::from_fn(queries.len(), n, |i, j| {
                let dist: f64 = q
                    .row(i)
                    .iter()
                    .zip(states.h.row(j))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                -dist
            }))
        }
    }
}

/// Differentiable `B×N` score matrix for the queries `(heads[i], rels[i])`.
pub fn score_batch_on_tape(
    tape: &mut Tape,
    head: ScoreHead,
    h: Var,
    z: Var,
    heads: Arc<[usize]>,
    rels: Arc<[usize]>,
) -> Result<Var, NumError> {
    let hs = tape.gather_rows(h, heads)?;
    let zr = tape.gather_rows(z, rels)?;
    match head {
        ScoreHead::DistMult => {
            let q = tape.mul(hs, zr)?;
            let ht = tape.transpose(h)?;
            tape.matmul(q, ht)
        }
        ScoreHead::TransE => {
            let q = tape.add(hs, zr)?;
            let dist = tape.l1_distance(q, h)?;
            tape.neg(dist)
        }
    }
}
