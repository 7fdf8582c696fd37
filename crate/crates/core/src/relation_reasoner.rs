//! Relation mixing over the `M′×d` relation matrix.
//!
//! Inter-relation mixing works along the relation axis within each embedding
//! dimension, intra-relation mixing along the dimension axis within each
//! relation. Both carry a skip connection:
//!
//! ```text
//! Z'     = Z + (GELU(Zᵀ W1) W2)ᵀ
//! Z_next = Z' + GELU(Z' W3) W4
//! ```
//!
//! During training a random subset of relation rows is zeroed at the input.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NumError;
use crate::numcore::{DenseMatrix, ParamId, Tape, Var};

/// Parameter handles of one mixing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerWeights {
    /// `M′×F1`
    pub w1: ParamId,
    /// `F1×M′`
    pub w2: ParamId,
    /// `d×F2`
    pub w3: ParamId,
    /// `F2×d`
    pub w4: ParamId,
}

/// Mixer weight values bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct MixerVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub w4: Var,
}

/// One draw of masked relation rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskDraw {
    pub seed: u64,
    pub ratio_permille: u32,
    /// Sorted extended-relation ids whose rows are zeroed.
    pub masked: Vec<usize>,
}

impl MaskDraw {
    pub fn empty() -> Self {
        Self {
            seed: 0,
            ratio_permille: 0,
            masked: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    /// `rows×1` column with 0 at masked rows and 1 elsewhere.
    pub fn keep_column(&self, rows: usize) -> DenseMatrix {
        let mut col = DenseMatrix::filled(rows, 1, 1.0);
        for &r in &self.masked {
            col.set(r, 0, 0.0);
        }
        col
    }
}

/// Draws `floor(ratio · (M′ − 1))` relations to mask; the self-loop is never drawn.
pub fn draw_mask<R: Rng + ?Sized>(
    num_ext_relations: usize,
    self_loop: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskDraw, NumError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(NumError::Argument(format!(
            "masking ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let seed = rng.next_u64();
    let maskable: Vec<usize> = (0..num_ext_relations).filter(|&r| r != self_loop).collect();
    let count = (ratio * maskable.len() as f64).floor() as usize;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked: Vec<usize> = sample(&mut draw_rng, maskable.len(), count)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    masked.sort_unstable();
    Ok(MaskDraw {
        seed,
        ratio_permille: (ratio * 1000.0).round() as u32,
        masked,
    })
}

/// Plain-matrix masking: returns a copy with masked rows zeroed.
pub fn mask_relations<R: Rng + ?Sized>(
    z: &DenseMatrix,
    self_loop: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<(DenseMatrix, MaskDraw), NumError> {
    let draw = draw_mask(z.rows(), self_loop, ratio, rng)?;
    let mut out = z.clone();
    for &r in &draw.masked {
        out.row_mut(r).fill(0.0);
    }
    Ok((out, draw))
}

pub fn apply_mask(tape: &mut Tape, z: Var, draw: &MaskDraw) -> Result<Var, NumError> {
    if draw.is_empty() {
        return Ok(z);
    }
    let keep = tape.constant(draw.keep_column(tape.shape(z).0))?;
    tape.mul_column(z, keep)
}

/// `Z + (GELU(Zᵀ W1) W2)ᵀ`
pub fn inter_mix(tape: &mut Tape, z: Var, w1: Var, w2: Var) -> Result<Var, NumError> {
    let zt = tape.transpose(z)?;
    let hidden = tape.matmul(zt, w1)?;
    let act = tape.gelu(hidden)?;
    let mixed = tape.matmul(act, w2)?;
    let back = tape.transpose(mixed)?;
    tape.add(z, back)
}

/// `Z' + GELU(Z' W3) W4`
pub fn intra_mix(tape: &mut Tape, z: Var, w3: Var, w4: Var) -> Result<Var, NumError> {
    let hidden = tape.matmul(z, w3)?;
    let act = tape.gelu(hidden)?;
    let mixed = tape.matmul(act, w4)?;
    tape.add(z, mixed)
}

/// Full reasoning step: mask (training only), inter-mix, intra-mix.
pub fn reason(tape: &mut Tape, z: Var, w: &MixerVars, mask: &MaskDraw) -> Result<Var, NumError> {
    let masked = apply_mask(tape, z, mask)?;
    let inter = inter_mix(tape, masked, w.w1, w.w2)?;
    intra_mix(tape, inter, w.w3, w.w4)
}

/// Plain-matrix mixer weights for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerMatrices {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub w3: DenseMatrix,
    pub w4: DenseMatrix,
}

impl MixerMatrices {
    pub fn zeros(m_ext: usize, d: usize, f1: usize, f2: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(m_ext, f1),
            w2: DenseMatrix::zeros(f1, m_ext),
            w3: DenseMatrix::zeros(d, f2),
            w4: DenseMatrix::zeros(f2, d),
        }
    }
}

/// [`reason`] on plain matrices; `training == false` forces the ratio to 0.
pub fn reason_matrix<R: Rng + ?Sized>(
    z: &DenseMatrix,
    weights: &MixerMatrices,
    self_loop: usize,
    ratio: f64,
    rng: &mut R,
    training: bool,
) -> Result<(DenseMatrix, MaskDraw), NumError> {
    let draw = if training {
        draw_mask(z.rows(), self_loop, ratio, rng)?
    } else {
        MaskDraw::empty()
    };
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone())?;
    let w = MixerVars {
        w1: tape.constant(weights.w1.clone())?,
        w2: tape.constant(weights.w2.clone())?,
        w3: tape.constant(weights.w3.clone())?,
        w4: tape.constant(weights.w4.clone())?,
    };
    let out = reason(&mut tape, zv, &w, &draw)?;
    Ok((tape.value(out).clone(), draw))
}
