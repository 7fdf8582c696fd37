//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParameterStore, Tape, Var};
use crate::error::NumError;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl std::fmt::Display for CoordinateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}[{},{}]: analytic {:.6e}, numeric {:.6e}, rel {:.2e}",
            self.param, self.row, self.col, self.analytic, self.numeric, self.rel_error
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateError>,
}

/// `|g − ĝ| / max(1e-8, |g| + |ĝ|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `loss` against central differences.
///
/// `loss` must build a scalar on the supplied tape from the supplied store and
/// be deterministic. Fails with [`NumError::GradientCheck`] listing every
/// coordinate whose relative error exceeds `opts.tol`.
pub fn finite_difference_check<F>(
    params: &ParameterStore,
    mut loss: F,
    opts: &FdOptions,
) -> Result<FdReport, NumError>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var, NumError>,
{
    let mut store = params.clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&store, &mut tape)?;
    tape.backward(out)?.accumulate_into(&mut store);
    let analytic = store.clone();

    let mut eval = |s: &ParameterStore| -> Result<f64, NumError> {
        let mut t = Tape::new();
        let v = loss(s, &mut t)?;
        Ok(t.value(v).sum())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut offending = Vec::new();

    for idx in 0..store.len() {
        let id = ParamId(idx);
        let (rows, cols) = store.value(id).shape();
        let total = rows * cols;
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < total => sample(&mut rng, total, k).into_vec(),
            _ => (0..total).collect(),
        };
        for flat in coords {
            let original = store.value(id).as_slice()[flat];
            store.value_mut(id).as_mut_slice()[flat] = original + opts.eps;
            let plus = eval(&store)?;
            store.value_mut(id).as_mut_slice()[flat] = original - opts.eps;
            let minus = eval(&store)?;
            store.value_mut(id).as_mut_slice()[flat] = original;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let g = analytic.gradient(id).as_slice()[flat];
            let rel = relative_error(g, numeric);
            report.checked += 1;
            let coord = CoordinateError {
                param: store.get(id).name.clone(),
                row: flat / cols,
                col: flat % cols,
                analytic: g,
                numeric,
                rel_error: rel,
            };
            if rel > opts.tol {
                offending.push(coord.to_string());
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(coord);
            }
        }
    }

    if offending.is_empty() {
        Ok(report)
    } else {
        Err(NumError::GradientCheck {
            max_rel_error: report.max_rel_error,
            tol: opts.tol,
            offending,
        })
    }
}
