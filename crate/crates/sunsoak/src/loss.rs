//! Standing-loss regression: thermal loss rate as a function of state of charge.
//!
//! The model family is a monotone non-decreasing piecewise-linear function on
//! five equidistant knots over soc ∈ [0, 1], fitted by least squares on a hat
//! basis and projected to the monotone non-negative cone afterwards. Loss
//! observations are assumed to come from quiescent (no-tap) periods.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KNOT_COUNT: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("need at least two observations with distinct soc values, got {0}")]
    InsufficientData(usize),
    #[error("non-finite observation at index {0}")]
    NonFinite(usize),
    #[error("knot values must be non-negative and non-decreasing: {0:?}")]
    InvalidKnots([f64; KNOT_COUNT]),
}

/// Fitted loss rate (kJ per hour) over soc ∈ [0, 1]; evaluation clamps its
/// argument into that interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    knot_values_kj_per_h: [f64; KNOT_COUNT],
}

impl LossModel {
    /// No standing losses.
    pub fn zero() -> Self {
        Self {
            knot_values_kj_per_h: [0.0; KNOT_COUNT],
        }
    }

    /// Build directly from knot values (at soc 0, 0.25, 0.5, 0.75, 1).
    pub fn from_knot_values(values: [f64; KNOT_COUNT]) -> Result<Self, LossError> {
        let monotone = values.windows(2).all(|w| w[1] >= w[0]);
        if !monotone || values[0] < 0.0 || values.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidKnots(values));
        }
        Ok(Self {
            knot_values_kj_per_h: values,
        })
    }

    pub fn knot_values(&self) -> &[f64; KNOT_COUNT] {
        &self.knot_values_kj_per_h
    }

    /// Loss rate in kJ/h at the given state of charge.
    pub fn predict(&self, soc: f64) -> f64 {
        let x = soc.clamp(0.0, 1.0) * (KNOT_COUNT - 1) as f64;
        let left = (x.floor() as usize).min(KNOT_COUNT - 2);
        let frac = x - left as f64;
        self.knot_values_kj_per_h[left] * (1.0 - frac) + self.knot_values_kj_per_h[left + 1] * frac
    }
}

/// Least-squares fit of the monotone piecewise-linear loss model from
/// `(soc, kJ/h)` observations.
pub fn fit_loss_model(observations: &[(f64, f64)]) -> Result<LossModel, LossError> {
    if let Some(bad) = observations
        .iter()
        .position(|(s, l)| !s.is_finite() || !l.is_finite())
    {
        return Err(LossError::NonFinite(bad));
    }
    let distinct = {
        let mut socs: Vec<f64> = observations.iter().map(|(s, _)| *s).collect();
        socs.sort_unstable_by(f64::total_cmp);
        socs.dedup();
        socs.len()
    };
    if observations.len() < 2 || distinct < 2 {
        return Err(LossError::InsufficientData(observations.len()));
    }

    let knots = hat_basis_least_squares(observations)
        .unwrap_or_else(|| linear_fallback(observations));
    let mut projected = isotonic(&knots);
    for v in &mut projected {
        *v = v.max(0.0);
    }
    Ok(LossModel {
        knot_values_kj_per_h: projected,
    })
}

/// Hat-basis value of knot `j` at position `soc`.
fn hat(j: usize, soc: f64) -> f64 {
    let x = soc.clamp(0.0, 1.0) * (KNOT_COUNT - 1) as f64;
    (1.0 - (x - j as f64).abs()).max(0.0)
}

/// Solve the normal equations for the hat-basis coefficients; `None` when the
/// system is singular (data does not pin down every knot).
fn hat_basis_least_squares(observations: &[(f64, f64)]) -> Option<[f64; KNOT_COUNT]> {
    let mut ata = [[0.0f64; KNOT_COUNT]; KNOT_COUNT];
    let mut atb = [0.0f64; KNOT_COUNT];
    for &(soc, loss) in observations {
        let basis: Vec<f64> = (0..KNOT_COUNT).map(|j| hat(j, soc)).collect();
        for i in 0..KNOT_COUNT {
            if basis[i] == 0.0 {
                continue;
            }
            atb[i] += basis[i] * loss;
            for j in 0..KNOT_COUNT {
                ata[i][j] += basis[i] * basis[j];
            }
        }
    }
    solve_symmetric(ata, atb)
}

/// Gaussian elimination with partial pivoting on a KNOT_COUNT-sized system.
fn solve_symmetric(
    mut a: [[f64; KNOT_COUNT]; KNOT_COUNT],
    mut b: [f64; KNOT_COUNT],
) -> Option<[f64; KNOT_COUNT]> {
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = scale * 1e-12;
    for col in 0..KNOT_COUNT {
        let pivot_row = (col..KNOT_COUNT)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..KNOT_COUNT {
            let factor = a[row][col] / a[col][col];
            for k in col..KNOT_COUNT {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0f64; KNOT_COUNT];
    for row in (0..KNOT_COUNT).rev() {
        let mut rhs = b[row];
        for k in (row + 1)..KNOT_COUNT {
            rhs -= a[row][k] * x[k];
        }
        x[row] = rhs / a[row][row];
    }
    Some(x)
}

/// Global linear least squares evaluated at the knots, for datasets too
/// sparse to determine every hat coefficient.
fn linear_fallback(observations: &[(f64, f64)]) -> [f64; KNOT_COUNT] {
    let n = observations.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(s, l) in observations {
        sx += s;
        sy += l;
        sxx += s * s;
        sxy += s * l;
    }
    let det = n * sxx - sx * sx;
    let (slope, intercept) = if det.abs() < 1e-12 {
        (0.0, sy / n)
    } else {
        ((n * sxy - sx * sy) / det, (sy * sxx - sx * sxy) / det)
    };
    std::array::from_fn(|j| intercept + slope * j as f64 / (KNOT_COUNT - 1) as f64)
}

/// Pool-adjacent-violators projection to the non-decreasing cone.
fn isotonic(values: &[f64; KNOT_COUNT]) -> [f64; KNOT_COUNT] {
    // (mean, count) blocks.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(KNOT_COUNT);
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 <= last.0 {
                break;
            }
            blocks.pop();
            blocks.pop();
            let count = prev.1 + last.1;
            let mean = (prev.0 * prev.1 as f64 + last.0 * last.1 as f64) / count as f64;
            blocks.push((mean, count));
        }
    }
    let mut out = [0.0f64; KNOT_COUNT];
    let mut idx = 0;
    for (mean, count) in blocks {
        for _ in 0..count {
            out[idx] = mean;
            idx += 1;
        }
    }
    out
}
