//! Time-indexed power series over a regular step grid.
//!
//! [`ForecastSeries`] is the exchange format between the PV forecaster, the
//! cost function, and the planner: a start timestamp, a fixed step, and one
//! non-negative power value per step. Integration helpers treat the series
//! as piecewise-constant over its native cells.

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Timestamp;

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("series must contain at least one value")]
    Empty,
    #[error("step must be a positive whole number of minutes, got {0}")]
    BadStep(i64),
    #[error("negative power {value} at index {index}")]
    NegativeValue { index: usize, value: f64 },
    #[error("series [{have_start}, {have_end}) does not cover requested window [{want_start}, {want_end})")]
    Coverage {
        have_start: Timestamp,
        have_end: Timestamp,
        want_start: Timestamp,
        want_end: Timestamp,
    },
}

/// Power values (kW) on a regular time grid, one value per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    start: Timestamp,
    step_minutes: i64,
    values_kw: Vec<f64>,
}

impl ForecastSeries {
    pub fn new(
        start: Timestamp,
        step_minutes: i64,
        values_kw: Vec<f64>,
    ) -> Result<Self, SeriesError> {
        if values_kw.is_empty() {
            return Err(SeriesError::Empty);
        }
        if step_minutes <= 0 {
            return Err(SeriesError::BadStep(step_minutes));
        }
        if let Some((index, &value)) = values_kw
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(SeriesError::NegativeValue { index, value });
        }
        Ok(Self {
            start,
            step_minutes,
            values_kw,
        })
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn step_minutes(&self) -> i64 {
        self.step_minutes
    }

    pub fn values(&self) -> &[f64] {
        &self.values_kw
    }

    pub fn len(&self) -> usize {
        self.values_kw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_kw.is_empty()
    }

    /// End of the covered interval (exclusive).
    pub fn end(&self) -> Timestamp {
        self.start + Duration::minutes(self.step_minutes * self.values_kw.len() as i64)
    }

    /// Whether `[from, to)` lies inside the covered interval.
    pub fn covers(&self, from: Timestamp, to: Timestamp) -> bool {
        from >= self.start && to <= self.end() && from <= to
    }

    fn require_coverage(&self, from: Timestamp, to: Timestamp) -> Result<(), SeriesError> {
        if self.covers(from, to) {
            Ok(())
        } else {
            Err(SeriesError::Coverage {
                have_start: self.start,
                have_end: self.end(),
                want_start: from,
                want_end: to,
            })
        }
    }

    /// Offset of `t` from the series start in fractional minutes.
    fn offset_minutes(&self, t: Timestamp) -> f64 {
        (t - self.start).num_seconds() as f64 / 60.0
    }

    /// Power at instant `t` (piecewise-constant; right-open cells).
    pub fn power_at(&self, t: Timestamp) -> Result<f64, SeriesError> {
        self.require_coverage(t, t)?;
        let idx = (self.offset_minutes(t) / self.step_minutes as f64).floor() as usize;
        Ok(self.values_kw[idx.min(self.values_kw.len() - 1)])
    }

    /// Energy in `[from, to)` in kWh, integrating the piecewise-constant series.
    pub fn energy_kwh(&self, from: Timestamp, to: Timestamp) -> Result<f64, SeriesError> {
        self.require_coverage(from, to)?;
        Ok(self.integrate(self.offset_minutes(from), self.offset_minutes(to), |v| v))
    }

    /// Energy in `[from, to)` covered by a constant consumer of `power_kw`:
    /// the integral of `min(series, power_kw)`, in kWh.
    pub fn covered_energy_kwh(
        &self,
        from: Timestamp,
        to: Timestamp,
        power_kw: f64,
    ) -> Result<f64, SeriesError> {
        self.require_coverage(from, to)?;
        Ok(self.integrate(self.offset_minutes(from), self.offset_minutes(to), |v| {
            v.min(power_kw)
        }))
    }

    /// Integrate `f(value)` over `[a_min, b_min]` (minutes from start), kWh.
    fn integrate(&self, a_min: f64, b_min: f64, f: impl Fn(f64) -> f64) -> f64 {
        if b_min <= a_min {
            return 0.0;
        }
        let step = self.step_minutes as f64;
        let first_cell = (a_min / step).floor() as usize;
        let last_cell = (((b_min / step).ceil() as usize).max(first_cell + 1) - 1)
            .min(self.values_kw.len() - 1);
        let mut total = 0.0;
        for cell in first_cell..=last_cell {
            let lo = (cell as f64 * step).max(a_min);
            let hi = ((cell + 1) as f64 * step).min(b_min);
            if hi > lo {
                total += f(self.values_kw[cell]) * (hi - lo) / 60.0;
            }
        }
        total
    }

    /// The sub-series covering `[from, to)`; `from` and `to` must fall on the
    /// native grid.
    pub fn slice(&self, from: Timestamp, to: Timestamp) -> Result<ForecastSeries, SeriesError> {
        self.require_coverage(from, to)?;
        let step = self.step_minutes as f64;
        let a = self.offset_minutes(from);
        let b = self.offset_minutes(to);
        if a % step != 0.0 || b % step != 0.0 {
            return Err(SeriesError::Coverage {
                have_start: self.start,
                have_end: self.end(),
                want_start: from,
                want_end: to,
            });
        }
        ForecastSeries::new(
            from,
            self.step_minutes,
            self.values_kw[(a / step) as usize..(b / step) as usize].to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2016, 9, 5, 0, 0, 0).unwrap()
    }

    fn series(values: Vec<f64>, step_minutes: i64) -> ForecastSeries {
        ForecastSeries::new(t0(), step_minutes, values).unwrap()
    }

    #[test]
    fn rejects_empty_and_negative() {
        assert_eq!(
            ForecastSeries::new(t0(), 60, vec![]).unwrap_err(),
            SeriesError::Empty
        );
        assert!(matches!(
            ForecastSeries::new(t0(), 60, vec![1.0, -0.5]).unwrap_err(),
            SeriesError::NegativeValue { index: 1, .. }
        ));
        assert_eq!(
            ForecastSeries::new(t0(), 0, vec![1.0]).unwrap_err(),
            SeriesError::BadStep(0)
        );
    }

    #[test]
    fn energy_over_whole_series() {
        let s = series(vec![1.0, 3.0], 60);
        let e = s.energy_kwh(t0(), s.end()).unwrap();
        assert!((e - 4.0).abs() < 1e-12);
    }

    #[test]
    fn energy_with_fractional_window() {
        // 2 kW for the first hour; the window [0:30, 1:30) overlaps half of
        // each cell: 1.0 + 0.0 = 1.0 kWh against a zero second hour.
        let s = series(vec![2.0, 0.0], 60);
        let from = t0() + Duration::minutes(30);
        let to = t0() + Duration::minutes(90);
        assert!((s.energy_kwh(from, to).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covered_energy_clips_at_consumer_power() {
        let s = series(vec![3.0, 1.0], 60);
        let covered = s.covered_energy_kwh(t0(), s.end(), 2.0).unwrap();
        assert!((covered - 3.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_errors_are_reported() {
        let s = series(vec![1.0], 60);
        let err = s.energy_kwh(t0(), t0() + Duration::minutes(61)).unwrap_err();
        assert!(matches!(err, SeriesError::Coverage { .. }));
    }

    #[test]
    fn slice_requires_grid_alignment() {
        let s = series(vec![1.0, 2.0, 3.0], 60);
        let ok = s
            .slice(t0() + Duration::hours(1), t0() + Duration::hours(3))
            .unwrap();
        assert_eq!(ok.values(), &[2.0, 3.0]);
        assert!(s
            .slice(t0() + Duration::minutes(30), t0() + Duration::hours(2))
            .is_err());
    }

    #[test]
    fn power_at_uses_right_open_cells() {
        let s = series(vec![1.0, 2.0], 60);
        assert_eq!(s.power_at(t0()).unwrap(), 1.0);
        assert_eq!(s.power_at(t0() + Duration::hours(1)).unwrap(), 2.0);
    }
}
