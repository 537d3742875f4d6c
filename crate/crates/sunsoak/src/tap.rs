//! Stochastic tap-water model: binned conditional draw distribution.
//!
//! Historical draws are aggregated to the simulation step, then grouped into
//! 48 bins keyed by hour of day and weekday/weekend. Sampling a timestamp
//! returns a uniformly random element of its bin, so the sampled distribution
//! is exactly the empirical one. Bins left empty by sparse history fall back
//! to neighboring hours, then the other day type, then the pooled history.

use chrono::{Datelike, Duration, DurationRound, Timelike, Weekday};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Timestamp;

/// Aggregation step for draw histories, minutes.
pub const BASE_STEP_MINUTES: i64 = 5;

pub const BIN_COUNT: usize = 48;

#[derive(Debug, Error, PartialEq)]
pub enum TapError {
    #[error("empty draw history (or no draws inside the training window)")]
    EmptyHistory,
    #[error("history timestamps must be strictly increasing (violated at row {0})")]
    NonMonotone(usize),
    #[error("negative draw volume {volume} at row {row}")]
    NegativeVolume { row: usize, volume: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DayType {
    Weekday,
    Weekend,
}

/// Time-related component of the state: hour of day (1..=24) and day type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeFeature {
    pub hour: u8,
    pub day_type: DayType,
}

impl TimeFeature {
    pub fn from_timestamp(ts: Timestamp) -> Self {
        let day_type = match ts.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::Weekend,
            _ => DayType::Weekday,
        };
        Self {
            hour: ts.hour() as u8 + 1,
            day_type,
        }
    }

    /// Index into the 48-bin table.
    pub fn bin_index(self) -> usize {
        let day = match self.day_type {
            DayType::Weekday => 0,
            DayType::Weekend => 1,
        };
        day * 24 + (self.hour as usize - 1)
    }

    fn with_hour(self, hour: u8) -> Self {
        Self { hour, ..self }
    }

    fn other_day_type(self) -> Self {
        Self {
            day_type: match self.day_type {
                DayType::Weekday => DayType::Weekend,
                DayType::Weekend => DayType::Weekday,
            },
            ..self
        }
    }
}

/// Binned conditional distribution of draws (liters per base step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapModel {
    bins: Vec<Vec<f64>>,
    /// Per bin: the single value it holds, when all entries are equal.
    /// Constant bins (usually all-zero night hours) sample without drawing.
    constants: Vec<Option<f64>>,
    /// All bins flattened, the last fallback pool.
    pooled: Vec<f64>,
    training_window_days: i64,
}

impl TapModel {
    pub fn bin(&self, feature: TimeFeature) -> &[f64] {
        &self.bins[feature.bin_index()]
    }

    pub fn training_window_days(&self) -> i64 {
        self.training_window_days
    }
}

/// Fit the tap model on draws inside the trailing `window_days` of history.
/// Rows are aggregated into [`BASE_STEP_MINUTES`] buckets before binning;
/// explicit zero rows are kept as data points.
pub fn fit_tap_model(
    history: &[(Timestamp, f64)],
    window_days: i64,
) -> Result<TapModel, TapError> {
    if history.is_empty() {
        return Err(TapError::EmptyHistory);
    }
    for (row, pair) in history.windows(2).enumerate() {
        if pair[1].0 <= pair[0].0 {
            return Err(TapError::NonMonotone(row + 1));
        }
    }
    if let Some((row, &(_, volume))) = history.iter().enumerate().find(|(_, (_, v))| *v < 0.0) {
        return Err(TapError::NegativeVolume { row, volume });
    }

    let last = history.last().unwrap().0;
    let window_start = last - Duration::days(window_days);
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); BIN_COUNT];
    let step = Duration::minutes(BASE_STEP_MINUTES);
    let mut current_bucket: Option<(Timestamp, f64)> = None;
    let flush = |bucket: Option<(Timestamp, f64)>, bins: &mut Vec<Vec<f64>>| {
        if let Some((start, total)) = bucket {
            bins[TimeFeature::from_timestamp(start).bin_index()].push(total);
        }
    };
    for &(ts, volume) in history.iter().filter(|(ts, _)| *ts > window_start) {
        let bucket_start = ts.duration_trunc(step).expect("5-minute truncation");
        match current_bucket {
            Some((start, total)) if start == bucket_start => {
                current_bucket = Some((start, total + volume));
            }
            other => {
                flush(other, &mut bins);
                current_bucket = Some((bucket_start, volume));
            }
        }
    }
    flush(current_bucket, &mut bins);

    let pooled: Vec<f64> = bins.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(TapError::EmptyHistory);
    }
    let constants = bins.iter().map(|bin| constant_of(bin)).collect();
    Ok(TapModel {
        bins,
        constants,
        pooled,
        training_window_days: window_days,
    })
}

fn constant_of(values: &[f64]) -> Option<f64> {
    let first = *values.first()?;
    values.iter().all(|v| *v == first).then_some(first)
}

/// A bin resolved through the empty-bin fallback chain, ready for repeated
/// sampling.
#[derive(Debug, Clone, Copy)]
pub enum ResolvedBin<'a> {
    /// Every entry equals this value; sampling consumes no randomness.
    Constant(f64),
    Values(&'a [f64]),
    Pooled(&'a [f64], &'a [f64]),
}

impl ResolvedBin<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ResolvedBin::Constant(v) => v,
            ResolvedBin::Values(values) => values[rng.random_range(0..values.len())],
            ResolvedBin::Pooled(a, b) => {
                let idx = rng.random_range(0..a.len() + b.len());
                if idx < a.len() {
                    a[idx]
                } else {
                    b[idx - a.len()]
                }
            }
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match *self {
            ResolvedBin::Constant(v) => Some(v),
            _ => None,
        }
    }
}

/// Resolve the bin for `ts`. Empty bins fall back to the pooled neighboring
/// hours of the same day type, then the same hour of the other day type,
/// then the pooled history.
pub fn resolve_bin(model: &TapModel, ts: Timestamp) -> ResolvedBin<'_> {
    let feature = TimeFeature::from_timestamp(ts);
    let own = model.bin(feature);
    if !own.is_empty() {
        return match model.constants[feature.bin_index()] {
            Some(v) => ResolvedBin::Constant(v),
            None => ResolvedBin::Values(own),
        };
    }
    let wrap = |h: i32| -> u8 { (h - 1).rem_euclid(24) as u8 + 1 };
    let prev_feature = feature.with_hour(wrap(feature.hour as i32 - 1));
    let next_feature = feature.with_hour(wrap(feature.hour as i32 + 1));
    let prev = model.bin(prev_feature);
    let next = model.bin(next_feature);
    if prev.len() + next.len() > 0 {
        let merged = match (
            model.constants[prev_feature.bin_index()],
            model.constants[next_feature.bin_index()],
        ) {
            (Some(a), Some(b)) if a == b => Some(a),
            (Some(a), None) if next.is_empty() => Some(a),
            (None, Some(b)) if prev.is_empty() => Some(b),
            _ => None,
        };
        return match merged {
            Some(v) => ResolvedBin::Constant(v),
            None => ResolvedBin::Pooled(prev, next),
        };
    }
    let other_feature = feature.other_day_type();
    let other = model.bin(other_feature);
    if !other.is_empty() {
        return match model.constants[other_feature.bin_index()] {
            Some(v) => ResolvedBin::Constant(v),
            None => ResolvedBin::Values(other),
        };
    }
    match model.pooled.as_slice() {
        [] => ResolvedBin::Constant(0.0),
        all => match constant_of(all) {
            Some(v) => ResolvedBin::Constant(v),
            None => ResolvedBin::Values(all),
        },
    }
}

/// Draw one sample (liters per base step) for the bin of `ts`.
pub fn sample_tap<R: Rng + ?Sized>(model: &TapModel, ts: Timestamp, rng: &mut R) -> f64 {
    resolve_bin(model, ts).sample(rng)
}

/// Total draw over `[start, start + dt)`: the sum of one base-step sample per
/// base step in the window.
pub fn sample_window<R: Rng + ?Sized>(
    model: &TapModel,
    start: Timestamp,
    dt_minutes: i64,
    rng: &mut R,
) -> f64 {
    let steps = (dt_minutes / BASE_STEP_MINUTES).max(1);
    (0..steps)
        .map(|k| sample_tap(model, start + Duration::minutes(k * BASE_STEP_MINUTES), rng))
        .sum()
}
