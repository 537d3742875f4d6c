//! Data-driven PV power forecasting.
//!
//! The forecaster maps the `n` most recent power values plus exogenous
//! weather features onto the next `k` power values. One regressor is fitted
//! per output step (direct multi-horizon strategy); the regressor for step
//! `j` sees the lag vector together with the weather forecast at the target
//! timestamp `t + j`. Outputs are clipped to the plant's feasible range. A
//! persistence baseline (repeat the value observed 24 h earlier) serves as
//! the minimal skill reference.

use chrono::Duration;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed;
use crate::series::{ForecastSeries, SeriesError};
use crate::trees::{self, TrainedEnsemble, TreeParams, TreesError};
use crate::Timestamp;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("not enough aligned history to form a single training sample")]
    InsufficientData,
    #[error("misaligned series: {0}")]
    MisalignedSeries(String),
    #[error("recent power must hold exactly {expected} values, got {got}")]
    WrongHistoryLength { expected: usize, got: usize },
    #[error("weather forecast does not cover horizon timestamp {0}")]
    HorizonCoverage(Timestamp),
    #[error("weather columns {got:?} do not match the trained columns {expected:?}")]
    WeatherColumns {
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("persistence needs {need} trailing values (24 h), got {got}")]
    InsufficientHistory { need: usize, got: usize },
    #[error("invalid forecaster configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trees(#[from] TreesError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Exogenous per-timestamp weather features (cloud cover, temperature, any
/// provider columns). Missing values are NaN until interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherFeatures {
    timestamps: Vec<Timestamp>,
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl WeatherFeatures {
    pub fn new(
        timestamps: Vec<Timestamp>,
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self, ForecastError> {
        if timestamps.len() != rows.len() {
            return Err(ForecastError::MisalignedSeries(format!(
                "{} timestamps but {} rows",
                timestamps.len(),
                rows.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(ForecastError::MisalignedSeries(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != names.len()) {
            return Err(ForecastError::MisalignedSeries(format!(
                "row {i} has {} columns, header has {}",
                rows[i].len(),
                names.len()
            )));
        }
        Ok(Self {
            timestamps,
            names,
            rows,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_at(&self, ts: Timestamp) -> Option<&[f64]> {
        self.timestamps
            .binary_search(&ts)
            .ok()
            .map(|i| self.rows[i].as_slice())
    }

    /// Linearly interpolate NaN runs of at most `max_run` rows per column;
    /// longer runs (and runs touching the ends) stay NaN and drop the
    /// affected training samples later.
    pub fn interpolate_gaps(&mut self, max_run: usize) {
        for col in 0..self.names.len() {
            let mut i = 0;
            while i < self.rows.len() {
                if !self.rows[i][col].is_nan() {
                    i += 1;
                    continue;
                }
                let run_start = i;
                while i < self.rows.len() && self.rows[i][col].is_nan() {
                    i += 1;
                }
                let run_len = i - run_start;
                if run_start == 0 || i == self.rows.len() || run_len > max_run {
                    continue;
                }
                let left = self.rows[run_start - 1][col];
                let right = self.rows[i][col];
                for (k, row) in (1..=run_len).zip(run_start..i) {
                    let frac = k as f64 / (run_len + 1) as f64;
                    self.rows[row][col] = left + (right - left) * frac;
                }
            }
        }
    }
}

/// Trained multi-horizon forecaster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastModel {
    models: Vec<TrainedEnsemble>,
    n_history: usize,
    k_horizon: usize,
    step_minutes: i64,
    peak_kw: f64,
    weather_names: Vec<String>,
}

impl ForecastModel {
    pub fn n_history(&self) -> usize {
        self.n_history
    }

    pub fn k_horizon(&self) -> usize {
        self.k_horizon
    }

    pub fn step_minutes(&self) -> i64 {
        self.step_minutes
    }

    pub fn peak_kw(&self) -> f64 {
        self.peak_kw
    }
}

/// Fit one regressor per horizon step on samples sliding over the aligned
/// power and weather histories.
pub fn train_forecaster(
    power: &ForecastSeries,
    weather: &WeatherFeatures,
    n_history: usize,
    k_horizon: usize,
    peak_kw: f64,
    regressor: &TreeParams,
) -> Result<ForecastModel, ForecastError> {
    if n_history < 1 || k_horizon < 1 {
        return Err(ForecastError::InvalidConfig(format!(
            "need n_history >= 1 and k_horizon >= 1, got {n_history}/{k_horizon}"
        )));
    }
    if peak_kw <= 0.0 {
        return Err(ForecastError::InvalidConfig(format!(
            "plant peak must be > 0, got {peak_kw}"
        )));
    }
    let step = Duration::minutes(power.step_minutes());
    let values = power.values();
    if values.len() < n_history + k_horizon {
        return Err(ForecastError::InsufficientData);
    }
    let overlap = weather
        .timestamps()
        .iter()
        .any(|ts| *ts >= power.start() && *ts < power.end());
    if !overlap {
        return Err(ForecastError::MisalignedSeries(
            "power and weather histories cover disjoint time ranges".into(),
        ));
    }

    let models: Result<Vec<TrainedEnsemble>, ForecastError> = (0..k_horizon)
        .into_par_iter()
        .map(|j| {
            let mut inputs: Vec<Vec<f64>> = Vec::new();
            let mut targets: Vec<f64> = Vec::new();
            for origin in n_history..(values.len() - j) {
                let target = values[origin + j];
                let target_ts = power.start() + step * (origin + j) as i32;
                let Some(weather_row) = weather.row_at(target_ts) else {
                    continue;
                };
                let lags = &values[origin - n_history..origin];
                if weather_row.iter().any(|v| v.is_nan())
                    || lags.iter().any(|v| v.is_nan())
                    || target.is_nan()
                {
                    continue;
                }
                let mut x = Vec::with_capacity(n_history + weather_row.len());
                x.extend_from_slice(lags);
                x.extend_from_slice(weather_row);
                inputs.push(x);
                targets.push(target);
            }
            if inputs.is_empty() {
                return Err(ForecastError::InsufficientData);
            }
            let params = regressor.with_seed(derive_seed(regressor.seed, 0x6f72_6563, j as u64));
            Ok(trees::fit(&inputs, &targets, &params)?)
        })
        .collect();

    Ok(ForecastModel {
        models: models?,
        n_history,
        k_horizon,
        step_minutes: power.step_minutes(),
        peak_kw,
        weather_names: weather.names().to_vec(),
    })
}

/// Forecast `k_horizon` steps from `t`, given exactly `n_history` trailing
/// power values and a weather forecast covering the horizon.
pub fn forecast(
    model: &ForecastModel,
    recent_power: &[f64],
    t: Timestamp,
    weather_forecast: &WeatherFeatures,
) -> Result<ForecastSeries, ForecastError> {
    if recent_power.len() != model.n_history {
        return Err(ForecastError::WrongHistoryLength {
            expected: model.n_history,
            got: recent_power.len(),
        });
    }
    if weather_forecast.names() != model.weather_names.as_slice() {
        return Err(ForecastError::WeatherColumns {
            expected: model.weather_names.clone(),
            got: weather_forecast.names().to_vec(),
        });
    }
    let step = Duration::minutes(model.step_minutes);
    let mut values = Vec::with_capacity(model.k_horizon);
    for (j, ensemble) in model.models.iter().enumerate() {
        let target_ts = t + step * j as i32;
        let weather_row = weather_forecast
            .row_at(target_ts)
            .ok_or(ForecastError::HorizonCoverage(target_ts))?;
        let mut x = Vec::with_capacity(recent_power.len() + weather_row.len());
        x.extend_from_slice(recent_power);
        x.extend_from_slice(weather_row);
        values.push(ensemble.predict(&x)?.clamp(0.0, model.peak_kw));
    }
    Ok(ForecastSeries::new(t, model.step_minutes, values)?)
}

/// Repeat the value observed 24 hours earlier for each horizon step.
pub fn persistence_baseline(
    recent_power: &[f64],
    t: Timestamp,
    step_minutes: i64,
    k_horizon: usize,
) -> Result<ForecastSeries, ForecastError> {
    let steps_per_day = (24 * 60 / step_minutes) as usize;
    if recent_power.len() < steps_per_day {
        return Err(ForecastError::InsufficientHistory {
            need: steps_per_day,
            got: recent_power.len(),
        });
    }
    let last_day = &recent_power[recent_power.len() - steps_per_day..];
    let values: Vec<f64> = (0..k_horizon).map(|j| last_day[j % steps_per_day]).collect();
    Ok(ForecastSeries::new(t, step_minutes, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2016, 6, 1, 0, 0, 0).unwrap()
    }

    /// Hourly clear-sky-like day shape, zero at night, peak at noon.
    fn day_shape(hour: usize, peak: f64) -> f64 {
        let h = hour as f64;
        if (6.0..=20.0).contains(&h) {
            peak * (std::f64::consts::PI * (h - 6.0) / 14.0).sin().max(0.0)
        } else {
            0.0
        }
    }

    fn hourly_weather(days: usize, cloud: impl Fn(usize) -> f64) -> WeatherFeatures {
        let timestamps: Vec<Timestamp> =
            (0..days * 24).map(|h| t0() + Duration::hours(h as i64)).collect();
        let rows: Vec<Vec<f64>> = (0..days * 24).map(|h| vec![cloud(h), 15.0]).collect();
        WeatherFeatures::new(
            timestamps,
            vec!["cloud_cover".into(), "temperature_c".into()],
            rows,
        )
        .unwrap()
    }

    fn periodic_power(days: usize, peak: f64) -> ForecastSeries {
        let values: Vec<f64> = (0..days * 24).map(|h| day_shape(h % 24, peak)).collect();
        ForecastSeries::new(t0(), 60, values).unwrap()
    }

    fn small_params(seed: u64) -> TreeParams {
        TreeParams {
            n_trees: 30,
            seed,
            ..TreeParams::default()
        }
    }

    #[test]
    fn constant_history_forecasts_the_constant() {
        let power = ForecastSeries::new(t0(), 60, vec![2.5; 24 * 10]).unwrap();
        let weather = hourly_weather(10, |_| 0.3);
        let model = train_forecaster(&power, &weather, 24, 6, 4.0, &small_params(1)).unwrap();
        let out = forecast(&model, &vec![2.5; 24], t0() + Duration::hours(120), &weather).unwrap();
        for v in out.values() {
            assert!((v - 2.5).abs() < 1e-9, "forecast {v}");
        }
    }

    #[test]
    fn periodic_signal_is_learned_to_within_one_percent() {
        let peak = 4.0;
        let power = periodic_power(30, peak);
        let weather = hourly_weather(31, |_| 0.0);
        let model = train_forecaster(&power, &weather, 24, 24, peak, &small_params(2)).unwrap();
        // Forecast the day after the training range.
        let recent: Vec<f64> = (0..24).map(|h| day_shape(h, peak)).collect();
        let start = t0() + Duration::days(30);
        let out = forecast(&model, &recent, start, &weather).unwrap();
        let mae: f64 = out
            .values()
            .iter()
            .enumerate()
            .map(|(h, v)| (v - day_shape(h % 24, peak)).abs())
            .sum::<f64>()
            / 24.0;
        assert!(mae < 0.01 * peak, "mae {mae}");
    }

    #[test]
    fn night_inputs_give_near_zero_first_steps() {
        let peak = 4.0;
        let power = periodic_power(30, peak);
        let weather = hourly_weather(31, |_| 0.0);
        let model = train_forecaster(&power, &weather, 24, 4, peak, &small_params(3)).unwrap();
        // Midnight origin: lags are yesterday 00:00-23:00; first steps are night.
        let recent: Vec<f64> = (0..24).map(|h| day_shape(h, peak)).collect();
        let out = forecast(&model, &recent, t0() + Duration::days(30), &weather).unwrap();
        for v in &out.values()[..4] {
            assert!(*v <= 0.05 * peak, "night forecast {v}");
        }
    }

    #[test]
    fn outputs_clip_to_plant_peak() {
        // Train on power exceeding the declared plant peak: raw regressor
        // outputs above peak must clip.
        let power = ForecastSeries::new(t0(), 60, vec![5.0; 24 * 8]).unwrap();
        let weather = hourly_weather(8, |_| 0.0);
        let model = train_forecaster(&power, &weather, 4, 2, 4.0, &small_params(4)).unwrap();
        let out = forecast(&model, &vec![5.0; 4], t0() + Duration::hours(100), &weather).unwrap();
        for v in out.values() {
            assert_eq!(*v, 4.0);
        }
    }

    #[test]
    fn disjoint_ranges_are_misaligned() {
        let power = periodic_power(5, 4.0);
        let timestamps: Vec<Timestamp> =
            (0..24).map(|h| t0() + Duration::days(30) + Duration::hours(h)).collect();
        let weather =
            WeatherFeatures::new(timestamps, vec!["cloud_cover".into()], vec![vec![0.0]; 24])
                .unwrap();
        assert!(matches!(
            train_forecaster(&power, &weather, 4, 2, 4.0, &small_params(5)),
            Err(ForecastError::MisalignedSeries(_))
        ));
    }

    #[test]
    fn history_length_and_horizon_errors() {
        let power = periodic_power(10, 4.0);
        let weather = hourly_weather(10, |_| 0.0);
        let model = train_forecaster(&power, &weather, 24, 4, 4.0, &small_params(6)).unwrap();
        assert!(matches!(
            forecast(&model, &vec![0.0; 10], t0() + Duration::days(5), &weather),
            Err(ForecastError::WrongHistoryLength {
                expected: 24,
                got: 10
            })
        ));
        // Horizon reaching past the available weather rows.
        let late = t0() + Duration::days(10) - Duration::hours(2);
        assert!(matches!(
            forecast(&model, &vec![0.0; 24], late, &weather),
            Err(ForecastError::HorizonCoverage(_))
        ));
    }

    #[test]
    fn persistence_examples() {
        let constant = vec![1.5; 24];
        let out = persistence_baseline(&constant, t0(), 60, 6).unwrap();
        assert!(out.values().iter().all(|v| *v == 1.5));

        let periodic: Vec<f64> = (0..48).map(|h| day_shape(h % 24, 4.0)).collect();
        let out = persistence_baseline(&periodic, t0() + Duration::days(2), 60, 24).unwrap();
        for (h, v) in out.values().iter().enumerate() {
            assert_eq!(*v, day_shape(h, 4.0));
        }

        assert!(matches!(
            persistence_baseline(&vec![0.0; 12], t0(), 60, 4),
            Err(ForecastError::InsufficientHistory { need: 24, got: 12 })
        ));
    }

    #[test]
    fn gap_interpolation_policy() {
        let timestamps: Vec<Timestamp> = (0..8).map(|h| t0() + Duration::hours(h)).collect();
        let mut rows: Vec<Vec<f64>> = (0..8).map(|h| vec![h as f64]).collect();
        rows[2][0] = f64::NAN;
        rows[3][0] = f64::NAN; // run of 2 -> interpolated
        rows[6][0] = f64::NAN; // isolated -> interpolated
        let mut weather = WeatherFeatures::new(timestamps.clone(), vec!["c".into()], rows).unwrap();
        weather.interpolate_gaps(3);
        let col: Vec<f64> = (0..8)
            .map(|i| weather.row_at(timestamps[i]).unwrap()[0])
            .collect();
        assert!((col[2] - 2.0).abs() < 1e-12);
        assert!((col[3] - 3.0).abs() < 1e-12);
        assert!((col[6] - 6.0).abs() < 1e-12);

        // A run longer than the limit stays NaN.
        let mut rows: Vec<Vec<f64>> = (0..8).map(|h| vec![h as f64]).collect();
        for row in rows.iter_mut().take(6).skip(2) {
            row[0] = f64::NAN;
        }
        let mut weather = WeatherFeatures::new(timestamps.clone(), vec!["c".into()], rows).unwrap();
        weather.interpolate_gaps(3);
        assert!(weather.row_at(timestamps[3]).unwrap()[0].is_nan());
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let power = periodic_power(10, 4.0);
        let weather = hourly_weather(10, |h| ((h % 5) as f64) / 5.0);
        let recent: Vec<f64> = (0..24).map(|h| day_shape(h, 4.0)).collect();
        let run = || {
            let model = train_forecaster(&power, &weather, 24, 8, 4.0, &small_params(7)).unwrap();
            forecast(&model, &recent, t0() + Duration::days(5), &weather)
                .unwrap()
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forecast_has_exactly_k_values_in_range() {
        let power = periodic_power(12, 4.0);
        let weather = hourly_weather(13, |h| ((h % 7) as f64) / 7.0);
        let model = train_forecaster(&power, &weather, 24, 24, 4.0, &small_params(8)).unwrap();
        let recent: Vec<f64> = (0..24).map(|h| day_shape(h, 4.0)).collect();
        let out = forecast(&model, &recent, t0() + Duration::days(12), &weather).unwrap();
        assert_eq!(out.len(), 24);
        assert!(out.values().iter().all(|v| (0.0..=4.0).contains(v)));
    }
}
