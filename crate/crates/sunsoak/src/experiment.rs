//! Household simulation and the alternating-week A/B experiment.
//!
//! Synthetic houses carry a buffer, a stochastic tap schedule, a PV trace
//! built from a clear-sky shape times an autocorrelated cloud factor, and
//! exogenous space-heating and non-controllable load traces. The harness
//! drives every house at five-minute steps through weeks that alternate
//! between the default-thermostat scenario and the active controller (after
//! a thermostat warm-up week that seeds the learning data), then reduces the
//! ledger to the self-consumption performance indicators.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{
    self, Action, BufferError, BufferParams, BufferState, StepCommand,
};
use crate::controller::{
    thermostat_tick, ActiveController, ControlInputs, ControllerConfig, ControllerError,
    ThermostatConfig,
};
use crate::forecast::{self, ForecastError, ForecastModel, WeatherFeatures};
use crate::fqi::{greedy_action, soc_grid, FqiConfig};
use crate::loss::LossModel;
use crate::seeding::derive_rng;
use crate::series::{ForecastSeries, SeriesError};
use crate::trees::TreeParams;
use crate::Timestamp;

const STREAM_HOUSE: u64 = 0x686f_7573;
const STREAM_TAPS: u64 = 0x7461_7073;
const STREAM_CLOUD: u64 = 0x636c_6f75;
const STREAM_LOADS: u64 = 0x6c6f_6164;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("house {house} traces cover {have} steps, need {need}")]
    TraceCoverage {
        house: usize,
        have: usize,
        need: usize,
    },
    #[error("empty ledger")]
    EmptyLedger,
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

// ---------------------------------------------------------------------------
// Synthetic houses
// ---------------------------------------------------------------------------

/// Knobs for the synthetic-household generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseArchetype {
    pub buffer: BufferParams,
    /// True feed-water temperature, °C.
    pub t_in_c: f64,
    /// PV plant peak, kW.
    pub pv_peak_kw: f64,
    /// Hot water drawn on a weekday, liters.
    pub weekday_liters: f64,
    /// Hot water drawn on a weekend day, liters.
    pub weekend_liters: f64,
    /// 0 = permanent clear sky, 1 = heavily varying cover.
    pub cloudiness: f64,
    /// Space-heating magnitude, kW.
    pub sh_scale_kw: f64,
    /// Non-controllable base load, kW.
    pub base_load_kw: f64,
}

impl Default for HouseArchetype {
    fn default() -> Self {
        Self {
            buffer: BufferParams::default(),
            t_in_c: 10.0,
            pv_peak_kw: 4.0,
            weekday_liters: 110.0,
            weekend_liters: 130.0,
            cloudiness: 0.35,
            sh_scale_kw: 0.8,
            base_load_kw: 0.25,
        }
    }
}

/// One simulated household with pregenerated exogenous traces. Traces run
/// one day past the experiment span so receding horizons near the end stay
/// covered.
#[derive(Debug, Clone)]
pub struct HouseProfile {
    pub params: BufferParams,
    pub t_in_c: f64,
    pub pv_peak_kw: f64,
    /// PV production per simulation step, kW.
    pub pv_kw: Vec<f64>,
    /// Hot-water draw per simulation step, liters.
    pub tap_liters: Vec<f64>,
    /// Space-heating electrical load per step, kW.
    pub sh_kw: Vec<f64>,
    /// Non-controllable electrical load per step, kW.
    pub noncontrollable_kw: Vec<f64>,
    /// Hourly weather features aligned with the traces.
    pub weather: WeatherFeatures,
}

/// Fraction of clear-sky output at hour-of-day `h` (sunrise 6.5, sunset 20.5).
fn clear_sky(h: f64) -> f64 {
    const SUNRISE: f64 = 6.5;
    const SUNSET: f64 = 20.5;
    if h <= SUNRISE || h >= SUNSET {
        return 0.0;
    }
    (std::f64::consts::PI * (h - SUNRISE) / (SUNSET - SUNRISE)).sin()
}

/// Generate a synthetic household covering `span_days` (+1 horizon day) from
/// `start` at `step_minutes` resolution.
pub fn synth_house(
    archetype: &HouseArchetype,
    start: Timestamp,
    span_days: usize,
    step_minutes: i64,
    seed: u64,
) -> HouseProfile {
    let days = span_days + 1;
    let steps_per_day = (24 * 60 / step_minutes) as usize;
    let steps = days * steps_per_day;
    let step_h = step_minutes as f64 / 60.0;

    // Cloud factor: mean-reverting hourly process in [0.15, 1].
    let mut cloud_rng = derive_rng(seed, STREAM_CLOUD, 0);
    let mean = 1.0 - 0.5 * archetype.cloudiness;
    let mut factor = mean;
    let cloud_by_hour: Vec<f64> = (0..days * 24)
        .map(|_| {
            let noise: f64 = cloud_rng.random_range(-1.0..1.0);
            factor = (mean + 0.8 * (factor - mean) + 0.25 * archetype.cloudiness * noise)
                .clamp(0.15, 1.0);
            factor
        })
        .collect();

    let pv_kw: Vec<f64> = (0..steps)
        .map(|i| {
            let hour_of_day = (i % steps_per_day) as f64 * step_h;
            let hour_index = i * step_minutes as usize / 60;
            archetype.pv_peak_kw * clear_sky(hour_of_day) * cloud_by_hour[hour_index]
        })
        .collect();

    let weather_timestamps: Vec<Timestamp> = (0..days * 24)
        .map(|h| start + chrono::Duration::hours(h as i64))
        .collect();
    let weather_rows: Vec<Vec<f64>> = (0..days * 24)
        .map(|h| {
            let hour_of_day = (h % 24) as f64;
            let temp = 14.0 + 5.0 * (std::f64::consts::PI * (hour_of_day - 4.0) / 12.0).sin();
            vec![1.0 - cloud_by_hour[h], temp]
        })
        .collect();
    let weather = WeatherFeatures::new(
        weather_timestamps,
        vec!["cloud_cover".into(), "temperature_c".into()],
        weather_rows,
    )
    .expect("generated weather is well-formed");

    // Tap schedule: morning/midday/evening clusters plus scattered small
    // draws; weekends shift later and draw more.
    let mut tap_rng = derive_rng(seed, STREAM_TAPS, 0);
    let mut tap_liters = vec![0.0f64; steps];
    for day in 0..days {
        let day_start = start + chrono::Duration::days(day as i64);
        let weekend = matches!(
            chrono::Datelike::weekday(&day_start),
            chrono::Weekday::Sat | chrono::Weekday::Sun
        );
        let (daily, shift) = if weekend {
            (archetype.weekend_liters, 1.5)
        } else {
            (archetype.weekday_liters, 0.0)
        };
        if daily <= 0.0 {
            continue;
        }
        let clusters = [(7.0f64 + shift, 0.32), (12.5 + shift, 0.12), (19.5, 0.36)];
        let mut add_draw = |hour: f64, liters: f64| {
            let idx = day * steps_per_day
                + ((hour * 60.0 / step_minutes as f64) as usize).min(steps_per_day - 1);
            tap_liters[idx] += liters;
        };
        for (center, share) in clusters {
            for _ in 0..2 {
                let hour = (center + tap_rng.random_range(-0.75..0.75)).clamp(0.0, 23.9);
                let liters = share * daily / 2.0 * tap_rng.random_range(0.7..1.3);
                add_draw(hour, liters);
            }
        }
        // Remaining ~20 % as six scattered small draws.
        for _ in 0..6 {
            let hour = tap_rng.random_range(6.0..23.0);
            let liters = 0.2 * daily / 6.0 * tap_rng.random_range(0.5..1.5);
            add_draw(hour, liters);
        }
    }

    // Exogenous loads: smooth daily shapes with mild noise.
    let mut load_rng = derive_rng(seed, STREAM_LOADS, 0);
    let mut sh_kw = Vec::with_capacity(steps);
    let mut noncontrollable_kw = Vec::with_capacity(steps);
    for i in 0..steps {
        let h = (i % steps_per_day) as f64 * step_h;
        let morning = (-((h - 7.0) / 2.5).powi(2)).exp();
        let evening = (-((h - 20.0) / 3.0).powi(2)).exp();
        let sh = archetype.sh_scale_kw * (0.35 + 0.8 * morning + evening)
            * load_rng.random_range(0.9..1.1);
        let nc = archetype.base_load_kw * (1.0 + 0.6 * (-((h - 18.5) / 2.0).powi(2)).exp())
            * load_rng.random_range(0.85..1.15);
        sh_kw.push(sh.max(0.0));
        noncontrollable_kw.push(nc.max(0.0));
    }

    HouseProfile {
        params: archetype.buffer.clone(),
        t_in_c: archetype.t_in_c,
        pv_peak_kw: archetype.pv_peak_kw,
        pv_kw,
        tap_liters,
        sh_kw,
        noncontrollable_kw,
        weather,
    }
}

/// True standing-loss law of a house: the buffer loses a fixed fraction per
/// hour of its energy above the feed-water-equivalent level, which is affine
/// (then exactly piecewise-linear) in soc.
pub fn physical_loss_model(params: &BufferParams, t_in_c: f64) -> Result<LossModel, BufferError> {
    let (e_min, e_max) = buffer::energy_bounds(t_in_c, params)?;
    let k = params.c_p_kj_per_kg_k * params.water_density_kg_per_l;
    let e_ambient = k * t_in_c * params.volume_liters;
    let rate = |soc: f64| {
        params.loss_coefficient_per_hour * (e_min + soc * (e_max - e_min) - e_ambient)
    };
    LossModel::from_knot_values([
        rate(0.0).max(0.0),
        rate(0.25),
        rate(0.5),
        rate(0.75),
        rate(1.0),
    ])
    .map_err(|_| {
        BufferError::InvalidParams("loss coefficient produced a non-monotone law".into())
    })
}

// ---------------------------------------------------------------------------
// Experiment configuration and records
// ---------------------------------------------------------------------------

/// Which scenario runs the first post-warm-up week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeekPhase {
    ThermostatFirst,
    ActiveFirst,
}

/// How the controller obtains its PV forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastProvider {
    /// Forecaster trained on the warm-up week, queried every refit.
    Model,
    /// The true future trace (diagnostic upper bound).
    Perfect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSettings {
    pub provider: ForecastProvider,
    pub n_history: usize,
    pub k_horizon: usize,
    pub regressor: TreeParams,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            provider: ForecastProvider::Model,
            n_history: 24,
            k_horizon: 24,
            regressor: TreeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Measured weeks after warm-up; scenarios alternate weekly.
    pub span_weeks: usize,
    /// Thermostat-driven warm-up weeks that seed the learning data.
    pub warmup_weeks: usize,
    pub phase: WeekPhase,
    pub step_minutes: i64,
    pub start: Timestamp,
    pub controller: ControllerConfig,
    pub fqi: FqiConfig,
    pub thermostat: ThermostatConfig,
    pub tap_window_days: i64,
    pub forecast: ForecastSettings,
}

impl ExperimentConfig {
    pub fn with_start(start: Timestamp) -> Self {
        Self {
            span_weeks: 2,
            warmup_weeks: 1,
            phase: WeekPhase::ThermostatFirst,
            step_minutes: 5,
            start,
            controller: ControllerConfig::default(),
            fqi: FqiConfig::default(),
            thermostat: ThermostatConfig::default(),
            tap_window_days: 60,
            forecast: ForecastSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.span_weeks < 2 {
            return Err(ExperimentError::InvalidConfig(format!(
                "span must be at least 2 weeks (one per scenario), got {}",
                self.span_weeks
            )));
        }
        if self.step_minutes < 1 || 24 * 60 % self.step_minutes != 0 {
            return Err(ExperimentError::InvalidConfig(format!(
                "step_minutes must divide a day, got {}",
                self.step_minutes
            )));
        }
        if self.forecast.provider == ForecastProvider::Model && self.warmup_weeks < 1 {
            return Err(ExperimentError::InvalidConfig(
                "the model forecast provider needs at least one warm-up week of data".into(),
            ));
        }
        self.controller
            .validate()
            .map_err(ExperimentError::Controller)?;
        self.fqi.validate().map_err(ControllerError::Fqi)?;
        Ok(())
    }

    pub fn total_weeks(&self) -> usize {
        self.warmup_weeks + self.span_weeks
    }
}

/// Scenario label carried by every ledger row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioLabel {
    Warmup,
    Thermostat,
    Active,
}

impl std::fmt::Display for ScenarioLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioLabel::Warmup => write!(f, "warmup"),
            ScenarioLabel::Thermostat => write!(f, "thermostat"),
            ScenarioLabel::Active => write!(f, "active"),
        }
    }
}

impl std::str::FromStr for ScenarioLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup" => Ok(ScenarioLabel::Warmup),
            "thermostat" => Ok(ScenarioLabel::Thermostat),
            "active" => Ok(ScenarioLabel::Active),
            other => Err(format!("unknown scenario label {other:?}")),
        }
    }
}

/// One ledger record: per step and house.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub house: usize,
    pub timestamp: Timestamp,
    pub scenario: ScenarioLabel,
    pub pv_kw: f64,
    pub dhw_kw: f64,
    pub sh_kw: f64,
    pub noncontrollable_kw: f64,
    /// Command issued at this step, if any.
    pub action: Option<u8>,
    /// State of charge at the end of the step.
    pub soc: f64,
}

/// Per-step records of every house, at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLedger {
    pub step_minutes: i64,
    pub rows: Vec<LedgerRow>,
}

/// One command-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandRow {
    pub house: usize,
    pub timestamp: Timestamp,
    pub scenario: ScenarioLabel,
    pub action: u8,
    pub soc_before: f64,
    pub policy_id: Option<u64>,
}

/// Comfort bookkeeping: taps served from a buffer that had been at or below
/// soc 0 for longer than one backup-recovery window count as violations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComfortAudit {
    pub tap_events: usize,
    pub cold_served_events: usize,
    pub violations: usize,
    pub backup_activations: usize,
    pub longest_cold_minutes: f64,
}

/// Snapshot of one fitted policy for plotting: greedy action and Q-values
/// over the stage × soc plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMapRow {
    pub stage: usize,
    pub soc: f64,
    pub action: u8,
    pub q_delay: f64,
    pub q_charge_min: f64,
    pub q_charge_full: f64,
    /// Forecast PV power for the stage, kW.
    pub pv_kw: f64,
}

/// Everything one experiment run produces.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub ledger: ExperimentLedger,
    pub commands: Vec<CommandRow>,
    pub comfort: ComfortAudit,
    /// First fitted policy of house 0, for policy-map plots.
    pub policy_map: Vec<PolicyMapRow>,
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

fn scenario_for_week(week: usize, cfg: &ExperimentConfig) -> ScenarioLabel {
    if week < cfg.warmup_weeks {
        return ScenarioLabel::Warmup;
    }
    let rel = week - cfg.warmup_weeks;
    let first = match cfg.phase {
        WeekPhase::ThermostatFirst => ScenarioLabel::Thermostat,
        WeekPhase::ActiveFirst => ScenarioLabel::Active,
    };
    let second = match cfg.phase {
        WeekPhase::ThermostatFirst => ScenarioLabel::Active,
        WeekPhase::ActiveFirst => ScenarioLabel::Thermostat,
    };
    if rel % 2 == 0 {
        first
    } else {
        second
    }
}

/// Simulate all houses through the alternating-week experiment.
pub fn run_experiment(
    houses: &[HouseProfile],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentRun, ExperimentError> {
    cfg.validate()?;
    if houses.is_empty() {
        return Err(ExperimentError::InvalidConfig("no houses".into()));
    }
    let steps_per_day = (24 * 60 / cfg.step_minutes) as usize;
    let need = cfg.total_weeks() * 7 * steps_per_day + steps_per_day;
    for (i, house) in houses.iter().enumerate() {
        if house.pv_kw.len() < need
            || house.tap_liters.len() < need
            || house.sh_kw.len() < need
            || house.noncontrollable_kw.len() < need
        {
            return Err(ExperimentError::TraceCoverage {
                house: i,
                have: house.pv_kw.len().min(house.tap_liters.len()),
                need,
            });
        }
    }

    let results: Result<Vec<HouseRun>, ExperimentError> = houses
        .par_iter()
        .enumerate()
        .map(|(i, house)| simulate_house(i, house, cfg, derive_rng_seed(seed, i)))
        .collect();
    let results = results?;

    let mut run = ExperimentRun {
        ledger: ExperimentLedger {
            step_minutes: cfg.step_minutes,
            rows: Vec::new(),
        },
        commands: Vec::new(),
        comfort: ComfortAudit::default(),
        policy_map: Vec::new(),
    };
    for (i, house_run) in results.into_iter().enumerate() {
        run.ledger.rows.extend(house_run.rows);
        run.commands.extend(house_run.commands);
        run.comfort.tap_events += house_run.comfort.tap_events;
        run.comfort.cold_served_events += house_run.comfort.cold_served_events;
        run.comfort.violations += house_run.comfort.violations;
        run.comfort.backup_activations += house_run.comfort.backup_activations;
        run.comfort.longest_cold_minutes = run
            .comfort
            .longest_cold_minutes
            .max(house_run.comfort.longest_cold_minutes);
        if i == 0 {
            run.policy_map = house_run.policy_map;
        }
    }
    Ok(run)
}

fn derive_rng_seed(seed: u64, house: usize) -> u64 {
    crate::seeding::derive_seed(seed, STREAM_HOUSE, house as u64)
}

struct HouseRun {
    rows: Vec<LedgerRow>,
    commands: Vec<CommandRow>,
    comfort: ComfortAudit,
    policy_map: Vec<PolicyMapRow>,
}

fn simulate_house(
    house_index: usize,
    house: &HouseProfile,
    cfg: &ExperimentConfig,
    house_seed: u64,
) -> Result<HouseRun, ExperimentError> {
    let steps_per_day = (24 * 60 / cfg.step_minutes) as usize;
    let steps = cfg.total_weeks() * 7 * steps_per_day;
    let steps_per_week = 7 * steps_per_day;
    let steps_per_hour = (60 / cfg.step_minutes) as usize;
    let dt_h = cfg.step_minutes as f64 / 60.0;

    let true_loss = physical_loss_model(&house.params, house.t_in_c)?;
    let pv_series = ForecastSeries::new(cfg.start, cfg.step_minutes, house.pv_kw.clone())?;

    let mut state = BufferState::uniform(house.params.t_min_c, house.t_in_c, &house.params)?;
    let mut controller = ActiveController::new(
        cfg.controller,
        cfg.fqi.clone(),
        house.params.clone(),
        cfg.tap_window_days,
        house_seed,
    )?;

    // Observation histories, grown as simulation advances (no lookahead).
    let mut tap_history: Vec<(Timestamp, f64)> = Vec::with_capacity(steps);
    let mut sensor_history: Vec<(Timestamp, f64)> = Vec::with_capacity(steps);
    let mut loss_observations: Vec<(f64, f64)> = Vec::new();
    let mut hourly_pv: Vec<f64> = Vec::with_capacity(steps / steps_per_hour);

    let mut forecaster: Option<ForecastModel> = None;
    let warmup_steps = cfg.warmup_weeks * steps_per_week;

    let mut rows = Vec::with_capacity(steps);
    let mut commands = Vec::new();
    let mut comfort = ComfortAudit::default();
    let mut policy_map: Vec<PolicyMapRow> = Vec::new();
    let mut cold_since: Option<Timestamp> = None;
    let mut cold_floor_soc = 0.0f64;

    for i in 0..steps {
        let now = cfg.start + chrono::Duration::minutes(i as i64 * cfg.step_minutes);
        let scenario = scenario_for_week(i / steps_per_week, cfg);
        let draw = house.tap_liters[i];

        // Aggregate the previous hour of PV once it is complete.
        if i % steps_per_hour == 0 && i > 0 {
            let window = &house.pv_kw[i - steps_per_hour..i];
            hourly_pv.push(window.iter().sum::<f64>() / steps_per_hour as f64);
        }
        // Train the forecaster once the warm-up data is in.
        if cfg.forecast.provider == ForecastProvider::Model
            && forecaster.is_none()
            && i == warmup_steps
        {
            let power = ForecastSeries::new(cfg.start, 60, hourly_pv.clone())?;
            forecaster = Some(forecast::train_forecaster(
                &power,
                &house.weather,
                cfg.forecast.n_history,
                cfg.forecast.k_horizon,
                house.pv_peak_kw,
                &cfg.forecast.regressor.with_seed(house_seed),
            )?);
        }

        let soc_before = buffer::soc(&state, &house.params)?;

        // Pick the step command.
        let mut action_code: Option<u8> = None;
        let mut policy_id: Option<u64> = None;
        let command = match scenario {
            ScenarioLabel::Active => {
                let forecast_series = if controller.needs_refit(now) {
                    provide_forecast(cfg, house, &hourly_pv, now, forecaster.as_ref(), &pv_series)
                } else {
                    None
                };
                let inputs = ControlInputs {
                    tap_history: &tap_history,
                    loss_observations: &loss_observations,
                    sensor_history: &sensor_history,
                    forecast: forecast_series.as_ref(),
                };
                let outcome = controller.tick(now, &state, &inputs)?;
                if outcome.refit && policy_map.is_empty() {
                    if let Some((policy, _, _)) = controller.policy() {
                        policy_map = snapshot_policy(policy, forecast_series.as_ref());
                    }
                }
                policy_id = outcome.policy_id;
                match outcome.command {
                    Some(u) => {
                        action_code = Some(u.index() as u8);
                        match buffer::action_charge_target(u, &state, &house.params)? {
                            Some(target) => StepCommand::Charge(target),
                            None => StepCommand::Idle,
                        }
                    }
                    None => StepCommand::Idle,
                }
            }
            ScenarioLabel::Thermostat | ScenarioLabel::Warmup => {
                match thermostat_tick(&state, &cfg.thermostat, &house.params)? {
                    Some(target) => {
                        let code =
                            if target.target_temp_c >= house.params.t_max_c - 1e-9 { 2 } else { 1 };
                        action_code = Some(code);
                        StepCommand::Charge(target)
                    }
                    None => StepCommand::Idle,
                }
            }
        };
        if let Some(code) = action_code {
            commands.push(CommandRow {
                house: house_index,
                timestamp: now,
                scenario,
                action: code,
                soc_before,
                policy_id,
            });
        }

        // Physics step under the true loss law.
        let was_charging = state.charging.is_some();
        let result = buffer::apply_step(
            &state,
            command,
            draw,
            &pv_series,
            now,
            cfg.step_minutes as f64,
            &house.params,
            &true_loss,
        )?;
        if !was_charging && result.state.charging.is_some() && action_code.is_none() {
            comfort.backup_activations += 1;
        }
        state = result.state;
        let soc_after = buffer::soc(&state, &house.params)?;

        // Comfort audit: taps served while the buffer has sat at or below
        // soc 0 for longer than one backup recovery window are violations.
        if draw > 0.0 {
            comfort.tap_events += 1;
            if soc_before <= 0.0 {
                comfort.cold_served_events += 1;
                let since = cold_since.unwrap_or(now);
                let cold_minutes = (now - since).num_minutes() as f64;
                comfort.longest_cold_minutes = comfort.longest_cold_minutes.max(cold_minutes);
                let recovery = recovery_window_minutes(cfg, house, cold_floor_soc);
                if cold_minutes > recovery {
                    comfort.violations += 1;
                }
            }
        }
        if soc_after <= 0.0 {
            cold_since.get_or_insert(now);
            cold_floor_soc = cold_floor_soc.min(soc_after);
        } else {
            cold_since = None;
            cold_floor_soc = 0.0;
        }

        // Record observations available to later ticks.
        tap_history.push((now, draw));
        sensor_history.push((now, buffer::sensor_temperature(&state, &house.params)));
        if i % steps_per_hour == 0 {
            loss_observations.push((soc_before, true_loss.predict(soc_before)));
        }

        rows.push(LedgerRow {
            house: house_index,
            timestamp: now,
            scenario,
            pv_kw: house.pv_kw[i],
            dhw_kw: result.hp_electrical_kwh / dt_h,
            sh_kw: house.sh_kw[i],
            noncontrollable_kw: house.noncontrollable_kw[i],
            action: action_code,
            soc: soc_after,
        });
    }

    Ok(HouseRun {
        rows,
        commands,
        comfort,
        policy_map,
    })
}

/// Longest acceptable cold spell: a full backup charge from the observed
/// floor plus one actuation period.
fn recovery_window_minutes(cfg: &ExperimentConfig, house: &HouseProfile, floor_soc: f64) -> f64 {
    let (e_min, e_max) = buffer::energy_bounds(house.t_in_c, &house.params)
        .expect("house params validated at start");
    let soc_u1 = buffer::uniform_soc(house.params.t_min_c, house.t_in_c, &house.params)
        .expect("house params validated at start");
    let deficit = (soc_u1 - floor_soc).max(0.0);
    deficit * (e_max - e_min) / (house.params.cop * house.params.hp_electrical_power_kw) / 60.0
        + cfg.controller.act_period_minutes as f64
}

fn provide_forecast(
    cfg: &ExperimentConfig,
    house: &HouseProfile,
    hourly_pv: &[f64],
    now: Timestamp,
    forecaster: Option<&ForecastModel>,
    pv_series: &ForecastSeries,
) -> Option<ForecastSeries> {
    match cfg.forecast.provider {
        ForecastProvider::Perfect => {
            let end = now + chrono::Duration::hours(cfg.controller.horizon_hours);
            let slice = pv_series.slice(now, end).ok()?;
            // Aggregate to hourly cells for the planner.
            let per_hour = (60 / cfg.step_minutes) as usize;
            let hourly: Vec<f64> = slice
                .values()
                .chunks(per_hour)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            ForecastSeries::new(now, 60, hourly).ok()
        }
        ForecastProvider::Model => {
            let model = forecaster?;
            if hourly_pv.len() < model.n_history() {
                return None;
            }
            let recent = &hourly_pv[hourly_pv.len() - model.n_history()..];
            forecast::forecast(model, recent, now, &house.weather).ok()
        }
    }
}

fn snapshot_policy(
    policy: &crate::fqi::Policy,
    forecast: Option<&ForecastSeries>,
) -> Vec<PolicyMapRow> {
    let grid = soc_grid(25);
    let mut rows = Vec::new();
    for stage in 1..=policy.horizon_steps() {
        let pv_kw = forecast
            .and_then(|fc| {
                let ts = policy.start()
                    + chrono::Duration::minutes((stage as i64 - 1) * policy.step_minutes());
                fc.power_at(ts).ok()
            })
            .unwrap_or(0.0);
        for &soc in &grid {
            let action = greedy_action(policy, stage, soc).expect("stage in range");
            rows.push(PolicyMapRow {
                stage,
                soc,
                action: action.index() as u8,
                q_delay: policy.q_value(stage, soc, Action::Delay).expect("in range"),
                q_charge_min: policy
                    .q_value(stage, soc, Action::ChargeToMin)
                    .expect("in range"),
                q_charge_full: policy
                    .q_value(stage, soc, Action::ChargeToFull)
                    .expect("in range"),
                pv_kw,
            });
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// Performance indicators
// ---------------------------------------------------------------------------

/// Indicator set for one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiValues {
    pub pv_captured_by_dhw_pct: f64,
    pub pv_captured_by_total_pct: f64,
    pub pv_captured_by_sh_pct: f64,
    pub el_consumption_kwh_per_day: f64,
    pub pv_production_kwh_per_day: f64,
    pub sh_consumption_kwh_per_day: f64,
}

/// Indicators per scenario (warm-up rows are excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub thermostat: KpiValues,
    pub active: KpiValues,
}

/// Reduce a ledger to the per-scenario performance indicators. Per scenario:
/// captured share of PV per load class uses `min(pv, load)` step by step;
/// per-day magnitudes divide scenario totals by scenario days.
pub fn compute_kpis(ledger: &ExperimentLedger) -> Result<KpiReport, ExperimentError> {
    if ledger.rows.is_empty() {
        return Err(ExperimentError::EmptyLedger);
    }
    let dt_h = ledger.step_minutes as f64 / 60.0;
    let mut per_scenario = [Accumulator::default(), Accumulator::default()];
    for row in &ledger.rows {
        let slot = match row.scenario {
            ScenarioLabel::Thermostat => 0,
            ScenarioLabel::Active => 1,
            ScenarioLabel::Warmup => continue,
        };
        per_scenario[slot].add(row, dt_h);
    }
    Ok(KpiReport {
        thermostat: per_scenario[0].finish(),
        active: per_scenario[1].finish(),
    })
}

#[derive(Debug, Default)]
struct Accumulator {
    pv_kwh: f64,
    dhw_captured_kwh: f64,
    sh_captured_kwh: f64,
    total_captured_kwh: f64,
    el_kwh: f64,
    sh_kwh: f64,
    step_hours: f64,
}

impl Accumulator {
    fn add(&mut self, row: &LedgerRow, dt_h: f64) {
        let total_kw = row.dhw_kw + row.sh_kw + row.noncontrollable_kw;
        self.pv_kwh += row.pv_kw * dt_h;
        self.dhw_captured_kwh += row.pv_kw.min(row.dhw_kw) * dt_h;
        self.sh_captured_kwh += row.pv_kw.min(row.sh_kw) * dt_h;
        self.total_captured_kwh += row.pv_kw.min(total_kw) * dt_h;
        self.el_kwh += total_kw * dt_h;
        self.sh_kwh += row.sh_kw * dt_h;
        self.step_hours += dt_h;
    }

    fn finish(&self) -> KpiValues {
        let pct = |captured: f64| {
            if self.pv_kwh > 0.0 {
                100.0 * captured / self.pv_kwh
            } else {
                0.0
            }
        };
        let days = self.step_hours / 24.0;
        let per_day = |kwh: f64| if days > 0.0 { kwh / days } else { 0.0 };
        KpiValues {
            pv_captured_by_dhw_pct: pct(self.dhw_captured_kwh),
            pv_captured_by_total_pct: pct(self.total_captured_kwh),
            pv_captured_by_sh_pct: pct(self.sh_captured_kwh),
            el_consumption_kwh_per_day: per_day(self.el_kwh),
            pv_production_kwh_per_day: per_day(self.pv_kwh),
            sh_consumption_kwh_per_day: per_day(self.sh_kwh),
        }
    }
}

/// Average load and production per hour of day and scenario (plot data).
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyProfileRow {
    pub scenario: ScenarioLabel,
    pub hour: u32,
    pub avg_dhw_kw: f64,
    pub avg_sh_kw: f64,
    pub avg_total_kw: f64,
    pub avg_pv_kw: f64,
}

pub fn hourly_profiles(ledger: &ExperimentLedger) -> Vec<HourlyProfileRow> {
    use chrono::Timelike;
    let mut sums = vec![[0.0f64; 5]; 48];
    for row in &ledger.rows {
        let slot = match row.scenario {
            ScenarioLabel::Thermostat => 0,
            ScenarioLabel::Active => 1,
            ScenarioLabel::Warmup => continue,
        };
        let idx = slot * 24 + row.timestamp.hour() as usize;
        sums[idx][0] += row.dhw_kw;
        sums[idx][1] += row.sh_kw;
        sums[idx][2] += row.dhw_kw + row.sh_kw + row.noncontrollable_kw;
        sums[idx][3] += row.pv_kw;
        sums[idx][4] += 1.0;
    }
    let mut out = Vec::with_capacity(48);
    for (idx, s) in sums.iter().enumerate() {
        if s[4] == 0.0 {
            continue;
        }
        out.push(HourlyProfileRow {
            scenario: if idx < 24 {
                ScenarioLabel::Thermostat
            } else {
                ScenarioLabel::Active
            },
            hour: (idx % 24) as u32,
            avg_dhw_kw: s[0] / s[4],
            avg_sh_kw: s[1] / s[4],
            avg_total_kw: s[2] / s[4],
            avg_pv_kw: s[3] / s[4],
        });
    }
    out
}
