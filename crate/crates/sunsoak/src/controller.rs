//! Receding-horizon control loop and the default-thermostat baseline.
//!
//! The active controller refits its tap and loss models and a fresh policy on
//! every refit boundary (hourly by default) over a 24 h horizon, then picks
//! the greedy action every actuation tick (five minutes by default). While a
//! charge cycle runs it stays silent: cycles always complete. When no
//! forecast is available it keeps the previous policy, advancing through its
//! stages; with no policy at all it degrades to thermostat behavior at the
//! minimum comfort temperature.

use thiserror::Error;

use crate::buffer::{
    self, Action, BufferError, BufferParams, BufferState, ChargeTarget,
};
use crate::forecast::ForecastError;
use crate::fqi::{self, FqiConfig, FqiError, Policy};
use crate::loss::{fit_loss_model, LossError};
use crate::seeding::derive_seed;
use crate::series::ForecastSeries;
use crate::tap::{fit_tap_model, TapError};
use crate::Timestamp;

const STREAM_REFIT: u64 = 0x7265_6669;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Tap(#[from] TapError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Fqi(#[from] FqiError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// Which control law drives a simulated week.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Active,
    Thermostat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    /// Model/policy refresh period, minutes.
    pub refit_period_minutes: i64,
    /// Actuation period, minutes.
    pub act_period_minutes: i64,
    /// Receding horizon, hours.
    pub horizon_hours: i64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            refit_period_minutes: 60,
            act_period_minutes: 5,
            horizon_hours: 24,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.act_period_minutes < 1 || self.refit_period_minutes < 1 {
            return Err(ControllerError::InvalidConfig(
                "periods must be positive".into(),
            ));
        }
        if self.refit_period_minutes % self.act_period_minutes != 0 {
            return Err(ControllerError::InvalidConfig(format!(
                "act period {} must divide refit period {}",
                self.act_period_minutes, self.refit_period_minutes
            )));
        }
        if (self.horizon_hours * 60) % self.refit_period_minutes != 0 {
            return Err(ControllerError::InvalidConfig(format!(
                "refit period {} must divide the horizon of {} hours",
                self.refit_period_minutes, self.horizon_hours
            )));
        }
        Ok(())
    }

    /// Horizon length in refit periods (= planner stages).
    pub fn horizon_steps(&self) -> usize {
        (self.horizon_hours * 60 / self.refit_period_minutes) as usize
    }
}

/// Default-thermostat baseline configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermostatConfig {
    pub setpoint_c: f64,
}

impl Default for ThermostatConfig {
    fn default() -> Self {
        Self { setpoint_c: 45.0 }
    }
}

impl ThermostatConfig {
    pub fn validate(&self, params: &BufferParams) -> Result<(), ControllerError> {
        if self.setpoint_c < params.t_min_c || self.setpoint_c > params.t_max_c {
            return Err(ControllerError::InvalidConfig(format!(
                "setpoint {} outside [{}, {}]",
                self.setpoint_c, params.t_min_c, params.t_max_c
            )));
        }
        Ok(())
    }
}

/// Thermostat rule: when the mid-buffer sensor drops below the setpoint and
/// no cycle is running, recharge to a uniform setpoint temperature.
pub fn thermostat_tick(
    state: &BufferState,
    config: &ThermostatConfig,
    params: &BufferParams,
) -> Result<Option<ChargeTarget>, BufferError> {
    if state.charging.is_some() {
        return Ok(None);
    }
    if buffer::sensor_temperature(state, params) < config.setpoint_c {
        return Ok(Some(ChargeTarget {
            target_soc: buffer::uniform_soc(config.setpoint_c, state.t_in_c, params)?,
            target_temp_c: config.setpoint_c,
        }));
    }
    Ok(None)
}

/// Data the control loop reads at a tick. Histories must only contain what
/// has already been observed.
pub struct ControlInputs<'a> {
    /// Timestamped draws (liters per record) for the tap model.
    pub tap_history: &'a [(Timestamp, f64)],
    /// `(soc, kJ/h)` standing-loss observations from quiescent periods.
    pub loss_observations: &'a [(f64, f64)],
    /// Mid-buffer sensor readings for the feed-temperature estimate.
    pub sensor_history: &'a [(Timestamp, f64)],
    /// PV forecast over the horizon; `None` when the provider failed.
    pub forecast: Option<&'a ForecastSeries>,
}

/// Outcome of one actuation tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    /// Command issued this tick; `None` while a charge cycle runs.
    pub command: Option<Action>,
    /// Whether the policy was refreshed at this tick.
    pub refit: bool,
    /// Identity of the policy that produced the command, if any.
    pub policy_id: Option<u64>,
    /// Stage the policy was queried at, if any.
    pub stage: Option<usize>,
}

/// The receding-horizon controller.
pub struct ActiveController {
    config: ControllerConfig,
    fqi_config: FqiConfig,
    thermostat_fallback: ThermostatConfig,
    params: BufferParams,
    tap_window_days: i64,
    seed: u64,
    policy: Option<FittedPolicy>,
    refit_count: u64,
}

struct FittedPolicy {
    policy: Policy,
    fitted_at: Timestamp,
    id: u64,
}

impl ActiveController {
    pub fn new(
        config: ControllerConfig,
        fqi_config: FqiConfig,
        params: BufferParams,
        tap_window_days: i64,
        seed: u64,
    ) -> Result<Self, ControllerError> {
        config.validate()?;
        fqi_config.validate()?;
        params.validate()?;
        let thermostat_fallback = ThermostatConfig {
            setpoint_c: params.t_min_c,
        };
        Ok(Self {
            config,
            fqi_config,
            thermostat_fallback,
            params,
            tap_window_days,
            seed,
            policy: None,
            refit_count: 0,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// The policy currently in force, with its fit time and identity.
    pub fn policy(&self) -> Option<(&Policy, Timestamp, u64)> {
        self.policy
            .as_ref()
            .map(|p| (&p.policy, p.fitted_at, p.id))
    }

    /// Whether the next tick at `now` will attempt a refit: at every refit
    /// boundary since the last fit, or whenever no policy exists.
    pub fn needs_refit(&self, now: Timestamp) -> bool {
        match &self.policy {
            None => true,
            Some(p) => {
                (now - p.fitted_at).num_minutes() >= self.config.refit_period_minutes
            }
        }
    }

    /// One actuation tick: refit on boundaries, stay silent while charging,
    /// otherwise emit the greedy action with no-op charges filtered to delay.
    pub fn tick(
        &mut self,
        now: Timestamp,
        state: &BufferState,
        inputs: &ControlInputs<'_>,
    ) -> Result<TickOutcome, ControllerError> {
        let mut refit = false;
        if self.needs_refit(now) {
            refit = self.try_refit(now, inputs)?;
        }

        if state.charging.is_some() {
            return Ok(TickOutcome {
                command: None,
                refit,
                policy_id: self.policy.as_ref().map(|p| p.id),
                stage: None,
            });
        }

        let Some(fitted) = &self.policy else {
            // Degraded mode: no forecast has ever been available.
            let command = thermostat_tick(state, &self.thermostat_fallback, &self.params)?
                .map(|_| Action::ChargeToMin)
                .unwrap_or(Action::Delay);
            return Ok(TickOutcome {
                command: Some(command),
                refit,
                policy_id: None,
                stage: None,
            });
        };

        let elapsed = (now - fitted.fitted_at).num_minutes();
        let stage = ((elapsed / self.config.refit_period_minutes) as usize + 1)
            .min(fitted.policy.horizon_steps());
        let soc = buffer::soc(state, &self.params)?;
        let greedy = fqi::greedy_action(&fitted.policy, stage, soc)?;
        // A charge whose target is at or below the current state of charge
        // is a no-op; emit a delay instead.
        let command = match buffer::action_charge_target(greedy, state, &self.params)? {
            Some(_) => greedy,
            None => Action::Delay,
        };
        Ok(TickOutcome {
            command: Some(command),
            refit,
            policy_id: Some(fitted.id),
            stage: Some(stage),
        })
    }

    fn try_refit(
        &mut self,
        now: Timestamp,
        inputs: &ControlInputs<'_>,
    ) -> Result<bool, ControllerError> {
        let Some(forecast) = inputs.forecast else {
            // Keep the previous policy; stage indexing advances through it.
            return Ok(false);
        };
        let t_in = buffer::estimate_feed_temperature(inputs.sensor_history)?;
        let tap_model = fit_tap_model(inputs.tap_history, self.tap_window_days)?;
        let loss_model = fit_loss_model(inputs.loss_observations)?;
        let mut fqi_config = self.fqi_config.clone();
        fqi_config.seed = derive_seed(self.seed, STREAM_REFIT, self.refit_count);
        let policy = fqi::fit_policy(
            &fqi_config,
            now,
            &tap_model,
            &loss_model,
            forecast,
            t_in,
            &self.params,
        )?;
        self.refit_count += 1;
        self.policy = Some(FittedPolicy {
            policy,
            fitted_at: now,
            id: self.refit_count,
        });
        Ok(true)
    }
}
