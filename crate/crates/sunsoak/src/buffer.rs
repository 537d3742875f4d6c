//! Two-layer hot-water buffer model, charging actions, and the step transition.
//!
//! The buffer is abstracted as a hot layer at the sensed temperature sitting
//! on a cold layer at feed-water temperature, with the boundary tracking the
//! volume tapped since the last complete recharge. Heating cycles always run
//! to completion at a uniform target temperature because heating mixes the
//! tank and would otherwise leave the energy content unknown. State of charge
//! is 0 at the half-cold comfort reference and 1 at a uniform maximum
//! temperature.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossModel;
use crate::series::{ForecastSeries, SeriesError};
use crate::Timestamp;

/// Tolerance for sensor/temperature invariant checks, in °C.
const TEMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("invalid buffer parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate energy bounds: e_max {e_max} kJ <= e_min {e_min} kJ")]
    DegenerateBounds { e_min: f64, e_max: f64 },
    #[error("invalid buffer state: {0}")]
    InvalidState(String),
    #[error("charge target soc {target} must exceed current soc {current}")]
    InvalidTarget { current: f64, target: f64 },
    #[error("empty temperature history")]
    EmptyHistory,
    #[error(transparent)]
    Forecast(#[from] SeriesError),
}

/// Sign convention for the cold layer in the energy estimate.
///
/// `Additive` counts the cold layer's energy content toward the total, which
/// is the physically consistent form and the default. `Subtractive` treats
/// the tapped volume as a debit instead; it is kept behind this switch for
/// comparison runs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyForm {
    Additive,
    Subtractive,
}

/// Physical and equipment parameters of one buffer installation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferParams {
    /// Tank volume in liters.
    pub volume_liters: f64,
    /// Minimum allowed uniform target temperature, °C.
    pub t_min_c: f64,
    /// Maximum allowed uniform target temperature, °C.
    pub t_max_c: f64,
    /// Heat capacity of water, kJ/(kg·K).
    pub c_p_kj_per_kg_k: f64,
    /// Water density, kg/L.
    pub water_density_kg_per_l: f64,
    /// Electrical power drawn by the heat pump while running, kW. The
    /// profile cannot be modulated; only its duration varies.
    pub hp_electrical_power_kw: f64,
    /// Coefficient of performance: thermal output per electrical input.
    pub cop: f64,
    /// Standing-loss coefficient: fraction of the energy content above the
    /// feed-water-equivalent level lost per hour. Ground truth for the
    /// simulator; controllers learn a regression of the resulting rate.
    pub loss_coefficient_per_hour: f64,
    /// Cold-layer sign convention, see [`EnergyForm`].
    pub energy_form: EnergyForm,
}

impl Default for BufferParams {
    fn default() -> Self {
        Self {
            volume_liters: 200.0,
            t_min_c: 45.0,
            t_max_c: 55.0,
            c_p_kj_per_kg_k: 4.186,
            water_density_kg_per_l: 1.0,
            hp_electrical_power_kw: 2.0,
            cop: 3.0,
            loss_coefficient_per_hour: 0.004,
            energy_form: EnergyForm::Additive,
        }
    }
}

impl BufferParams {
    pub fn validate(&self) -> Result<(), BufferError> {
        let err = |msg: String| Err(BufferError::InvalidParams(msg));
        if !(self.t_min_c > 0.0 && self.t_min_c < self.t_max_c) {
            return err(format!(
                "need 0 < t_min < t_max, got t_min={} t_max={}",
                self.t_min_c, self.t_max_c
            ));
        }
        if self.volume_liters <= 0.0 {
            return err(format!("volume_liters must be > 0, got {}", self.volume_liters));
        }
        if self.c_p_kj_per_kg_k <= 0.0 {
            return err(format!("c_p must be > 0, got {}", self.c_p_kj_per_kg_k));
        }
        if self.water_density_kg_per_l <= 0.0 {
            return err(format!(
                "water_density must be > 0, got {}",
                self.water_density_kg_per_l
            ));
        }
        if self.hp_electrical_power_kw <= 0.0 {
            return err(format!(
                "hp_electrical_power must be > 0, got {}",
                self.hp_electrical_power_kw
            ));
        }
        if self.cop < 1.0 {
            return err(format!("cop must be >= 1, got {}", self.cop));
        }
        if self.loss_coefficient_per_hour < 0.0 {
            return err(format!(
                "loss_coefficient must be >= 0, got {}",
                self.loss_coefficient_per_hour
            ));
        }
        Ok(())
    }

    /// kJ per (liter·K), the factor in front of every energy expression.
    fn kj_per_liter_kelvin(&self) -> f64 {
        self.c_p_kj_per_kg_k * self.water_density_kg_per_l
    }
}

/// A charge cycle in progress: uniform target temperature and the state of
/// charge reached when it completes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeTarget {
    pub target_soc: f64,
    pub target_temp_c: f64,
}

/// Controllable state of one buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferState {
    /// Hot-layer temperature, °C. Matches the mid-buffer sensor while the
    /// cold front is below mid-height.
    pub t_hot_c: f64,
    /// Estimated feed-water temperature, °C (cold-layer temperature).
    pub t_in_c: f64,
    /// Hot water drawn since the last complete recharge, liters.
    pub v_tapped_liters: f64,
    /// Present while a charge cycle is running; cycles always complete.
    pub charging: Option<ChargeTarget>,
}

impl BufferState {
    /// Validating constructor; `v_tapped` is clamped into `[0, volume]`.
    pub fn new(
        t_hot_c: f64,
        t_in_c: f64,
        v_tapped_liters: f64,
        charging: Option<ChargeTarget>,
        params: &BufferParams,
    ) -> Result<Self, BufferError> {
        if t_in_c > t_hot_c + TEMP_TOLERANCE {
            return Err(BufferError::InvalidState(format!(
                "t_in {t_in_c} exceeds t_hot {t_hot_c}"
            )));
        }
        if t_hot_c > params.t_max_c + TEMP_TOLERANCE {
            return Err(BufferError::InvalidState(format!(
                "t_hot {t_hot_c} exceeds t_max {}",
                params.t_max_c
            )));
        }
        if let Some(target) = charging {
            if target.target_temp_c < params.t_min_c - TEMP_TOLERANCE
                || target.target_temp_c > params.t_max_c + TEMP_TOLERANCE
                || !(target.target_soc > 0.0)
            {
                return Err(BufferError::InvalidState(format!(
                    "inadmissible charge target {target:?}"
                )));
            }
        }
        Ok(Self {
            t_hot_c,
            t_in_c,
            v_tapped_liters: v_tapped_liters.clamp(0.0, params.volume_liters),
            charging,
        })
    }

    /// Uniformly charged at `temp_c` with no water tapped since.
    pub fn uniform(temp_c: f64, t_in_c: f64, params: &BufferParams) -> Result<Self, BufferError> {
        Self::new(temp_c, t_in_c, 0.0, None, params)
    }
}

/// One heat-pump run: constant-power segments in execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub segments: Vec<ProfileSegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSegment {
    pub duration_minutes: f64,
    pub power_kw: f64,
}

impl PowerProfile {
    pub fn empty() -> Self {
        Self { segments: vec![] }
    }

    pub fn total_minutes(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_minutes).sum()
    }

    /// Total electrical energy, kWh.
    pub fn electrical_kwh(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.power_kw * s.duration_minutes / 60.0)
            .sum()
    }

    /// Total thermal energy delivered at coefficient of performance `cop`, kJ.
    pub fn thermal_kj(&self, cop: f64) -> f64 {
        self.electrical_kwh() * cop * 3600.0
    }
}

/// The three admissible controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Delay heating.
    Delay,
    /// Charge now to a uniform minimum temperature.
    ChargeToMin,
    /// Charge now to full (uniform maximum temperature, soc 1).
    ChargeToFull,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Delay, Action::ChargeToMin, Action::ChargeToFull];

    pub fn index(self) -> usize {
        match self {
            Action::Delay => 0,
            Action::ChargeToMin => 1,
            Action::ChargeToFull => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}

// ---------------------------------------------------------------------------
// Energy content and state of charge
// ---------------------------------------------------------------------------

/// Thermal energy content of the buffer, kJ (absolute Celsius reference; only
/// differences matter downstream).
pub fn energy_content(state: &BufferState, params: &BufferParams) -> f64 {
    let k = params.kj_per_liter_kelvin();
    let hot = state.t_hot_c * (params.volume_liters - state.v_tapped_liters);
    let cold = state.t_in_c * state.v_tapped_liters;
    match params.energy_form {
        EnergyForm::Additive => k * (hot + cold),
        EnergyForm::Subtractive => k * (hot - cold),
    }
}

/// `(e_min, e_max)` in kJ for a given feed-water temperature: `e_max` is the
/// content at a uniform maximum temperature, `e_min` the content with half
/// the tank at feed temperature and half at the minimum temperature.
pub fn energy_bounds(t_in_c: f64, params: &BufferParams) -> Result<(f64, f64), BufferError> {
    let k = params.kj_per_liter_kelvin();
    let e_max = k * params.t_max_c * params.volume_liters;
    let e_min = k * params.volume_liters * (t_in_c + params.t_min_c) / 2.0;
    if e_max <= e_min {
        return Err(BufferError::DegenerateBounds { e_min, e_max });
    }
    Ok((e_min, e_max))
}

/// State of charge: 0 at the half-cold reference, 1 at uniform maximum
/// temperature. May be negative or slightly above 1.
pub fn soc(state: &BufferState, params: &BufferParams) -> Result<f64, BufferError> {
    let (e_min, e_max) = energy_bounds(state.t_in_c, params)?;
    Ok((energy_content(state, params) - e_min) / (e_max - e_min))
}

/// State of charge of a buffer uniformly at `temp_c` with nothing tapped.
pub fn uniform_soc(temp_c: f64, t_in_c: f64, params: &BufferParams) -> Result<f64, BufferError> {
    let (e_min, e_max) = energy_bounds(t_in_c, params)?;
    let k = params.kj_per_liter_kelvin();
    Ok((k * temp_c * params.volume_liters - e_min) / (e_max - e_min))
}

/// Mid-buffer sensor emulation: the sensor sees the hot layer while the cold
/// front is below mid-height and the cold layer afterwards.
pub fn sensor_temperature(state: &BufferState, params: &BufferParams) -> f64 {
    if state.v_tapped_liters < params.volume_liters / 2.0 {
        state.t_hot_c
    } else {
        state.t_in_c
    }
}

// ---------------------------------------------------------------------------
// Actions and power profiles
// ---------------------------------------------------------------------------

/// Charge target of an action from the given state, or `None` when the action
/// is a no-op (delay, or a target at or below the current state of charge).
pub fn action_charge_target(
    u: Action,
    state: &BufferState,
    params: &BufferParams,
) -> Result<Option<ChargeTarget>, BufferError> {
    let current = soc(state, params)?;
    let target = match u {
        Action::Delay => return Ok(None),
        Action::ChargeToMin => ChargeTarget {
            target_soc: uniform_soc(params.t_min_c, state.t_in_c, params)?,
            target_temp_c: params.t_min_c,
        },
        Action::ChargeToFull => ChargeTarget {
            target_soc: 1.0,
            target_temp_c: params.t_max_c,
        },
    };
    if current >= target.target_soc {
        Ok(None)
    } else {
        Ok(Some(target))
    }
}

/// Target state of charge of an action, or `None` for a no-op.
pub fn action_target_soc(
    u: Action,
    state: &BufferState,
    params: &BufferParams,
) -> Result<Option<f64>, BufferError> {
    Ok(action_charge_target(u, state, params)?.map(|t| t.target_soc))
}

/// The unmodulated constant-power run that lifts the buffer from
/// `current_soc` to `target_soc`.
pub fn power_profile(
    current_soc: f64,
    target_soc: f64,
    t_in_c: f64,
    params: &BufferParams,
) -> Result<PowerProfile, BufferError> {
    if target_soc <= current_soc {
        return Err(BufferError::InvalidTarget {
            current: current_soc,
            target: target_soc,
        });
    }
    let (e_min, e_max) = energy_bounds(t_in_c, params)?;
    let deficit_kj = (target_soc - current_soc) * (e_max - e_min);
    // kJ / (kJ/s) = s
    let duration_minutes = deficit_kj / (params.cop * params.hp_electrical_power_kw) / 60.0;
    Ok(PowerProfile {
        segments: vec![ProfileSegment {
            duration_minutes,
            power_kw: params.hp_electrical_power_kw,
        }],
    })
}

/// Safety net: when the state of charge is at or below zero, start a recharge
/// toward a uniform minimum temperature. A cycle already in progress is left
/// alone.
pub fn apply_backup_controller(
    state: &BufferState,
    params: &BufferParams,
) -> Result<BufferState, BufferError> {
    if state.charging.is_some() || soc(state, params)? > 0.0 {
        return Ok(*state);
    }
    let mut next = *state;
    next.charging = Some(ChargeTarget {
        target_soc: uniform_soc(params.t_min_c, state.t_in_c, params)?,
        target_temp_c: params.t_min_c,
    });
    Ok(next)
}

// ---------------------------------------------------------------------------
// Step transition
// ---------------------------------------------------------------------------

/// Command for one simulation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepCommand {
    Idle,
    Charge(ChargeTarget),
}

/// Outcome of one simulated step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: BufferState,
    /// Electrical energy drawn by the heat pump during the step, kWh.
    pub hp_electrical_kwh: f64,
    /// PV energy injected into the grid during the step, kWh.
    pub cost_kwh: f64,
    /// Heat-pump run within the step, positioned at the step start.
    pub hp_profile: PowerProfile,
}

/// Volume of the cold layer when the hot layer is pinned at `temp_c` and the
/// total content is `energy_kj`.
fn cold_volume_for_energy(
    energy_kj: f64,
    temp_c: f64,
    t_in_c: f64,
    params: &BufferParams,
) -> f64 {
    let k = params.kj_per_liter_kelvin();
    let v = (k * temp_c * params.volume_liters - energy_kj) / (k * (temp_c - t_in_c));
    v.clamp(0.0, params.volume_liters)
}

/// Advance one step under an explicit command. Order of effects: tap draw,
/// standing loss, cycle resolution (a running cycle continues, else the
/// commanded charge starts, else the backup controller may fire), capped
/// energy delivery, then the injection cost.
pub fn apply_step(
    state: &BufferState,
    command: StepCommand,
    tap_draw_liters: f64,
    pv_slice: &ForecastSeries,
    step_start: Timestamp,
    dt_minutes: f64,
    params: &BufferParams,
    loss_model: &LossModel,
) -> Result<StepResult, BufferError> {
    if dt_minutes <= 0.0 {
        return Err(BufferError::InvalidParams(format!(
            "dt must be > 0, got {dt_minutes}"
        )));
    }
    if tap_draw_liters < 0.0 {
        return Err(BufferError::InvalidParams(format!(
            "tap draw must be >= 0, got {tap_draw_liters}"
        )));
    }
    let (e_min, e_max) = energy_bounds(state.t_in_c, params)?;
    let span = e_max - e_min;
    let k = params.kj_per_liter_kelvin();
    let floor_kj = k * state.t_in_c * params.volume_liters;

    // (a) tap draw moves the layer boundary up, clamped at the tank volume.
    let mut next = *state;
    next.v_tapped_liters = (next.v_tapped_liters + tap_draw_liters).min(params.volume_liters);

    // (b) standing loss at the learned rate for the current state of charge.
    let soc_after_tap = (energy_content(&next, params) - e_min) / span;
    let loss_kj = loss_model.predict(soc_after_tap) * dt_minutes / 60.0;
    if loss_kj > 0.0 {
        let energy = (energy_content(&next, params) - loss_kj).max(floor_kj);
        if let Some(target) = next.charging {
            next.v_tapped_liters =
                cold_volume_for_energy(energy, target.target_temp_c, next.t_in_c, params);
        } else if next.v_tapped_liters < params.volume_liters {
            let hot_volume = params.volume_liters - next.v_tapped_liters;
            next.t_hot_c = ((energy / k - next.t_in_c * next.v_tapped_liters) / hot_volume)
                .max(next.t_in_c);
        }
    }

    // (c)+(d) cycle resolution: a running cycle continues regardless of the
    // command; otherwise a commanded charge starts; otherwise the backup
    // controller fires when the state of charge is at or below zero. A
    // commanded charge preempts the backup since it heats right now anyway
    // (at or below soc 0, charging to the minimum has the same effect as
    // delaying and letting the backup act).
    if next.charging.is_none() {
        let current = (energy_content(&next, params) - e_min) / span;
        match command {
            StepCommand::Charge(target) if target.target_soc > current => {
                next.charging = Some(target);
            }
            _ => {
                if current <= 0.0 {
                    next.charging = Some(ChargeTarget {
                        target_soc: uniform_soc(params.t_min_c, next.t_in_c, params)?,
                        target_temp_c: params.t_min_c,
                    });
                }
            }
        }
    }

    let mut hp_profile = PowerProfile::empty();
    let mut hp_electrical_kwh = 0.0;
    if let Some(target) = next.charging {
        // Re-pin the hot layer at the target temperature; the boundary sweeps
        // down as energy is delivered and reaches the bottom at completion.
        let energy = energy_content(&next, params);
        let target_energy = k * target.target_temp_c * params.volume_liters;
        let deficit_kj = target_energy - energy;
        let cap_kj = params.cop * params.hp_electrical_power_kw * dt_minutes * 60.0;
        if deficit_kj <= cap_kj {
            next.t_hot_c = target.target_temp_c;
            next.v_tapped_liters = 0.0;
            next.charging = None;
            let delivered = deficit_kj.max(0.0);
            hp_electrical_kwh = delivered / (params.cop * 3600.0);
            if delivered > 0.0 {
                hp_profile.segments.push(ProfileSegment {
                    duration_minutes: delivered
                        / (params.cop * params.hp_electrical_power_kw)
                        / 60.0,
                    power_kw: params.hp_electrical_power_kw,
                });
            }
        } else {
            next.t_hot_c = target.target_temp_c;
            next.v_tapped_liters =
                cold_volume_for_energy(energy + cap_kj, target.target_temp_c, next.t_in_c, params);
            hp_electrical_kwh = params.hp_electrical_power_kw * dt_minutes / 60.0;
            hp_profile.segments.push(ProfileSegment {
                duration_minutes: dt_minutes,
                power_kw: params.hp_electrical_power_kw,
            });
        }
    }

    // (f) injection cost over the step window.
    let cost_kwh = cost_of_step(&hp_profile, step_start, pv_slice, step_start, dt_minutes)?;

    Ok(StepResult {
        state: next,
        hp_electrical_kwh,
        cost_kwh,
        hp_profile,
    })
}

/// Advance one step under an action command (see [`apply_step`]).
pub fn transition(
    state: &BufferState,
    u: Action,
    tap_draw_liters: f64,
    pv_slice: &ForecastSeries,
    step_start: Timestamp,
    dt_minutes: f64,
    params: &BufferParams,
    loss_model: &LossModel,
) -> Result<StepResult, BufferError> {
    let command = match action_charge_target(u, state, params)? {
        Some(target) => StepCommand::Charge(target),
        None => StepCommand::Idle,
    };
    apply_step(
        state,
        command,
        tap_draw_liters,
        pv_slice,
        step_start,
        dt_minutes,
        params,
        loss_model,
    )
}

/// PV energy injected into the grid over `[step_start, step_start + dt)`:
/// per native forecast sub-interval, `max(0, pv - hp)`, with the heat-pump
/// trace positioned at `hp_start`. Non-controllable loads are ignored.
pub fn cost_of_step(
    hp_profile: &PowerProfile,
    hp_start: Timestamp,
    pv_slice: &ForecastSeries,
    step_start: Timestamp,
    dt_minutes: f64,
) -> Result<f64, BufferError> {
    let window_end = step_start + chrono::Duration::seconds((dt_minutes * 60.0).round() as i64);
    let mut injected = pv_slice.energy_kwh(step_start, window_end)?;
    let mut offset = hp_start;
    for segment in &hp_profile.segments {
        let seg_end =
            offset + chrono::Duration::seconds((segment.duration_minutes * 60.0).round() as i64);
        let from = offset.max(step_start);
        let to = seg_end.min(window_end);
        if to > from {
            injected -= pv_slice.covered_energy_kwh(from, to, segment.power_kw)?;
        }
        offset = seg_end;
    }
    Ok(injected.max(0.0))
}

/// Feed-water temperature estimate: the minimum sensed temperature over the
/// trailing 30 days of `history`.
pub fn estimate_feed_temperature(history: &[(Timestamp, f64)]) -> Result<f64, BufferError> {
    let last = history.last().ok_or(BufferError::EmptyHistory)?.0;
    let window_start = last - chrono::Duration::days(30);
    history
        .iter()
        .filter(|(ts, _)| *ts >= window_start)
        .map(|&(_, temp)| temp)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
        .ok_or(BufferError::EmptyHistory)
}
