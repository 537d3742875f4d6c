//! Model-based fitted Q-iteration over a finite horizon.
//!
//! One Q-approximation per time step, fitted backward from the end of the
//! horizon where the cost-to-go is zero. At each step, every point of a grid
//! over state of charge and action becomes one regression pair: the target
//! averages, over draws from the tap-water model, the immediate injection
//! cost plus the minimum of the next step's approximation at the successor
//! state. The greedy policy picks the action minimizing the current stage's
//! approximation, ties broken toward delaying.
//!
//! [`dp_oracle`] solves the same discretized decision problem by exact
//! backward induction (enumerating tap outcomes with their probabilities and
//! projecting successors to the nearest grid point) and exists to verify the
//! fitted pipeline against an independent route.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{Action, BufferError, BufferParams};
use crate::loss::LossModel;
use crate::seeding::{derive_rng, derive_seed};
use crate::series::{ForecastSeries, SeriesError};
use crate::tap::{resolve_bin, ResolvedBin, TapModel, BASE_STEP_MINUTES};
use crate::trees::{self, StepFunction, TrainedEnsemble, TreeParams, TreesError};
use crate::Timestamp;

const STREAM_SAMPLES: u64 = 0x7361_6d70;
const STREAM_FIT: u64 = 0x5146_4954;
const STREAM_ROLLOUT: u64 = 0x726f_6c6c;

#[derive(Debug, Error)]
pub enum FqiError {
    #[error("forecast does not cover the horizon [{start}, {end})")]
    ForecastCoverage { start: Timestamp, end: Timestamp },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stage {stage} outside horizon 1..={horizon}")]
    OutOfRangeStage { stage: usize, horizon: usize },
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Trees(#[from] TreesError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Function approximator fitted at each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Regressor {
    /// Extremely randomized trees on `(soc, one-hot action)` inputs.
    ExtraTrees(TreeParams),
    /// Exact lookup table over the grid, nearest grid point on evaluation.
    /// Reproduces plain backward induction; used for verification.
    Tabular,
}

/// Planner configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqiConfig {
    /// Number of stages in the horizon (T).
    pub horizon_steps: usize,
    /// Equidistant grid points over soc in [0, 1].
    pub soc_grid_points: usize,
    /// Tap-model draws per grid point (L).
    pub samples_per_point: usize,
    /// Stage duration in minutes.
    pub step_minutes: i64,
    /// Stage regressor.
    pub regressor: Regressor,
    /// Seed for tap sampling; tree seeds derive from it per stage.
    pub seed: u64,
}

impl Default for FqiConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 24,
            soc_grid_points: 25,
            samples_per_point: 200,
            step_minutes: 60,
            regressor: Regressor::ExtraTrees(TreeParams::default()),
            seed: 0,
        }
    }
}

impl FqiConfig {
    pub fn validate(&self) -> Result<(), FqiError> {
        if self.horizon_steps < 1 {
            return Err(FqiError::InvalidConfig("horizon_steps must be >= 1".into()));
        }
        if self.soc_grid_points < 2 {
            return Err(FqiError::InvalidConfig(
                "soc_grid_points must be >= 2".into(),
            ));
        }
        if self.samples_per_point < 1 {
            return Err(FqiError::InvalidConfig(
                "samples_per_point must be >= 1".into(),
            ));
        }
        if self.step_minutes < BASE_STEP_MINUTES || self.step_minutes % BASE_STEP_MINUTES != 0 {
            return Err(FqiError::InvalidConfig(format!(
                "step_minutes must be a positive multiple of {BASE_STEP_MINUTES}"
            )));
        }
        Ok(())
    }
}

/// Equidistant grid over soc ∈ [0, 1].
pub fn soc_grid(points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect()
}

/// Index of the grid point nearest to `x`; ties go to the lower index.
pub fn nearest_grid_index(grid: &[f64], x: f64) -> usize {
    let right = grid.partition_point(|g| *g < x);
    if right == 0 {
        return 0;
    }
    if right == grid.len() {
        return grid.len() - 1;
    }
    let left = right - 1;
    if (x - grid[left]) <= (grid[right] - x) {
        left
    } else {
        right
    }
}

// ---------------------------------------------------------------------------
// Planning model
// ---------------------------------------------------------------------------

/// One-step planning dynamics shared by the fitted pipeline, the rollout
/// evaluator, and the exact oracle.
///
/// The grid state is soc alone, lifted to a canonical two-layer state with
/// the hot layer pinned at the maximum temperature so that tap draws in
/// liters can move the layer boundary. Charges complete instantly at planning
/// level; their cost accounts for the full power profile overlapped with the
/// PV forecast, truncated at the horizon end.
#[derive(Debug, Clone)]
pub struct PlanContext {
    params: BufferParams,
    loss: LossModel,
    start: Timestamp,
    horizon_steps: usize,
    step_minutes: i64,
    t_in_c: f64,
    soc_u1: f64,
    span_kj: f64,
    /// Liters of cold layer per unit soc under the lift.
    liters_per_soc: f64,
    /// soc lost per liter drawn under the lift.
    soc_per_liter: f64,
    /// Offset of the horizon start inside the forecast, minutes.
    start_offset_min: f64,
    horizon_end_min: f64,
    pv_step_min: f64,
    pv_len: usize,
    /// Cumulative PV energy at forecast cell boundaries, kWh.
    cum_energy: Vec<f64>,
    /// Cumulative `min(pv, hp power)` energy at cell boundaries, kWh.
    cum_covered: Vec<f64>,
    pv_values: Vec<f64>,
    pv_covered_values: Vec<f64>,
}

/// Outcome of one planning step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStep {
    pub next_soc: f64,
    pub cost_kwh: f64,
}

impl PlanContext {
    pub fn new(
        params: &BufferParams,
        loss: &LossModel,
        t_in_c: f64,
        pv: &ForecastSeries,
        start: Timestamp,
        horizon_steps: usize,
        step_minutes: i64,
    ) -> Result<Self, FqiError> {
        params.validate()?;
        let horizon_end = start + chrono::Duration::minutes(horizon_steps as i64 * step_minutes);
        if !pv.covers(start, horizon_end) {
            return Err(FqiError::ForecastCoverage {
                start,
                end: horizon_end,
            });
        }
        let (e_min, e_max) = crate::buffer::energy_bounds(t_in_c, params)?;
        let span_kj = e_max - e_min;
        let soc_u1 = crate::buffer::uniform_soc(params.t_min_c, t_in_c, params)?;
        let k = params.c_p_kj_per_kg_k * params.water_density_kg_per_l;
        let soc_per_liter = k * (params.t_max_c - t_in_c) / span_kj;

        let p_el = params.hp_electrical_power_kw;
        let pv_values = pv.values().to_vec();
        let pv_covered_values: Vec<f64> = pv_values.iter().map(|v| v.min(p_el)).collect();
        let cell_h = pv.step_minutes() as f64 / 60.0;
        let mut cum_energy = Vec::with_capacity(pv_values.len() + 1);
        let mut cum_covered = Vec::with_capacity(pv_values.len() + 1);
        cum_energy.push(0.0);
        cum_covered.push(0.0);
        for (v, c) in pv_values.iter().zip(&pv_covered_values) {
            cum_energy.push(cum_energy.last().unwrap() + v * cell_h);
            cum_covered.push(cum_covered.last().unwrap() + c * cell_h);
        }
        let start_offset_min = (start - pv.start()).num_seconds() as f64 / 60.0;

        Ok(Self {
            params: params.clone(),
            loss: loss.clone(),
            start,
            horizon_steps,
            step_minutes,
            t_in_c,
            soc_u1,
            span_kj,
            liters_per_soc: 1.0 / soc_per_liter,
            soc_per_liter,
            start_offset_min,
            horizon_end_min: start_offset_min + (horizon_steps as i64 * step_minutes) as f64,
            pv_step_min: pv.step_minutes() as f64,
            pv_len: pv_values.len(),
            cum_energy,
            cum_covered,
            pv_values,
            pv_covered_values,
        })
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn step_minutes(&self) -> i64 {
        self.step_minutes
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    /// Timestamp at which stage `n` (1-based) begins.
    pub fn stage_start(&self, stage: usize) -> Timestamp {
        self.start + chrono::Duration::minutes((stage as i64 - 1) * self.step_minutes)
    }

    pub fn soc_u1(&self) -> f64 {
        self.soc_u1
    }

    pub fn t_in_c(&self) -> f64 {
        self.t_in_c
    }

    fn cum_at(&self, cum: &[f64], values: &[f64], minute: f64) -> f64 {
        let m = minute.clamp(0.0, self.pv_len as f64 * self.pv_step_min);
        let cell = ((m / self.pv_step_min) as usize).min(self.pv_len - 1);
        cum[cell] + values[cell] * (m - cell as f64 * self.pv_step_min) / 60.0
    }

    /// PV energy in `[a, b)` minutes (forecast-relative), kWh.
    fn pv_energy(&self, a: f64, b: f64) -> f64 {
        self.cum_at(&self.cum_energy, &self.pv_values, b)
            - self.cum_at(&self.cum_energy, &self.pv_values, a)
    }

    /// PV energy covered by the heat pump running over `[a, b)`, kWh.
    fn pv_covered(&self, a: f64, b: f64) -> f64 {
        self.cum_at(&self.cum_covered, &self.pv_covered_values, b)
            - self.cum_at(&self.cum_covered, &self.pv_covered_values, a)
    }

    /// Minutes the heat pump needs to lift soc by `deficit_soc`.
    fn charge_minutes(&self, deficit_soc: f64) -> f64 {
        deficit_soc * self.span_kj / (self.params.cop * self.params.hp_electrical_power_kw) / 60.0
    }

    /// Advance one stage: tap draw, standing loss, then at most one charge
    /// (commanded, or the backup when soc has fallen to zero or below).
    pub fn step(&self, stage: usize, soc: f64, u: Action, draw_liters: f64) -> PlanStep {
        let volume = self.params.volume_liters;
        // Lift to the canonical state and apply the draw on the layer boundary.
        let cold = ((1.0 - soc) * self.liters_per_soc).clamp(0.0, volume);
        let cold_after = (cold + draw_liters).min(volume);
        let soc_tapped = soc - (cold_after - cold) * self.soc_per_liter;
        // Standing loss at the learned rate.
        let loss_soc =
            self.loss.predict(soc_tapped) * self.step_minutes as f64 / 60.0 / self.span_kj;
        let soc_now = soc_tapped - loss_soc;

        let window_start =
            self.start_offset_min + (stage as i64 - 1) as f64 * self.step_minutes as f64;
        let window_end = window_start + self.step_minutes as f64;
        let mut cost = self.pv_energy(window_start, window_end);

        let target = match u {
            Action::Delay => None,
            Action::ChargeToMin if self.soc_u1 > soc_now => Some(self.soc_u1),
            Action::ChargeToFull if soc_now < 1.0 => Some(1.0),
            _ => None,
        }
        .or_else(|| {
            // Backup controller fires only when nothing else heats.
            (soc_now <= 0.0 && self.soc_u1 > soc_now).then_some(self.soc_u1)
        });

        let next_soc = match target {
            Some(target_soc) => {
                let duration = self.charge_minutes(target_soc - soc_now);
                let charge_end = (window_start + duration).min(self.horizon_end_min);
                cost -= self.pv_covered(window_start, charge_end);
                target_soc
            }
            None => soc_now,
        };
        PlanStep {
            next_soc,
            cost_kwh: cost,
        }
    }
}

// ---------------------------------------------------------------------------
// Fitted stages and policy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum StageApprox {
    Tabular {
        grid: Vec<f64>,
        values: [Vec<f64>; 3],
    },
    Trees {
        ensemble: TrainedEnsemble,
        compiled: [StepFunction; 3],
    },
}

impl StageApprox {
    fn eval(&self, soc: f64, u: Action) -> f64 {
        match self {
            StageApprox::Tabular { grid, values } => {
                values[u.index()][nearest_grid_index(grid, soc)]
            }
            StageApprox::Trees { compiled, .. } => compiled[u.index()].eval(soc),
        }
    }

    fn min_over_actions(&self, soc: f64) -> f64 {
        match self {
            StageApprox::Tabular { grid, values } => {
                let gi = nearest_grid_index(grid, soc);
                values[0][gi].min(values[1][gi]).min(values[2][gi])
            }
            StageApprox::Trees { compiled, .. } => compiled[0]
                .eval(soc)
                .min(compiled[1].eval(soc))
                .min(compiled[2].eval(soc)),
        }
    }
}

/// One per-stage fitted approximation of the expected cost-to-go.
#[derive(Debug, Clone)]
pub struct QStage {
    /// Stage index in 1..=T.
    pub index: usize,
    approx: StageApprox,
}

impl QStage {
    pub fn q(&self, soc: f64, u: Action) -> f64 {
        self.approx.eval(soc, u)
    }

    /// The fitted ensemble, when the stage uses the tree regressor.
    pub fn ensemble(&self) -> Option<&TrainedEnsemble> {
        match &self.approx {
            StageApprox::Trees { ensemble, .. } => Some(ensemble),
            StageApprox::Tabular { .. } => None,
        }
    }
}

/// The fitted sequence of stages with the greedy action rule.
#[derive(Debug, Clone)]
pub struct Policy {
    stages: Vec<QStage>,
    start: Timestamp,
    step_minutes: i64,
}

impl Policy {
    pub fn stages(&self) -> &[QStage] {
        &self.stages
    }

    pub fn horizon_steps(&self) -> usize {
        self.stages.len()
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn step_minutes(&self) -> i64 {
        self.step_minutes
    }

    pub fn q_value(&self, stage: usize, soc: f64, u: Action) -> Result<f64, FqiError> {
        self.stage(stage).map(|s| s.q(soc, u))
    }

    fn stage(&self, stage: usize) -> Result<&QStage, FqiError> {
        if stage < 1 || stage > self.stages.len() {
            return Err(FqiError::OutOfRangeStage {
                stage,
                horizon: self.stages.len(),
            });
        }
        Ok(&self.stages[stage - 1])
    }
}

/// Greedy action at `(stage, soc)`: argmin over the three actions of the
/// stage's approximation, ties broken toward the smaller action.
pub fn greedy_action(policy: &Policy, stage: usize, soc: f64) -> Result<Action, FqiError> {
    let q_stage = policy.stage(stage)?;
    let mut best = Action::Delay;
    let mut best_q = q_stage.q(soc, Action::Delay);
    for u in [Action::ChargeToMin, Action::ChargeToFull] {
        let q = q_stage.q(soc, u);
        if q < best_q {
            best = u;
            best_q = q;
        }
    }
    Ok(best)
}

/// Anything that maps `(stage, soc)` to an action; policies do, and tests
/// compare them against fixed rules.
pub trait DecisionRule {
    fn decide(&self, stage: usize, soc: f64) -> Action;
}

impl DecisionRule for Policy {
    fn decide(&self, stage: usize, soc: f64) -> Action {
        let stage = stage.clamp(1, self.stages.len());
        greedy_action(self, stage, soc).expect("stage clamped into range")
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Sum of one base-step draw per base step of a stage window, using bins
/// resolved once per stage.
fn sample_stage_draw<R: rand::Rng + ?Sized>(bins: &[ResolvedBin<'_>], rng: &mut R) -> f64 {
    bins.iter().map(|b| b.sample(rng)).sum()
}

fn resolve_stage_bins<'m>(
    tap_model: &'m TapModel,
    stage_ts: Timestamp,
    step_minutes: i64,
) -> Vec<ResolvedBin<'m>> {
    (0..(step_minutes / BASE_STEP_MINUTES))
        .map(|k| {
            resolve_bin(
                tap_model,
                stage_ts + chrono::Duration::minutes(k * BASE_STEP_MINUTES),
            )
        })
        .collect()
}

/// Fit the backward sequence of stage approximations.
pub fn fit_policy(
    config: &FqiConfig,
    start: Timestamp,
    tap_model: &TapModel,
    loss_model: &LossModel,
    pv_forecast: &ForecastSeries,
    t_in_c: f64,
    params: &BufferParams,
) -> Result<Policy, FqiError> {
    config.validate()?;
    let ctx = PlanContext::new(
        params,
        loss_model,
        t_in_c,
        pv_forecast,
        start,
        config.horizon_steps,
        config.step_minutes,
    )?;
    fit_policy_with_context(config, &ctx, tap_model)
}

/// [`fit_policy`] over a prebuilt planning context.
pub fn fit_policy_with_context(
    config: &FqiConfig,
    ctx: &PlanContext,
    tap_model: &TapModel,
) -> Result<Policy, FqiError> {
    config.validate()?;
    let grid = soc_grid(config.soc_grid_points);
    let horizon = config.horizon_steps;
    let l = config.samples_per_point;

    let mut stages_reversed: Vec<QStage> = Vec::with_capacity(horizon);
    let mut draws: Vec<f64> = Vec::with_capacity(l);

    for stage in (1..=horizon).rev() {
        let bins = resolve_stage_bins(tap_model, ctx.stage_start(stage), config.step_minutes);
        let next_stage = stages_reversed.last().map(|s| &s.approx);
        // When every base-step bin is constant the stage draw is
        // deterministic and sampling reduces to the single outcome.
        let deterministic_draw: Option<f64> = bins
            .iter()
            .try_fold(0.0f64, |acc, b| b.as_constant().map(|v| acc + v));

        let mut targets = vec![0.0f64; grid.len() * 3];
        for (gi, &grid_soc) in grid.iter().enumerate() {
            for u in Action::ALL {
                let point = gi * 3 + u.index();
                draws.clear();
                if let Some(sum) = deterministic_draw {
                    draws.push(sum);
                } else {
                    let mut rng = derive_rng(
                        derive_seed(config.seed, STREAM_SAMPLES, stage as u64),
                        0,
                        point as u64,
                    );
                    draws.extend((0..l).map(|_| sample_stage_draw(&bins, &mut rng)));
                    draws.sort_unstable_by(f64::total_cmp);
                }

                // Run-length encode identical draws: the Bellman target is a
                // weighted mean over the unique outcomes.
                let total = draws.len();
                let mut target = 0.0f64;
                let mut i = 0;
                while i < total {
                    let value = draws[i];
                    let mut count = 1usize;
                    while i + count < total && draws[i + count] == value {
                        count += 1;
                    }
                    i += count;
                    let outcome = ctx.step(stage, grid_soc, u, value);
                    let future = next_stage
                        .map(|approx| approx.min_over_actions(outcome.next_soc))
                        .unwrap_or(0.0);
                    target += (count as f64 / total as f64) * (outcome.cost_kwh + future);
                }
                targets[point] = target;
            }
        }

        let approx = match &config.regressor {
            Regressor::Tabular => {
                let mut values: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; grid.len()]);
                for gi in 0..grid.len() {
                    for u in Action::ALL {
                        values[u.index()][gi] = targets[gi * 3 + u.index()];
                    }
                }
                StageApprox::Tabular {
                    grid: grid.clone(),
                    values,
                }
            }
            Regressor::ExtraTrees(tree_params) => {
                let inputs: Vec<Vec<f64>> = grid
                    .iter()
                    .flat_map(|&s| {
                        Action::ALL.map(|u| {
                            let mut x = vec![s, 0.0, 0.0, 0.0];
                            x[1 + u.index()] = 1.0;
                            x
                        })
                    })
                    .collect();
                let params =
                    tree_params.with_seed(derive_seed(config.seed, STREAM_FIT, stage as u64));
                let ensemble = trees::fit(&inputs, &targets, &params)?;
                let compiled = std::array::from_fn(|a| {
                    let mut fixed = [0.0f64; 4];
                    fixed[1 + a] = 1.0;
                    ensemble.project_1d(&fixed, 0)
                });
                StageApprox::Trees { ensemble, compiled }
            }
        };
        stages_reversed.push(QStage {
            index: stage,
            approx,
        });
    }

    stages_reversed.reverse();
    Ok(Policy {
        stages: stages_reversed,
        start: ctx.start(),
        step_minutes: config.step_minutes,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo evaluation
// ---------------------------------------------------------------------------

/// Expected total cost of a decision rule: mean over seeded rollouts through
/// the planning dynamics from `start_soc`.
pub fn evaluate_policy(
    rule: &dyn DecisionRule,
    ctx: &PlanContext,
    tap_model: &TapModel,
    start_soc: f64,
    n_rollouts: usize,
    seed: u64,
) -> f64 {
    let stage_bins: Vec<Vec<ResolvedBin<'_>>> = (1..=ctx.horizon_steps())
        .map(|stage| resolve_stage_bins(tap_model, ctx.stage_start(stage), ctx.step_minutes()))
        .collect();

    let mut total = 0.0;
    for rollout in 0..n_rollouts {
        let mut rng = derive_rng(seed, STREAM_ROLLOUT, rollout as u64);
        let mut soc = start_soc;
        for stage in 1..=ctx.horizon_steps() {
            let u = rule.decide(stage, soc);
            let draw = sample_stage_draw(&stage_bins[stage - 1], &mut rng);
            let outcome = ctx.step(stage, soc, u, draw);
            soc = outcome.next_soc;
            total += outcome.cost_kwh;
        }
    }
    total / n_rollouts as f64
}

// ---------------------------------------------------------------------------
// Exact oracle
// ---------------------------------------------------------------------------

/// A finite decision problem: the planning dynamics restricted to a soc grid
/// with an enumerated tap-outcome distribution per stage.
#[derive(Debug, Clone)]
pub struct DiscreteInstance<'a> {
    pub ctx: &'a PlanContext,
    pub grid: Vec<f64>,
    /// Per stage (1..=T): `(draw liters, probability)` outcomes.
    pub tap_outcomes: Vec<Vec<(f64, f64)>>,
}

/// Exact stage values and greedy policy from backward induction.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// `q[stage-1][grid_index][action]`.
    pub q: Vec<Vec<[f64; 3]>>,
    /// Greedy action per stage and grid point, ties toward delay.
    pub policy: Vec<Vec<Action>>,
}

impl OracleSolution {
    /// Optimal expected cost-to-go from the grid point nearest `soc`.
    pub fn value(&self, grid: &[f64], stage: usize, soc: f64) -> f64 {
        let row = &self.q[stage - 1][nearest_grid_index(grid, soc)];
        row[0].min(row[1]).min(row[2])
    }
}

/// Plain backward induction over the discretized problem: enumerate every
/// tap outcome with its probability and project successor states to the
/// nearest grid point.
pub fn dp_oracle(instance: &DiscreteInstance<'_>) -> OracleSolution {
    let horizon = instance.ctx.horizon_steps();
    assert_eq!(
        instance.tap_outcomes.len(),
        horizon,
        "one tap-outcome set per stage"
    );
    let grid = &instance.grid;
    let mut q: Vec<Vec<[f64; 3]>> = vec![vec![[0.0; 3]; grid.len()]; horizon];
    let mut policy: Vec<Vec<Action>> = vec![vec![Action::Delay; grid.len()]; horizon];
    let mut next_values: Vec<f64> = vec![0.0; grid.len()];

    for stage in (1..=horizon).rev() {
        let mut stage_values = vec![0.0f64; grid.len()];
        for (gi, &soc) in grid.iter().enumerate() {
            let mut best = (Action::Delay, f64::INFINITY);
            for u in Action::ALL {
                let mut expected = 0.0;
                for &(draw, prob) in &instance.tap_outcomes[stage - 1] {
                    let outcome = instance.ctx.step(stage, soc, u, draw);
                    let future = if stage == horizon {
                        0.0
                    } else {
                        next_values[nearest_grid_index(grid, outcome.next_soc)]
                    };
                    expected += prob * (outcome.cost_kwh + future);
                }
                q[stage - 1][gi][u.index()] = expected;
                if expected < best.1 {
                    best = (u, expected);
                }
            }
            policy[stage - 1][gi] = best.0;
            stage_values[gi] = best.1;
        }
        next_values = stage_values;
    }
    OracleSolution { q, policy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tap::fit_tap_model;
    use approx::assert_relative_eq;
    use chrono::{Duration, TimeZone, Utc};

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2016, 9, 5, 0, 0, 0).unwrap()
    }

    fn params() -> BufferParams {
        BufferParams::default()
    }

    /// Tap model whose every bin holds exactly `liters`.
    fn constant_tap(liters: f64) -> TapModel {
        let history: Vec<(Timestamp, f64)> = (0..(14 * 288))
            .map(|k| (t0() + Duration::minutes(5 * k), liters))
            .collect();
        fit_tap_model(&history, 60).unwrap()
    }

    fn pv_series(values: Vec<f64>) -> ForecastSeries {
        ForecastSeries::new(t0(), 60, values).unwrap()
    }

    fn ctx_for(pv: &ForecastSeries, horizon: usize) -> PlanContext {
        PlanContext::new(&params(), &LossModel::zero(), 10.0, pv, t0(), horizon, 60).unwrap()
    }

    fn tabular_config(horizon: usize, grid: usize) -> FqiConfig {
        FqiConfig {
            horizon_steps: horizon,
            soc_grid_points: grid,
            samples_per_point: 8,
            step_minutes: 60,
            regressor: Regressor::Tabular,
            seed: 3,
        }
    }

    #[test]
    fn zero_pv_gives_zero_q_and_delay_everywhere() {
        let pv = pv_series(vec![0.0; 6]);
        let config = FqiConfig {
            horizon_steps: 6,
            soc_grid_points: 9,
            samples_per_point: 16,
            regressor: Regressor::ExtraTrees(TreeParams {
                n_trees: 20,
                ..TreeParams::default()
            }),
            ..FqiConfig::default()
        };
        let policy = fit_policy(
            &config,
            t0(),
            &constant_tap(1.0),
            &LossModel::zero(),
            &pv,
            10.0,
            &params(),
        )
        .unwrap();
        for stage in 1..=6 {
            for i in 0..=20 {
                let soc = i as f64 / 20.0;
                for u in Action::ALL {
                    assert_eq!(policy.q_value(stage, soc, u).unwrap(), 0.0);
                }
                assert_eq!(greedy_action(&policy, stage, soc).unwrap(), Action::Delay);
            }
        }
    }

    // Hand-solved two-stage instance. Zero losses, zero taps, feed water at
    // 10 °C, defaults otherwise (span 23023 kJ, soc_u1 = 7/11, cop 3, heat
    // pump 2 kW). PV: 0 kW in stage 1, 3 kW in stage 2. Grid {0.2, 0.6, 1.0}.
    //
    // While charging, the pump covers min(pv, 2) kW, so lifting soc by a
    // deficit D under 3 kW PV recovers D·23023/10800 kWh of injection (the
    // pump's electrical energy). Stage 2 (last, future = 0):
    //   q(s, 0) = 3;  q(s, 1) = 3 − (7/11 − s)·23023/10800 for s < 7/11;
    //   q(s, 2) = 3 − (1 − s)·23023/10800;  no-ops cost 3.
    // Stage 1 (pv 0, cost 0): q(s, u) = V2(nearest(s')), with s' the charge
    // target (7/11 projects onto 0.6) or s itself for u = 0.
    #[test]
    fn hand_computed_two_stage_instance() {
        let pv = pv_series(vec![0.0, 3.0]);
        let ctx = ctx_for(&pv, 2);
        let grid = vec![0.2, 0.6, 1.0];
        let instance = DiscreteInstance {
            ctx: &ctx,
            grid: grid.clone(),
            tap_outcomes: vec![vec![(0.0, 1.0)]; 2],
        };
        let solution = dp_oracle(&instance);

        let u1 = 7.0 / 11.0;
        let covered = |deficit: f64| deficit * 23_023.0 / 10_800.0;

        let expected_stage2 = [
            [3.0, 3.0 - covered(u1 - 0.2), 3.0 - covered(0.8)],
            [3.0, 3.0 - covered(u1 - 0.6), 3.0 - covered(0.4)],
            [3.0, 3.0, 3.0],
        ];
        for (gi, row) in expected_stage2.iter().enumerate() {
            for (u, want) in row.iter().enumerate() {
                assert_relative_eq!(solution.q[1][gi][u], want, epsilon = 1e-9);
            }
        }
        let v2 = [3.0 - covered(0.8), 3.0 - covered(0.4), 3.0];
        let expected_stage1 = [
            [v2[0], v2[1], v2[2]],
            [v2[1], v2[1], v2[2]],
            [v2[2], v2[2], v2[2]],
        ];
        for (gi, row) in expected_stage1.iter().enumerate() {
            for (u, want) in row.iter().enumerate() {
                assert_relative_eq!(solution.q[0][gi][u], want, epsilon = 1e-9);
            }
        }
        // Greedy: wait in the dark hour, full-charge under the sun.
        assert_eq!(solution.policy[0][0], Action::Delay);
        assert_eq!(solution.policy[1][0], Action::ChargeToFull);
        assert_eq!(solution.policy[1][2], Action::Delay);
    }

    #[test]
    fn profile_truncates_at_horizon_and_backup_is_costed() {
        let pv = pv_series(vec![3.0]);
        let ctx = ctx_for(&pv, 1);
        // A full charge from soc 0 runs 63.95 min but the horizon ends at 60:
        // covered energy is the pump's full-hour 2 kWh.
        let full = ctx.step(1, 0.0, Action::ChargeToFull, 0.0);
        assert_relative_eq!(full.cost_kwh, 1.0, epsilon = 1e-9);
        assert_relative_eq!(full.next_soc, 1.0);
        // Delay at soc 0 triggers the backup charge toward 7/11.
        let buc = ctx.step(1, 0.0, Action::Delay, 0.0);
        assert_relative_eq!(buc.next_soc, 7.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(
            buc.cost_kwh,
            3.0 - (7.0 / 11.0) * 23_023.0 / 10_800.0,
            epsilon = 1e-9
        );
        // Charging to the minimum at soc 0 has the same effect as delaying.
        let u1 = ctx.step(1, 0.0, Action::ChargeToMin, 0.0);
        assert_eq!(u1, buc);
    }

    #[test]
    fn tabular_fit_reproduces_the_oracle_exactly() {
        // Deterministic tap draws, a PV pulse, four stages, five grid points.
        let pv = pv_series(vec![0.0, 2.5, 1.0, 0.0]);
        let ctx = ctx_for(&pv, 4);
        let tap = constant_tap(0.5);
        let config = tabular_config(4, 5);
        let policy = fit_policy_with_context(&config, &ctx, &tap).unwrap();

        let grid = soc_grid(5);
        let instance = DiscreteInstance {
            ctx: &ctx,
            grid: grid.clone(),
            tap_outcomes: vec![vec![(6.0, 1.0)]; 4], // 12 base steps × 0.5 L
        };
        let solution = dp_oracle(&instance);
        for stage in 1..=4 {
            for (gi, &soc) in grid.iter().enumerate() {
                for u in Action::ALL {
                    assert_relative_eq!(
                        policy.q_value(stage, soc, u).unwrap(),
                        solution.q[stage - 1][gi][u.index()],
                        epsilon = 1e-9
                    );
                }
            }
        }

        // Greedy trajectories coincide under the deterministic draw.
        let mut soc_policy = 0.3;
        let mut soc_oracle = 0.3;
        for stage in 1..=4 {
            let a = greedy_action(&policy, stage, soc_policy).unwrap();
            let b = solution.policy[stage - 1][nearest_grid_index(&grid, soc_oracle)];
            assert_eq!(a, b, "stage {stage}");
            soc_policy = ctx.step(stage, soc_policy, a, 6.0).next_soc;
            soc_oracle = ctx.step(stage, soc_oracle, b, 6.0).next_soc;
        }
    }

    #[test]
    fn pulse_instance_charges_at_the_pulse() {
        // Single PV pulse at stage 3 of 6, low starting soc, light taps.
        let pv = pv_series(vec![0.0, 0.0, 3.5, 0.0, 0.0, 0.0]);
        let ctx = ctx_for(&pv, 6);
        let tap = constant_tap(0.25);
        let config = FqiConfig {
            samples_per_point: 32,
            ..tabular_config(6, 25)
        };
        let policy = fit_policy_with_context(&config, &ctx, &tap).unwrap();
        let low_soc = 0.3;
        let at_pulse = greedy_action(&policy, 3, low_soc).unwrap();
        assert_ne!(at_pulse, Action::Delay, "should charge during the pulse");
        assert_eq!(greedy_action(&policy, 1, low_soc).unwrap(), Action::Delay);
        assert_eq!(greedy_action(&policy, 2, low_soc).unwrap(), Action::Delay);

        // The oracle agrees about the pulse stage.
        let instance = DiscreteInstance {
            ctx: &ctx,
            grid: soc_grid(25),
            tap_outcomes: vec![vec![(3.0, 1.0)]; 6],
        };
        let solution = dp_oracle(&instance);
        let gi = nearest_grid_index(&soc_grid(25), low_soc);
        assert_ne!(solution.policy[2][gi], Action::Delay);
    }

    #[test]
    fn greedy_ties_prefer_delay_and_shift_invariance() {
        let grid = soc_grid(3);
        let mk = |values: [Vec<f64>; 3]| Policy {
            stages: vec![QStage {
                index: 1,
                approx: StageApprox::Tabular {
                    grid: grid.clone(),
                    values,
                },
            }],
            start: t0(),
            step_minutes: 60,
        };
        let equal = mk([vec![5.0; 3], vec![5.0; 3], vec![5.0; 3]]);
        assert_eq!(greedy_action(&equal, 1, 0.5).unwrap(), Action::Delay);

        let distinct = mk([vec![5.0; 3], vec![3.0; 3], vec![4.0; 3]]);
        assert_eq!(
            greedy_action(&distinct, 1, 0.5).unwrap(),
            Action::ChargeToMin
        );

        // Adding a constant to all three actions leaves the argmin unchanged.
        let shifted = mk([vec![15.0; 3], vec![13.0; 3], vec![14.0; 3]]);
        assert_eq!(
            greedy_action(&shifted, 1, 0.5).unwrap(),
            greedy_action(&distinct, 1, 0.5).unwrap()
        );

        assert!(matches!(
            greedy_action(&equal, 2, 0.5),
            Err(FqiError::OutOfRangeStage {
                stage: 2,
                horizon: 1
            })
        ));
    }

    #[test]
    fn non_negative_costs_propagate_to_non_negative_values() {
        // Wide stages (120 min) keep every profile inside its own window, so
        // per-stage costs are non-negative, and so must be all stage values.
        let pv = ForecastSeries::new(t0(), 60, vec![1.7, 0.3, 2.9, 0.0, 1.1, 0.6]).unwrap();
        let config = FqiConfig {
            horizon_steps: 3,
            soc_grid_points: 13,
            samples_per_point: 24,
            step_minutes: 120,
            regressor: Regressor::ExtraTrees(TreeParams {
                n_trees: 24,
                ..TreeParams::default()
            }),
            seed: 5,
        };
        let policy = fit_policy(
            &config,
            t0(),
            &constant_tap(1.0),
            &LossModel::from_knot_values([10.0, 20.0, 30.0, 40.0, 50.0]).unwrap(),
            &pv,
            10.0,
            &params(),
        )
        .unwrap();
        for stage in 1..=3 {
            for i in 0..=40 {
                let soc = i as f64 / 40.0;
                for u in Action::ALL {
                    assert!(policy.q_value(stage, soc, u).unwrap() >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn bellman_targets_converge_with_sample_count() {
        // Two-outcome per-base-step draws; with T = 1 and the tabular
        // regressor the stage value at a grid point is exactly the Monte
        // Carlo mean of the one-step cost, whose exact expectation comes
        // from enumerating the binomial draw-sum distribution.
        let history: Vec<(Timestamp, f64)> = (0..(14 * 288))
            .map(|k| {
                let v = if k % 2 == 0 { 0.0 } else { 8.0 };
                (t0() + Duration::minutes(5 * k), v)
            })
            .collect();
        let tap = fit_tap_model(&history, 60).unwrap();
        let pv = pv_series(vec![2.0]);
        let ctx = ctx_for(&pv, 1);

        // Exact expectation over the 12-draw binomial sum.
        let mut exact = 0.0;
        let point_soc = 0.5;
        for k in 0..=12u32 {
            let prob = (0..k).fold(1.0f64, |acc, i| acc * (12 - i) as f64 / (i + 1) as f64)
                * 0.5f64.powi(12);
            let outcome = ctx.step(1, point_soc, Action::Delay, 8.0 * k as f64);
            exact += prob * outcome.cost_kwh;
        }

        let gap = |l: usize, seed: u64| -> f64 {
            let config = FqiConfig {
                horizon_steps: 1,
                soc_grid_points: 3,
                samples_per_point: l,
                step_minutes: 60,
                regressor: Regressor::Tabular,
                seed,
            };
            let policy = fit_policy_with_context(&config, &ctx, &tap).unwrap();
            (policy.q_value(1, point_soc, Action::Delay).unwrap() - exact).abs()
        };
        // Average the gaps over a few seeds to smooth Monte Carlo noise.
        let mean_gap = |l: usize| (0..8).map(|s| gap(l, s)).sum::<f64>() / 8.0;
        let g10 = mean_gap(10);
        let g1000 = mean_gap(1000);
        assert!(
            g1000 < g10 / 3.0,
            "gap at L=1000 ({g1000}) should be well below L=10 ({g10})"
        );
    }

    #[test]
    fn deterministic_fit_and_rollouts() {
        let pv = pv_series(vec![0.4, 1.9, 3.0, 2.2, 0.5, 0.0]);
        let tap = constant_tap(0.5);
        let config = FqiConfig {
            horizon_steps: 6,
            soc_grid_points: 11,
            samples_per_point: 32,
            step_minutes: 60,
            regressor: Regressor::ExtraTrees(TreeParams {
                n_trees: 16,
                ..TreeParams::default()
            }),
            seed: 11,
        };
        let fingerprint = || -> (Vec<u64>, Vec<Action>) {
            let policy = fit_policy(
                &config,
                t0(),
                &tap,
                &LossModel::zero(),
                &pv,
                10.0,
                &params(),
            )
            .unwrap();
            let bits: Vec<u64> = (1..=6)
                .flat_map(|stage| {
                    let policy = &policy;
                    (0..=10).flat_map(move |i| {
                        Action::ALL.map(move |u| {
                            policy
                                .q_value(stage, i as f64 / 10.0, u)
                                .unwrap()
                                .to_bits()
                        })
                    })
                })
                .collect();
            let ctx = ctx_for(&pv, 6);
            let mut soc = 0.4;
            let mut actions = Vec::new();
            for stage in 1..=6 {
                let a = greedy_action(&policy, stage, soc).unwrap();
                actions.push(a);
                soc = ctx.step(stage, soc, a, 6.0).next_soc;
            }
            (bits, actions)
        };
        assert_eq!(fingerprint(), fingerprint());
    }

    #[test]
    fn evaluation_against_oracle_and_fixed_rules() {
        struct Fixed(Action, usize);
        impl DecisionRule for Fixed {
            fn decide(&self, stage: usize, _soc: f64) -> Action {
                if stage == self.1 {
                    self.0
                } else {
                    Action::Delay
                }
            }
        }

        // Zero PV: every policy costs zero.
        let pv0 = pv_series(vec![0.0; 4]);
        let ctx0 = ctx_for(&pv0, 4);
        let tap = constant_tap(0.25);
        let zero = evaluate_policy(&Fixed(Action::Delay, 0), &ctx0, &tap, 0.8, 50, 1);
        assert_eq!(zero, 0.0);

        // Deterministic pulse instance: the fitted policy's rollout cost
        // matches the oracle optimum within 5 %.
        let pv = pv_series(vec![0.0, 0.0, 3.5, 0.0, 0.0, 0.0]);
        let ctx = ctx_for(&pv, 6);
        let config = FqiConfig {
            samples_per_point: 16,
            ..tabular_config(6, 25)
        };
        let policy = fit_policy_with_context(&config, &ctx, &tap).unwrap();
        let instance = DiscreteInstance {
            ctx: &ctx,
            grid: soc_grid(25),
            tap_outcomes: vec![vec![(3.0, 1.0)]; 6],
        };
        let solution = dp_oracle(&instance);
        let start_soc = 0.5;
        let optimal = solution.value(&soc_grid(25), 1, start_soc);
        let achieved = evaluate_policy(&policy, &ctx, &tap, start_soc, 200, 2);
        assert!(
            (achieved - optimal).abs() <= 0.05 * optimal.abs().max(1e-9),
            "achieved {achieved} vs optimal {optimal}"
        );

        // Charging blindly in the first (dark) hour can only cost more.
        let night_charge =
            evaluate_policy(&Fixed(Action::ChargeToFull, 1), &ctx, &tap, start_soc, 200, 2);
        assert!(
            night_charge >= achieved - 1e-9,
            "night {night_charge} vs fitted {achieved}"
        );
    }

    #[test]
    fn oracle_trivial_cases() {
        // T = 1: value equals the expected one-step cost.
        let pv = pv_series(vec![2.0]);
        let ctx = ctx_for(&pv, 1);
        let instance = DiscreteInstance {
            ctx: &ctx,
            grid: vec![0.4, 0.9],
            tap_outcomes: vec![vec![(0.0, 0.5), (24.0, 0.5)]],
        };
        let solution = dp_oracle(&instance);
        let expected = 0.5 * ctx.step(1, 0.4, Action::Delay, 0.0).cost_kwh
            + 0.5 * ctx.step(1, 0.4, Action::Delay, 24.0).cost_kwh;
        assert_relative_eq!(solution.q[0][0][0], expected, epsilon = 1e-12);

        // Zero PV: all values are zero.
        let pv0 = pv_series(vec![0.0; 3]);
        let ctx0 = ctx_for(&pv0, 3);
        let instance0 = DiscreteInstance {
            ctx: &ctx0,
            grid: soc_grid(5),
            tap_outcomes: vec![vec![(2.0, 1.0)]; 3],
        };
        let solution0 = dp_oracle(&instance0);
        for stage in &solution0.q {
            for row in stage {
                assert_eq!(row, &[0.0; 3]);
            }
        }
    }

    #[test]
    fn forecast_coverage_is_checked() {
        let pv = pv_series(vec![1.0; 4]);
        let err =
            PlanContext::new(&params(), &LossModel::zero(), 10.0, &pv, t0(), 6, 60).unwrap_err();
        assert!(matches!(err, FqiError::ForecastCoverage { .. }));
    }

    #[test]
    fn nearest_grid_projection() {
        let grid = soc_grid(5); // 0, 0.25, 0.5, 0.75, 1
        assert_eq!(nearest_grid_index(&grid, -0.3), 0);
        assert_eq!(nearest_grid_index(&grid, 0.12), 0);
        assert_eq!(nearest_grid_index(&grid, 0.13), 1);
        assert_eq!(nearest_grid_index(&grid, 0.375), 1); // tie goes low
        assert_eq!(nearest_grid_index(&grid, 0.9), 4);
        assert_eq!(nearest_grid_index(&grid, 1.7), 4);
    }
}
