//! Self-consumption control for PV-coupled domestic hot-water buffers.
//!
//! The crate simulates a household hot-water buffer heated by an on/off heat
//! pump and schedules its charging cycles so that as much local photovoltaic
//! production as possible is consumed on-site instead of injected into the
//! grid. The pieces fit together as follows:
//!
//! - [`buffer`] — two-layer tank energy model, state of charge, the three
//!   charging actions, heat-pump power profiles, the backup controller, and
//!   the per-step transition used by the simulator.
//! - [`tap`] — binned conditional distribution of hot-water draws learned
//!   from consumption history, keyed by hour of day and weekday/weekend.
//! - [`loss`] — monotone piecewise-linear regression of standing losses as a
//!   function of state of charge.
//! - [`trees`] — from-scratch ensemble of extremely randomized regression
//!   trees, used both as the Q-function approximator and as the default
//!   PV-forecast regressor.
//! - [`forecast`] — multi-horizon PV power forecasting from lagged power and
//!   exogenous weather features, plus a persistence baseline.
//! - [`fqi`] — model-based fitted Q-iteration run backward over a finite
//!   horizon, the greedy policy, a Monte-Carlo policy evaluator, and an
//!   exact dynamic-programming oracle for verification.
//! - [`controller`] — receding-horizon orchestration (hourly refits,
//!   five-minute actuation) and the default-thermostat baseline.
//! - [`experiment`] — synthetic-household generator, alternating-week A/B
//!   harness, and the self-consumption performance indicators.
//! - [`config`] / [`io`] — flat key=value run configuration and the CSV
//!   schemas for every ingested or emitted file.

pub mod buffer;
pub mod config;
pub mod controller;
pub mod experiment;
pub mod forecast;
pub mod fqi;
pub mod io;
pub mod loss;
pub(crate) mod seeding;
pub mod series;
pub mod tap;
pub mod trees;

pub use buffer::{
    Action, BufferParams, BufferState, ChargeTarget, EnergyForm, PowerProfile, StepResult,
};
pub use forecast::ForecastModel;
pub use fqi::{FqiConfig, Policy};
pub use loss::LossModel;
pub use series::ForecastSeries;
pub use tap::TapModel;
pub use trees::{TrainedEnsemble, TreeParams};

/// UTC timestamp used across the crate.
pub type Timestamp = chrono::DateTime<chrono::Utc>;
