//! Scenario configuration, the closed-loop episode runner, and experiment suites.

mod config;
mod episode;
mod suite;

pub use config::{ControllerKind, GateInit, ScenarioConfig, SweepConfig};
pub use episode::{
    manual_lambda, run_episode, run_episode_with, run_multigate_episode, spawn_seeds,
    EpisodeMetrics, EpisodeSetup, GateResult, Outcome, TickInfo, TickRecord,
};
pub use suite::{
    run_group, run_suite, spearman, Aggregate, GateAggregate, GroupReport, SuiteKind, SuiteReport,
};
