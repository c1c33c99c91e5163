//! Scripted multi-actor scenarios.
//!
//! A script names its governors, its actors with their signal policies,
//! and a list of timed events. The runner executes events on a governor
//! [`Cluster`](crate::governor::Cluster), applying actor policies between
//! events, and reports the final graph with propagation traces and audit.

mod baseline;
mod runner;
mod script;

pub use baseline::{compare, emulate_baselines, fan_out_script, tree_script, BaselineMetrics, BubbleMetrics, Comparison};
pub use runner::{run_scenario, run_scenario_with, EventOutcome, RunOptions, ScenarioReport, ScenarioRunner};
pub use script::{
    ActorSpec, ConstraintSpec, DecisionSpec, Event, Expectation, Governance, GovernanceSpec, Op, Policy, ScenarioScript,
    SCENARIO_FORMAT, SCENARIO_VERSION,
};
