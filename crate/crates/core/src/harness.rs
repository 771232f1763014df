//! Experiment driver: scenarios, the alternating estimator, missions,
//! Monte-Carlo batches and result files.

mod batch;
mod estimator;
mod export;
mod mission;
mod scenario;

pub use batch::{
    emit_results, replay, run_batch, run_trial, run_trial_detailed, BatchReport, Summary,
    TrialOutcome, TrialResult,
};
pub use estimator::{run_algorithm1, Estimate, Estimator, PassOptions};
pub use export::{read_params, write_labels, write_params};
pub use mission::{
    rectangle_trajectory, run_mission_online, EpochRecord, MissionOutcome, MissionRecord,
    MissionSetup,
};
pub use scenario::{
    ChannelConfig, EstimatorMode, MapConfig, MissionConfig, OdometryConfig, OuterConfig,
    PlannerMode, PriorConfig, Scenario, SegmentConfig, UsersConfig,
};
