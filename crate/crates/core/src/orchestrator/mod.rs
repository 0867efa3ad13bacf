//! Active-learning runs, replay and the comparison experiments.

mod config;
mod experiments;
mod run;

pub use config::{DatasetSource, RunConfig, SplitSpec};
pub use experiments::{
    experiment_heuristics, experiment_region_size, experiment_supervision, supervision_tag, HeuristicSummaryRow,
    HeuristicsExperiment, RegionSizeExperiment, RegionSizeSummaryRow, SupervisionExperiment, SupervisionRow,
};
pub use run::{
    entropy_scores, evaluate_on_test, init_params, mc_seed, oracle_seed, replay, replay_selections, run, run_prepared,
    seed_images, select_for_cycle, train_on_labels, CycleLog, LabelState, Pools, PreparedData, ReplayReport, RunOutcome,
};
