//! Experiment configuration, the four-arm mitigation comparison and the
//! hyperparameter search.

mod config;
mod experiment;
mod pareto;
mod pca;

pub use config::{Arm, ConfusionSettings, ExperimentConfig, ProbeSettings, SearchSettings};
pub use experiment::{
    full_index, generate_benchmark, run_arms, run_experiment, run_search, training_sets, validation_scores,
    write_results, ArmResult, Benchmark, ExperimentResults, PcaPoint, SummaryRow,
};
pub use pareto::{
    dominates, pareto_front, pareto_front_exhaustive, pareto_search, SearchOutcome, SearchSpace, Trial, TrialParams,
};
pub use pca::pca_2d;
