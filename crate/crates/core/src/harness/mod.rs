//! Experiment orchestration: configuration, the three-stage driver,
//! baselines and communication accounting.

pub mod baseline;
pub mod config;
pub mod pipeline;

pub use baseline::{cross_entropy, linear_probe_accuracy, softmax, ConcatModel};
pub use config::{
    Ablation, Budget, CalibrationSource, ExperimentConfig, LinkConfig, ModelConfig, PolicyConfig,
};
pub use pipeline::{
    calibrate_stage, evaluate_stage, evidential_accuracy, init_encoders, prepare_data,
    pretrain_stage, rounds_table, rounds_to_target, run_from_encoders, run_pipeline, run_seed,
    sweep, sweep_csv, variant_name, write_outputs, InferCost, RunArtifacts, RunMetrics, SweepRow,
    TargetRounds,
};
