//! Configuration, training loop and experiment protocols.

mod config;
mod experiments;
mod train;

pub use config::{OptimConfig, Profile, RunConfig};
pub use experiments::{
    ablation_csv, analyze_embeddings, default_grid, paired_arms, run_ablation, sweep_csv, train_arm,
    AblationCell, AblationRow, ArmOutcome, ArmResult, ArmSpec, CosineStats, EmbeddingAnalysis,
    EmbeddingSnapshot, ExperimentResult, ABLATION_HEADER, SWEEP_HEADER,
};
pub use train::{
    batch_loss, build_dataset, embed, epoch_plans, evaluate, evaluate_sizes, model_seed, prepare,
    simulate_corpus, train, trained_prefixes, BatchInput, EpochLog, LossParts, PovReport, Prepared,
    StepLog, TrainLog,
};
