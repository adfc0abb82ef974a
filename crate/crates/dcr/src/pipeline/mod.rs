//! Two-stage training: experts first, then frozen, then the agent over them.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{
    load_checkpoint, restore_ada, restore_afd, save_checkpoint, AdaSnapshot, AfdSnapshot,
    Checkpoint, Stage, TensorEntry,
};
pub use config::{DataConfig, GeneralConfig, RunConfig};
pub use run::{
    action_table, ada_checkpoint, ada_history_table, afd_checkpoint, afd_history_table,
    aggregate_table, conflict_table, general_encoder, load_or_generate, mean_std, metrics_table,
    pathway_predictions, prepare_out, run_seed, run_sequential, score, stage_inputs, stage_splits,
    MeanStd, MethodScore, MethodSummary, RunOutcome, RunSummary, SeedResult, SeedSummary,
    StageInputs,
};
