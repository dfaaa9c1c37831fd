//! Configuration, training, evaluation and the command implementations.

pub mod commands;
pub mod config;
pub mod evaluate;
pub mod train;

pub use commands::{
    cmd_eval, cmd_eval_on, cmd_filter, cmd_train, cmd_train_on, cmd_sweep, cmd_synth, load_checkpoint, load_dataset,
    EvalReport, FilterInputs, FilterReport, SweepCell, TrainReport,
};
pub use config::{Profile, ResolvedConfig, RunConfig};
pub use train::{train_model, EpochRecord, TrainOutcome};
