//! Counting heads, IRLC episodes and the model wrapper that ties them to the
//! language front end.

pub mod heads;
pub mod model;
pub mod rollout;

pub use heads::{guess1_mode, round_count, softcount_loss, NUM_CLASSES};
pub use model::{
    derive_rng, CountPrediction, CountingModel, IrlcState, LossTerms, ModelDims, ModelKind, ObjectiveConfig,
    TrainContext,
};
pub use rollout::{Action, Episode, MAX_COUNT};
