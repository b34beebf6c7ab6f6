//! Losses, masking, manual gradients, optimization and the training loop.

pub mod early_stop;
pub mod grad;
pub mod loss;
pub mod masking;
pub mod model;
pub mod optim;
pub mod trainer;

pub use early_stop::{EarlyStopping, Goal};
pub use grad::chain_grad;
pub use loss::{combined_loss, hard_loss, soft_loss, SoftTarget};
pub use model::{
    ClassExample, ClassifierModel, LossSum, LossWeights, MlmExample, MlmModel, PairEncoding, TeacherDist, Trainable,
};
pub use trainer::{mean_loss, train, EpochEval, TraceRecord, TrainConfig, TrainOutcome};
