//! Objective, metrics, optimiser and the training loop.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use loss::{
    class_weights, combine_losses, compute_class_ratios, fwcl, fwcl_value, total_loss, ClassRatios, ClassWeightMode,
    LossConfig, LossWeights,
};
pub use metrics::{compute_metrics, ConfusionMatrix, MetricsAccumulator, MetricsReport, Scores};
pub use optim::Adam;
pub use trainer::{evaluate, head_moment_kappas, predict_maps, train, EpochLog, Evaluation, TrainConfig, TrainOutcome};
