pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use loss::{bce_loss, combined_loss, dice_loss, LossConfig};
pub use metrics::{dip_score, f1_score, precision_recall, ConfusionCounts, MetricsReport};
pub use optim::{AdamWConfig, OptimState};
pub use trainer::{
    batch_gradients, confusion, evaluate, predict_probabilities, train_epoch, EpochOptions, EpochStats,
    DEFAULT_THRESHOLD,
};
