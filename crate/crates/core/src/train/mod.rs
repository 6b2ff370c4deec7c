//! Loss, augmentation, optimization, checkpoints and sliding-window
//! inference.

pub mod augment;
pub mod checkpoint;
pub mod gradcheck;
pub mod inference;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use augment::{augment, AugmentationConfig};
pub use checkpoint::{predict_volume, Checkpoint, EpochRecord};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use inference::{predict_with, sliding_window, PatchPredictor, ProbabilityMap};
pub use loss::{dice_ce_loss, dice_ce_loss_logits, LossValue};
pub use optim::{poly_lr, Adam, AdamConfig};
pub use trainer::{train, train_with_progress, Case, TrainConfig, TrainingData};
