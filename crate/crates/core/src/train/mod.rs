//! Optimization, augmentation, the training loop, cross-validation and
//! metrics.

pub mod augment;
pub mod cv;
pub mod fit;
pub mod metrics;
pub mod optim;

pub use augment::{AugmentConfig, Normalization};
pub use cv::{kfold_split, FoldSplit};
pub use fit::{evaluate_accuracy, fit, predict_cases, EpochRecord, FitResult, TrainConfig};
pub use metrics::{accuracy, bootstrap_ci, mean_std, pr_auc, roc_auc, PrCurve, RocCurve};
pub use optim::{adamw_step, lr_at, AdamWConfig, AdamWState, Schedule};
