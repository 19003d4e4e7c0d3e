//! Training, evaluation and the ablation grid.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod run;

pub use ablation::{ablation_grid, AblationEntry};
pub use config::{RunConfig, Variant};
pub use eval::{
    average_precision, default_thresholds, evaluate_detections, evaluate_map, iou_sweep, ClassAp, EvalResult,
};
pub use model::{train_step, LossBreakdown, Model};
pub use optim::{sgd_momentum_step, Sgd};
pub use run::{train, Trainer, TrainSummary};
