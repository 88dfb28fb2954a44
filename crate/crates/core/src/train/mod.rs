//! Optimizer, loss, schedules, training/evaluation loops, and two-stream
//! score fusion.

pub mod optim;
pub mod run;
pub mod score;

pub use optim::{sgd_step, sgd_update_tensor, LrSchedule, OptimizerState, SgdConfig};
pub use run::{evaluate, train, AugmentCfg, EpochStats, EvalReport, Hyper, TrainReport};
pub use score::{
    argmax, canon9, fuse_scores, read_scores, table_accuracy, write_scores, ScoreTable,
};
