//! Optimiser, learning-rate schedule, synthetic tasks and the training loop.

mod optim;
mod tasks;
mod train;

pub use optim::{adam_step, lr_at, OptimizerState};
pub use tasks::{
    brute_force_label, make_task_batch, marked_depths, TaskFamily, TaskInstance, ANS, BOS, OBJ_A, OBJ_B, OBJ_C,
    ORDERINGS, Q_COUNT, Q_NEARER, Q_ORDER, VOCAB_SIZE,
};
pub use train::{evaluate, train, train_on, Dataset, TraceRecord, TrainOutcome};
