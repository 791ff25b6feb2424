//! Task streams, the per-task training loop and evaluation.

mod optim;
mod stream;
mod train;

pub use optim::{cosine_lr, Sgd};
pub use stream::{build_stream, lambda_schedule, Task, TaskStream};
pub use train::{
    evaluate, finetune_balanced, gradcam_record, predict, run_stream, train_task, update_exemplars, DistillMode,
    PhaseStats, StreamOutcome, TaskOutcome, Teacher, TrainConfig,
};
