//! Next-token NLL training with AdamW, gradient clipping, a warmup/decay
//! schedule, BEMA tracking, periodic validation and early stopping.

mod loss;
mod optim;
mod run;
mod schedule;

pub use loss::{batch_loss, batch_loss_and_grad, MaskSource};
pub use optim::{adamw_step, clip_gradients, AdamWConfig, OptimizerState};
pub use run::{
    final_parameter_sets, train_run, train_run_with, BemaEval, BestMetrics, Divergence, DropoutRates, StopReason,
    TrainOutcome, TrainRunConfig, Trainer, ValidationEvent,
};
pub use schedule::ScheduleSpec;
