//! Learned drift: a two-head MLP predicting velocity and score, trained on
//! quadratic objectives with times drawn proportionally to `γ⁻²`.

mod adam;
mod loss;
mod mlp;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{
    compose_drift, draw_training_batch, loss_and_grad, loss_b, loss_b_from_heads, loss_s, loss_s_from_heads,
    sample_training_time, split_heads, training_time_density, training_time_from_uniform, LossAndGrad, TrainingBatch,
};
pub use mlp::{param_count, ForwardCache, Mlp};
pub use train::{
    load_checkpoint, save_checkpoint, train, train_with_progress, weighted_drift_mse, LearnedDrift, LrDecay, TraceEntry,
    TrainConfig,
};
