mod finetune;
mod loss;
mod optim;
mod schedule;

pub use loss::{
    argmax_rows, cross_entropy, distill_loss, feature_term, hard_kd_loss, kl_term, patch_kd_loss, patch_term,
    penultimate_mse_loss, soft_kd_loss, KlDirection, Strategy, StudentVars, TeacherOutputs,
};
pub use finetune::{finetune, DistillConfig, EpochLog, MICRO_CHUNK};
pub use optim::AdamW;
pub use schedule::{cosine_lr, warmup_steps, DEFAULT_WARMUP_FRACTION};
