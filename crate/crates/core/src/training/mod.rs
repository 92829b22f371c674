//! Base-stage training, branch surgery, freeze policies and novel-branch fine-tuning.

mod base;
mod checkpoint;
mod config;
mod finetune;
mod freeze;
pub mod losses;
mod optimizer;
mod surgery;

pub use base::{LossBreakdown, Trainer};
pub use checkpoint::{
    config_digest, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMetadata, CHECKPOINT_FORMAT_VERSION,
    MANIFEST_FILE, TENSORS_FILE,
};
pub use config::{SamplingConfig, TrainConfig};
pub use finetune::{joint_loss_and_grads, prepare_support, SupportSample};
pub use freeze::{apply_freeze_policy, audit_frozen, FinetuneLayers, FreezePolicy};
pub use losses::{box_regression_loss, classification_loss, rpn_loss};
pub use optimizer::Sgd;
pub use surgery::{branch_surgery, NOVEL_INIT_STD};

use crate::error::Result;
use crate::synthdata::AnnotatedImage;

/// Runs `trainer.config.steps` base-stage steps over `images`, calling `on_step` after
/// each. On error the checkpoint holds the state after the last successful step.
pub fn train_base(
    ckpt: &mut Checkpoint,
    images: &[AnnotatedImage],
    trainer: &mut Trainer,
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    let mut order = Vec::new();
    let mut log = Vec::with_capacity(trainer.config.steps);
    while trainer.step < trainer.config.steps {
        let idx = trainer.next_batch(&mut order, images.len());
        let batch: Vec<&AnnotatedImage> = idx.iter().map(|&i| &images[i]).collect();
        let entry = trainer.base_train_step(ckpt, &batch)?;
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Runs `trainer.config.steps` fine-tuning steps over prepared support samples and
/// returns the per-step loss.
pub fn finetune(ckpt: &mut Checkpoint, samples: &[SupportSample], trainer: &mut Trainer) -> Result<Vec<f64>> {
    let mut order = Vec::new();
    let mut log = Vec::with_capacity(trainer.config.steps);
    while trainer.step < trainer.config.steps {
        let idx = trainer.next_batch(&mut order, samples.len());
        let batch: Vec<&SupportSample> = idx.iter().map(|&i| &samples[i]).collect();
        log.push(trainer.finetune_step(ckpt, &batch)?);
    }
    Ok(log)
}
