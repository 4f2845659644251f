//! Evidential heads, subjective-logic opinions and the fine-tuning objective.

pub mod finetune;
pub mod loss;
pub mod opinion;

pub use finetune::{
    epoch_log_csv, finetune_epoch, finetune_loss_grad, EvidentialModel, FinetuneBatch,
    FinetuneConfig, FinetuneEpochLog, FinetuneStats, ModelGrads,
};
pub use loss::{acc_loss, anneal_lambda, evidential_loss, kl_uniform, masked_alpha};
pub use opinion::{
    evidence_from_logits, fuse, fuse_all, opinion_from_evidence, DirichletParams, Opinion,
};
