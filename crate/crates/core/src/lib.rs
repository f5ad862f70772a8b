pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod diversity;
pub mod error;
pub mod lcm;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use attacks::{
    attack, bim, blackbox_transfer_eval, fgsm, mim, pgd, pgd_from, AdversarialBatch, AttackConfig,
    AttackFamily, AttackLoss, AttackSource, EnsembleTarget, TransferRow,
};
pub use checkpoint::Checkpoint;
pub use data::{Batch, Dataset};
pub use diversity::{
    diversity_probe, gradient_alignment_loss, jsd, label_diversity_loss, total_loss, truncate_sld,
    DiversityProbe, DiversityWeights, EnsembleLossReport, LossRow,
};
pub use error::{Error, Result};
pub use lcm::{kl_divergence, kl_training_loss, one_hot, LabelConfusionModel, LcmView, SoftLabel};
pub use models::{
    ensemble_predict, Architecture, Ensemble, InputShape, ModelView, Param, SubModel,
};
pub use tensor::{backward, Array, GradMap, Graph, Tensor};
pub use trainer::{
    adam_step, lr_schedule, train, AdamState, Objective, TrainConfig, TrainOutput, Trainer,
};
