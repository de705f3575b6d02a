//! Source training and label-free target adaptation.

mod bank;
mod eval;
mod losses;
mod optim;
mod train;

pub use bank::{build_bank, find_neighbors, FeatureBank};
pub use eval::{accuracy, embed, features, Embeddings, EVAL_CHUNK};
pub use losses::{
    batch_diversity_on, diversity_loss, diversity_loss_on, diversity_loss_signed, kl_on,
    similarity_loss, similarity_loss_on, smoothed_cross_entropy, smoothed_cross_entropy_on,
    smoothed_targets, PROB_FLOOR, PROB_TOLERANCE,
};
pub use optim::Sgd;
pub use train::{adapt_step, source_slots, source_train_step, AdaptObjective, AdaptStepReport, SourceStep};
