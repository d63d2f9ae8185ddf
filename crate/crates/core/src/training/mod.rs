//! Metric-learning losses, the RMSprop training loop with early stopping,
//! and fitting of the similarity layer.

mod config;
mod loss;
mod trainer;

pub use config::{
    EarlyStopping, EpochRecord, InputMode, LossKind, ScoreMode, SimilarityFitConfig,
    StopDecision, TrainConfig, TrainHistory,
};
pub use loss::{
    contrastive_loss, contrastive_loss_var, l2_penalty, l2_penalty_var, triplet_loss,
    triplet_loss_var,
};
pub use trainer::{
    embed_all, fit_logistic, fit_similarity_head, install_similarity, prepare_inputs,
    preprocess_image, similarity_pairs, train, InputStore, NORMALIZE_MEAN, NORMALIZE_STD,
};
