//! End-to-end wiring: split, preprocess, train, fit the similarity layer,
//! calibrate a threshold, and evaluate a checkpoint on its test split.

use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::evaluation::{compute_eer, evaluation_pairs, full_report, score_pairs, Gallery, ReportBundle};
use crate::network::{build_network, tower_spec, NetworkState};
use crate::training::{
    fit_similarity_head, install_similarity, prepare_inputs, similarity_pairs, train, InputStore, TrainConfig,
    TrainHistory,
};

/// What a checkpoint needs to reproduce its preprocessing and scoring; kept
/// in the spec's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    /// Threshold at the validation-split EER, in score units.
    pub eer_threshold: f64,
    pub config: TrainConfig,
}

impl ModelMeta {
    pub fn of(state: &NetworkState) -> Result<Self> {
        serde_json::from_value(state.spec.metadata.clone())
            .map_err(|e| Error::State(format!("checkpoint lacks pipeline metadata: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: NetworkState,
    pub history: TrainHistory,
    pub split: DatasetSplit,
    pub meta: ModelMeta,
}

/// Trains the configured tower on `samples` and returns a model whose
/// metadata carries the config and the calibrated threshold.
pub fn train_pipeline(samples: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_dataset(samples, &config.split, config.seed)?;
    let fit_samples: Vec<LabeledSample> = split.train.iter().chain(&split.validation).cloned().collect();
    let inputs = prepare_inputs(&fit_samples, config.input_mode, config.image_side)?;
    let model = build_network(&tower_spec(&config.preset, config.image_side)?, config.seed)?;
    let (mut state, history) = train(model, &split, &inputs, config)?;

    let pairs = similarity_pairs(&split.train, config.similarity.pairs_per_kind, config.seed)?;
    let (w, b) = fit_similarity_head(&state, &inputs, &pairs, &config.similarity)?;
    install_similarity(&mut state, w, b)?;

    let calib = if split.validation.is_empty() { &split.train } else { &split.validation };
    let calib_pairs = evaluation_pairs(calib, config.pair_cap / 2, config.seed ^ 0xca1b)?;
    let eer_threshold = compute_eer(&score_pairs(&state, &calib_pairs, &inputs, config.score_mode)?)?.threshold;

    let meta = ModelMeta {
        seed: config.seed,
        eer_threshold,
        config: config.clone(),
    };
    state.spec.metadata = serde_json::to_value(&meta).expect("metadata serializes");
    Ok(TrainOutcome {
        state,
        history,
        split,
        meta,
    })
}

/// Re-derives the checkpoint's split of `samples` and reports on its test
/// part at the test EER threshold (or `threshold` when given).
pub fn evaluate_pipeline(
    state: &NetworkState,
    samples: &[LabeledSample],
    threshold: Option<f64>,
) -> Result<ReportBundle> {
    let meta = ModelMeta::of(state)?;
    let cfg = &meta.config;
    let split = split_dataset(samples, &cfg.split, cfg.seed)?;
    let inputs = prepare_inputs(&split.test, cfg.input_mode, cfg.image_side)?;
    full_report(
        state,
        &split.test,
        &inputs,
        cfg.pair_cap / 2,
        cfg.score_mode,
        cfg.seed ^ 0x7e57,
        threshold,
    )
}

/// Preprocesses `samples` the way the checkpoint expects.
pub fn model_inputs(state: &NetworkState, samples: &[LabeledSample]) -> Result<InputStore> {
    let meta = ModelMeta::of(state)?;
    prepare_inputs(samples, meta.config.input_mode, meta.config.image_side)
}

/// Gallery from every sample of a dataset directory listing.
pub fn model_gallery(state: &NetworkState, samples: &[LabeledSample]) -> Result<Gallery> {
    let inputs = model_inputs(state, samples)?;
    Gallery::build(state, samples, &inputs)
}
