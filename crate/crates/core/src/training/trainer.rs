//! Input preparation, the epoch loop, and similarity-layer fitting.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EarlyStopping, EpochRecord, InputMode, LossKind, SimilarityFitConfig, StopDecision, TrainConfig, TrainHistory};
use super::loss::{contrastive_loss_var, l2_penalty_var, triplet_loss_var};
use crate::data::{
    gen_diff_pairs, gen_same_pairs, group_by_class, sample_triplets, DatasetSplit, LabeledPair,
    LabeledSample, Triplet,
};
use crate::error::{Error, Result};
use crate::imaging::{normalize_image, otsu_threshold, read_image, resize_bilinear, to_grayscale, ImageBuffer};
use crate::network::NetworkState;
use crate::tensor::{Mode, RmspropConfig, RmspropState, Tape, Tensor, Var};

pub const NORMALIZE_MEAN: f32 = 0.5;
pub const NORMALIZE_STD: f32 = 0.5;

/// Resize to `side × side`, optionally binarize with Otsu (replicated to three
/// channels), then normalize to `(p − 0.5)/0.5` as `[3, side, side]`.
pub fn preprocess_image(img: &ImageBuffer, mode: InputMode, side: usize) -> Result<Tensor<f32>> {
    let resized = resize_bilinear(img, side, side)?;
    let rgb = match mode {
        InputMode::Raw => resized.to_rgb(),
        InputMode::OtsuBinary => otsu_threshold(&to_grayscale(&resized))?
            .binary
            .to_image()
            .to_rgb(),
    };
    normalize_image(&rgb, &[NORMALIZE_MEAN; 3], &[NORMALIZE_STD; 3])
}

/// Preprocessed network inputs keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct InputStore {
    tensors: HashMap<String, Tensor<f32>>,
}

impl InputStore {
    pub fn insert(&mut self, id: String, tensor: Tensor<f32>) {
        self.tensors.insert(id, tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(id)
            .ok_or_else(|| Error::Reference(id.to_string()))
    }

    /// `[N, ...]` batch of the given ids.
    pub fn stack(&self, ids: &[&str]) -> Result<Tensor<f32>> {
        let first = self.get(ids.first().ok_or_else(|| Error::Parameter("empty batch".into()))?)?;
        let mut values = Vec::with_capacity(first.numel() * ids.len());
        for id in ids {
            let t = self.get(id)?;
            if t.shape() != first.shape() {
                return Err(Error::dim(format!(
                    "input `{id}` has shape {:?}, expected {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            values.extend_from_slice(t.values());
        }
        let mut shape = vec![ids.len()];
        shape.extend(first.shape());
        Tensor::new(shape, values)
    }
}

pub fn prepare_inputs(samples: &[LabeledSample], mode: InputMode, side: usize) -> Result<InputStore> {
    let mut store = InputStore::default();
    for s in samples {
        let img = read_image(&s.source)?;
        store.insert(s.id.clone(), preprocess_image(&img, mode, side)?);
    }
    Ok(store)
}

fn possible_triplets(groups: &[Vec<String>]) -> usize {
    let total: usize = groups.iter().map(Vec::len).sum();
    groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| g.len() * (g.len() - 1) * (total - g.len()))
        .sum()
}

enum Examples {
    Triplets(Vec<Triplet>),
    Pairs(Vec<LabeledPair>),
}

impl Examples {
    fn len(&self) -> usize {
        match self {
            Examples::Triplets(t) => t.len(),
            Examples::Pairs(p) => p.len(),
        }
    }
}

/// Triplets, or an even mix of same/different pairs in seeded order.
fn draw_examples(groups: &[Vec<String>], kind: LossKind, count: usize, cap: usize, seed: u64) -> Result<Examples> {
    match kind {
        LossKind::Triplet => {
            let n = count.min(possible_triplets(groups)).min(cap);
            Ok(Examples::Triplets(if n == 0 {
                Vec::new()
            } else {
                sample_triplets(groups, n, seed)?
            }))
        }
        LossKind::Contrastive => {
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            let budget = crate::data::pair_budget(&sizes, (count.min(cap) / 2, count.min(cap) - count.min(cap) / 2), (1, 1, 1));
            let mut pairs = gen_same_pairs(groups, budget.genuine_requested, seed)?;
            pairs.extend(gen_diff_pairs(groups, budget.imposter_requested, seed ^ 0x9e37_79b9)?);
            pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Ok(Examples::Pairs(pairs))
        }
    }
}

/// Records the data loss for one batch of examples `[start, end)`.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    state: &mut NetworkState,
    tape: &mut Tape<f32>,
    params: &[Var],
    inputs: &InputStore,
    examples: &Examples,
    range: std::ops::Range<usize>,
    mode: Mode,
    margin: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = range.len();
    match examples {
        Examples::Triplets(t) => {
            let t = &t[range];
            let ids: Vec<&str> = t
                .iter()
                .map(|x| x.anchor.as_str())
                .chain(t.iter().map(|x| x.positive.as_str()))
                .chain(t.iter().map(|x| x.negative.as_str()))
                .collect();
            let batch = inputs.stack(&ids)?;
            let x = tape.constant(batch.shape().to_vec(), batch.into_values())?;
            let e = state.forward(tape, params, x, mode, rng, None)?;
            let a = tape.slice_rows(e, 0, n)?;
            let p = tape.slice_rows(e, n, n)?;
            let ng = tape.slice_rows(e, 2 * n, n)?;
            let d_ap = tape.row_distance(a, p)?;
            let d_an = tape.row_distance(a, ng)?;
            triplet_loss_var(tape, d_ap, d_an, margin)
        }
        Examples::Pairs(p) => {
            let p = &p[range];
            let ids: Vec<&str> = p
                .iter()
                .map(|x| x.a.as_str())
                .chain(p.iter().map(|x| x.b.as_str()))
                .collect();
            let batch = inputs.stack(&ids)?;
            let x = tape.constant(batch.shape().to_vec(), batch.into_values())?;
            let e = state.forward(tape, params, x, mode, rng, None)?;
            let a = tape.slice_rows(e, 0, n)?;
            let b = tape.slice_rows(e, n, n)?;
            let d = tape.row_distance(a, b)?;
            let y: Vec<f32> = p.iter().map(|x| x.label as f32).collect();
            contrastive_loss_var(tape, d, &y, margin)
        }
    }
}

/// Mean eval-mode data loss over `examples`, batch-size weighted.
fn evaluate_loss(state: &NetworkState, inputs: &InputStore, examples: &Examples, config: &TrainConfig) -> Result<f64> {
    if examples.len() == 0 {
        return Ok(f64::NAN);
    }
    let mut scratch = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for start in (0..examples.len()).step_by(config.batch_size) {
        let end = (start + config.batch_size).min(examples.len());
        let mut tape = Tape::new();
        let params: Vec<Var> = state
            .params
            .iter()
            .map(|p| tape.constant(p.shape().to_vec(), p.values().to_vec()))
            .collect::<Result<_>>()?;
        let loss = batch_loss(
            &mut scratch,
            &mut tape,
            &params,
            inputs,
            examples,
            start..end,
            Mode::Eval,
            config.margin as f32,
            &mut rng,
        )?;
        total += tape.value(loss)[0] as f64 * (end - start) as f64;
    }
    Ok(total / examples.len() as f64)
}

const VALIDATION_STREAM: u64 = 0x5eed_0000_0000_0001;

/// Metric-learning loop: seeded example draws per epoch, RMSprop steps on
/// loss plus L2 penalty, eval-mode validation loss, and early stopping with
/// best-epoch restoration.
pub fn train(
    model: NetworkState,
    split: &DatasetSplit,
    inputs: &InputStore,
    config: &TrainConfig,
) -> Result<(NetworkState, TrainHistory)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if config.early_stopping && split.validation.is_empty() {
        return Err(Error::Parameter(
            "early stopping needs a nonempty validation set".into(),
        ));
    }
    let train_groups = group_by_class(&split.train);
    let val_groups = group_by_class(&split.validation);
    let val_examples = if split.validation.is_empty() {
        Examples::Triplets(Vec::new())
    } else {
        draw_examples(
            &val_groups,
            config.loss_kind,
            config.val_samples,
            config.pair_cap,
            config.seed ^ VALIDATION_STREAM,
        )?
    };
    if config.early_stopping && val_examples.len() == 0 {
        return Err(Error::Structure(
            "validation split admits no examples for early stopping".into(),
        ));
    }

    let mut state = model;
    let mut optimizer = RmspropState::new(config.rmsprop, &state.params)?;
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = state.clone();
    let mut history = TrainHistory::default();
    let margin = config.margin as f32;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let seed = config.seed.wrapping_add(epoch as u64);
        let examples = draw_examples(
            &train_groups,
            config.loss_kind,
            config.samples_per_epoch,
            config.pair_cap,
            seed,
        )?;
        if examples.len() == 0 {
            return Err(Error::Structure(
                "training split admits no examples for the chosen loss".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        let mut epoch_loss = 0.0;
        for (b, start) in (0..examples.len()).step_by(config.batch_size).enumerate() {
            let end = (start + config.batch_size).min(examples.len());
            let mut tape = Tape::new();
            let params = state.bind(&mut tape);
            let data = batch_loss(
                &mut state,
                &mut tape,
                &params,
                inputs,
                &examples,
                start..end,
                Mode::Train,
                margin,
                &mut rng,
            )?;
            let loss = match l2_penalty_var(&mut tape, &state, &params, config.l2_coefficient)? {
                Some(pen) => tape.add(data, pen)?,
                None => data,
            };
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                });
            }
            let grads = tape.backward(loss)?;
            for (p, var) in state.params.iter_mut().zip(&params) {
                p.zero_grad();
                grads.accumulate_into(*var, p)?;
            }
            optimizer.step(&mut state.params)?;
            epoch_loss += value as f64 * (end - start) as f64;
        }
        let train_loss = epoch_loss / examples.len() as f64;
        let val_loss = evaluate_loss(&state, inputs, &val_examples, config)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        history.stopped_epoch = epoch;
        if !config.early_stopping {
            history.best_epoch = epoch;
            best = state.clone();
            continue;
        }
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                history.best_epoch = epoch;
                best = state.clone();
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    for p in &mut best.params {
        p.zero_grad();
    }
    Ok((best, history))
}

/// Eval-mode embeddings for every id in `ids`.
pub fn embed_all<'a>(
    state: &NetworkState,
    inputs: &InputStore,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<HashMap<String, Vec<f32>>> {
    let mut out = HashMap::new();
    for id in ids {
        if !out.contains_key(id) {
            out.insert(id.to_string(), state.embed(inputs.get(id)?)?);
        }
    }
    Ok(out)
}

/// Logistic fit of `sigmoid(w·x + b)` on rows `x` by full-batch RMSprop on
/// binary cross-entropy, starting from `(w, b)`.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[f64],
    w: &[f64],
    b: f64,
    config: &SimilarityFitConfig,
) -> Result<(Vec<f64>, f64)> {
    let has_pos = labels.iter().any(|&y| y == 1.0);
    let has_neg = labels.iter().any(|&y| y == 0.0);
    if !(has_pos && has_neg) {
        return Err(Error::Degenerate(
            "similarity fitting needs both same and different pairs".into(),
        ));
    }
    let d = w.len();
    if features.iter().any(|f| f.len() != d) || features.len() != labels.len() {
        return Err(Error::dim("similarity features disagree with the weight length"));
    }
    let x = Tensor::new(
        vec![features.len(), d],
        features.iter().flatten().copied().collect(),
    )?;
    let mut params = vec![
        Tensor::new(vec![d, 1], w.to_vec())?.with_grad(),
        Tensor::new(vec![1], vec![b])?.with_grad(),
    ];
    let mut opt = RmspropState::new(
        RmspropConfig {
            learning_rate: config.learning_rate,
            ..RmspropConfig::default()
        },
        &params,
    )?;
    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&params[0]);
        let bv = tape.leaf(&params[1]);
        let logit = tape.dense(xv, wv, Some(bv))?;
        let p = tape.sigmoid(logit);
        let loss = tape.binary_cross_entropy(p, labels.to_vec())?;
        let grads = tape.backward(loss)?;
        for (t, v) in params.iter_mut().zip([wv, bv]) {
            t.zero_grad();
            grads.accumulate_into(v, t)?;
        }
        opt.step(&mut params)?;
    }
    Ok((params[0].values().to_vec(), params[1].values()[0]))
}

/// Fits the similarity layer on `pairs` with the embedding network frozen;
/// returns the new `(w [D,1], b₀ [1])`.
pub fn fit_similarity_head(
    state: &NetworkState,
    inputs: &InputStore,
    pairs: &[LabeledPair],
    config: &SimilarityFitConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !state.spec.similarity_head {
        return Err(Error::State("network has no similarity layer".into()));
    }
    let k = state.params.len() - 2;
    let (w0, b0) = (&state.params[k], &state.params[k + 1]);
    if config.epochs == 0 {
        return Ok((w0.clone(), b0.clone()));
    }
    let ids: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect();
    let emb = embed_all(state, inputs, ids)?;
    let features: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            emb[&p.a]
                .iter()
                .zip(&emb[&p.b])
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .collect()
        })
        .collect();
    let labels: Vec<f64> = pairs.iter().map(|p| p.label as f64).collect();
    let w: Vec<f64> = w0.values().iter().map(|v| *v as f64).collect();
    let (w, b) = fit_logistic(&features, &labels, &w, b0.values()[0] as f64, config)?;
    Ok((
        Tensor::new(w0.shape().to_vec(), w.iter().map(|v| *v as f32).collect())?.with_grad(),
        Tensor::new(vec![1], vec![b as f32])?.with_grad(),
    ))
}

/// Replaces the similarity layer's parameters.
pub fn install_similarity(state: &mut NetworkState, w: Tensor<f32>, b: Tensor<f32>) -> Result<()> {
    if !state.spec.similarity_head {
        return Err(Error::State("network has no similarity layer".into()));
    }
    let k = state.params.len() - 2;
    if w.shape() != state.params[k].shape() || b.shape() != [1] {
        return Err(Error::dim("similarity parameters have the wrong shape"));
    }
    state.params[k] = w;
    state.params[k + 1] = b;
    Ok(())
}

/// Training-split pairs for similarity fitting and threshold calibration.
pub fn similarity_pairs(split_part: &[LabeledSample], per_kind: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    let groups = group_by_class(split_part);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let budget = crate::data::pair_budget(&sizes, (per_kind, per_kind), (1, 1, 1));
    let mut pairs = gen_same_pairs(&groups, budget.genuine_requested, seed)?;
    pairs.extend(gen_diff_pairs(&groups, budget.imposter_requested, seed ^ 0x9e37_79b9)?);
    Ok(pairs)
}
