//! Contrastive and triplet losses, plain and recorded on a tape.

use crate::error::{Error, Result};
use crate::network::NetworkState;
use crate::tensor::{Real, Tape, Var};

/// `(1/2N)·Σ [y·d² + (1−y)·max(margin − d, 0)²]`.
pub fn contrastive_loss(y: &[f64], d: &[f64], margin: f64) -> Result<f64> {
    if y.is_empty() || y.len() != d.len() {
        return Err(Error::Parameter(format!(
            "contrastive loss needs matching nonempty batches, got {} labels and {} distances",
            y.len(),
            d.len()
        )));
    }
    let sum: f64 = y
        .iter()
        .zip(d)
        .map(|(&y, &d)| {
            let h = (margin - d).max(0.0);
            y * d * d + (1.0 - y) * h * h
        })
        .sum();
    Ok(sum / (2.0 * y.len() as f64))
}

/// Batch mean of `max(d_ap − d_an + margin, 0)`.
pub fn triplet_loss(d_ap: &[f64], d_an: &[f64], margin: f64) -> Result<f64> {
    if d_ap.is_empty() || d_ap.len() != d_an.len() {
        return Err(Error::Parameter(format!(
            "triplet loss needs matching nonempty batches, got {} and {}",
            d_ap.len(),
            d_an.len()
        )));
    }
    let sum: f64 = d_ap
        .iter()
        .zip(d_an)
        .map(|(p, n)| (p - n + margin).max(0.0))
        .sum();
    Ok(sum / d_ap.len() as f64)
}

/// Tape form of [`contrastive_loss`] over a `[N]` distance vector.
pub fn contrastive_loss_var<T: Real>(tape: &mut Tape<T>, d: Var, y: &[T], margin: T) -> Result<Var> {
    let n = tape.value(d).len();
    if n == 0 || y.len() != n {
        return Err(Error::Parameter(format!(
            "contrastive loss: {} labels for {n} distances",
            y.len()
        )));
    }
    let d2 = tape.square(d);
    let same = tape.mul_const(d2, y.to_vec())?;
    let neg = tape.scale(d, -T::one());
    let shortfall = tape.add_scalar(neg, margin);
    let hinge = tape.relu(shortfall);
    let h2 = tape.square(hinge);
    let diff = tape.mul_const(h2, y.iter().map(|&y| T::one() - y).collect())?;
    let terms = tape.add(same, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, T::from_f64(0.5 / n as f64)))
}

/// Tape form of [`triplet_loss`].
pub fn triplet_loss_var<T: Real>(tape: &mut Tape<T>, d_ap: Var, d_an: Var, margin: T) -> Result<Var> {
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// `coefficient·Σ w²` over conv and dense weights (biases and batchnorm
/// excluded). Per-layer coefficients from the spec are not included.
pub fn l2_penalty<T: Real>(state: &NetworkState<T>, coefficient: f64) -> f64 {
    if coefficient == 0.0 {
        return 0.0;
    }
    let sum: f64 = state
        .regularized_weights()
        .iter()
        .flat_map(|&(_, p, _)| state.params[p].values())
        .map(|w| w.as_f64() * w.as_f64())
        .sum();
    coefficient * sum
}

/// Records `Σ_layers (c_layer + extra)·Σ w²` on the tape; `None` when every
/// coefficient is zero.
pub fn l2_penalty_var<T: Real>(
    tape: &mut Tape<T>,
    state: &NetworkState<T>,
    params: &[Var],
    extra: f64,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (_, p, c) in state.regularized_weights() {
        let coef = c + extra;
        if coef == 0.0 {
            continue;
        }
        let sq = tape.square(params[p]);
        let s = tape.sum(sq);
        let term = tape.scale(s, T::from_f64(coef));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}
