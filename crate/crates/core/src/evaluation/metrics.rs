//! Rank metrics over genuine/imposter score sets.
//!
//! Scores are similarity-oriented: higher means "more likely the same class".
//! Counting is done on sorted copies so every sweep is `O(n log n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, imposter: Vec<f64>) -> Self {
        ScoreSet { genuine, imposter }
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.imposter.is_empty() {
            return Err(Error::Degenerate(format!(
                "need genuine and imposter scores, got {} and {}",
                self.genuine.len(),
                self.imposter.len()
            )));
        }
        if let Some(s) = self.genuine.iter().chain(&self.imposter).find(|s| !s.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite score {s}")));
        }
        Ok(())
    }

    /// All scores equal: every threshold separates nothing.
    pub fn is_constant(&self) -> bool {
        let mut all = self.genuine.iter().chain(&self.imposter);
        match all.next() {
            Some(first) => all.all(|s| s == first),
            None => true,
        }
    }

    fn sorted(&self) -> (Vec<f64>, Vec<f64>) {
        let mut g = self.genuine.clone();
        let mut i = self.imposter.clone();
        g.sort_by(f64::total_cmp);
        i.sort_by(f64::total_cmp);
        (g, i)
    }

    /// Distinct scores in descending order with the genuine and imposter
    /// counts at each.
    fn tie_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut tagged: Vec<(f64, bool)> = self
            .genuine
            .iter()
            .map(|&s| (s, true))
            .chain(self.imposter.iter().map(|&s| (s, false)))
            .collect();
        tagged.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for (s, genuine) in tagged {
            if groups.last().is_none_or(|g| g.0 != s) {
                groups.push((s, 0, 0));
            }
            let g = groups.last_mut().expect("just pushed");
            if genuine {
                g.1 += 1;
            } else {
                g.2 += 1;
            }
        }
        groups
    }
}

/// Count of sorted `v` entries `≥ t`.
fn count_at_least(v: &[f64], t: f64) -> usize {
    v.len() - v.partition_point(|&s| s < t)
}

/// `far` = accepted imposters (score ≥ t), `frr` = rejected genuines (score < t).
pub fn far_frr(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    scores.validate()?;
    let far = scores.imposter.iter().filter(|&&s| s >= threshold).count();
    let frr = scores.genuine.iter().filter(|&&s| s < threshold).count();
    Ok((
        far as f64 / scores.imposter.len() as f64,
        frr as f64 / scores.genuine.len() as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    /// Set when every score is equal and the value is a convention.
    pub degenerate: bool,
}

/// Equal error rate over the distinct scores and their midpoints; picks the
/// candidate minimizing `|far − frr|` (lowest threshold on ties) and reports
/// the mean of the two rates there.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerPoint> {
    scores.validate()?;
    let (g, i) = scores.sorted();
    let mut distinct: Vec<f64> = g.iter().chain(&i).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = Vec::with_capacity(2 * distinct.len());
    for (k, &s) in distinct.iter().enumerate() {
        if k > 0 {
            candidates.push(distinct[k - 1] + (s - distinct[k - 1]) / 2.0);
        }
        candidates.push(s);
    }
    let (ng, ni) = (g.len() as u128, i.len() as u128);
    // |fa/ni − fr/ng| compared as |fa·ng − fr·ni| over the common denominator
    let mut best: Option<(u128, f64, usize, usize)> = None;
    for t in candidates {
        let fa = count_at_least(&i, t);
        let fr = g.len() - count_at_least(&g, t);
        let gap = (fa as u128 * ng).abs_diff(fr as u128 * ni);
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, fa, fr));
        }
    }
    let (_, threshold, fa, fr) = best.expect("at least one candidate");
    let far = fa as f64 / i.len() as f64;
    let frr = fr as f64 / g.len() as f64;
    Ok(EerPoint {
        eer: (far + frr) / 2.0,
        threshold,
        far,
        frr,
        degenerate: scores.is_constant(),
    })
}

/// Area under the ROC by trapezoids over the tie-grouped descending sweep;
/// equal to the Mann–Whitney statistic.
pub fn compute_auroc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    for (_, dg, di) in scores.tie_groups() {
        let (ntp, nfp) = (tp + dg as u128, fp + di as u128);
        twice_area += (nfp - fp) * (tp + ntp);
        tp = ntp;
        fp = nfp;
    }
    Ok(twice_area as f64 / (2.0 * tp as f64 * fp as f64))
}

/// Average precision `Σ (R_k − R_{k−1})·P_k` over descending tie groups.
pub fn compute_aupr(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let n = scores.genuine.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, dg, di) in scores.tie_groups() {
        tp += dg;
        fp += di;
        if dg > 0 {
            ap += dg as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(ap / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    /// Names of quantities reported as 0 because their denominator was 0.
    pub undefined: Vec<String>,
}

/// Confusion arithmetic with `score ≥ threshold` predicting "genuine".
pub fn classify_report(scores: &ScoreSet, threshold: f64) -> Classification {
    let tp = scores.genuine.iter().filter(|&&s| s >= threshold).count();
    let fp = scores.imposter.iter().filter(|&&s| s >= threshold).count();
    let counts = Counts {
        tp,
        fp,
        tn: scores.imposter.len() - fp,
        fn_: scores.genuine.len() - tp,
    };
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let total = tp + fp + counts.tn + counts.fn_;
    let accuracy = ratio(tp + counts.tn, total, "accuracy");
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + counts.fn_, "recall");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    Classification {
        accuracy,
        precision,
        recall,
        f1,
        counts,
        undefined,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// ROC vertices from `(0,0)` (threshold `+∞`) through each distinct score.
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    scores.validate()?;
    let (ng, ni) = (scores.genuine.len() as f64, scores.imposter.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0, 0);
    for (s, dg, di) in scores.tie_groups() {
        tp += dg;
        fp += di;
        points.push(RocPoint {
            threshold: s,
            far: fp as f64 / ni,
            tpr: tp as f64 / ng,
        });
    }
    Ok(points)
}

/// Precision/recall at each distinct score, descending.
pub fn pr_curve(scores: &ScoreSet) -> Result<Vec<PrPoint>> {
    scores.validate()?;
    let ng = scores.genuine.len() as f64;
    let (mut tp, mut fp) = (0, 0);
    Ok(scores
        .tie_groups()
        .into_iter()
        .map(|(s, dg, di)| {
            tp += dg;
            fp += di;
            PrPoint {
                threshold: s,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / ng,
            }
        })
        .collect())
}
