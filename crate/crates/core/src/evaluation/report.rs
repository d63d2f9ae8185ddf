//! Scoring a trained model on pairs, the metrics report, gallery
//! classification, and curve/plot emission.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    classify_report, compute_aupr, compute_auroc, compute_eer, pr_curve, roc_curve, Counts, EerPoint, PrPoint,
    RocPoint, ScoreSet,
};
use crate::data::{gen_diff_pairs, gen_same_pairs, group_by_class, pair_budget, Label, LabeledPair, LabeledSample};
use crate::error::{Error, Result};
use crate::network::NetworkState;
use crate::tensor::euclidean_distance;
use crate::training::{embed_all, InputStore, ScoreMode};

/// Score of one embedding pair: `−distance`, or the similarity probability.
pub fn pair_score(state: &NetworkState, a: &[f32], b: &[f32], mode: ScoreMode) -> Result<f64> {
    match mode {
        ScoreMode::Distance => Ok(-euclidean_distance(a, b)?),
        ScoreMode::Similarity => state.similarity_of(a, b),
    }
}

/// Scores every pair from precomputed embeddings, in pair order.
pub fn score_embedded_pairs(
    state: &NetworkState,
    embeddings: &HashMap<String, Vec<f32>>,
    pairs: &[LabeledPair],
    mode: ScoreMode,
) -> Result<ScoreSet> {
    let mut scores = ScoreSet::default();
    for p in pairs {
        let get = |id: &str| embeddings.get(id).ok_or_else(|| Error::Reference(id.to_string()));
        let s = pair_score(state, get(&p.a)?, get(&p.b)?, mode)?;
        if p.label == 1 {
            scores.genuine.push(s);
        } else {
            scores.imposter.push(s);
        }
    }
    Ok(scores)
}

/// Eval-mode scores for `pairs`; each referenced image is embedded once.
pub fn score_pairs(
    state: &NetworkState,
    pairs: &[LabeledPair],
    inputs: &InputStore,
    mode: ScoreMode,
) -> Result<ScoreSet> {
    let ids: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect();
    let emb = embed_all(state, inputs, ids)?;
    score_embedded_pairs(state, &emb, pairs, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub threshold_used: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub n_genuine: usize,
    pub n_imposter: usize,
}

/// A report with everything it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub report: MetricsReport,
    pub eer_point: EerPoint,
    pub scores: ScoreSet,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    /// Degenerate-score and undefined-ratio notes.
    pub warnings: Vec<String>,
}

/// All metrics for `scores`, evaluated at `threshold` or, if `None`, at the
/// EER threshold.
pub fn metrics_report(scores: ScoreSet, threshold: Option<f64>) -> Result<ReportBundle> {
    let eer_point = compute_eer(&scores)?;
    let threshold_used = threshold.unwrap_or(eer_point.threshold);
    let c = classify_report(&scores, threshold_used);
    let mut warnings = Vec::new();
    if eer_point.degenerate {
        warnings.push("all scores are equal; eer 0.5 is a convention".to_string());
    }
    for name in &c.undefined {
        warnings.push(format!("{name} has a zero denominator and is reported as 0"));
    }
    let report = MetricsReport {
        eer: eer_point.eer,
        eer_threshold: eer_point.threshold,
        auroc: compute_auroc(&scores)?,
        aupr: compute_aupr(&scores)?,
        threshold_used,
        accuracy: c.accuracy,
        precision: c.precision,
        recall: c.recall,
        f1: c.f1,
        counts: c.counts,
        n_genuine: scores.genuine.len(),
        n_imposter: scores.imposter.len(),
    };
    Ok(ReportBundle {
        report,
        eer_point,
        roc: roc_curve(&scores)?,
        pr: pr_curve(&scores)?,
        scores,
        warnings,
    })
}

/// Evaluation pairs over `samples`: up to `per_kind` of each kind, every
/// possible pair when fewer exist.
pub fn evaluation_pairs(samples: &[LabeledSample], per_kind: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    let groups = group_by_class(samples);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let budget = pair_budget(&sizes, (per_kind, per_kind), (1, 1, 1));
    let mut pairs = gen_same_pairs(&groups, budget.genuine_requested, seed)?;
    pairs.extend(gen_diff_pairs(&groups, budget.imposter_requested, seed.wrapping_add(1))?);
    Ok(pairs)
}

/// Builds test pairs, scores them, and reports at `threshold` (default: the
/// EER threshold of the test scores).
pub fn full_report(
    state: &NetworkState,
    test: &[LabeledSample],
    inputs: &InputStore,
    per_kind: usize,
    mode: ScoreMode,
    seed: u64,
    threshold: Option<f64>,
) -> Result<ReportBundle> {
    if test.is_empty() {
        return Err(Error::Degenerate("test split is empty".into()));
    }
    let pairs = evaluation_pairs(test, per_kind, seed)?;
    let scores = score_pairs(state, &pairs, inputs, mode)?;
    metrics_report(scores, threshold)
}

/// Reference embeddings per class, indexed by [`Label::index`].
#[derive(Debug, Clone, Default)]
pub struct Gallery {
    pub classes: [Vec<Vec<f32>>; 2],
}

impl Gallery {
    pub fn build(state: &NetworkState, samples: &[LabeledSample], inputs: &InputStore) -> Result<Self> {
        let mut g = Gallery::default();
        for s in samples {
            g.classes[s.label.index()].push(state.embed(inputs.get(&s.id)?)?);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEvidence {
    pub normal: f64,
    pub pothole: f64,
    pub threshold: f64,
    /// Whether the winning class's mean score reaches the threshold.
    pub above_threshold: bool,
}

/// Mean score of `embedding` against each gallery class; the higher class
/// wins and exact ties go to normal.
pub fn classify_embedding(
    state: &NetworkState,
    gallery: &Gallery,
    embedding: &[f32],
    mode: ScoreMode,
    threshold: f64,
) -> Result<(Label, ClassEvidence)> {
    let mut means = [0.0; 2];
    for label in Label::ALL {
        let refs = &gallery.classes[label.index()];
        if refs.is_empty() {
            return Err(Error::Gallery(format!("no references for class `{label}`")));
        }
        let mut sum = 0.0;
        for r in refs {
            sum += pair_score(state, embedding, r, mode)?;
        }
        means[label.index()] = sum / refs.len() as f64;
    }
    let (n, p) = (means[Label::Normal.index()], means[Label::Pothole.index()]);
    let label = if p > n { Label::Pothole } else { Label::Normal };
    Ok((
        label,
        ClassEvidence {
            normal: n,
            pothole: p,
            threshold,
            above_threshold: n.max(p) >= threshold,
        },
    ))
}

pub fn classify_image(
    state: &NetworkState,
    gallery: &Gallery,
    image: &crate::tensor::Tensor<f32>,
    mode: ScoreMode,
    threshold: f64,
) -> Result<(Label, ClassEvidence)> {
    let e = state.embed(image)?;
    classify_embedding(state, gallery, &e, mode, threshold)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,far,tpr\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.far, p.tpr).expect("string write");
    }
    out
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall).expect("string write");
    }
    out
}

/// `score,label` rows, label 1 for genuine.
pub fn scores_csv(scores: &ScoreSet) -> String {
    let mut out = String::from("score,label\n");
    for s in &scores.genuine {
        writeln!(out, "{s},1").expect("string write");
    }
    for s in &scores.imposter {
        writeln!(out, "{s},0").expect("string write");
    }
    out
}

/// Inverse of [`scores_csv`].
pub fn parse_scores_csv(text: &str) -> Result<ScoreSet> {
    let mut scores = ScoreSet::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let (s, l) = line.split_once(',').ok_or_else(|| bad("expected `score,label`"))?;
        let s: f64 = s.parse().map_err(|_| bad("score is not a number"))?;
        match l {
            "1" => scores.genuine.push(s),
            "0" => scores.imposter.push(s),
            _ => return Err(bad("label must be 0 or 1")),
        }
    }
    Ok(scores)
}

/// Writes `<prefix>_roc.csv`, `<prefix>_pr.csv` and `<prefix>_scores.csv`.
pub fn write_curves(bundle: &ReportBundle, prefix: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (suffix, body) in [
        ("roc", roc_csv(&bundle.roc)),
        ("pr", pr_csv(&bundle.pr)),
        ("scores", scores_csv(&bundle.scores)),
    ] {
        let mut name = prefix.file_name().unwrap_or_default().to_os_string();
        name.push(format!("_{suffix}.csv"));
        let path = prefix.with_file_name(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// ROC and PR panels side by side, with the EER operating point marked.
pub fn plot_svg(bundle: &ReportBundle) -> String {
    const SIZE: f64 = 300.0;
    const PAD: f64 = 50.0;
    let panel = |out: &mut String, x0: f64, title: &str, xs: &str, ys: &str, pts: &[(f64, f64)]| {
        let px = |x: f64| x0 + PAD + x * SIZE;
        let py = |y: f64| PAD + (1.0 - y) * SIZE;
        writeln!(
            out,
            r#"<rect x="{}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#,
            x0 + PAD
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="30" text-anchor="middle">{title}</text>"#,
            x0 + PAD + SIZE / 2.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{xs}</text>"#,
            x0 + PAD + SIZE / 2.0,
            PAD + SIZE + 35.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{ys}</text>"#,
            x0 + 20.0,
            PAD + SIZE / 2.0,
            x0 + 20.0,
            PAD + SIZE / 2.0
        )
        .unwrap();
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        )
        .unwrap();
    };
    let r = &bundle.report;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        2.0 * (SIZE + 2.0 * PAD),
        SIZE + 2.0 * PAD
    )
    .unwrap();
    let roc: Vec<(f64, f64)> = bundle.roc.iter().map(|p| (p.far, p.tpr)).collect();
    panel(&mut out, 0.0, &format!("ROC (AUROC {:.4})", r.auroc), "FAR", "TPR", &roc);
    let (ex, ey) = (PAD + bundle.eer_point.far * SIZE, PAD + bundle.eer_point.frr * SIZE);
    writeln!(out, r#"<circle cx="{ex:.2}" cy="{ey:.2}" r="4" fill="crimson"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" fill="crimson">EER {:.2}%</text>"#,
        ex + 8.0,
        ey + 4.0,
        100.0 * r.eer
    )
    .unwrap();
    let mut pr: Vec<(f64, f64)> = vec![(0.0, bundle.pr.first().map_or(1.0, |p| p.precision))];
    pr.extend(bundle.pr.iter().map(|p| (p.recall, p.precision)));
    panel(
        &mut out,
        SIZE + 2.0 * PAD,
        &format!("PR (AUPR {:.4})", r.aupr),
        "Recall",
        "Precision",
        &pr,
    );
    out.push_str("</svg>\n");
    out
}
