//! Verification metrics and reports.

mod metrics;
mod report;

pub use metrics::{
    classify_report, compute_aupr, compute_auroc, compute_eer, far_frr, pr_curve, roc_curve, Classification, Counts,
    EerPoint, PrPoint, RocPoint, ScoreSet,
};
pub use report::{
    classify_embedding, classify_image, evaluation_pairs, full_report, metrics_report, pair_score, parse_scores_csv,
    plot_svg, pr_csv, roc_csv, score_embedded_pairs, score_pairs, scores_csv, write_curves, ClassEvidence, Gallery,
    MetricsReport, ReportBundle,
};
