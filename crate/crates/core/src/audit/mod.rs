//! Self-verification suites: finite-difference gradients, the Otsu sweep,
//! metric oracles, and pair enumeration.

pub mod gradcheck;
pub mod oracles;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    Otsu,
    Metrics,
    Pairs,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Suite> {
        Some(match s {
            "gradcheck" => Suite::Gradcheck,
            "otsu" => Suite::Otsu,
            "metrics" => Suite::Metrics,
            "pairs" => Suite::Pairs,
            "all" => Suite::All,
            _ => return None,
        })
    }
}

/// The first failing instance, with its inputs as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub message: String,
    pub inputs: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub instances: usize,
    /// Largest observed error (or mismatch count for exact suites).
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub failure: Option<Failure>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct AuditOptions {
    pub seed: u64,
    pub grad_instances: usize,
    pub otsu_images: usize,
    pub metric_sets: usize,
    pub pair_total: usize,
    /// Gradient case whose analytic gradient is scaled by `1 + 1e-2`.
    pub perturb: Option<String>,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            seed: 20_240_601,
            grad_instances: 50,
            otsu_images: 120,
            metric_sets: 1000,
            pair_total: 50,
            perturb: None,
        }
    }
}

fn timed(mut r: CaseResult, started: Instant) -> CaseResult {
    r.seconds = started.elapsed().as_secs_f64();
    r
}

pub fn run_suite(suite: Suite, opts: &AuditOptions) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let want = |s: Suite| suite == s || suite == Suite::All;
    if want(Suite::Gradcheck) {
        for case in gradcheck::cases() {
            let perturb = if opts.perturb.as_deref() == Some(case.name) { 1e-2 } else { 0.0 };
            out.push(gradcheck::check_case(&case, opts.grad_instances, opts.seed, perturb)?);
        }
    }
    if want(Suite::Otsu) {
        let t = Instant::now();
        out.push(timed(oracles::check_otsu(opts.otsu_images, opts.seed), t));
    }
    if want(Suite::Metrics) {
        let t = Instant::now();
        let rs = oracles::check_metrics(opts.metric_sets, opts.seed);
        let share = t.elapsed().as_secs_f64() / rs.len() as f64;
        out.extend(rs.into_iter().map(|mut r| {
            r.seconds = share;
            r
        }));
    }
    if want(Suite::Pairs) {
        let t = Instant::now();
        let rs = oracles::check_pairs(opts.pair_total);
        let share = t.elapsed().as_secs_f64() / rs.len() as f64;
        out.extend(rs.into_iter().map(|mut r| {
            r.seconds = share;
            r
        }));
    }
    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CaseResult]) -> String {
    let mut out = format!(
        "{:<10} {:<34} {:>9} {:>11} {:>8}  status\n",
        "suite", "case", "instances", "worst", "seconds"
    );
    for r in results {
        writeln!(
            out,
            "{:<10} {:<34} {:>9} {:>11.3e} {:>8.2}  {}",
            r.suite,
            r.case,
            r.instances,
            r.worst,
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" }
        )
        .expect("string write");
    }
    out
}
