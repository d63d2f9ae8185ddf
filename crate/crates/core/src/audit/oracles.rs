//! Brute-force oracles for thresholding, metrics, and pair accounting.

use std::collections::HashSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CaseResult, Failure};
use crate::data::{gen_diff_pairs, gen_same_pairs, pair_budget};
use crate::evaluation::{compute_aupr, compute_auroc, compute_eer, far_frr, ScoreSet};
use crate::imaging::{otsu_threshold, quantize_bin, ImageBuffer};

fn result(suite: &'static str, case: &str, instances: usize, worst: f64, tolerance: f64) -> CaseResult {
    CaseResult {
        suite,
        case: case.to_string(),
        instances,
        worst,
        tolerance,
        seconds: 0.0,
        failure: None,
    }
}

fn fail<T: Serialize>(r: &mut CaseResult, message: String, inputs: &T) {
    if r.failure.is_none() {
        r.failure = Some(Failure {
            message,
            inputs: serde_json::to_string(inputs).expect("serializable"),
        });
    }
}

/// Exhaustive Otsu: `σ_b² = w₀w₁(μ₀ − μ₁)²` in exact rationals at every
/// `t ∈ [0, 254]` (class 1 is `bin > t`), largest wins, ties to the lowest
/// `t`; an image with no separating `t` is all background at 0.
pub fn otsu_oracle(img: &ImageBuffer) -> (u8, Vec<bool>) {
    let bins: Vec<usize> = img.pixels().iter().map(|&p| quantize_bin(p)).collect();
    let n = BigRational::from_integer(BigInt::from(bins.len()));
    let mut best: Option<(BigRational, usize)> = None;
    for t in 0..255 {
        let (c0, c1): (Vec<usize>, Vec<usize>) = bins.iter().partition(|&&b| b <= t);
        let var = if c0.is_empty() || c1.is_empty() {
            BigRational::zero()
        } else {
            let mean = |c: &[usize]| {
                BigRational::new(
                    BigInt::from(c.iter().sum::<usize>()),
                    BigInt::from(c.len()),
                )
            };
            let w0 = BigRational::from_integer(BigInt::from(c0.len())) / &n;
            let w1 = BigRational::from_integer(BigInt::from(c1.len())) / &n;
            let gap = mean(&c0) - mean(&c1);
            w0 * w1 * &gap * &gap
        };
        if best.as_ref().is_none_or(|(b, _)| var > *b) {
            best = Some((var, t));
        }
    }
    let (var, t) = best.expect("255 candidates");
    if var.is_zero() {
        return (0, vec![false; bins.len()]);
    }
    (t as u8, bins.iter().map(|&b| b > t).collect())
}

#[derive(Serialize)]
struct ImageCase {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// The k-th test image: constant, two-valued, bimodal, or uniform noise.
pub fn otsu_image(k: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
    let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
    let n = h * w;
    let pixels: Vec<f32> = match k % 4 {
        0 => vec![rng.gen::<f32>(); n],
        1 => {
            let (a, b) = (rng.gen::<f32>(), rng.gen::<f32>());
            (0..n).map(|_| if rng.gen_bool(0.5) { a } else { b }).collect()
        }
        2 => {
            let (m0, m1) = (rng.gen_range(0.1..0.4f32), rng.gen_range(0.6..0.9f32));
            (0..n)
                .map(|_| {
                    let m = if rng.gen_bool(0.4) { m0 } else { m1 };
                    (m + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0)
                })
                .collect()
        }
        _ => (0..n).map(|_| rng.gen::<f32>()).collect(),
    };
    ImageBuffer::new(h, w, 1, pixels).expect("sized image")
}

pub fn check_otsu(images: usize, seed: u64) -> CaseResult {
    let mut r = result("otsu", "exhaustive sweep", images, 0.0, 0.0);
    let mut mismatches = 0;
    for k in 0..images {
        let img = otsu_image(k, seed);
        let got = otsu_threshold(&img).expect("grayscale");
        let (t, bits) = otsu_oracle(&img);
        if got.threshold != t || got.binary.bits() != bits.as_slice() {
            mismatches += 1;
            fail(
                &mut r,
                format!("image {k}: threshold {} vs oracle {t}", got.threshold),
                &ImageCase {
                    height: img.height(),
                    width: img.width(),
                    pixels: img.pixels().to_vec(),
                },
            );
        }
    }
    r.worst = mismatches as f64;
    r
}

/// `(Σ [g > i] + ½[g = i]) / (|G|·|I|)` by direct pair enumeration.
pub fn mann_whitney(s: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    for g in &s.genuine {
        for i in &s.imposter {
            wins += if g > i {
                1.0
            } else if g == i {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (s.genuine.len() * s.imposter.len()) as f64
}

/// Mean over genuine scores of the precision of the prefix `{score ≥ g}`.
pub fn prefix_average_precision(s: &ScoreSet) -> f64 {
    let mut sum = 0.0;
    for g in &s.genuine {
        let tp = s.genuine.iter().filter(|x| *x >= g).count();
        let fp = s.imposter.iter().filter(|x| *x >= g).count();
        sum += tp as f64 / (tp + fp) as f64;
    }
    sum / s.genuine.len() as f64
}

/// Random score set with 2–200 scores in total; when `ties`, scores are
/// drawn from ten levels.
pub fn random_scores(rng: &mut ChaCha8Rng, ties: bool) -> ScoreSet {
    let (ng, ni) = (rng.gen_range(1..=100), rng.gen_range(1..=100));
    let shift = rng.gen_range(0.0..1.5);
    let mut draw = |offset: f64| {
        let v: f64 = rng.gen::<f64>() + offset;
        if ties {
            (v * 10.0).floor() / 10.0
        } else {
            v
        }
    };
    let genuine = (0..ng).map(|_| draw(shift)).collect();
    let imposter = (0..ni).map(|_| draw(0.0)).collect();
    ScoreSet::new(genuine, imposter)
}

pub const METRIC_TOLERANCE: f64 = 1e-9;

/// AUROC and AUPR against their oracles, the EER gap bound, rank invariance,
/// and FAR/FRR monotonicity over `sets` random score sets.
pub fn check_metrics(sets: usize, seed: u64) -> Vec<CaseResult> {
    let mut auroc = result("metrics", "auroc vs mann-whitney", sets, 0.0, METRIC_TOLERANCE);
    let mut aupr = result("metrics", "aupr vs prefix enumeration", sets, 0.0, METRIC_TOLERANCE);
    let mut eer = result("metrics", "eer gap bound", sets, 0.0, 0.0);
    let mut rank = result("metrics", "rank invariance", sets, 0.0, METRIC_TOLERANCE);
    let mut mono = result("metrics", "far/frr monotone", sets, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..sets {
        // every other set carries heavy ties
        let s = random_scores(&mut rng, k % 2 == 1);
        let a = compute_auroc(&s).expect("valid set");
        let e = (a - mann_whitney(&s)).abs();
        auroc.worst = auroc.worst.max(e);
        if !(e <= METRIC_TOLERANCE) {
            fail(&mut auroc, format!("set {k}: auroc off by {e:e}"), &s);
        }
        let p = compute_aupr(&s).expect("valid set");
        let e = (p - prefix_average_precision(&s)).abs();
        aupr.worst = aupr.worst.max(e);
        if !(e <= METRIC_TOLERANCE) {
            fail(&mut aupr, format!("set {k}: aupr off by {e:e}"), &s);
        }
        let pt = compute_eer(&s).expect("valid set");
        let bound = 1.0 / s.genuine.len().min(s.imposter.len()) as f64;
        let gap = (pt.far - pt.frr).abs();
        // ties can force jumps larger than one sample; the bound is a
        // property of tie-free sets
        if k % 2 == 0 {
            eer.worst = eer.worst.max(gap - bound);
            if gap > bound + 1e-12 {
                fail(&mut eer, format!("set {k}: |far − frr| = {gap} > {bound}"), &s);
            }
        }
        let warp = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        let t = ScoreSet::new(warp(&s.genuine), warp(&s.imposter));
        let te = compute_eer(&t).expect("valid set");
        let e = (compute_auroc(&t).unwrap() - a)
            .abs()
            .max((compute_aupr(&t).unwrap() - p).abs())
            .max((te.eer - pt.eer).abs());
        rank.worst = rank.worst.max(e);
        if !(e <= METRIC_TOLERANCE) {
            fail(&mut rank, format!("set {k}: metrics move under a monotone map by {e:e}"), &s);
        }
        let mut thresholds: Vec<f64> = s.genuine.iter().chain(&s.imposter).copied().collect();
        thresholds.push(f64::NEG_INFINITY);
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(f64::total_cmp);
        let rates: Vec<(f64, f64)> = thresholds.iter().map(|&t| far_frr(&s, t).unwrap()).collect();
        if rates.windows(2).any(|w| w[1].0 > w[0].0 || w[1].1 < w[0].1) {
            mono.worst = 1.0;
            fail(&mut mono, format!("set {k}: rates not monotone"), &s);
        }
    }
    vec![auroc, aupr, eer, rank, mono]
}

/// Pair counts by enumerating every unordered index pair.
pub fn brute_pair_counts(sizes: &[usize]) -> (usize, usize) {
    let class: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let (mut same, mut diff) = (0, 0);
    for i in 0..class.len() {
        for j in i + 1..class.len() {
            if class[i] == class[j] {
                same += 1;
            } else {
                diff += 1;
            }
        }
    }
    (same, diff)
}

/// Budget counts against enumeration for every two-class vector with total
/// ≤ `max_total` and every three-class vector with total ≤ 20, the 280/280
/// profile, and sampler exhaustiveness on small groups.
pub fn check_pairs(max_total: usize) -> Vec<CaseResult> {
    let mut vectors: Vec<Vec<usize>> = Vec::new();
    for a in 0..=max_total {
        for b in 0..=max_total - a {
            vectors.push(vec![a, b]);
        }
    }
    for a in 0..=20 {
        for b in 0..=20 - a {
            for c in 0..=20 - a - b {
                vectors.push(vec![a, b, c]);
            }
        }
    }
    let mut counts = result("pairs", "budget vs enumeration", vectors.len() + 1, 0.0, 0.0);
    for sizes in &vectors {
        let b = pair_budget(sizes, (0, 0), (1, 1, 1));
        if (b.genuine_possible, b.imposter_possible) != brute_pair_counts(sizes) {
            counts.worst = 1.0;
            fail(&mut counts, format!("sizes {sizes:?}"), sizes);
        }
    }
    let profile = pair_budget(&[280, 280], (100_000, 100_000), (1, 1, 1));
    if (profile.genuine_possible, profile.imposter_possible) != (78_120, 78_400) {
        counts.worst = 1.0;
        fail(&mut counts, "280/280 profile".into(), &[280, 280]);
    }

    let mut sampler = result("pairs", "samplers exhaustive and distinct", 0, 0.0, 0.0);
    for sizes in vectors.iter().filter(|v| v.iter().sum::<usize>() <= 12) {
        sampler.instances += 1;
        let groups: Vec<Vec<String>> = sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| (0..n).map(|i| format!("c{c}_{i:02}")).collect())
            .collect();
        let (same, diff) = brute_pair_counts(sizes);
        let ok = (|| {
            let s = gen_same_pairs(&groups, same, 3).ok()?;
            let d = gen_diff_pairs(&groups, diff, 3).ok()?;
            let keys: HashSet<(String, String)> = s.iter().chain(&d).map(|p| (p.a.clone(), p.b.clone())).collect();
            let labels_ok = s.iter().all(|p| p.label == 1 && p.a[..3] == p.b[..3] && p.a < p.b)
                && d.iter().all(|p| p.label == 0 && p.a[..3] != p.b[..3] && p.a < p.b);
            let over = gen_same_pairs(&groups, same + 1, 3).is_err() && gen_diff_pairs(&groups, diff + 1, 3).is_err();
            Some(keys.len() == same + diff && labels_ok && over)
        })()
        .unwrap_or(false);
        if !ok {
            sampler.worst = 1.0;
            fail(&mut sampler, format!("sizes {sizes:?}"), sizes);
        }
    }
    vec![counts, sampler]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        let img = ImageBuffer::new(1, 5, 1, vec![10.0 / 255.0, 10.0 / 255.0, 10.0 / 255.0, 200.0 / 255.0, 200.0 / 255.0])
            .unwrap();
        assert_eq!(otsu_oracle(&img).0, 10);
        let flat = ImageBuffer::filled(3, 3, 1, 0.7).unwrap();
        assert_eq!(otsu_oracle(&flat), (0, vec![false; 9]));
        let s = ScoreSet::new(vec![0.8, 0.4], vec![0.6, 0.2]);
        assert_eq!(mann_whitney(&s), 0.75);
        let s = ScoreSet::new(vec![0.8, 0.4], vec![0.6]);
        assert!((prefix_average_precision(&s) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(brute_pair_counts(&[2, 3]), (4, 6));
    }

    #[test]
    fn small_suites_pass() {
        assert!(check_otsu(24, 5).passed());
        assert!(check_metrics(40, 5).iter().all(CaseResult::passed));
        assert!(check_pairs(12).iter().all(CaseResult::passed));
    }
}
