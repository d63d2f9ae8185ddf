//! Global (Otsu) and local (block-mean) thresholding.

use std::cmp::Ordering;

use super::{BinaryImage, ImageBuffer};
use crate::error::{Error, Result};

/// Histogram bin of a `[0,1]` pixel: `floor(p·255 + 0.5)`.
pub fn quantize_bin(p: f32) -> usize {
    ((p as f64 * 255.0 + 0.5).floor() as usize).min(255)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtsuResult {
    pub threshold: u8,
    pub binary: BinaryImage,
}

/// Compares `a/b` with `c/d` exactly, without forming cross products.
fn cmp_fraction(a: u128, b: u128, c: u128, d: u128) -> Ordering {
    let (qa, ra) = (a / b, a % b);
    let (qc, rc) = (c / d, c % d);
    match qa.cmp(&qc) {
        Ordering::Equal => match (ra == 0, rc == 0) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            // ra/b vs rc/d  ⇔  d/rc vs b/ra
            (false, false) => cmp_fraction(d, rc, b, ra),
        },
        other => other,
    }
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Class 0 holds bins `≤ t`, class 1 bins `> t`, for `t ∈ [0, 254]`. The
/// between-class variance is compared exactly in integer arithmetic via
/// `N²·σ_b²(t) = (n₁s₀ − n₀s₁)² / (n₀n₁)`; ties go to the smallest `t`.
/// An image occupying a single bin has no separable classes and yields
/// threshold 0 with every pixel in the background.
pub fn otsu_threshold(img: &ImageBuffer) -> Result<OtsuResult> {
    if img.channels() != 1 {
        return Err(Error::Parameter(format!(
            "otsu thresholding needs a grayscale image, got {} channels",
            img.channels()
        )));
    }
    let bins: Vec<usize> = img.pixels().iter().map(|&p| quantize_bin(p)).collect();
    let mut hist = [0u128; 256];
    for &b in &bins {
        hist[b] += 1;
    }
    let total: u128 = hist.iter().sum();
    let weighted: u128 = hist.iter().enumerate().map(|(i, &h)| i as u128 * h).sum();

    if hist.iter().filter(|&&h| h > 0).count() <= 1 {
        let binary = BinaryImage::new(img.height(), img.width(), vec![false; bins.len()])?;
        return Ok(OtsuResult {
            threshold: 0,
            binary,
        });
    }

    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best_t = 0usize;
    let mut best = (0u128, 1u128);
    for (t, &count) in hist.iter().enumerate().take(255) {
        n0 += count;
        s0 += t as u128 * count;
        let n1 = total - n0;
        let s1 = weighted - s0;
        let score = if n0 == 0 || n1 == 0 {
            (0, 1)
        } else {
            let diff = (n1 * s0).abs_diff(n0 * s1);
            (diff * diff, n0 * n1)
        };
        if cmp_fraction(score.0, score.1, best.0, best.1) == Ordering::Greater {
            best = score;
            best_t = t;
        }
    }
    let binary = BinaryImage::new(
        img.height(),
        img.width(),
        bins.iter().map(|&b| b > best_t).collect(),
    )?;
    Ok(OtsuResult {
        threshold: best_t as u8,
        binary,
    })
}

const FIXED_ONE: f64 = 4_294_967_296.0; // 2^32

fn to_fixed(v: f64) -> i128 {
    (v * FIXED_ONE).round() as i128
}

/// Local-mean thresholding: a pixel is foreground when it exceeds the mean of
/// its `block×block` neighbourhood (borders replicated) minus `c`.
///
/// Neighbourhood sums are formed on a 2⁻³² fixed-point grid so equal values
/// compare equal regardless of summation order.
pub fn adaptive_threshold(img: &ImageBuffer, block: usize, c: f64) -> Result<BinaryImage> {
    if img.channels() != 1 {
        return Err(Error::Parameter(format!(
            "adaptive thresholding needs a grayscale image, got {} channels",
            img.channels()
        )));
    }
    if block < 3 || block % 2 == 0 {
        return Err(Error::Parameter(format!(
            "block size {block} must be odd and at least 3"
        )));
    }
    if !c.is_finite() {
        return Err(Error::Parameter(format!("offset {c} must be finite")));
    }
    let (h, w) = (img.height(), img.width());
    let r = block / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let fixed: Vec<i128> = img.pixels().iter().map(|&p| to_fixed(p as f64)).collect();
    let at = |y: usize, x: usize| {
        let sy = y.saturating_sub(r).min(h - 1);
        let sx = x.saturating_sub(r).min(w - 1);
        fixed[sy * w + sx]
    };
    // integral[y][x] = sum of padded[0..y, 0..x]
    let stride = pw + 1;
    let mut integral = vec![0i128; (ph + 1) * stride];
    for y in 0..ph {
        let mut row = 0i128;
        for x in 0..pw {
            row += at(y, x);
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let count = (block * block) as i128;
    let offset = to_fixed(c);
    let bits = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            // padded window rows y..y+block, cols x..x+block
            let sum = integral[(y + block) * stride + x + block] - integral[y * stride + x + block]
                - integral[(y + block) * stride + x]
                + integral[y * stride + x];
            fixed[y * w + x] * count > sum - offset * count
        })
        .collect();
    BinaryImage::new(h, w, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, px: Vec<f32>) -> ImageBuffer {
        ImageBuffer::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn fraction_comparison() {
        assert_eq!(cmp_fraction(1, 3, 2, 6), Ordering::Equal);
        assert_eq!(cmp_fraction(1, 3, 1, 2), Ordering::Less);
        assert_eq!(cmp_fraction(7, 2, 10, 3), Ordering::Greater);
        assert_eq!(cmp_fraction(0, 1, 0, 5), Ordering::Equal);
        assert_eq!(
            cmp_fraction(u128::MAX - 1, u128::MAX, u128::MAX - 2, u128::MAX - 1),
            Ordering::Greater
        );
    }

    #[test]
    fn otsu_constant_image() {
        let r = otsu_threshold(&gray(2, 2, vec![0.4; 4])).unwrap();
        assert_eq!(r.threshold, 0);
        assert_eq!(r.binary.foreground_count(), 0);
    }

    #[test]
    fn otsu_two_valued() {
        let r = otsu_threshold(&gray(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(r.threshold, 0);
        assert_eq!(r.binary.bits(), &[false, true, true, false]);
    }

    #[test]
    fn otsu_two_modes() {
        let px = [10u8, 10, 10, 200, 200].map(|v| v as f32 / 255.0).to_vec();
        let r = otsu_threshold(&gray(1, 5, px)).unwrap();
        assert_eq!(r.threshold, 10);
        assert_eq!(r.binary.bits(), &[false, false, false, true, true]);
    }

    #[test]
    fn otsu_rejects_color() {
        let rgb = ImageBuffer::filled(1, 1, 3, 0.5).unwrap();
        assert!(otsu_threshold(&rgb).is_err());
    }

    #[test]
    fn adaptive_constant() {
        let img = gray(3, 4, vec![0.6; 12]);
        assert_eq!(adaptive_threshold(&img, 3, 0.0).unwrap().foreground_count(), 0);
        assert_eq!(adaptive_threshold(&img, 3, 0.01).unwrap().foreground_count(), 12);
    }

    #[test]
    fn adaptive_bad_block() {
        let img = gray(3, 3, vec![0.0; 9]);
        assert!(matches!(adaptive_threshold(&img, 4, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(adaptive_threshold(&img, 1, 0.0), Err(Error::Parameter(_))));
    }

    /// Direct neighbourhood mean with clamped coordinates.
    fn brute_adaptive(img: &ImageBuffer, block: usize, c: f64) -> Vec<bool> {
        let (h, w) = (img.height() as isize, img.width() as isize);
        let r = (block / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y + dy).clamp(0, h - 1) as usize;
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        sum += img.get(sy, sx, 0) as f64;
                    }
                }
                let mean = sum / (block * block) as f64;
                out.push(img.get(y as usize, x as usize, 0) as f64 > mean - c);
            }
        }
        out
    }

    #[test]
    fn adaptive_bright_centre() {
        let mut px = vec![0.2f32; 25];
        px[12] = 0.9;
        let img = gray(5, 5, px);
        let got = adaptive_threshold(&img, 3, 0.0).unwrap();
        assert_eq!(got.bits(), brute_adaptive(&img, 3, 0.0).as_slice());
        assert!(got.bits()[12]);
        assert_eq!(got.foreground_count(), 1);
    }

    proptest! {
        #[test]
        fn adaptive_matches_brute_force(
            h in 1usize..8, w in 1usize..8, block in prop::sample::select(vec![3usize, 5, 7]),
            levels in prop::collection::vec(0u8..=255, 64), c in -0.1f64..0.1,
        ) {
            let px: Vec<f32> = levels.iter().take(h * w).map(|&b| b as f32 / 255.0).collect();
            prop_assume!(px.len() == h * w);
            let img = gray(h, w, px);
            let got = adaptive_threshold(&img, block, c).unwrap();
            let want = brute_adaptive(&img, block, c);
            prop_assert_eq!(got.bits(), want.as_slice());
        }

        #[test]
        fn adaptive_large_block_is_global_mean(
            h in 1usize..9, w in 1usize..9, lo in 0.0f32..0.4, hi in 0.6f32..1.0,
            pattern in prop::collection::vec(any::<bool>(), 81),
        ) {
            let mut bits: Vec<bool> = pattern.into_iter().take(h * w).collect();
            bits[0] = true;
            if bits.len() > 1 { bits[1] = false; }
            prop_assume!(bits.iter().any(|b| !b));
            let px: Vec<f32> = bits.iter().map(|&b| if b { hi } else { lo }).collect();
            let mean = px.iter().map(|&p| p as f64).sum::<f64>() / px.len() as f64;
            let img = gray(h, w, px.clone());
            let block = 2 * h.max(w) + 1;
            let got = adaptive_threshold(&img, block, 0.0).unwrap();
            let global: Vec<bool> = px.iter().map(|&p| p as f64 > mean).collect();
            prop_assert_eq!(got.bits(), global.as_slice());
        }
    }
}
