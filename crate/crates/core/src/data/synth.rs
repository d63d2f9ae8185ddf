//! Procedural asphalt textures with and without potholes.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Label;
use crate::error::{Error, Result};
use crate::imaging::{encode_png, BinaryImage, ImageBuffer};

/// One generated image; `mask` marks the pothole interior.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: ImageBuffer,
    pub mask: Option<BinaryImage>,
}

/// Smoothly interpolated lattice noise with `cells × cells` lattice cells.
fn value_noise<R: Rng>(rng: &mut R, side: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let gy = y as f64 / side as f64 * cells as f64;
        let (iy, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..side {
            let gx = x as f64 / side as f64 * cells as f64;
            let (ix, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |r: usize, c: usize| lattice[r * (cells + 1) + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty - 0.5);
        }
    }
    out
}

/// Generates one image from `rng`.
pub fn synth_image<R: Rng>(label: Label, side: usize, rng: &mut R) -> SynthImage {
    let base = rng.gen_range(0.38..0.58);
    let mut gray = vec![base; side * side];
    for (cells, amp) in [(2, 0.10), (4, 0.07), (8, 0.05), (side / 2, 0.04)] {
        let noise = value_noise(rng, side, cells.max(1));
        for (g, n) in gray.iter_mut().zip(noise) {
            *g += amp * n;
        }
    }
    // painted lane marking
    if rng.gen_bool(0.3) {
        let angle = rng.gen_range(-0.4f64..0.4) + std::f64::consts::FRAC_PI_2;
        let offset = rng.gen_range(0.2..0.8) * side as f64;
        let half_width = rng.gen_range(0.02..0.05) * side as f64;
        let (s, c) = angle.sin_cos();
        let brightness = rng.gen_range(0.25..0.4);
        for y in 0..side {
            for x in 0..side {
                let d = (x as f64 - offset) * s - (y as f64 - side as f64 / 2.0) * c;
                let w = (1.0 - (d.abs() - half_width).max(0.0)).clamp(0.0, 1.0);
                gray[y * side + x] += brightness * w;
            }
        }
    }
    let mut mask = None;
    if label == Label::Pothole {
        let sf = side as f64;
        let cx = rng.gen_range(0.3..0.7) * sf;
        let cy = rng.gen_range(0.3..0.7) * sf;
        let ax = rng.gen_range(0.14..0.3) * sf;
        let ay = rng.gen_range(0.12..0.25) * sf;
        let rot = rng.gen_range(0.0..std::f64::consts::PI);
        let harmonics: Vec<(f64, f64)> = (2..5)
            .map(|k| (rng.gen_range(0.0..0.12) / k as f64 * 2.0, rng.gen_range(0.0..6.3)))
            .collect();
        let depth = rng.gen_range(0.4..0.7);
        let rim = 2.0 / ax.min(ay);
        let (s, c) = rot.sin_cos();
        let mut bits = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = ((dx * c + dy * s) / ax, (-dx * s + dy * c) / ay);
                let theta = v.atan2(u);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, (a, phase))| a * ((k + 2) as f64 * theta + phase).sin())
                    .sum();
                let r = (u * u + v * v).sqrt() / (1.0 + wobble);
                // 1 inside, 0 outside, linear over the rim band
                let w = ((1.0 - r) / rim + 0.5).clamp(0.0, 1.0);
                let i = y * side + x;
                gray[i] *= 1.0 - depth * w;
                bits[i] = r < 1.0;
            }
        }
        mask = Some(BinaryImage::new(side, side, bits).expect("sized mask"));
    }
    let tint = [
        rng.gen_range(0.97..1.03),
        rng.gen_range(0.97..1.03),
        rng.gen_range(0.97..1.03),
    ];
    let pixels = gray
        .iter()
        .flat_map(|g| tint.map(|t| (g * t).clamp(0.0, 1.0) as f32))
        .collect();
    SynthImage {
        image: ImageBuffer::new(side, side, 3, pixels).expect("valid synthetic image"),
        mask,
    }
}

/// Writes `per_class` PNGs into each of `out/normal/` and `out/potholes/`.
/// Image `i` of a class depends only on `(seed, class, i)`.
pub fn gen_synthetic_dataset(per_class: usize, side: usize, seed: u64, out: &Path) -> Result<Vec<String>> {
    if per_class == 0 {
        return Err(Error::Parameter("per-class count must be at least 1".into()));
    }
    if side < 32 {
        return Err(Error::Parameter(format!("image side {side} must be at least 32")));
    }
    let mut written = Vec::new();
    for label in Label::ALL {
        let dir = out.join(label.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((label.index() as u64) << 32) | i as u64);
            let img = synth_image(label, side, &mut rng);
            let name = format!("{}_{i:04}.png", label.as_str());
            let path = dir.join(&name);
            std::fs::write(&path, encode_png(&img.image)?).map_err(|e| Error::io(&path, e))?;
            written.push(format!("{}/{name}", label.dir_name()));
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset_directory;

    #[test]
    fn layout_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files = gen_synthetic_dataset(10, 32, 5, a.path()).unwrap();
        gen_synthetic_dataset(10, 32, 5, b.path()).unwrap();
        assert_eq!(files.len(), 20);
        assert_eq!(load_dataset_directory(a.path()).unwrap().samples.len(), 20);
        for f in &files {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        assert!(gen_synthetic_dataset(0, 32, 5, a.path()).is_err());
        assert!(gen_synthetic_dataset(1, 16, 5, a.path()).is_err());
    }

    #[test]
    fn pothole_interior_is_darker() {
        for i in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let s = synth_image(Label::Pothole, 48, &mut rng);
            let mask = s.mask.unwrap();
            let gray = crate::imaging::to_grayscale(&s.image);
            let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
            for (p, &m) in gray.pixels().iter().zip(mask.bits()) {
                let acc = if m { &mut inside } else { &mut outside };
                acc.0 += *p as f64;
                acc.1 += 1;
            }
            assert!(inside.1 > 0 && outside.1 > 0);
            assert!(inside.0 / inside.1 as f64 <= outside.0 / outside.1 as f64, "seed {i}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_image(Label::Normal, 32, &mut rng).mask.is_none());
    }
}
