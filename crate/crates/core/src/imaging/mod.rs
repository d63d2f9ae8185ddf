//! Image buffers and preprocessing: decoding, resizing, grayscale conversion,
//! Otsu and adaptive thresholding, and normalization into network tensors.

mod codec;
mod threshold;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use codec::{decode_image, encode_pgm, encode_png, encode_ppm, read_image, write_mask_pgm};
pub use threshold::{adaptive_threshold, otsu_threshold, quantize_bin, OtsuResult};

/// Row-major, channel-interleaved pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions {height}x{width} must be positive"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Parameter(format!(
                "images have 1 or 3 channels, not {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::dim(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Parameter(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Replicates a single channel into RGB; RGB images are returned as is.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&p| [p, p, p]).collect();
        ImageBuffer {
            channels: 3,
            pixels,
            ..*self
        }
    }
}

/// Foreground/background bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} bitmap needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BinaryImage {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Foreground as 1.0, background as 0.0, single channel.
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            pixels: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Bilinear resize using the half-pixel-centre mapping
/// `src = (dst + 0.5)·(in/out) − 0.5`, clamped to the border.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, img.height);
    let cols = taps(out_w, img.width);
    let c = img.channels;
    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let p = |y: usize, x: usize| img.get(y, x, ch) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(out_h, out_w, c, pixels)
}

/// ITU-R BT.601 luma; single-channel input passes through.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks(3)
        .map(|px| {
            let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            (luma as f32).clamp(0.0, 1.0)
        })
        .collect();
    ImageBuffer {
        channels: 1,
        pixels,
        ..*img
    }
}

/// `(pixel − mean_c) / std_c`, laid out as `[C, H, W]`.
pub fn normalize_image(img: &ImageBuffer, mean: &[f32], std: &[f32]) -> Result<Tensor<f32>> {
    let c = img.channels;
    if mean.len() != c || std.len() != c {
        return Err(Error::Parameter(format!(
            "normalization needs {c} means and stds, got {} and {}",
            mean.len(),
            std.len()
        )));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Parameter(format!("standard deviation {s} must be positive")));
    }
    let plane = img.height * img.width;
    let mut out = vec![0.0f32; c * plane];
    for (i, px) in img.pixels.chunks(c).enumerate() {
        for ch in 0..c {
            out[ch * plane + i] = (px[ch] - mean[ch]) / std[ch];
        }
    }
    Tensor::new(vec![c, img.height, img.width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resize_examples() {
        let one = ImageBuffer::new(1, 1, 3, vec![0.2, 0.4, 0.6]).unwrap();
        let big = resize_bilinear(&one, 3, 5).unwrap();
        assert_eq!((big.height(), big.width()), (3, 5));
        for px in big.pixels().chunks(3) {
            assert_eq!(px, &[0.2, 0.4, 0.6]);
        }

        let row = ImageBuffer::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let wide = resize_bilinear(&row, 1, 4).unwrap();
        assert_eq!(wide.pixels(), &[0.0, 0.25, 0.75, 1.0]);

        let img = ImageBuffer::new(2, 3, 1, vec![0.1, 0.9, 0.3, 0.5, 0.7, 0.2]).unwrap();
        let same = resize_bilinear(&img, 2, 3).unwrap();
        for (a, b) in same.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn grayscale_examples() {
        let white = ImageBuffer::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(to_grayscale(&white).pixels(), &[1.0]);
        let red = ImageBuffer::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).pixels()[0] - 0.299).abs() < 1e-7);
        let gray = ImageBuffer::new(1, 2, 1, vec![0.3, 0.8]).unwrap();
        assert_eq!(to_grayscale(&gray), gray);
    }

    #[test]
    fn normalize_examples() {
        let img = ImageBuffer::new(1, 2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0]).unwrap();
        let t = normalize_image(&img, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.values(), &[0.0, 1.0, 0.5, 0.5, 1.0, 0.0]);

        let t = normalize_image(&img, &[0.5; 3], &[0.5; 3]).unwrap();
        assert_eq!(t.values(), &[-1.0, 1.0, 0.0, 0.0, 1.0, -1.0]);

        let flat = ImageBuffer::filled(2, 2, 1, 0.25).unwrap();
        let t = normalize_image(&flat, &[0.25], &[0.1]).unwrap();
        assert!(t.values().iter().all(|v| *v == 0.0));

        assert!(matches!(
            normalize_image(&flat, &[0.0], &[0.0]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn invalid_buffers() {
        assert!(ImageBuffer::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    fn image_strategy() -> impl Strategy<Value = ImageBuffer> {
        (1usize..7, 1usize..7, prop::sample::select(vec![1usize, 3])).prop_flat_map(
            |(h, w, c)| {
                prop::collection::vec(0.0f32..=1.0, h * w * c)
                    .prop_map(move |px| ImageBuffer::new(h, w, c, px).unwrap())
            },
        )
    }

    proptest! {
        #[test]
        fn resize_stays_in_input_range(img in image_strategy(), oh in 1usize..12, ow in 1usize..12) {
            let out = resize_bilinear(&img, oh, ow).unwrap();
            for ch in 0..img.channels() {
                let chan = |im: &ImageBuffer| -> Vec<f32> {
                    im.pixels().iter().skip(ch).step_by(im.channels()).copied().collect()
                };
                let src = chan(&img);
                let lo = src.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                for v in chan(&out) {
                    prop_assert!(v >= lo && v <= hi);
                }
            }
        }

        #[test]
        fn grayscale_in_unit_range(img in image_strategy()) {
            let g = to_grayscale(&img);
            prop_assert_eq!(g.channels(), 1);
            prop_assert!(g.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert_eq!(to_grayscale(&g), g.clone());
        }
    }
}
