//! PNG (8-bit gray/RGB, optional alpha) and binary PGM/PPM.

use std::io::Cursor;
use std::path::Path;

use super::{BinaryImage, ImageBuffer};
use crate::error::{Error, Result};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes PNG, P5 (PGM) or P6 (PPM) content; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pnm(bytes, 1)
    } else if bytes.starts_with(b"P6") {
        decode_pnm(bytes, 3)
    } else if bytes.starts_with(b"\xff\xd8") {
        Err(Error::Decode("JPEG content is not supported".into()))
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(Error::Decode(format!(
            "netpbm variant P{} is not supported (only binary P5/P6)",
            bytes[1] as char
        )))
    } else {
        Err(Error::Decode("unrecognized file signature".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let fail = |e: png::DecodingError| Error::Decode(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fail)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::Decode(format!(
            "png bit depth {depth:?} is not supported (8-bit only)"
        )));
    }
    let (stored, keep) = match color {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Decode(
                "png palette (indexed) color is not supported".into(),
            ))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("png image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut pixels = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(frame.line_size).take(h) {
        for px in row[..w * stored].chunks(stored) {
            pixels.extend(px[..keep].iter().map(|&b| b as f32 / 255.0));
        }
    }
    ImageBuffer::new(h, w, keep, pixels)
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImageBuffer> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode(format!("netpbm header: missing {name}")));
        }
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode(format!("netpbm header: bad {name}")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Decode(format!("netpbm dimensions {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Decode(format!(
            "netpbm maxval {maxval} is not supported (8-bit only)"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("netpbm header: missing separator".into()));
    }
    pos += 1;
    let need = w * h * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Decode(format!(
            "netpbm raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    let scale = maxval as f32;
    let pixels = raster[..need]
        .iter()
        .map(|&b| (b as f32 / scale).min(1.0))
        .collect();
    ImageBuffer::new(h, w, channels, pixels)
}

fn to_bytes(img: &ImageBuffer) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn encode_pgm(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Parameter("PGM needs a single-channel image".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_bytes(img));
    Ok(out)
}

pub fn encode_ppm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let rgb = img.to_rgb();
    let mut out = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
    out.extend(to_bytes(&rgb));
    Ok(out)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Decode(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(fail)?;
        writer.write_image_data(&to_bytes(img)).map_err(fail)?;
        writer.finish().map_err(fail)?;
    }
    Ok(out)
}

/// Writes a mask as PGM with foreground 255 and background 0.
pub fn write_mask_pgm(mask: &BinaryImage, path: &Path) -> Result<()> {
    let bytes = encode_pgm(&mask.to_image())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
