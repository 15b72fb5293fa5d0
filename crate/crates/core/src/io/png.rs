//! PNG images (8/16-bit, non-interlaced) and KITTI 16-bit disparity maps.

use std::io::Cursor;

use crate::disparity::{DisparityField, Resolution};
use crate::error::{Error, Result};
use crate::grid::Image;

/// Raw decoded samples, row-major with channels interleaved.
pub struct RawPng {
    pub width: usize,
    pub height: usize,
    pub color: png::ColorType,
    pub depth: png::BitDepth,
    pub samples: Vec<u16>,
}

impl RawPng {
    pub fn channels(&self) -> usize {
        self.color.samples()
    }
}

fn err(reason: impl Into<String>) -> Error {
    Error::format("png", reason)
}

pub fn decode_png(bytes: &[u8]) -> Result<RawPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let info = reader.info();
    if info.interlaced {
        return Err(err("interlaced images are not supported"));
    }
    if info.color_type == png::ColorType::Indexed {
        return Err(err("palette images are not supported"));
    }
    let depth = info.bit_depth;
    if depth != png::BitDepth::Eight && depth != png::BitDepth::Sixteen {
        return Err(err(format!("unsupported bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err("image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| err(e.to_string()))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let channels = frame.color_type.samples();
    let n = width * height * channels;
    let samples: Vec<u16> = match depth {
        png::BitDepth::Sixteen => {
            let mut out = Vec::with_capacity(n);
            for y in 0..height {
                let row = &buf[y * frame.line_size..y * frame.line_size + width * channels * 2];
                out.extend(
                    row.chunks_exact(2)
                        .map(|b| u16::from_be_bytes([b[0], b[1]])),
                );
            }
            out
        }
        _ => {
            let mut out = Vec::with_capacity(n);
            for y in 0..height {
                let row = &buf[y * frame.line_size..y * frame.line_size + width * channels];
                out.extend(row.iter().map(|&b| b as u16));
            }
            out
        }
    };
    Ok(RawPng {
        width,
        height,
        color: frame.color_type,
        depth,
        samples,
    })
}

pub fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    samples: &[u16],
) -> Result<Vec<u8>> {
    let channels = color.samples();
    if samples.len() != width * height * channels {
        return Err(Error::shape(width * height * channels, samples.len()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| err(e.to_string()))?;
        let data: Vec<u8> = match depth {
            png::BitDepth::Sixteen => samples.iter().flat_map(|v| v.to_be_bytes()).collect(),
            png::BitDepth::Eight => samples.iter().map(|&v| v.min(255) as u8).collect(),
            other => return Err(err(format!("unsupported bit depth {other:?}"))),
        };
        w.write_image_data(&data).map_err(|e| err(e.to_string()))?;
        w.finish().map_err(|e| err(e.to_string()))?;
    }
    Ok(out)
}

/// KITTI convention: disparity = raw / 256, raw 0 marks an invalid pixel.
pub fn parse_kitti_disparity(bytes: &[u8]) -> Result<DisparityField> {
    let raw = decode_png(bytes)?;
    if raw.depth != png::BitDepth::Sixteen || raw.color != png::ColorType::Grayscale {
        return Err(err(format!(
            "KITTI disparity must be 16-bit single-channel, got {:?} {:?}",
            raw.depth, raw.color
        )));
    }
    let values = raw.samples.iter().map(|&v| v as f64 / 256.0).collect();
    let valid = raw.samples.iter().map(|&v| v != 0).collect();
    DisparityField::with_validity(raw.height, raw.width, values, valid, Resolution::Image)
}

/// Inverse of [`parse_kitti_disparity`]; values are rounded to 1/256 and
/// clamped to the representable range, invalid sites written as 0.
pub fn write_kitti_disparity(field: &DisparityField) -> Result<Vec<u8>> {
    let samples: Vec<u16> = field
        .values()
        .iter()
        .zip(field.validity())
        .map(|(&v, &ok)| {
            if ok {
                (v * 256.0).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    encode_png(
        field.width(),
        field.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &samples,
    )
}

/// Decodes to a 1- or 3-channel image in `[0, 1]`; alpha is dropped.
pub fn image_from_png(bytes: &[u8]) -> Result<Image> {
    let raw = decode_png(bytes)?;
    let max = if raw.depth == png::BitDepth::Sixteen {
        65535.0
    } else {
        255.0
    };
    let src_ch = raw.channels();
    let out_ch = match raw.color {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    Ok(Image::from_fn(out_ch, raw.height, raw.width, |c, y, x| {
        raw.samples[(y * raw.width + x) * src_ch + c] as f64 / max
    }))
}

/// 8-bit PNG, values clamped to `[0, 1]` and rounded.
pub fn image_to_png(image: &Image) -> Result<Vec<u8>> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(err(format!("cannot write {c}-channel image"))),
    };
    encode_png(
        image.width(),
        image.height(),
        color,
        png::BitDepth::Eight,
        &interleave_u8(image),
    )
}

pub(crate) fn interleave_u8(image: &Image) -> Vec<u16> {
    let (c, h, w) = image.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push((image.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u16);
            }
        }
    }
    out
}
