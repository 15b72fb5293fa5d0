//! Image files, resampling and stereo-pair composition.

use std::path::Path;

use crate::disparity::{DisparityField, Resolution};
use crate::error::{Error, Result};
use crate::grid::Image;

use super::png::{image_from_png, image_to_png, interleave_u8};

/// Binary PPM (`P6`) or PGM (`P5`) with maxval 255.
pub fn image_to_ppm(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::format(
                "ppm",
                format!("cannot write {c}-channel image"),
            ))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(interleave_u8(image).into_iter().map(|v| v as u8));
    Ok(out)
}

pub fn image_from_ppm(bytes: &[u8]) -> Result<Image> {
    let err = |r: &str| Error::format("ppm", r.to_string());
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
    }
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(err("bad magic")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad number"));
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(err("unsupported dimensions or maxval"));
    }
    pos += 1;
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(err("truncated payload"));
    }
    let data = &bytes[pos..pos + n];
    Ok(Image::from_fn(channels, h, w, |c, y, x| {
        data[(y * w + x) * channels + c] as f64 / maxval as f64
    }))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    match extension(path).as_str() {
        "png" => image_from_png(&bytes),
        "ppm" | "pgm" | "pnm" => image_from_ppm(&bytes),
        other => Err(Error::invalid(format!(
            "unsupported image extension '{other}'"
        ))),
    }
}

pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "png" => image_to_png(image)?,
        "ppm" | "pgm" | "pnm" => image_to_ppm(image)?,
        other => {
            return Err(Error::invalid(format!(
                "unsupported image extension '{other}'"
            )))
        }
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Three-channel copy of a grayscale image; other images unchanged.
pub fn to_rgb(image: &Image) -> Image {
    if image.channels() == 3 {
        return image.clone();
    }
    Image::from_fn(3, image.height(), image.width(), |_, y, x| {
        image.get(0, y, x)
    })
}

/// Overlap weights of output cells `0..out` over input cells `0..inp`.
fn area_weights(inp: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let mut ws = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < inp {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((i, overlap / ratio));
                }
                i += 1;
            }
            ws
        })
        .collect()
}

/// Area-averaging resample to `height × width`.
pub fn area_resize(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let wy = area_weights(image.height(), height);
    let wx = area_weights(image.width(), width);
    Ok(Image::from_fn(
        image.channels(),
        height,
        width,
        |c, y, x| {
            let mut acc = 0.0;
            for &(sy, a) in &wy[y] {
                for &(sx, b) in &wx[x] {
                    acc += a * b * image.get(c, sy, sx);
                }
            }
            acc
        },
    ))
}

pub fn center_crop(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height > image.height() || width > image.width() {
        return Err(Error::invalid(format!(
            "crop {height}x{width} larger than image {}x{}",
            image.height(),
            image.width()
        )));
    }
    let (oy, ox) = ((image.height() - height) / 2, (image.width() - width) / 2);
    Ok(Image::from_fn(
        image.channels(),
        height,
        width,
        |c, y, x| image.get(c, y + oy, x + ox),
    ))
}

/// Area-weighted mean over valid sites, values multiplied by the width ratio
/// because disparity is a horizontal length in pixels.
pub fn resize_disparity(
    field: &DisparityField,
    height: usize,
    width: usize,
) -> Result<DisparityField> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let wy = area_weights(field.height(), height);
    let wx = area_weights(field.width(), width);
    let ratio = width as f64 / field.width() as f64;
    let mut values = vec![0.0; height * width];
    let mut valid = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let (mut acc, mut norm) = (0.0, 0.0);
            for &(sy, a) in &wy[y] {
                for &(sx, b) in &wx[x] {
                    if field.is_valid(sy, sx) {
                        acc += a * b * field.get(sy, sx);
                        norm += a * b;
                    }
                }
            }
            if norm > 0.0 {
                values[y * width + x] = acc / norm * ratio;
                valid[y * width + x] = true;
            }
        }
    }
    DisparityField::with_validity(height, width, values, valid, Resolution::Image)
}

pub fn crop_disparity(
    field: &DisparityField,
    height: usize,
    width: usize,
) -> Result<DisparityField> {
    if height > field.height() || width > field.width() {
        return Err(Error::invalid("crop larger than disparity field"));
    }
    let (oy, ox) = ((field.height() - height) / 2, (field.width() - width) / 2);
    let mut values = Vec::with_capacity(height * width);
    let mut valid = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            values.push(field.get(y + oy, x + ox));
            valid.push(field.is_valid(y + oy, x + ox));
        }
    }
    DisparityField::with_validity(height, width, values, valid, Resolution::Image)
}

/// Smallest aspect-preserving size covering `target`.
pub(crate) fn cover_size(orig: (usize, usize), target: (usize, usize)) -> (usize, usize) {
    let scale = (target.0 as f64 / orig.0 as f64).max(target.1 as f64 / orig.1 as f64);
    (
        ((orig.0 as f64 * scale).round() as usize).max(target.0),
        ((orig.1 as f64 * scale).round() as usize).max(target.1),
    )
}

/// Aspect-preserving scale so the image covers `height × width`, then a
/// center crop. The disparity follows the same geometry.
pub fn fit_to_working(
    image: &Image,
    disparity: Option<&DisparityField>,
    height: usize,
    width: usize,
) -> Result<(Image, Option<DisparityField>)> {
    let (sh, sw) = cover_size((image.height(), image.width()), (height, width));
    let img = center_crop(&area_resize(image, sh, sw)?, height, width)?;
    let disp = match disparity {
        Some(d) => {
            if (d.height(), d.width()) != (image.height(), image.width()) {
                return Err(Error::shape(
                    (image.height(), image.width()),
                    (d.height(), d.width()),
                ));
            }
            Some(fit_disparity(d, height, width)?)
        }
        None => None,
    };
    Ok((img, disp))
}

/// The disparity half of [`fit_to_working`], for fields without an image.
pub fn fit_disparity(
    field: &DisparityField,
    height: usize,
    width: usize,
) -> Result<DisparityField> {
    let (sh, sw) = cover_size((field.height(), field.width()), (height, width));
    crop_disparity(&resize_disparity(field, sh, sw)?, height, width)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Layout {
    #[default]
    SideBySide,
    Anaglyph,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "side_by_side" | "sbs" => Ok(Self::SideBySide),
            "anaglyph" => Ok(Self::Anaglyph),
            other => Err(Error::invalid(format!("unknown layout '{other}'"))),
        }
    }
}

/// `left | right`, or a red/cyan anaglyph built from each view's luminance.
pub fn compose_output(left: &Image, right: &Image, layout: Layout) -> Result<Image> {
    left.ensure_same_shape(right)?;
    let (c, h, w) = left.shape();
    match layout {
        Layout::SideBySide => Ok(Image::from_fn(c, h, 2 * w, |ch, y, x| {
            if x < w {
                left.get(ch, y, x)
            } else {
                right.get(ch, y, x - w)
            }
        })),
        Layout::Anaglyph => {
            let (l, r) = (left.luminance(), right.luminance());
            Ok(Image::from_fn(3, h, w, |ch, y, x| {
                if ch == 0 {
                    l.get(0, y, x)
                } else {
                    r.get(0, y, x)
                }
            }))
        }
    }
}
