//! Portable float map: `Pf` (one channel) or `PF` (three channels), a
//! dimensions line, a scale line whose sign gives the byte order (negative
//! means little-endian) and whose magnitude multiplies every value, then raw
//! 32-bit floats stored bottom row first.

use crate::disparity::{DisparityField, Resolution};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Top-to-bottom, row-major, channels interleaved.
    pub data: Vec<f64>,
}

impl PfmImage {
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// First channel as an image-resolution disparity field; non-finite
    /// values (Middlebury's "unknown") become invalid sites.
    pub fn to_disparity(&self) -> Result<DisparityField> {
        let values = (0..self.height * self.width)
            .map(|i| self.data[i * self.channels])
            .collect();
        DisparityField::new(self.height, self.width, values, Resolution::Image)
    }

    pub fn from_disparity(field: &DisparityField) -> Self {
        let data = field
            .values()
            .iter()
            .zip(field.validity())
            .map(|(&v, &ok)| if ok { v } else { f64::INFINITY })
            .collect();
        Self {
            width: field.width(),
            height: field.height(),
            channels: 1,
            data,
        }
    }
}

fn err(reason: impl Into<String>) -> Error {
    Error::format("pfm", reason)
}

/// Reads one whitespace-terminated header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(err("truncated header"));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| err("header is not ASCII"))?;
    Ok(tok)
}

pub fn parse_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(err(format!("bad magic '{other}'"))),
    };
    let width: usize = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| err("bad width"))?;
    let height: usize = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| err("bad height"))?;
    if width == 0 || height == 0 {
        return Err(err("zero dimension"));
    }
    let scale: f64 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| err("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(err("scale must be finite and non-zero"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("truncated header"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| err("dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < n * 4 {
        return Err(err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let little = scale < 0.0;
    let mult = scale.abs();
    let row_len = width * channels;
    let mut data = vec![0.0; n];
    for (i, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (i / row_len, i % row_len);
        let y = height - 1 - file_row;
        data[y * row_len + col] = v as f64 * mult;
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// Serializes with scale `-1` (little-endian, unit multiplier).
pub fn write_pfm(image: &PfmImage) -> Result<Vec<u8>> {
    if image.channels != 1 && image.channels != 3 {
        return Err(err(format!("unsupported channel count {}", image.channels)));
    }
    if image.data.len() != image.width * image.height * image.channels {
        return Err(Error::shape(
            image.width * image.height * image.channels,
            image.data.len(),
        ));
    }
    let magic = if image.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    let row_len = image.width * image.channels;
    for y in (0..image.height).rev() {
        for v in &image.data[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn payload(vals: &[f32], little: bool) -> Vec<u8> {
        vals.iter()
            .flat_map(|v| {
                if little {
                    v.to_le_bytes()
                } else {
                    v.to_be_bytes()
                }
            })
            .collect()
    }

    #[test]
    fn flips_rows() {
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        bytes.extend(payload(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true));
        let img = parse_pfm(&bytes).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 3, 1));
        assert_eq!(img.data, vec![4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn scale_magnitude_and_endianness() {
        let vals = [2.0f32, -6.0, 0.5, 8.0];
        let mut a = b"Pf\n2 2\n-1.0\n".to_vec();
        a.extend(payload(&vals, true));
        let mut b = b"Pf\n2 2\n-0.5\n".to_vec();
        b.extend(payload(&vals, true));
        let mut c = b"Pf\n2 2\n1.0\n".to_vec();
        c.extend(payload(&vals, false));
        let (a, b, c) = (
            parse_pfm(&a).unwrap(),
            parse_pfm(&b).unwrap(),
            parse_pfm(&c).unwrap(),
        );
        for i in 0..4 {
            assert_eq!(b.data[i], a.data[i] * 0.5);
        }
        assert_eq!(a, c);
    }

    #[test]
    fn color_interleaving() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        bytes.extend(payload(&[0.1, 0.2, 0.3], true));
        let img = parse_pfm(&bytes).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.get(0, 0, 2), 0.3f32 as f64);
    }

    #[test]
    fn roundtrip_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..10 {
            let channels = if i % 2 == 0 { 1 } else { 3 };
            let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
            let data = (0..w * h * channels)
                .map(|_| rng.random_range(-100.0f32..100.0) as f64)
                .collect();
            let img = PfmImage {
                width: w,
                height: h,
                channels,
                data,
            };
            let bytes = write_pfm(&img).unwrap();
            let back = parse_pfm(&bytes).unwrap();
            assert_eq!(back, img);
            assert_eq!(write_pfm(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_pfm(b"P6\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(parse_pfm(b"Pf\n0 1\n-1.0\n").is_err());
        assert!(parse_pfm(b"Pf\n2 1\n-1.0\n\0\0\0\0").is_err());
        assert!(parse_pfm(b"Pf\n2 1").is_err());
        assert!(parse_pfm(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
    }

    #[test]
    fn infinite_values_become_invalid() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend(payload(&[f32::INFINITY, 3.0], true));
        let d = parse_pfm(&bytes).unwrap().to_disparity().unwrap();
        assert!(!d.is_valid(0, 0) && d.is_valid(0, 1));
        assert_eq!(PfmImage::from_disparity(&d).data[0], f64::INFINITY);
    }
}
