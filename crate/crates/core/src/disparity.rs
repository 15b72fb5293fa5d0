//! Disparity fields: construction from depth, normalization, smoothing and
//! resampling to latent resolution.
//!
//! Ground-truth maps are smoothed first and normalized afterwards.
//! Invalid sites always hold value 0 and contribute zero shift downstream.

use crate::codec::CodecConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Image,
    Latent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    resolution: Resolution,
}

impl DisparityField {
    /// Builds a field; non-finite values are marked invalid.
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        resolution: Resolution,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self::with_validity(height, width, values, valid, resolution)
    }

    pub fn with_validity(
        height: usize,
        width: usize,
        mut values: Vec<f64>,
        valid: Vec<bool>,
        resolution: Resolution,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("disparity field must be non-empty"));
        }
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::shape(height * width, (values.len(), valid.len())));
        }
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok || !v.is_finite() {
                *v = 0.0;
            }
        }
        let valid = valid
            .iter()
            .zip(&values)
            .map(|(&ok, v)| ok && v.is_finite())
            .collect();
        Ok(Self {
            height,
            width,
            values,
            valid,
            resolution,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64, resolution: Resolution) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
            valid: vec![true; height * width],
            resolution,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `(min, max)` over valid sites.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// True when every valid value lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.values
            .iter()
            .zip(&self.valid)
            .all(|(&v, &ok)| !ok || (0.0..=1.0).contains(&v))
    }

    /// Multiplies every valid value by `k` (used when disparity in pixel units
    /// is rescaled with the image width).
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= k);
        out
    }

    pub fn with_resolution(mut self, resolution: Resolution) -> Self {
        self.resolution = resolution;
        self
    }
}

/// `D = f · B / Z` on every site with finite positive depth.
pub fn depth_to_disparity(
    depth: &[f64],
    height: usize,
    width: usize,
    focal: f64,
    baseline: f64,
) -> Result<DisparityField> {
    if !(focal > 0.0 && focal.is_finite()) || !(baseline > 0.0 && baseline.is_finite()) {
        return Err(Error::invalid(format!(
            "focal length and baseline must be positive (got f={focal}, B={baseline})"
        )));
    }
    if depth.len() != height * width {
        return Err(Error::shape(height * width, depth.len()));
    }
    let fb = focal * baseline;
    let (values, valid): (Vec<f64>, Vec<bool>) = depth
        .iter()
        .map(|&z| {
            if z.is_finite() && z > 0.0 {
                (fb / z, true)
            } else {
                (0.0, false)
            }
        })
        .unzip();
    DisparityField::with_validity(height, width, values, valid, Resolution::Image)
}

/// Affine map of valid values onto `[0, 1]`. A constant field maps to zeros.
pub fn normalize(field: &DisparityField) -> Result<DisparityField> {
    let (lo, hi) = field
        .valid_range()
        .ok_or_else(|| Error::invalid("cannot normalize a disparity field with no valid sites"))?;
    let span = hi - lo;
    let mut out = field.clone();
    for (v, &ok) in out.values.iter_mut().zip(&field.valid) {
        *v = if !ok || span <= 0.0 {
            0.0
        } else {
            ((*v - lo) / span).clamp(0.0, 1.0)
        };
    }
    Ok(out)
}

/// Gaussian weights for offsets `-radius..=radius` with `sigma = radius / 2`.
pub fn gaussian_kernel(radius: usize) -> Vec<f64> {
    if radius == 0 {
        return vec![1.0];
    }
    let sigma = radius as f64 / 2.0;
    let r = radius as i64;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Gaussian smoothing over valid sites only; weights renormalized per site,
/// so borders and invalid neighbours do not pull values toward zero.
pub fn smooth(field: &DisparityField, radius: i64) -> Result<DisparityField> {
    if radius < 0 {
        return Err(Error::invalid(format!(
            "smoothing radius must be >= 0, got {radius}"
        )));
    }
    if radius == 0 {
        return Ok(field.clone());
    }
    let k = gaussian_kernel(radius as usize);
    let r = radius;
    let (h, w) = (field.height as i64, field.width as i64);
    let mut out = field.clone();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if !field.valid[i] {
                continue;
            }
            let (mut acc, mut norm) = (0.0, 0.0);
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let wy = k[(dy + r) as usize];
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let j = (yy * w + xx) as usize;
                    if field.valid[j] {
                        let wt = wy * k[(dx + r) as usize];
                        acc += wt * field.values[j];
                        norm += wt;
                    }
                }
            }
            out.values[i] = acc / norm;
        }
    }
    Ok(out)
}

/// Block-mean downsampling of an image-space field to latent resolution.
/// Fully invalid blocks stay invalid.
pub fn resample_to_latent(field: &DisparityField, codec: &CodecConfig) -> Result<DisparityField> {
    let f = codec.factor;
    if !field.height.is_multiple_of(f) || !field.width.is_multiple_of(f) {
        return Err(Error::invalid(format!(
            "disparity size {}x{} not divisible by codec factor {f}",
            field.height, field.width
        )));
    }
    let (lh, lw) = (field.height / f, field.width / f);
    let mut values = vec![0.0; lh * lw];
    let mut valid = vec![false; lh * lw];
    for ly in 0..lh {
        for lx in 0..lw {
            let (mut acc, mut n) = (0.0, 0usize);
            for y in ly * f..(ly + 1) * f {
                for x in lx * f..(lx + 1) * f {
                    if field.is_valid(y, x) {
                        acc += field.get(y, x);
                        n += 1;
                    }
                }
            }
            if n > 0 {
                values[ly * lw + lx] = acc / n as f64;
                valid[ly * lw + lx] = true;
            }
        }
    }
    DisparityField::with_validity(lh, lw, values, valid, Resolution::Latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[f64]) -> DisparityField {
        DisparityField::new(1, values.len(), values.to_vec(), Resolution::Image).unwrap()
    }

    #[test]
    fn depth_examples() {
        let d = depth_to_disparity(&[4.0], 1, 1, 2.0, 3.0).unwrap();
        assert_eq!(d.get(0, 0), 1.5);
        let far = depth_to_disparity(&[1e12], 1, 1, 2.0, 3.0).unwrap();
        assert!(far.get(0, 0) < 1e-11);
        assert!(depth_to_disparity(&[1.0], 1, 1, 0.0, 3.0).is_err());
        assert!(depth_to_disparity(&[1.0], 1, 1, 1.0, -1.0).is_err());
    }

    #[test]
    fn depth_invalid_sites() {
        let d = depth_to_disparity(&[0.0, -1.0, f64::NAN, 2.0], 2, 2, 1.0, 1.0).unwrap();
        assert_eq!(d.validity(), &[false, false, false, true]);
        assert_eq!(d.values(), &[0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn depth_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let depth: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..20.0)).collect();
        let d = depth_to_disparity(&depth, 8, 8, 3.5, 0.2).unwrap();
        for (i, z) in depth.iter().enumerate() {
            assert_eq!(d.values()[i], 3.5 * 0.2 / z);
        }
    }

    #[test]
    fn depth_is_order_reversing() {
        let d = depth_to_disparity(&[1.0, 2.0, 3.0], 1, 3, 1.0, 1.0).unwrap();
        assert!(d.get(0, 0) > d.get(0, 1) && d.get(0, 1) > d.get(0, 2));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize(&row(&[2.0, 4.0, 6.0])).unwrap().values(),
            &[0.0, 0.5, 1.0]
        );
        assert_eq!(normalize(&row(&[5.0, 5.0])).unwrap().values(), &[0.0, 0.0]);
        let with_invalid = row(&[f64::NAN, 3.0, 1.0, f64::INFINITY, 2.0]);
        let n = normalize(&with_invalid).unwrap();
        assert_eq!(n.values(), &[0.0, 1.0, 0.0, 0.0, 0.5]);
        assert_eq!(n.validity(), &[false, true, true, false, true]);
        assert!(normalize(&row(&[f64::NAN])).is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let n = normalize(&row(&[0.3, 7.0, 2.5, 1.0])).unwrap();
        assert_eq!(normalize(&n).unwrap(), n);
    }

    #[test]
    fn smooth_identity_and_constant() {
        let f = row(&[0.1, 0.7, 0.3]);
        assert_eq!(smooth(&f, 0).unwrap(), f);
        let c = DisparityField::constant(9, 9, 0.4, Resolution::Image);
        let s = smooth(&c, 3).unwrap();
        assert!(s.values().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(smooth(&f, -1).is_err());
    }

    #[test]
    fn smooth_impulse_matches_direct_convolution() {
        let n = 15;
        let mut v = vec![0.0; n * n];
        v[7 * n + 7] = 1.0;
        let f = DisparityField::new(n, n, v, Resolution::Image).unwrap();
        let s = smooth(&f, 3).unwrap();
        // scratch: normalized 2-D gaussian, truncated to the 7x7 window
        let sigma = 1.5f64;
        let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                // sites whose window is fully inside the grid share one normalizer
                if y < 3 || x < 3 || y > 11 || x > 11 {
                    continue;
                }
                let mut total = 0.0;
                for a in -3..=3 {
                    for b in -3..=3 {
                        total += g(a) * g(b);
                    }
                }
                let (dy, dx) = (7 - y, 7 - x);
                let expect = if dy.abs() <= 3 && dx.abs() <= 3 {
                    g(dy) * g(dx) / total
                } else {
                    0.0
                };
                assert!((s.get(y as usize, x as usize) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn smooth_skips_invalid_sites() {
        let f = row(&[1.0, f64::NAN, 1.0, 1.0]);
        let s = smooth(&f, 2).unwrap();
        assert!(!s.is_valid(0, 1));
        assert_eq!(s.get(0, 1), 0.0);
        assert!(s
            .values()
            .iter()
            .zip(s.validity())
            .all(|(v, &ok)| !ok || (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn resample_examples() {
        let c1 = CodecConfig::new(1, 1).unwrap();
        let f = row(&[0.2, 0.9]);
        let r = resample_to_latent(&f, &c1).unwrap();
        assert_eq!(r.values(), f.values());
        assert_eq!(r.resolution(), Resolution::Latent);

        let c2 = CodecConfig::new(2, 1).unwrap();
        let u = DisparityField::constant(4, 4, 0.3, Resolution::Image);
        assert!(resample_to_latent(&u, &c2)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.3));

        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let cf = DisparityField::new(4, 4, checker, Resolution::Image).unwrap();
        assert!(resample_to_latent(&cf, &c2)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.5));

        assert!(resample_to_latent(&row(&[0.1, 0.2, 0.3]), &c2).is_err());
    }

    #[test]
    fn resample_invalid_blocks() {
        let c2 = CodecConfig::new(2, 1).unwrap();
        let f = DisparityField::new(
            2,
            4,
            vec![
                f64::NAN,
                f64::NAN,
                0.4,
                f64::NAN,
                f64::NAN,
                f64::NAN,
                0.8,
                0.6,
            ],
            Resolution::Image,
        )
        .unwrap();
        let r = resample_to_latent(&f, &c2).unwrap();
        assert_eq!(r.validity(), &[false, true]);
        assert!((r.get(0, 1) - 0.6).abs() < 1e-15);
    }
}
