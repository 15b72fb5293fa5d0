//! Disparity-guided operations on latent grids: the stereo pixel shift,
//! masked re-pasting of the shifted left latent, and noise fill of holes.
//!
//! The shift is a forward scatter with a z-buffer. Every source column `u`
//! in row `y` moves to `u + sign * round(s * D(y, u))`; when several sources
//! land on one target the larger disparity (the nearer surface) wins, and
//! targets outside the row are dropped. Targets that receive nothing are
//! holes and hold the configured fill value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::disparity::DisparityField;
use crate::error::{Error, Result};
use crate::grid::{Image, LatentGrid, Mask};

/// Horizontal direction content moves in the generated (right) view.
///
/// `Positive` follows `x_right(x) = x_left(x - s·D)`, i.e. content moves
/// toward larger column indices. Standard rectified camera geometry moves it
/// the other way; both are available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShiftDirection {
    #[default]
    Positive,
    Negative,
}

impl ShiftDirection {
    pub fn sign(self) -> i64 {
        match self {
            ShiftDirection::Positive => 1,
            ShiftDirection::Negative => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            ShiftDirection::Positive => ShiftDirection::Negative,
            ShiftDirection::Negative => ShiftDirection::Positive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftConfig {
    /// Shift of the nearest surface, in grid sites.
    pub scale: f64,
    pub direction: ShiftDirection,
    /// Value written to hole sites.
    pub fill: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            scale: 3.0,
            direction: ShiftDirection::Positive,
            fill: 0.0,
        }
    }
}

impl ShiftConfig {
    pub fn new(scale: f64, direction: ShiftDirection) -> Self {
        Self {
            scale,
            direction,
            fill: 0.0,
        }
    }

    /// Integer offset applied to a source site with disparity `d`.
    #[inline]
    pub fn offset(&self, d: f64) -> i64 {
        self.direction.sign() * (self.scale * d).round() as i64
    }
}

/// Per-source integer offsets of one shift.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Displacement {
    pub height: usize,
    pub width: usize,
    pub offsets: Vec<i64>,
}

impl Displacement {
    pub fn get(&self, y: usize, x: usize) -> i64 {
        self.offsets[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftResult {
    pub warped: LatentGrid,
    /// Targets whose content came from a source displaced by at least one site.
    pub moved_mask: Mask,
    /// Targets that received no source.
    pub hole_mask: Mask,
    pub displacement: Displacement,
}

/// Output of the planar scatter kernel shared by latent and image warps.
pub(crate) struct Scatter {
    pub data: Vec<f64>,
    pub moved: Mask,
    pub hole: Mask,
    pub displacement: Displacement,
}

pub(crate) fn scatter_planar(
    data: &[f64],
    shape: (usize, usize, usize),
    disparity: &DisparityField,
    cfg: &ShiftConfig,
) -> Result<Scatter> {
    let (channels, height, width) = shape;
    if (disparity.height(), disparity.width()) != (height, width) {
        return Err(Error::shape(
            (height, width),
            (disparity.height(), disparity.width()),
        ));
    }
    if !disparity.is_normalized() {
        return Err(Error::invalid(
            "disparity field must be normalized to [0, 1]",
        ));
    }
    if !(cfg.scale >= 0.0 && cfg.scale.is_finite()) {
        return Err(Error::invalid(format!(
            "shift scale must be finite and >= 0, got {}",
            cfg.scale
        )));
    }
    if let Some((_, hi)) = disparity.valid_range() {
        if cfg.scale * hi > 0.1 * width as f64 {
            log::debug!(
                "maximum shift {:.2} exceeds 10% of the grid width {}",
                cfg.scale * hi,
                width
            );
        }
    }

    let plane = height * width;
    let mut out = vec![cfg.fill; data.len()];
    let mut moved = Mask::new(height, width);
    let mut hole = Mask::new(height, width);
    let mut offsets = vec![0i64; plane];
    // winning source column and its disparity, per target in the current row
    let mut winner: Vec<Option<(usize, f64)>> = vec![None; width];

    for y in 0..height {
        winner.iter_mut().for_each(|w| *w = None);
        for u in 0..width {
            let (d, k) = if disparity.is_valid(y, u) {
                let d = disparity.get(y, u);
                (d, cfg.offset(d))
            } else {
                (0.0, 0)
            };
            offsets[y * width + u] = k;
            let target = u as i64 + k;
            if target < 0 || target >= width as i64 {
                continue;
            }
            let slot = &mut winner[target as usize];
            match slot {
                Some((_, wd)) if *wd >= d => {}
                _ => *slot = Some((u, d)),
            }
        }
        for (x, w) in winner.iter().enumerate() {
            match *w {
                Some((u, _)) => {
                    for c in 0..channels {
                        out[c * plane + y * width + x] = data[c * plane + y * width + u];
                    }
                    if u != x {
                        moved.set(y, x, true);
                    }
                }
                None => hole.set(y, x, true),
            }
        }
    }
    Ok(Scatter {
        data: out,
        moved,
        hole,
        displacement: Displacement {
            height,
            width,
            offsets,
        },
    })
}

/// Forward-warps every channel of `x` by the disparity field.
pub fn stereo_pixel_shift(
    x: &LatentGrid,
    disparity: &DisparityField,
    cfg: &ShiftConfig,
) -> Result<ShiftResult> {
    let s = scatter_planar(x.as_slice(), x.shape(), disparity, cfg)?;
    let (c, h, w) = x.shape();
    Ok(ShiftResult {
        warped: LatentGrid::from_vec(c, h, w, s.data)?,
        moved_mask: s.moved,
        hole_mask: s.hole,
        displacement: s.displacement,
    })
}

/// Image-space variant of [`stereo_pixel_shift`]; returns the warped image and hole mask.
pub fn shift_image(
    image: &Image,
    disparity: &DisparityField,
    cfg: &ShiftConfig,
) -> Result<(Image, Mask)> {
    let s = scatter_planar(image.as_slice(), image.shape(), disparity, cfg)?;
    let (c, h, w) = image.shape();
    Ok((Image::from_vec(c, h, w, s.data)?, s.hole))
}

fn check_mask(grid: &LatentGrid, mask: &Mask) -> Result<()> {
    if (mask.height(), mask.width()) != (grid.height(), grid.width()) {
        return Err(Error::shape(
            (grid.height(), grid.width()),
            (mask.height(), mask.width()),
        ));
    }
    Ok(())
}

/// Copies the shifted previous left latent into `right` on `moved_mask`:
/// `X'_i = S(left_prev)_i` where the mask is set, `right_i` elsewhere.
pub fn spsmd_paste(
    right: &LatentGrid,
    left_prev: &LatentGrid,
    disparity: &DisparityField,
    cfg: &ShiftConfig,
    moved_mask: &Mask,
) -> Result<LatentGrid> {
    right.ensure_same_shape(left_prev)?;
    check_mask(right, moved_mask)?;
    if moved_mask.is_empty() {
        return Ok(right.clone());
    }
    let shifted = stereo_pixel_shift(left_prev, disparity, cfg)?.warped;
    Ok(select(moved_mask, &shifted, right))
}

/// Elementwise `mask ? a : b` broadcast over channels.
pub fn select(mask: &Mask, a: &LatentGrid, b: &LatentGrid) -> LatentGrid {
    let mut out = b.clone();
    let (c, h, w) = b.shape();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    out.set(ch, y, x, a.get(ch, y, x));
                }
            }
        }
    }
    out
}

/// Replaces every channel at hole sites with i.i.d. standard normal draws.
/// Draw order is row-major over sites, channels innermost.
pub fn deblur_fill(x: &LatentGrid, hole_mask: &Mask, seed: u64) -> Result<LatentGrid> {
    check_mask(x, hole_mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    let (c, h, w) = x.shape();
    for y in 0..h {
        for xx in 0..w {
            if hole_mask.get(y, xx) {
                for ch in 0..c {
                    out.set(ch, y, xx, rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disparity::Resolution;

    fn row_grid(v: &[f64]) -> LatentGrid {
        LatentGrid::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    fn row_disp(v: &[f64]) -> DisparityField {
        DisparityField::new(1, v.len(), v.to_vec(), Resolution::Latent).unwrap()
    }

    fn sites(mask: &Mask) -> Vec<usize> {
        (0..mask.width()).filter(|&x| mask.get(0, x)).collect()
    }

    #[test]
    fn zero_disparity_or_scale_is_identity() {
        let x = LatentGrid::from_fn(3, 4, 5, |c, y, xx| (c * 31 + y * 7 + xx) as f64);
        let zero = DisparityField::constant(4, 5, 0.0, Resolution::Latent);
        let r = stereo_pixel_shift(&x, &zero, &ShiftConfig::new(4.0, ShiftDirection::Positive))
            .unwrap();
        assert_eq!(r.warped, x);
        assert!(r.moved_mask.is_empty() && r.hole_mask.is_empty());
        let ones = DisparityField::constant(4, 5, 1.0, Resolution::Latent);
        let r = stereo_pixel_shift(&x, &ones, &ShiftConfig::new(0.0, ShiftDirection::Positive))
            .unwrap();
        assert_eq!(r.warped, x);
    }

    #[test]
    fn out_of_bounds_targets_drop() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let r = stereo_pixel_shift(
            &row_grid(&[a, b, c, d]),
            &row_disp(&[0.0, 0.0, 1.0, 1.0]),
            &ShiftConfig::new(1.0, ShiftDirection::Positive),
        )
        .unwrap();
        assert_eq!(r.warped.as_slice(), &[a, b, 0.0, c]);
        assert_eq!(sites(&r.moved_mask), vec![3]);
        assert_eq!(sites(&r.hole_mask), vec![2]);
        assert_eq!(r.displacement.offsets, vec![0, 0, 1, 1]);
    }

    #[test]
    fn nearer_surface_wins_collision() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        // normalized disparity 1.0 with scale 2 gives a 2-site shift
        let r = stereo_pixel_shift(
            &row_grid(&[a, b, c, d]),
            &row_disp(&[0.0, 1.0, 0.0, 0.0]),
            &ShiftConfig::new(2.0, ShiftDirection::Positive),
        )
        .unwrap();
        assert_eq!(r.warped.as_slice(), &[a, 0.0, c, b]);
        assert_eq!(sites(&r.moved_mask), vec![3]);
        assert_eq!(sites(&r.hole_mask), vec![1]);
    }

    #[test]
    fn negative_direction_mirrors() {
        let r = stereo_pixel_shift(
            &row_grid(&[1.0, 2.0, 3.0, 4.0]),
            &row_disp(&[1.0, 1.0, 0.0, 0.0]),
            &ShiftConfig::new(1.0, ShiftDirection::Negative),
        )
        .unwrap();
        assert_eq!(r.warped.as_slice(), &[2.0, 0.0, 3.0, 4.0]);
        assert_eq!(sites(&r.hole_mask), vec![1]);
    }

    #[test]
    fn invalid_sites_do_not_move() {
        let d = DisparityField::new(1, 3, vec![f64::NAN, 1.0, 0.0], Resolution::Latent).unwrap();
        let r = stereo_pixel_shift(
            &row_grid(&[5.0, 6.0, 7.0]),
            &d,
            &ShiftConfig::new(1.0, ShiftDirection::Positive),
        )
        .unwrap();
        assert_eq!(r.warped.as_slice(), &[5.0, 0.0, 6.0]);
    }

    #[test]
    fn custom_fill_value() {
        let cfg = ShiftConfig {
            fill: -9.0,
            ..ShiftConfig::new(1.0, ShiftDirection::Positive)
        };
        let r = stereo_pixel_shift(&row_grid(&[1.0, 2.0]), &row_disp(&[1.0, 1.0]), &cfg).unwrap();
        assert_eq!(r.warped.as_slice(), &[-9.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = row_grid(&[1.0, 2.0]);
        let cfg = ShiftConfig::new(1.0, ShiftDirection::Positive);
        assert!(stereo_pixel_shift(&x, &row_disp(&[0.0, 0.0, 0.0]), &cfg).is_err());
        assert!(stereo_pixel_shift(&x, &row_disp(&[0.0, 2.0]), &cfg).is_err());
        let bad = ShiftConfig::new(-1.0, ShiftDirection::Positive);
        assert!(stereo_pixel_shift(&x, &row_disp(&[0.0, 1.0]), &bad).is_err());
    }

    #[test]
    fn paste_examples() {
        let right = LatentGrid::from_fn(2, 3, 4, |c, y, x| (c + y + x) as f64);
        let left = LatentGrid::from_fn(2, 3, 4, |c, y, x| 100.0 + (c * 12 + y * 4 + x) as f64);
        let d = DisparityField::constant(3, 4, 1.0, Resolution::Latent);
        let cfg = ShiftConfig::new(1.0, ShiftDirection::Positive);
        let none = Mask::new(3, 4);
        assert_eq!(spsmd_paste(&right, &left, &d, &cfg, &none).unwrap(), right);

        let shift = stereo_pixel_shift(&left, &d, &cfg).unwrap();
        assert!(shift.hole_mask.intersects(&Mask::filled(3, 4, true)));
        let pasted = spsmd_paste(&right, &left, &d, &cfg, &shift.moved_mask).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 1..4 {
                    assert_eq!(pasted.get(c, y, x), left.get(c, y, x - 1));
                }
                assert_eq!(pasted.get(c, y, 0), right.get(c, y, 0));
            }
        }
        let bad = Mask::new(2, 4);
        assert!(spsmd_paste(&right, &left, &d, &cfg, &bad).is_err());
    }

    #[test]
    fn deblur_fill_behaviour() {
        let x = LatentGrid::from_fn(2, 3, 3, |c, y, xx| (c + y + xx) as f64);
        assert_eq!(deblur_fill(&x, &Mask::new(3, 3), 7).unwrap(), x);
        let mut m = Mask::new(3, 3);
        m.set(1, 2, true);
        let a = deblur_fill(&x, &m, 7).unwrap();
        let b = deblur_fill(&x, &m, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get(0, 1, 2), x.get(0, 1, 2));
        assert_eq!(a.get(0, 0, 0), x.get(0, 0, 0));
        assert!(deblur_fill(&x, &Mask::new(2, 3), 7).is_err());
    }

    #[test]
    fn deblur_fill_statistics() {
        let x = LatentGrid::zeros(1, 100, 100);
        let out = deblur_fill(&x, &Mask::filled(100, 100, true), 2024).unwrap();
        let n = out.len() as f64;
        let mean = out.as_slice().iter().sum::<f64>() / n;
        let var = out
            .as_slice()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
