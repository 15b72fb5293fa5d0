//! Lossless image ↔ latent mapping by space-to-depth rearrangement.
//!
//! Each `f × f` pixel block becomes `f² · channels` latent channels at one
//! latent site, so a latent site corresponds exactly to one image block and a
//! one-site latent translation is an `f`-pixel image translation.

use crate::error::{Error, Result};
use crate::grid::{Image, LatentGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub factor: usize,
    pub image_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            factor: 2,
            image_channels: 3,
        }
    }
}

impl CodecConfig {
    pub fn new(factor: usize, image_channels: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("codec factor must be positive"));
        }
        if image_channels == 0 {
            return Err(Error::invalid("image channel count must be positive"));
        }
        Ok(Self {
            factor,
            image_channels,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.factor * self.factor * self.image_channels
    }

    /// Latent `(channels, height, width)` for an image of the given size.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if !height.is_multiple_of(self.factor) || !width.is_multiple_of(self.factor) {
            return Err(Error::invalid(format!(
                "image size {height}x{width} not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok((
            self.latent_channels(),
            height / self.factor,
            width / self.factor,
        ))
    }

    /// Latent channel for image channel `c` at block offset `(dy, dx)`.
    #[inline]
    fn latent_channel(&self, c: usize, dy: usize, dx: usize) -> usize {
        (c * self.factor + dy) * self.factor + dx
    }

    pub fn encode(&self, image: &Image) -> Result<LatentGrid> {
        if image.channels() != self.image_channels {
            return Err(Error::shape(self.image_channels, image.channels()));
        }
        let (lc, lh, lw) = self.latent_shape(image.height(), image.width())?;
        let f = self.factor;
        let mut out = LatentGrid::zeros(lc, lh, lw);
        for c in 0..self.image_channels {
            for y in 0..image.height() {
                for x in 0..image.width() {
                    let ch = self.latent_channel(c, y % f, x % f);
                    out.set(ch, y / f, x / f, image.get(c, y, x));
                }
            }
        }
        Ok(out)
    }

    /// Inverse rearrangement. No clamping: values outside `[0, 1]` survive.
    pub fn decode(&self, latent: &LatentGrid) -> Result<Image> {
        if latent.channels() != self.latent_channels() {
            return Err(Error::shape(self.latent_channels(), latent.channels()));
        }
        let f = self.factor;
        let (h, w) = (latent.height() * f, latent.width() * f);
        let mut out = Image::zeros(self.image_channels, h, w);
        for c in 0..self.image_channels {
            for y in 0..h {
                for x in 0..w {
                    let ch = self.latent_channel(c, y % f, x % f);
                    out.set(c, y, x, latent.get(ch, y / f, x / f));
                }
            }
        }
        Ok(out)
    }
}

/// Per-channel affine standardization of latents (zero mean, unit variance
/// over a corpus). Commutes with every spatial operation on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNormalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits mean and standard deviation per channel over `latents`.
    pub fn fit<'a>(latents: impl IntoIterator<Item = &'a LatentGrid>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut shape = None;
        for g in latents {
            let c = g.channels();
            match shape {
                None => {
                    shape = Some(c);
                    sum = vec![0.0; c];
                    sq = vec![0.0; c];
                }
                Some(sc) if sc != c => return Err(Error::shape(sc, c)),
                _ => {}
            }
            for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in g.plane(ch) {
                    *s += v;
                    *q += v * v;
                }
            }
            count += g.height() * g.width();
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit a normalizer on an empty corpus"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        self.apply(latent, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        self.apply(latent, |v, m, s| v * s + m)
    }

    fn apply(&self, latent: &LatentGrid, f: impl Fn(f64, f64, f64) -> f64) -> Result<LatentGrid> {
        if latent.channels() != self.channels() {
            return Err(Error::shape(self.channels(), latent.channels()));
        }
        let plane = latent.height() * latent.width();
        let mut out = latent.clone();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let c = i / plane;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Ok(out)
    }
}
