//! Planar channel-major grids shared by every stage: latents, images and boolean masks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A `channels × height × width` latent variable, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A `channels × height × width` pixel grid with nominal range `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

macro_rules! planar_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
                Self::filled(channels, height, width, 0.0)
            }

            pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
                Self {
                    channels,
                    height,
                    width,
                    data: vec![value; channels * height * width],
                }
            }

            pub fn from_vec(
                channels: usize,
                height: usize,
                width: usize,
                data: Vec<f64>,
            ) -> Result<Self> {
                if channels == 0 || height == 0 || width == 0 {
                    return Err(Error::invalid(format!(
                        "grid dimensions must be positive, got {channels}x{height}x{width}"
                    )));
                }
                if data.len() != channels * height * width {
                    return Err(Error::shape(channels * height * width, data.len()));
                }
                Ok(Self {
                    channels,
                    height,
                    width,
                    data,
                })
            }

            pub fn from_fn(
                channels: usize,
                height: usize,
                width: usize,
                mut f: impl FnMut(usize, usize, usize) -> f64,
            ) -> Self {
                let mut data = Vec::with_capacity(channels * height * width);
                for c in 0..channels {
                    for y in 0..height {
                        for x in 0..width {
                            data.push(f(c, y, x));
                        }
                    }
                }
                Self {
                    channels,
                    height,
                    width,
                    data,
                }
            }

            #[inline]
            pub fn channels(&self) -> usize {
                self.channels
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.height
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.width
            }

            /// `(channels, height, width)`
            #[inline]
            pub fn shape(&self) -> (usize, usize, usize) {
                (self.channels, self.height, self.width)
            }

            #[inline]
            pub fn len(&self) -> usize {
                self.data.len()
            }

            #[inline]
            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            #[inline]
            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            #[inline]
            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            #[inline]
            pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
                (c * self.height + y) * self.width + x
            }

            #[inline]
            pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
                self.data[self.index(c, y, x)]
            }

            #[inline]
            pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
                let i = self.index(c, y, x);
                self.data[i] = value;
            }

            pub fn plane(&self, c: usize) -> &[f64] {
                let n = self.height * self.width;
                &self.data[c * n..(c + 1) * n]
            }

            pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
                if self.shape() != other.shape() {
                    return Err(Error::shape(self.shape(), other.shape()));
                }
                Ok(())
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                assert_eq!(self.shape(), other.shape());
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self {
                    channels: self.channels,
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|&v| f(v)).collect(),
                }
            }

            pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
                self.ensure_same_shape(other)?;
                Ok(Self {
                    channels: self.channels,
                    height: self.height,
                    width: self.width,
                    data: self
                        .data
                        .iter()
                        .zip(&other.data)
                        .map(|(&a, &b)| f(a, b))
                        .collect(),
                })
            }

            pub fn mean(&self) -> f64 {
                self.data.iter().sum::<f64>() / self.data.len() as f64
            }

            /// Mean squared difference. Panics on shape mismatch.
            pub fn mse(&self, other: &Self) -> f64 {
                assert_eq!(self.shape(), other.shape());
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / self.data.len() as f64
            }
        }
    };
}

planar_impl!(LatentGrid);
planar_impl!(Image);

impl LatentGrid {
    /// Standard normal draws in storage order.
    pub fn randn<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }
}

impl Image {
    /// Clamps to `[0, 1]`; applied only when an image leaves the pipeline.
    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Average of the colour channels at each pixel, as a single-channel image.
    pub fn luminance(&self) -> Image {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }
}

/// Boolean site mask at a grid's spatial resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Nearest-neighbour upscale of every site to a `factor × factor` block.
    pub fn upscale(&self, factor: usize) -> Mask {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y / factor, x / factor));
            }
        }
        Mask {
            height: h,
            width: w,
            data,
        }
    }
}
