//! Layered-shapes stereo world with exact ground truth.
//!
//! A textured background plane sits at `z_far` (zero disparity). Shapes sit
//! at depths whose normalized disparity is quantized to `k / levels`,
//! `k = 1..=levels`, so with a pixel scale of `factor · levels` every shape
//! moves by exactly `factor · k` pixels, a whole number of latent sites.
//! Shapes never overlap in the left view and stay inside the frame, which
//! makes the right view agree with a forward warp of the left view
//! everywhere except the disoccluded strips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::CodecConfig;
use crate::disparity::{DisparityField, Resolution};
use crate::error::{Error, Result};
use crate::grid::{Image, LatentGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorldSpec {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub z_near: f64,
    pub z_far: f64,
    pub palette: Vec<[f64; 3]>,
    /// Rectangle edges snap to multiples of this many pixels.
    pub codec_factor: usize,
    /// Number of quantized disparity levels; also the shift of the nearest
    /// level in latent sites.
    pub depth_levels: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_shapes: 1,
            max_shapes: 3,
            z_near: 1.0,
            z_far: 4.0,
            palette: vec![
                [0.85, 0.2, 0.15],
                [0.15, 0.55, 0.85],
                [0.95, 0.8, 0.2],
                [0.2, 0.75, 0.35],
                [0.6, 0.3, 0.75],
            ],
            codec_factor: 2,
            depth_levels: 3,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic image size must be positive"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes exceeds max_shapes"));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far && self.z_far.is_finite()) {
            return Err(Error::invalid(format!(
                "depth range must satisfy 0 < z_near < z_far (got {}, {})",
                self.z_near, self.z_far
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::invalid("palette is empty"));
        }
        if self.codec_factor == 0
            || !self.height.is_multiple_of(self.codec_factor)
            || !self.width.is_multiple_of(self.codec_factor)
        {
            return Err(Error::invalid(
                "image size must be a positive multiple of the codec factor",
            ));
        }
        if self.depth_levels == 0 {
            return Err(Error::invalid("depth_levels must be positive"));
        }
        let min_side = self.height.min(self.width);
        if self.max_shapes > 0 && min_side < 4 * self.codec_factor {
            return Err(Error::invalid("image too small to place shapes"));
        }
        Ok(())
    }

    /// Pixel shift of a site with normalized disparity 1.
    pub fn shift_px(&self) -> f64 {
        (self.codec_factor * self.depth_levels) as f64
    }

    /// Normalized disparity of depth `z` over the fixed range.
    pub fn normalized_disparity(&self, z: f64) -> f64 {
        ((1.0 / z - 1.0 / self.z_far) / (1.0 / self.z_near - 1.0 / self.z_far)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    /// Half-open pixel box `[x0, x1) × [y0, y1)`.
    Rect {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    /// Pixel centres within `r` of `(cx, cy)`.
    Circle { cx: f64, cy: f64, r: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Quantized disparity level `1..=levels`.
    pub level: usize,
}

impl Shape {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match self.kind {
            ShapeKind::Rect { x0, y0, x1, y1 } => (x0 as f64, y0 as f64, x1 as f64, y1 as f64),
            ShapeKind::Circle { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match self.kind {
            ShapeKind::Rect { x0, y0, x1, y1 } => {
                px >= x0 as f64 && px < x1 as f64 && py >= y0 as f64 && py < y1 as f64
            }
            ShapeKind::Circle { cx, cy, r } => {
                let (dx, dy) = (px + 0.5 - cx, py + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Shaded colour at a point, in shape-local coordinates so it travels
    /// with the shape.
    fn shade(&self, c: usize, px: f64, py: f64) -> f64 {
        let (x0, y0, x1, y1) = self.bbox();
        let u = (px + 0.5 - x0) / (x1 - x0);
        let v = (py + 0.5 - y0) / (y1 - y0);
        self.color[c] * (0.75 + 0.25 * (1.0 - 0.5 * (u + v)))
    }

    fn is_circle(&self) -> bool {
        matches!(self.kind, ShapeKind::Circle { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub source: String,
    /// `(height, width)` before any resizing.
    pub original_size: (usize, usize),
    /// Pixel shift of normalized disparity 1.
    pub shift_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub left: Image,
    pub right: Option<Image>,
    /// Normalized left-view disparity at image resolution.
    pub disparity: DisparityField,
    pub condition: usize,
    pub meta: SceneMeta,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.right {
            self.left.ensure_same_shape(r)?;
        }
        if (self.disparity.height(), self.disparity.width())
            != (self.left.height(), self.left.width())
        {
            return Err(Error::shape(
                (self.left.height(), self.left.width()),
                (self.disparity.height(), self.disparity.width()),
            ));
        }
        Ok(())
    }
}

/// Condition token summarising the layout: shape count (capped at 3) and the
/// kind of the nearest shape, or 7 for an empty scene. Token 0 is reserved
/// for the null condition.
pub fn scene_token(shapes: &[Shape]) -> usize {
    match shapes.iter().max_by_key(|s| s.level) {
        None => 7,
        Some(near) => 1 + (shapes.len().min(3) - 1) * 2 + usize::from(near.is_circle()),
    }
}

pub const SCENE_TOKENS: usize = 8;

fn background(spec: &SyntheticWorldSpec, phase: f64, tint: [f64; 3]) -> Image {
    let (h, w) = (spec.height as f64, spec.width as f64);
    Image::from_fn(3, spec.height, spec.width, |c, y, x| {
        let grad = 0.3 + 0.35 * (y as f64 + 0.5) / h;
        let stripes =
            0.12 * (2.0 * std::f64::consts::PI * 3.0 * (x as f64 + 0.5) / w + phase).sin();
        (grad + stripes) * tint[c]
    })
}

/// Paints the shapes far to near, each displaced by `offset(shape)` pixels.
fn render(
    spec: &SyntheticWorldSpec,
    bg: &Image,
    shapes: &[Shape],
    offset: impl Fn(&Shape) -> f64,
) -> (Image, Vec<f64>) {
    let mut img = bg.clone();
    let mut disp = vec![0.0; spec.height * spec.width];
    let mut order: Vec<&Shape> = shapes.iter().collect();
    order.sort_by_key(|s| s.level);
    for s in order {
        let dx = offset(s);
        let d = s.level as f64 / spec.depth_levels as f64;
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (px, py) = (x as f64 - dx, y as f64);
                if s.contains(px, py) {
                    for c in 0..3 {
                        img.set(c, y, x, s.shade(c, px, py));
                    }
                    disp[y * spec.width + x] = d;
                }
            }
        }
    }
    (img, disp)
}

fn sample_shapes(spec: &SyntheticWorldSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let f = spec.codec_factor;
    let (h, w) = (spec.height, spec.width);
    let mut shapes: Vec<Shape> = Vec::with_capacity(n);
    let mut attempts = 0;
    while shapes.len() < n && attempts < 200 {
        attempts += 1;
        let level = if shapes.is_empty() {
            spec.depth_levels
        } else {
            let z = rng.random_range(spec.z_near..spec.z_far);
            let k = (spec.normalized_disparity(z) * spec.depth_levels as f64).round() as usize;
            k.clamp(1, spec.depth_levels)
        };
        let color = spec.palette[rng.random_range(0..spec.palette.len())];
        let kind = if rng.random::<bool>() {
            let cells = |side: usize| side / f;
            let bw = rng.random_range((cells(w) / 5).max(2)..=(cells(w) / 3).max(2));
            let bh = rng.random_range((cells(h) / 5).max(2)..=(cells(h) / 3).max(2));
            let x0 = rng.random_range(0..=cells(w) - bw);
            let y0 = rng.random_range(0..=cells(h) - bh);
            ShapeKind::Rect {
                x0: x0 * f,
                y0: y0 * f,
                x1: (x0 + bw) * f,
                y1: (y0 + bh) * f,
            }
        } else {
            let side = h.min(w) as f64;
            let r = rng.random_range(side / 10.0..=side / 6.0);
            let cx = rng.random_range(r..=w as f64 - r);
            let cy = rng.random_range(r..=h as f64 - r);
            ShapeKind::Circle { cx, cy, r }
        };
        let cand = Shape { kind, color, level };
        let (ax0, ay0, ax1, ay1) = cand.bbox();
        let clear = shapes.iter().all(|s| {
            let (bx0, by0, bx1, by1) = s.bbox();
            ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0
        });
        if clear {
            shapes.push(cand);
        }
    }
    shapes
}

struct Layout {
    phase: f64,
    tint: [f64; 3],
    shapes: Vec<Shape>,
}

fn layout(spec: &SyntheticWorldSpec, seed: u64) -> Result<Layout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let tint = [
        rng.random_range(0.7..1.0),
        rng.random_range(0.7..1.0),
        rng.random_range(0.7..1.0),
    ];
    let shapes = sample_shapes(spec, &mut rng);
    Ok(Layout {
        phase,
        tint,
        shapes,
    })
}

/// Renders both views and the left disparity of one scene.
pub fn generate_synthetic_scene(spec: &SyntheticWorldSpec, seed: u64) -> Result<SceneRecord> {
    let Layout {
        phase,
        tint,
        shapes,
    } = layout(spec, seed)?;
    let bg = background(spec, phase, tint);
    let (left, disp) = render(spec, &bg, &shapes, |_| 0.0);
    let f = spec.codec_factor as f64;
    let (right, _) = render(spec, &bg, &shapes, |s| f * s.level as f64);
    Ok(SceneRecord {
        id: format!("scene_{seed:05}"),
        left,
        right: Some(right),
        disparity: DisparityField::new(spec.height, spec.width, disp, Resolution::Image)?,
        condition: scene_token(&shapes),
        meta: SceneMeta {
            source: "synthetic".into(),
            original_size: (spec.height, spec.width),
            shift_px: spec.shift_px(),
        },
    })
}

/// Shapes of the scene generated from `seed`.
pub fn synthetic_shapes(spec: &SyntheticWorldSpec, seed: u64) -> Result<Vec<Shape>> {
    Ok(layout(spec, seed)?.shapes)
}

/// `count` scenes with seeds `spec.seed..spec.seed + count`, in parallel.
pub fn generate_corpus(spec: &SyntheticWorldSpec, count: usize) -> Result<Vec<SceneRecord>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_synthetic_scene(spec, spec.seed.wrapping_add(i)))
        .collect()
}

/// First scene seed of training sets, far from the seeds corpora start at.
pub const TRAIN_SEED_OFFSET: u64 = 10_000;

/// Both encoded views of `count` scenes seeded from
/// `TRAIN_SEED_OFFSET + first_seed`, each paired with its condition token.
pub fn training_pairs(
    spec: &SyntheticWorldSpec,
    count: u64,
    first_seed: u64,
) -> Result<Vec<(LatentGrid, usize)>> {
    let codec = CodecConfig::new(spec.codec_factor, 3)?;
    let mut out = Vec::with_capacity(2 * count as usize);
    for i in 0..count {
        let s = generate_synthetic_scene(spec, TRAIN_SEED_OFFSET + first_seed + i)?;
        out.push((codec.encode(&s.left)?, s.condition));
        if let Some(r) = &s.right {
            out.push((codec.encode(r)?, s.condition));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_identical_views() {
        let spec = SyntheticWorldSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..SyntheticWorldSpec::default()
        };
        let s = generate_synthetic_scene(&spec, 3).unwrap();
        assert_eq!(s.right.as_ref().unwrap(), &s.left);
        assert!(s.disparity.values().iter().all(|&d| d == 0.0));
        assert_eq!(s.condition, 7);
    }

    #[test]
    fn deterministic_and_nearest_level_present() {
        let spec = SyntheticWorldSpec::default();
        for seed in 0..10 {
            let a = generate_synthetic_scene(&spec, seed).unwrap();
            assert_eq!(a, generate_synthetic_scene(&spec, seed).unwrap());
            assert!(a.disparity.values().contains(&1.0));
            assert!((1..=6).contains(&a.condition));
            let shapes = synthetic_shapes(&spec, seed).unwrap();
            assert_eq!(scene_token(&shapes), a.condition);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = [
            SyntheticWorldSpec {
                z_near: 0.0,
                ..Default::default()
            },
            SyntheticWorldSpec {
                z_near: 5.0,
                ..Default::default()
            },
            SyntheticWorldSpec {
                min_shapes: 4,
                ..Default::default()
            },
            SyntheticWorldSpec {
                width: 31,
                ..Default::default()
            },
            SyntheticWorldSpec {
                palette: vec![],
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(generate_synthetic_scene(&s, 0).is_err());
        }
    }

    #[test]
    fn token_encoding() {
        let rect = Shape {
            kind: ShapeKind::Rect {
                x0: 0,
                y0: 0,
                x1: 2,
                y1: 2,
            },
            color: [1.0; 3],
            level: 1,
        };
        let circle = Shape {
            kind: ShapeKind::Circle {
                cx: 5.0,
                cy: 5.0,
                r: 1.0,
            },
            color: [1.0; 3],
            level: 3,
        };
        assert_eq!(scene_token(std::slice::from_ref(&rect)), 1);
        assert_eq!(scene_token(std::slice::from_ref(&circle)), 2);
        assert_eq!(scene_token(&[rect.clone(), circle.clone()]), 4);
        assert_eq!(scene_token(&[rect.clone(), rect.clone(), rect, circle]), 6);
    }
}
