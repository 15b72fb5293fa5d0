//! Image metrics, classic warping baselines and the corpus benchmark.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::codec::CodecConfig;
use crate::denoiser::{Denoiser, ToyUNet};
use crate::disparity::DisparityField;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::io::{to_rgb, SceneRecord};
use crate::pipeline::{
    generate_stereo, DisparitySource, StereoInputs, StereoMode, StereoRunConfig,
};
use crate::stereo::{shift_image, ShiftConfig};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(max² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a.mse(b);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over the valid windows of every channel, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = ssim_kernel();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared distance between channel-normalized mid-block features of
/// the trained toy denoiser, both images evaluated at the clean end.
pub fn feature_pd(a: &Image, b: &Image, net: &ToyUNet, codec: &CodecConfig) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if !net.is_trained() {
        return Err(Error::invalid("feature distance needs a trained denoiser"));
    }
    let features = |img: &Image| -> Result<crate::nn::Matrix> {
        let img = if img.channels() == 1 && codec.image_channels == 3 {
            to_rgb(img)
        } else {
            img.clone()
        };
        let z = net.latent_normalizer().standardize(&codec.encode(&img)?)?;
        net.mid_features(&z, 1.0)
    };
    let (fa, fb) = (features(a)?, features(b)?);
    let n = fa.as_slice().len() as f64;
    Ok(fa
        .as_slice()
        .iter()
        .zip(fb.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    LeaveBlank,
    Stretch,
}

impl std::str::FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave_blank" => Ok(Self::LeaveBlank),
            "stretch" => Ok(Self::Stretch),
            other => Err(Error::invalid(format!("unknown fill '{other}'"))),
        }
    }
}

/// Fills each hole with the nearest non-hole pixel to its left in the same
/// row, or to its right when the row starts with holes.
pub fn stretch_fill(image: &Image, hole: &Mask) -> Image {
    let (c, h, w) = image.shape();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if !hole.get(y, x) {
                continue;
            }
            let src = (0..x)
                .rev()
                .find(|&u| !hole.get(y, u))
                .or_else(|| (x + 1..w).find(|&u| !hole.get(y, u)));
            for ch in 0..c {
                out.set(ch, y, x, src.map_or(0.0, |u| image.get(ch, y, u)));
            }
        }
    }
    out
}

/// Image-space stereo pixel shift with a classic hole fill. `shift.scale`
/// is in pixels.
pub fn baseline_warp(
    image: &Image,
    disparity: &DisparityField,
    shift: &ShiftConfig,
    fill: Fill,
) -> Result<Image> {
    let cfg = ShiftConfig {
        fill: 0.0,
        ..*shift
    };
    let (warped, hole) = shift_image(image, disparity, &cfg)?;
    Ok(match fill {
        Fill::LeaveBlank => warped,
        Fill::Stretch => stretch_fill(&warped, &hole),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Psnr,
    Ssim,
    Pd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Psnr => "psnr",
            Self::Ssim => "ssim",
            Self::Pd => "pd",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Self::Pd)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(Self::Psnr),
            "ssim" => Ok(Self::Ssim),
            "pd" | "feature_pd" | "lpips" => Ok(Self::Pd),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

/// A way of producing the right view of a scene.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    LeaveBlank,
    Stretch,
    /// The ground-truth right view itself; a sanity oracle.
    CopyGroundTruth,
    /// Image-to-stereo diffusion from the scene's left view and disparity.
    /// Per-scene fields (mode, size, condition, shift scale) are filled in.
    Diffusion {
        name: String,
        config: StereoRunConfig,
    },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Self::LeaveBlank => "leave_blank",
            Self::Stretch => "stretch",
            Self::CopyGroundTruth => "copy_gt",
            Self::Diffusion { name, .. } => name,
        }
    }

    /// `ours` is unidirectional attention with masked re-pasting; the
    /// `ours_no_spsmd`, `ours_no_attn` and `ours_bi` variants toggle one part.
    pub fn from_name(name: &str, base: &StereoRunConfig) -> Result<Self> {
        use crate::attention::{AttentionMode, AttentionPlan};
        let diffusion = |spsmd: bool, mode: AttentionMode| Method::Diffusion {
            name: name.to_string(),
            config: StereoRunConfig {
                spsmd,
                attention: AttentionPlan {
                    mode,
                    ..base.attention.clone()
                },
                ..base.clone()
            },
        };
        Ok(match name {
            "leave_blank" => Self::LeaveBlank,
            "stretch" => Self::Stretch,
            "copy_gt" => Self::CopyGroundTruth,
            "ours" => diffusion(base.spsmd, base.attention.mode),
            "ours_no_spsmd" => diffusion(false, base.attention.mode),
            "ours_no_attn" => diffusion(base.spsmd, AttentionMode::None),
            "ours_bi" => diffusion(base.spsmd, AttentionMode::Bi),
            other => return Err(Error::invalid(format!("unknown method '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub scene: String,
    pub method: String,
    pub metric: Metric,
    pub value: f64,
}

/// Aggregate of one metric for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub metric: Metric,
    pub values: Vec<f64>,
    pub mean: f64,
    pub best: f64,
    pub worst: f64,
}

impl MetricReport {
    fn from_values(method: &str, metric: Metric, values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let (best, worst) = if metric.higher_is_better() {
            (max, min)
        } else {
            (min, max)
        };
        Self {
            method: method.to_string(),
            metric,
            values,
            mean,
            best,
            worst,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkResult {
    /// Ordered by scene id, then method order, then metric order.
    pub rows: Vec<BenchmarkRow>,
    pub reports: Vec<MetricReport>,
    pub skipped: usize,
}

impl BenchmarkResult {
    pub fn report(&self, method: &str, metric: Metric) -> Option<&MetricReport> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,method,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6}",
                r.scene,
                r.method,
                r.metric.name(),
                r.value
            );
        }
        s
    }

    /// Plain-text table of mean (best / worst) per method and metric.
    pub fn table(&self) -> String {
        let mut metrics: Vec<Metric> = self.reports.iter().map(|r| r.metric).collect();
        metrics.dedup();
        metrics.sort();
        metrics.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.reports {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut s = format!("{:<16}", "method");
        for m in &metrics {
            let _ = write!(s, "{:>30}", format!("{} mean (best/worst)", m.name()));
        }
        s.push('\n');
        for method in methods {
            let _ = write!(s, "{method:<16}");
            for &m in &metrics {
                match self.report(method, m) {
                    Some(r) => {
                        let _ = write!(
                            s,
                            "{:>30}",
                            format!("{:.4} ({:.4}/{:.4})", r.mean, r.best, r.worst)
                        );
                    }
                    None => {
                        let _ = write!(s, "{:>30}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkConfig {
    pub codec: CodecConfig,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

fn check_scene(scene: &SceneRecord) -> Result<&Image> {
    scene.validate()?;
    let right = scene.right.as_ref().ok_or_else(|| {
        Error::MissingInput(format!("scene '{}' has no right ground truth", scene.id))
    })?;
    if !scene.disparity.is_normalized() {
        return Err(Error::invalid(format!(
            "scene '{}' disparity is not normalized",
            scene.id
        )));
    }
    Ok(right)
}

/// Right view of `scene` produced by `method`.
pub fn render_method(
    method: &Method,
    scene: &SceneRecord,
    codec: &CodecConfig,
    model: Option<&dyn Denoiser>,
) -> Result<Image> {
    let pixel_shift =
        ShiftConfig::new(scene.meta.shift_px, crate::stereo::ShiftDirection::Positive);
    match method {
        Method::LeaveBlank => baseline_warp(
            &scene.left,
            &scene.disparity,
            &pixel_shift,
            Fill::LeaveBlank,
        ),
        Method::Stretch => {
            baseline_warp(&scene.left, &scene.disparity, &pixel_shift, Fill::Stretch)
        }
        Method::CopyGroundTruth => check_scene(scene).cloned(),
        Method::Diffusion { config, .. } => {
            let model = model
                .ok_or_else(|| Error::MissingInput("diffusion methods need a denoiser".into()))?;
            let cfg = StereoRunConfig {
                mode: StereoMode::I2si,
                condition: scene.condition,
                height: scene.left.height(),
                width: scene.left.width(),
                codec: *codec,
                shift: ShiftConfig {
                    scale: scene.meta.shift_px / codec.factor as f64,
                    ..config.shift
                },
                ..config.clone()
            };
            let inputs = StereoInputs {
                disparity: Some(DisparitySource::Field(scene.disparity.clone())),
                image: Some(scene.left.clone()),
            };
            Ok(generate_stereo(&cfg, &inputs, model)?.right)
        }
    }
}

fn measure(
    metric: Metric,
    out: &Image,
    gt: &Image,
    net: Option<&ToyUNet>,
    codec: &CodecConfig,
) -> Result<f64> {
    match metric {
        Metric::Psnr => psnr(out, gt, 1.0),
        Metric::Ssim => ssim(out, gt),
        Metric::Pd => feature_pd(
            out,
            gt,
            net.ok_or_else(|| Error::MissingInput("pd needs the trained toy denoiser".into()))?,
            codec,
        ),
    }
}

fn evaluate_scene(
    scene: &SceneRecord,
    methods: &[Method],
    metrics: &[Metric],
    cfg: &BenchmarkConfig,
    net: Option<&ToyUNet>,
) -> Result<Vec<BenchmarkRow>> {
    let gt = check_scene(scene)?;
    let mut rows = Vec::with_capacity(methods.len() * metrics.len());
    for method in methods {
        let out = render_method(method, scene, &cfg.codec, net.map(|n| n as &dyn Denoiser))?;
        for &metric in metrics {
            rows.push(BenchmarkRow {
                scene: scene.id.clone(),
                method: method.name().to_string(),
                metric,
                value: measure(metric, &out, gt, net, &cfg.codec)?,
            });
        }
    }
    Ok(rows)
}

/// Evaluates every method on every scene. Scenes that fail are skipped with
/// a warning; results are ordered by scene id regardless of scheduling.
pub fn run_benchmark(
    corpus: &[SceneRecord],
    methods: &[Method],
    metrics: &[Metric],
    cfg: &BenchmarkConfig,
    net: Option<&ToyUNet>,
) -> Result<BenchmarkResult> {
    if corpus.is_empty() {
        return Err(Error::invalid("benchmark corpus is empty"));
    }
    if methods.is_empty() || metrics.is_empty() {
        return Err(Error::invalid(
            "benchmark needs at least one method and one metric",
        ));
    }
    let run = || -> Vec<(String, Result<Vec<BenchmarkRow>>)> {
        corpus
            .par_iter()
            .map(|s| (s.id.clone(), evaluate_scene(s, methods, metrics, cfg, net)))
            .collect()
    };
    let mut per_scene = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?
            .install(run)
    } else {
        run()
    };
    per_scene.sort_by(|a, b| a.0.cmp(&b.0));

    let mut rows = Vec::new();
    let mut skipped = 0;
    for (id, r) in per_scene {
        match r {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                log::warn!("skipping scene '{id}': {e}");
                skipped += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(
            "every scene of the benchmark corpus was skipped",
        ));
    }
    let mut reports = Vec::new();
    for method in methods {
        for &metric in metrics {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method.name() && r.metric == metric)
                .map(|r| r.value)
                .collect();
            reports.push(MetricReport::from_values(method.name(), metric, values));
        }
    }
    Ok(BenchmarkResult {
        rows,
        reports,
        skipped,
    })
}
