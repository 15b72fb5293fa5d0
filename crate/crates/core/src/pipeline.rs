//! Stereo pair generation for the three input scenarios.
//!
//! The left latent is denoised alone down to the shift step, copied and
//! pixel-shifted into the right latent, and both are then denoised together
//! with attention control and masked re-pasting of the shifted left latent.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{paired_denoise, AttentionMode, AttentionPlan, LayerSelector};
use crate::codec::{CodecConfig, LatentNormalizer};
use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::{
    ddim_step, sampling_schedule, NoiseSchedule, ScheduleKind, DEFAULT_SAMPLING_STEPS,
};
use crate::disparity::{resample_to_latent, DisparityField, Resolution};
use crate::error::{Error, Result};
use crate::grid::{Image, LatentGrid, Mask};
use crate::inversion::{ddim_invert, null_text_optimize, Guidance, NullTextConfig, NullTextState};
use crate::io::to_rgb;
use crate::stereo::{deblur_fill, select, stereo_pixel_shift, ShiftConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StereoMode {
    /// Generated from noise under a condition token.
    #[default]
    T2si,
    /// Generated from noise with a user-supplied disparity map.
    D2si,
    /// Derived from an input image by inversion.
    I2si,
}

impl std::str::FromStr for StereoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2si" => Ok(Self::T2si),
            "d2si" => Ok(Self::D2si),
            "i2si" => Ok(Self::I2si),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for StereoMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::T2si => "t2si",
            Self::D2si => "d2si",
            Self::I2si => "i2si",
        })
    }
}

/// End of the ladder the shift fraction is measured from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShiftOrigin {
    /// Counted from pure noise: fraction 0.2 of 50 steps shifts after 10 steps.
    #[default]
    NoiseEnd,
    /// Counted from the clean image: fraction 0.2 of 50 shifts at timestep 10.
    ImageEnd,
}

pub type DisparityProvider = Arc<dyn Fn(&Image) -> Result<DisparityField> + Send + Sync>;

#[derive(Clone)]
pub enum DisparitySource {
    /// A normalized field at image or latent resolution.
    Field(DisparityField),
    /// Estimates a normalized image-resolution field from an image: the
    /// input image in i2si, the predicted clean left image otherwise.
    Provider(DisparityProvider),
}

impl std::fmt::Debug for DisparitySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Field(d) => f
                .debug_tuple("Field")
                .field(&(d.height(), d.width()))
                .finish(),
            Self::Provider(_) => f.write_str("Provider"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct StereoInputs {
    pub disparity: Option<DisparitySource>,
    pub image: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoRunConfig {
    pub mode: StereoMode,
    pub steps: usize,
    pub shift_fraction: f64,
    pub shift_origin: ShiftOrigin,
    pub shift: ShiftConfig,
    pub spsmd: bool,
    /// Paste every `spsmd_interval` paired steps, starting with the first.
    pub spsmd_interval: usize,
    pub deblur: bool,
    pub attention: AttentionPlan,
    pub seed: u64,
    pub condition: usize,
    pub guidance: f64,
    pub null_text: NullTextConfig,
    pub schedule: ScheduleKind,
    pub codec: CodecConfig,
    /// Image size for runs that start from noise without an input image.
    pub height: usize,
    pub width: usize,
    /// Shift both latents by half the scale in opposite directions.
    pub dual_shift: bool,
}

impl Default for StereoRunConfig {
    fn default() -> Self {
        Self {
            mode: StereoMode::T2si,
            steps: DEFAULT_SAMPLING_STEPS,
            shift_fraction: 0.2,
            shift_origin: ShiftOrigin::NoiseEnd,
            shift: ShiftConfig::default(),
            spsmd: true,
            spsmd_interval: 1,
            deblur: false,
            attention: AttentionPlan::new(AttentionMode::Uni),
            seed: 0,
            condition: 0,
            guidance: 1.0,
            null_text: NullTextConfig::default(),
            schedule: ScheduleKind::LinearBeta,
            codec: CodecConfig::default(),
            height: 32,
            width: 32,
            dual_shift: false,
        }
    }
}

impl StereoRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampling steps must be positive"));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "shift fraction must lie in (0, 1), got {}",
                self.shift_fraction
            )));
        }
        if self.spsmd_interval == 0 {
            return Err(Error::invalid("spsmd interval must be positive"));
        }
        if !(self.guidance.is_finite()) {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        Ok(())
    }

    /// Number of denoising steps taken before the shift.
    pub fn shift_step_index(&self) -> usize {
        let k = (self.shift_fraction * self.steps as f64).round() as usize;
        match self.shift_origin {
            ShiftOrigin::NoiseEnd => k,
            ShiftOrigin::ImageEnd => self.steps - k.min(self.steps),
        }
    }

    /// Sampling timestep whose latent is shifted.
    pub fn shift_timestep(&self) -> usize {
        self.steps - self.shift_step_index().min(self.steps)
    }

    fn key_values(&self) -> Vec<(&'static str, String)> {
        let a = &self.attention;
        vec![
            ("mode", self.mode.to_string()),
            ("steps", self.steps.to_string()),
            ("shift_fraction", self.shift_fraction.to_string()),
            (
                "shift_origin",
                match self.shift_origin {
                    ShiftOrigin::NoiseEnd => "noise_end",
                    ShiftOrigin::ImageEnd => "image_end",
                }
                .into(),
            ),
            ("shift_step_index", self.shift_step_index().to_string()),
            ("shift_timestep", self.shift_timestep().to_string()),
            ("scale_s", self.shift.scale.to_string()),
            ("sign", self.shift.direction.sign().to_string()),
            ("spsmd", self.spsmd.to_string()),
            ("spsmd_interval", self.spsmd_interval.to_string()),
            ("deblur", self.deblur.to_string()),
            ("attention", a.mode.to_string()),
            (
                "attention_layers",
                match &a.layers {
                    LayerSelector::All => "all".into(),
                    LayerSelector::Only(v) => {
                        v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
                    }
                },
            ),
            (
                "attention_range",
                a.active
                    .map_or("all".into(), |r| format!("{}-{}", r.high, r.low)),
            ),
            ("uni_direction", format!("{:?}", a.uni_direction)),
            ("seed", self.seed.to_string()),
            ("condition", self.condition.to_string()),
            ("guidance", self.guidance.to_string()),
            ("null_text_iters", self.null_text.iters.to_string()),
            ("null_text_lr", self.null_text.learning_rate.to_string()),
            ("schedule", format!("{:?}", self.schedule)),
            ("codec_factor", self.codec.factor.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("dual_shift", self.dual_shift.to_string()),
        ]
    }

    /// SHA-256 of the configuration's key=value text.
    pub fn config_hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.key_values() {
            let _ = writeln!(text, "{k}={v}");
        }
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Ordered `key=value` record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("provenance", format!("expected key=value, got '{line}'"))
            })?;
            p.push(k.trim(), v.trim());
        }
        Ok(p)
    }
}

/// The latents involved in one masked paste.
#[derive(Clone, Debug, PartialEq)]
pub struct PasteTrace {
    pub timestep: usize,
    /// `X'`: the right latent after the paste.
    pub pasted: LatentGrid,
    /// The shifted previous left latent that was pasted from.
    pub shifted_left: LatentGrid,
    pub moved_mask: Mask,
}

#[derive(Clone, Debug)]
pub struct StereoPair {
    pub left: Image,
    pub right: Image,
    /// Final latents in the denoiser's standardized space.
    pub left_latent: LatentGrid,
    pub right_latent: LatentGrid,
    /// Latent-resolution disparity used for the shift.
    pub disparity: DisparityField,
    pub moved_mask: Mask,
    pub hole_mask: Mask,
    pub last_paste: Option<PasteTrace>,
    pub null_text: Option<NullTextState>,
    pub provenance: Provenance,
}

struct Prepared {
    schedule: NoiseSchedule,
    normalizer: LatentNormalizer,
    start: LatentGrid,
    null_text: Option<NullTextState>,
    guidance: Guidance,
    input_image: Option<Image>,
}

impl Prepared {
    fn guidance_at(&self, t: usize) -> Result<Guidance> {
        match &self.null_text {
            Some(state) => Ok(self
                .guidance
                .clone()
                .with_unconditional(Condition::Embedding(state.embedding(t)?.clone()))),
            None => Ok(self.guidance.clone()),
        }
    }

    fn decode(&self, codec: &CodecConfig, z: &LatentGrid) -> Result<Image> {
        Ok(codec.decode(&self.normalizer.destandardize(z)?)?.clamped())
    }
}

fn check_finite(z: &LatentGrid, t: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite latent at timestep {t}"
        )))
    }
}

fn prepare(
    cfg: &StereoRunConfig,
    inputs: &StereoInputs,
    denoiser: &dyn Denoiser,
    provenance: &mut Provenance,
) -> Result<Prepared> {
    cfg.validate()?;
    let schedule = sampling_schedule(cfg.schedule, cfg.steps)?;
    let guidance = Guidance::new(Condition::token(cfg.condition), cfg.guidance);
    let channels = cfg.codec.latent_channels();
    let normalizer = denoiser
        .normalizer()
        .cloned()
        .unwrap_or_else(|| LatentNormalizer::identity(channels));
    match cfg.mode {
        StereoMode::I2si => {
            let image = inputs
                .image
                .as_ref()
                .ok_or_else(|| Error::MissingInput("i2si needs an input image".into()))?;
            let image = if image.channels() == 1 && cfg.codec.image_channels == 3 {
                to_rgb(image)
            } else {
                image.clone()
            };
            let x0 = normalizer.standardize(&cfg.codec.encode(&image)?)?;
            let t0 = Instant::now();
            let pivot = ddim_invert(&x0, &guidance.condition, denoiser, &schedule, 1.0)?;
            provenance.push("time_inversion_ms", t0.elapsed().as_millis());
            let null_text = if cfg.guidance != 1.0 {
                let t0 = Instant::now();
                let nt = NullTextConfig {
                    guidance: cfg.guidance,
                    ..cfg.null_text.clone()
                };
                let state = null_text_optimize(&pivot, denoiser, &schedule, &nt)?;
                provenance.push("time_null_text_ms", t0.elapsed().as_millis());
                provenance.push(
                    "null_text_initial_loss",
                    format!("{:.6e}", state.mean_initial_loss()),
                );
                provenance.push(
                    "null_text_final_loss",
                    format!("{:.6e}", state.mean_final_loss()),
                );
                Some(state)
            } else {
                None
            };
            Ok(Prepared {
                start: pivot.end().clone(),
                schedule,
                normalizer,
                null_text,
                guidance,
                input_image: Some(image),
            })
        }
        StereoMode::T2si | StereoMode::D2si => {
            let (lc, lh, lw) = cfg.codec.latent_shape(cfg.height, cfg.width)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Ok(Prepared {
                start: LatentGrid::randn(lc, lh, lw, &mut rng),
                schedule,
                normalizer,
                null_text: None,
                guidance,
                input_image: None,
            })
        }
    }
}

/// Denoises the left latent alone from the top of the ladder down to `until`.
fn denoise_single(
    prep: &Prepared,
    mut z: LatentGrid,
    until: usize,
    denoiser: &dyn Denoiser,
) -> Result<LatentGrid> {
    for t in (until + 1..=prep.schedule.total_steps()).rev() {
        let eps = prep
            .guidance_at(t)?
            .epsilon(denoiser, &z, prep.schedule.alpha_bar(t)?)?;
        z = ddim_step(&z, &eps, t, &prep.schedule)?;
        check_finite(&z, t)?;
    }
    Ok(z)
}

/// The left image a run would produce without any stereo machinery.
pub fn generate_single(
    cfg: &StereoRunConfig,
    inputs: &StereoInputs,
    denoiser: &dyn Denoiser,
) -> Result<Image> {
    let prep = prepare(cfg, inputs, denoiser, &mut Provenance::default())?;
    let z = denoise_single(&prep, prep.start.clone(), 0, denoiser)?;
    prep.decode(&cfg.codec, &z)
}

fn latent_disparity(
    field: &DisparityField,
    lat: (usize, usize),
    codec: &CodecConfig,
) -> Result<DisparityField> {
    if !field.is_normalized() {
        return Err(Error::invalid("disparity must be normalized to [0, 1]"));
    }
    let d = match field.resolution() {
        Resolution::Latent => field.clone(),
        Resolution::Image => resample_to_latent(field, codec)?,
    };
    if (d.height(), d.width()) != lat {
        return Err(Error::shape(lat, (d.height(), d.width())));
    }
    Ok(d)
}

pub fn generate_stereo(
    cfg: &StereoRunConfig,
    inputs: &StereoInputs,
    denoiser: &dyn Denoiser,
) -> Result<StereoPair> {
    let started = Instant::now();
    let mut provenance = Provenance::default();
    for (k, v) in cfg.key_values() {
        provenance.push(k, v);
    }
    provenance.push("config_hash", cfg.config_hash());

    if cfg.mode == StereoMode::D2si && !matches!(inputs.disparity, Some(DisparitySource::Field(_)))
    {
        return Err(Error::MissingInput("d2si needs a disparity field".into()));
    }
    let source = inputs
        .disparity
        .as_ref()
        .ok_or_else(|| Error::MissingInput("a disparity field or provider is required".into()))?;
    if cfg.attention.mode != AttentionMode::None && !denoiser.supports_attention_control() {
        return Err(Error::Unsupported(
            "denoiser does not expose self-attention layers; attention mode must be none".into(),
        ));
    }

    let prep = prepare(cfg, inputs, denoiser, &mut provenance)?;
    let schedule = &prep.schedule;
    let lat = (prep.start.height(), prep.start.width());
    let t_shift = cfg.shift_timestep();

    let t0 = Instant::now();
    let left_at_shift = denoise_single(&prep, prep.start.clone(), t_shift, denoiser)?;
    provenance.push("time_left_only_ms", t0.elapsed().as_millis());

    let disparity = match source {
        DisparitySource::Field(f) => latent_disparity(f, lat, &cfg.codec)?,
        DisparitySource::Provider(p) => {
            let image = match (&prep.input_image, cfg.mode) {
                (Some(img), StereoMode::I2si) => img.clone(),
                _ => {
                    // predicted clean left image at the shift step
                    let a = schedule.alpha_bar(t_shift)?;
                    let x0 = if t_shift == 0 {
                        left_at_shift.clone()
                    } else {
                        let eps =
                            prep.guidance_at(t_shift)?
                                .epsilon(denoiser, &left_at_shift, a)?;
                        left_at_shift.zip_map(&eps, |x, e| (x - (1.0 - a).sqrt() * e) / a.sqrt())?
                    };
                    prep.decode(&cfg.codec, &x0)?
                }
            };
            latent_disparity(&p(&image)?, lat, &cfg.codec)?
        }
    };

    if let Some((_, hi)) = disparity.valid_range() {
        let width = disparity.width() as f64;
        if cfg.shift.scale * hi > 0.1 * width {
            log::info!(
                "maximum shift {:.2} exceeds 10% of the latent width {width}",
                cfg.shift.scale * hi
            );
        }
    }
    let shifted = stereo_pixel_shift(&left_at_shift, &disparity, &cfg.shift)?;
    let moved_mask = shifted.moved_mask.clone();
    let hole_mask = shifted.hole_mask.clone();
    let mut right = shifted.warped;
    let mut left = left_at_shift;
    if cfg.dual_shift {
        let half = ShiftConfig {
            scale: cfg.shift.scale / 2.0,
            direction: cfg.shift.direction.flipped(),
            ..cfg.shift
        };
        let l = stereo_pixel_shift(&left, &disparity, &half)?.warped;
        let r = stereo_pixel_shift(
            &left,
            &disparity,
            &ShiftConfig {
                scale: cfg.shift.scale / 2.0,
                ..cfg.shift
            },
        )?
        .warped;
        left = l;
        right = r;
    }
    if cfg.deblur {
        right = deblur_fill(&right, &hole_mask, cfg.seed ^ 0x5eed_deb1)?;
    }
    provenance.push("moved_sites", moved_mask.count());
    provenance.push("hole_sites", hole_mask.count());

    let t0 = Instant::now();
    let mut last_paste = None;
    for t in (1..=t_shift).rev() {
        let guidance = prep.guidance_at(t)?;
        let (eps_l, eps_r) = paired_denoise(
            &left,
            &right,
            t,
            schedule,
            &guidance,
            &cfg.attention,
            denoiser,
        )?;
        let left_prev = ddim_step(&left, &eps_l, t, schedule)?;
        let paste_now =
            cfg.spsmd && (t_shift - t).is_multiple_of(cfg.spsmd_interval) && !moved_mask.is_empty();
        let x_prime = if paste_now {
            let shifted_left = stereo_pixel_shift(&left_prev, &disparity, &cfg.shift)?.warped;
            let pasted = select(&moved_mask, &shifted_left, &right);
            last_paste = Some(PasteTrace {
                timestep: t,
                pasted: pasted.clone(),
                shifted_left,
                moved_mask: moved_mask.clone(),
            });
            pasted
        } else {
            right
        };
        right = ddim_step(&x_prime, &eps_r, t, schedule)?;
        left = left_prev;
        check_finite(&left, t)?;
        check_finite(&right, t)?;
    }
    provenance.push("time_paired_ms", t0.elapsed().as_millis());

    let left_image = prep.decode(&cfg.codec, &left)?;
    let right_image = prep.decode(&cfg.codec, &right)?;
    provenance.push("time_total_ms", started.elapsed().as_millis());
    Ok(StereoPair {
        left: left_image,
        right: right_image,
        left_latent: left,
        right_latent: right,
        disparity,
        moved_mask,
        hole_mask,
        last_paste,
        null_text: prep.null_text,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticGaussian;

    fn analytic(h: usize, w: usize) -> AnalyticGaussian {
        let mu = LatentGrid::from_fn(12, h, w, |c, y, x| 0.1 * ((c + y + 2 * x) % 5) as f64 - 0.2);
        AnalyticGaussian::new(mu, 0.05).unwrap()
    }

    fn cfg() -> StereoRunConfig {
        StereoRunConfig {
            mode: StereoMode::D2si,
            steps: 10,
            attention: AttentionPlan::new(AttentionMode::None),
            height: 8,
            width: 8,
            ..StereoRunConfig::default()
        }
    }

    #[test]
    fn shift_step_counts() {
        let c = StereoRunConfig::default();
        assert_eq!(c.shift_step_index(), 10);
        assert_eq!(c.shift_timestep(), 40);
        let img = StereoRunConfig {
            shift_origin: ShiftOrigin::ImageEnd,
            ..c
        };
        assert_eq!(img.shift_timestep(), 10);
        assert!(StereoRunConfig {
            shift_fraction: 1.0,
            ..StereoRunConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_disparity_gives_identical_views() {
        let d = DisparityField::constant(8, 8, 0.0, Resolution::Image);
        let inputs = StereoInputs {
            disparity: Some(DisparitySource::Field(d)),
            image: None,
        };
        let pair = generate_stereo(&cfg(), &inputs, &analytic(4, 4)).unwrap();
        assert_eq!(pair.left, pair.right);
        assert!(pair.last_paste.is_none());
        assert_eq!(pair.provenance.get("shift_step_index"), Some("2"));
    }

    #[test]
    fn missing_inputs_and_unsupported_attention() {
        let none = StereoInputs::default();
        assert!(matches!(
            generate_stereo(&cfg(), &none, &analytic(4, 4)),
            Err(Error::MissingInput(_))
        ));
        let d = StereoInputs {
            disparity: Some(DisparitySource::Field(DisparityField::constant(
                8,
                8,
                0.0,
                Resolution::Image,
            ))),
            image: None,
        };
        let uni = StereoRunConfig {
            attention: AttentionPlan::new(AttentionMode::Uni),
            ..cfg()
        };
        assert!(matches!(
            generate_stereo(&uni, &d, &analytic(4, 4)),
            Err(Error::Unsupported(_))
        ));
        let i2si = StereoRunConfig {
            mode: StereoMode::I2si,
            ..cfg()
        };
        assert!(matches!(
            generate_stereo(&i2si, &d, &analytic(4, 4)),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn provenance_roundtrip() {
        let mut p = Provenance::default();
        p.push("a", 1);
        p.push("b", "x=y");
        assert_eq!(Provenance::from_text(&p.to_text()).unwrap(), p);
    }
}
