//! Noise schedules and the deterministic DDIM update.
//!
//! A single cumulative sequence `alpha_bar[t]` is used for both the sampler and
//! the forward noising map: `alpha_bar[0] == 1`, strictly decreasing after that.
//! The DDIM literature writes this cumulative product as `alpha_t`, the DDPM
//! literature as `alpha_bar_t`; here they are the same field.
//!
//! The sampler is always deterministic (`sigma_t = 0`). Randomness enters only
//! through noise grids supplied by the caller.

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// Training noise-schedule profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    /// Per-step retention `1 - beta` with `beta` linear in `[1e-4, 0.02]`
    /// (rescaled by `1000 / T` so short schedules reach a comparable noise level).
    #[default]
    LinearBeta,
    /// Squared-cosine profile with offset `0.008`, betas clipped at `0.999`.
    Cosine,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
pub const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal-retention coefficients indexed by timestep `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    /// Training-schedule timestep each index was taken from.
    train_index: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit cumulative sequence, checking its invariants.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(Error::invalid(format!(
                    "alpha_bar must be strictly decreasing in (0, 1]: alpha_bar[{}] = {}, alpha_bar[{}] = {}",
                    t,
                    w[0],
                    t + 1,
                    w[1]
                )));
            }
        }
        let train_index = (0..alpha_bar.len()).collect();
        Ok(Self {
            alpha_bar,
            train_index,
        })
    }

    /// Number of steps `T`.
    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.total_steps(),
            })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// The descending sampling ladder `T, T-1, ..., 1`.
    pub fn timesteps(&self) -> Vec<usize> {
        (1..=self.total_steps()).rev().collect()
    }

    /// Index into the training schedule that timestep `t` was sampled from.
    pub fn train_timestep(&self, t: usize) -> usize {
        self.train_index[t]
    }

    /// Evenly strided sub-schedule with `steps` sampling steps.
    ///
    /// Index `k >= 1` maps to training timestep `(k - 1) * stride + 1` with
    /// `stride = T / steps`; index 0 keeps `alpha_bar = 1`.
    pub fn subsample(&self, steps: usize) -> Result<Self> {
        let total = self.total_steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={total}, got {steps}"
            )));
        }
        let stride = total / steps;
        let mut alpha_bar = vec![1.0];
        let mut train_index = vec![0];
        for k in 1..=steps {
            let src = (k - 1) * stride + 1;
            alpha_bar.push(self.alpha_bar[src]);
            train_index.push(self.train_index[src]);
        }
        Ok(Self {
            alpha_bar,
            train_index,
        })
    }

    fn check_step(&self, t: usize, min: usize, max: usize) -> Result<()> {
        if t < min || t > max {
            return Err(Error::TimestepOutOfRange { t, min, max });
        }
        Ok(())
    }
}

/// Training schedule of the given profile with `total` steps.
pub fn make_schedule(kind: ScheduleKind, total: usize) -> Result<NoiseSchedule> {
    if total < 1 {
        return Err(Error::invalid("schedule length must be at least 1"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            let scale = 1000.0 / total as f64;
            let (b0, b1) = (LINEAR_BETA_START * scale, LINEAR_BETA_END * scale);
            (0..total)
                .map(|i| {
                    let frac = if total == 1 {
                        0.0
                    } else {
                        i as f64 / (total - 1) as f64
                    };
                    (b0 + (b1 - b0) * frac).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let arg = (t / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                    * std::f64::consts::FRAC_PI_2;
                arg.cos().powi(2)
            };
            (0..total)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-12, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(total + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// The default sampling schedule: a 1000-step linear-beta training schedule
/// strided down to `steps` sampling steps.
pub fn sampling_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    make_schedule(kind, DEFAULT_TRAIN_STEPS)?.subsample(steps)
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// One deterministic DDIM update `x_t -> x_{t-1}`.
pub fn ddim_step(
    x_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(eps)?;
    schedule.check_step(t, 1, schedule.total_steps())?;
    let a_t = schedule.alpha_bar(t)?;
    let a_prev = schedule.alpha_bar(t - 1)?;
    if a_t <= 0.0 {
        return Err(Error::Numerical(format!("alpha_bar[{t}] is zero")));
    }
    let (sa_t, sn_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_prev, sn_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    x_t.zip_map(eps, |x, e| {
        let x0 = (x - sn_t * e) / sa_t;
        sa_prev * x0 + sn_prev * e
    })
}

/// Forward noising `sqrt(a_t) * x0 + sqrt(1 - a_t) * eps`.
pub fn forward_noise(
    x0: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x0.ensure_same_shape(eps)?;
    let a_t = schedule.alpha_bar(t)?;
    let (sa, sn) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    x0.zip_map(eps, |x, e| sa * x + sn * e)
}

/// Classifier-free guidance `eps_uncond + w * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &LatentGrid, eps_cond: &LatentGrid, w: f64) -> Result<LatentGrid> {
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// One DDIM inversion update `z_t -> z_{t+1}`, the exact algebraic inverse of
/// [`ddim_step`] when the same `eps` is supplied to both.
pub fn ddim_invert_step(
    z_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.ensure_same_shape(eps)?;
    schedule.check_step(t, 0, schedule.total_steps() - 1)?;
    let a_t = schedule.alpha_bar(t)?;
    let a_next = schedule.alpha_bar(t + 1)?;
    if a_next <= 0.0 {
        return Err(Error::Numerical(format!("alpha_bar[{}] is zero", t + 1)));
    }
    let scale = (a_next / a_t).sqrt();
    // z_{t+1} / sqrt(a_next) = z_t / sqrt(a_t) + (sqrt(1/a_next - 1) - sqrt(1/a_t - 1)) * eps
    let coef = a_next.sqrt() * ((1.0 / a_next - 1.0).sqrt() - (1.0 / a_t - 1.0).sqrt());
    z_t.zip_map(eps, |z, e| scale * z + coef * e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f64]) -> LatentGrid {
        LatentGrid::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    fn two_point(a_t: f64, a_prev: f64) -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, a_prev, a_t]).unwrap()
    }

    #[test]
    fn ddim_step_predicted_x0_only() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let out = ddim_step(&grid(&[0.5]), &grid(&[0.0]), 1, &s).unwrap();
        assert!((out.as_slice()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ddim_step_pure_direction_term() {
        let s = two_point(0.36, 0.64);
        let out = ddim_step(&grid(&[0.8]), &grid(&[1.0]), 2, &s).unwrap();
        assert!((out.as_slice()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ddim_step_errors() {
        let s = two_point(0.36, 0.64);
        assert!(ddim_step(&grid(&[0.8]), &grid(&[1.0, 2.0]), 2, &s).is_err());
        assert!(ddim_step(&grid(&[0.8]), &grid(&[1.0]), 0, &s).is_err());
        assert!(ddim_step(&grid(&[0.8]), &grid(&[1.0]), 3, &s).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let x0 = grid(&[2.0, -3.0]);
        let eps = grid(&[-1.0, 5.0]);
        assert_eq!(forward_noise(&x0, &eps, 0, &s).unwrap(), x0);
        let out = forward_noise(&grid(&[2.0]), &grid(&[-1.0]), 1, &s).unwrap();
        assert!((out.as_slice()[0] - (1.0 - 0.75f64.sqrt())).abs() < 1e-15);
        assert!(forward_noise(&x0, &eps, 2, &s).is_err());
    }

    #[test]
    fn cfg_combine_examples() {
        let u = grid(&[0.3, -1.0]);
        let c = grid(&[0.7, 4.0]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(
            cfg_combine(&grid(&[0.0]), &grid(&[1.0]), 2.0).unwrap(),
            grid(&[2.0])
        );
        assert!(cfg_combine(&u, &grid(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn invert_step_pure_scaling() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let out = ddim_invert_step(&grid(&[2.0]), &grid(&[0.0]), 0, &s).unwrap();
        assert!((out.as_slice()[0] - 1.0).abs() < 1e-15);
        assert!(ddim_invert_step(&grid(&[2.0]), &grid(&[0.0]), 1, &s).is_err());
    }

    #[test]
    fn invert_then_step_roundtrip() {
        let s = make_schedule(ScheduleKind::LinearBeta, 1000)
            .unwrap()
            .subsample(50)
            .unwrap();
        let z = grid(&[0.3, -1.2, 2.5]);
        let e = grid(&[0.9, 0.1, -0.4]);
        for t in 0..50 {
            let up = ddim_invert_step(&z, &e, t, &s).unwrap();
            let back = ddim_step(&up, &e, t + 1, &s).unwrap();
            assert!(back.max_abs_diff(&z) <= 1e-9, "t={t}");
        }
    }

    #[test]
    fn schedules_satisfy_invariants() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for total in [1, 2, 7, 50, 1000] {
                let s = make_schedule(kind, total).unwrap();
                assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
                for w in s.alpha_bars().windows(2) {
                    assert!(w[1] < w[0] && w[1] > 0.0);
                    assert!(w[1] / w[0] > 0.0 && w[1] / w[0] < 1.0);
                }
            }
        }
        assert!(make_schedule(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn linear_schedule_reaches_low_signal() {
        let s = make_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        let end = s.alpha_bar(1000).unwrap();
        assert!(end < 0.01);
        // frozen regression value
        assert!((end - 4.035829e-5).abs() < 1e-10, "{end:e}");
    }

    #[test]
    fn cosine_midpoint_matches_profile() {
        let s = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let f = |x: f64| {
            ((x + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let expected = f(0.5) / f(0.0);
        assert!((s.alpha_bar(25).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn subsample_ladder() {
        let train = make_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        let s = train.subsample(50).unwrap();
        assert_eq!(s.total_steps(), 50);
        assert_eq!(s.train_timestep(1), 1);
        assert_eq!(s.train_timestep(50), 981);
        assert_eq!(s.alpha_bar(2).unwrap(), train.alpha_bar(21).unwrap());
        assert_eq!(s.timesteps().first(), Some(&50));
        assert_eq!(s.timesteps().last(), Some(&1));
        assert!(train.subsample(0).is_err());
        assert!(train.subsample(1001).is_err());
    }
}
