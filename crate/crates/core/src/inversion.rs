//! DDIM inversion and per-timestep null-embedding optimization.

use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::{cfg_combine, ddim_invert_step, ddim_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::Matrix;

/// A conditional prediction blended with an unconditional one at `scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub condition: Condition,
    pub unconditional: Condition,
    pub scale: f64,
}

impl Guidance {
    pub fn new(condition: Condition, scale: f64) -> Self {
        Self {
            condition,
            unconditional: Condition::Null,
            scale,
        }
    }

    /// Scale 1: the conditional prediction alone.
    pub fn unguided(condition: Condition) -> Self {
        Self::new(condition, 1.0)
    }

    pub fn with_unconditional(mut self, unconditional: Condition) -> Self {
        self.unconditional = unconditional;
        self
    }

    pub fn epsilon(
        &self,
        denoiser: &dyn Denoiser,
        x: &LatentGrid,
        alpha_bar: f64,
    ) -> Result<LatentGrid> {
        let cond = denoiser.predict(x, alpha_bar, &self.condition)?;
        if self.scale == 1.0 {
            return Ok(cond);
        }
        let uncond = denoiser.predict(x, alpha_bar, &self.unconditional)?;
        cfg_combine(&uncond, &cond, self.scale)
    }
}

/// `latents[t]` is `z*_t` for `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct PivotTrajectory {
    pub latents: Vec<LatentGrid>,
    pub guidance: f64,
    pub condition: Condition,
}

impl PivotTrajectory {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn start(&self) -> &LatentGrid {
        &self.latents[0]
    }

    pub fn end(&self) -> &LatentGrid {
        self.latents.last().expect("non-empty trajectory")
    }
}

/// Fixed-point passes [`ddim_invert`] spends on each step.
pub const DEFAULT_INVERSION_REFINEMENT: usize = 2;

/// Runs the inversion ladder `z_0 -> z_T` with the default refinement.
pub fn ddim_invert(
    x0: &LatentGrid,
    condition: &Condition,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    w: f64,
) -> Result<PivotTrajectory> {
    ddim_invert_refined(
        x0,
        condition,
        denoiser,
        schedule,
        w,
        DEFAULT_INVERSION_REFINEMENT,
    )
}

/// Inversion ladder with `refine` fixed-point passes per step. The noise for
/// step `t -> t+1` is first predicted from `z_t` at the noise level of `t+1`;
/// each pass re-predicts it from the current estimate of `z_{t+1}`, so the
/// step approaches the exact inverse of the sampler step. `refine = 0` is the
/// plain one-evaluation inversion.
pub fn ddim_invert_refined(
    x0: &LatentGrid,
    condition: &Condition,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    w: f64,
    refine: usize,
) -> Result<PivotTrajectory> {
    let guidance = Guidance::new(condition.clone(), w);
    let mut latents = Vec::with_capacity(schedule.total_steps() + 1);
    latents.push(x0.clone());
    for t in 0..schedule.total_steps() {
        let z = &latents[t];
        let a_next = schedule.alpha_bar(t + 1)?;
        let mut eps = guidance.epsilon(denoiser, z, a_next)?;
        let mut next = ddim_invert_step(z, &eps, t, schedule)?;
        for _ in 0..refine {
            if !next.is_finite() {
                break;
            }
            eps = guidance.epsilon(denoiser, &next, a_next)?;
            next = ddim_invert_step(z, &eps, t, schedule)?;
        }
        if !next.is_finite() {
            return Err(Error::Diverged {
                step: t,
                reason: "inversion produced non-finite latent".into(),
            });
        }
        latents.push(next);
    }
    Ok(PivotTrajectory {
        latents,
        guidance: w,
        condition: condition.clone(),
    })
}

/// Deterministic DDIM sampling from `x` at timestep `from` down to 0.
/// With `null_text`, the unconditional branch at step `t` uses the optimized
/// embedding for that step.
pub fn ddim_sample(
    x: &LatentGrid,
    from: usize,
    schedule: &NoiseSchedule,
    guidance: &Guidance,
    denoiser: &dyn Denoiser,
    null_text: Option<&NullTextState>,
) -> Result<LatentGrid> {
    let mut z = x.clone();
    for t in (1..=from).rev() {
        let g = match null_text {
            Some(state) => guidance
                .clone()
                .with_unconditional(Condition::Embedding(state.embedding(t)?.clone())),
            None => guidance.clone(),
        };
        let eps = g.epsilon(denoiser, &z, schedule.alpha_bar(t)?)?;
        z = ddim_step(&z, &eps, t, schedule)?;
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NullTextConfig {
    pub guidance: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub max_halvings: usize,
}

impl Default for NullTextConfig {
    fn default() -> Self {
        Self {
            guidance: 3.0,
            iters: 10,
            learning_rate: 0.05,
            tolerance: 1e-5,
            max_halvings: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NullTextState {
    /// `embeddings[t - 1]` is the optimized null embedding for step `t`.
    pub embeddings: Vec<Matrix>,
    /// Per-step discrepancy of the unoptimized guided trajectory (default
    /// null embedding throughout), indexed like `embeddings`.
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    /// Latent reached after the last step with the optimized embeddings.
    pub reconstruction: LatentGrid,
}

impl NullTextState {
    pub fn embedding(&self, t: usize) -> Result<&Matrix> {
        t.checked_sub(1)
            .and_then(|i| self.embeddings.get(i))
            .ok_or(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.embeddings.len(),
            })
    }

    pub fn mean_initial_loss(&self) -> f64 {
        self.initial_losses.iter().sum::<f64>() / self.initial_losses.len() as f64
    }

    pub fn mean_final_loss(&self) -> f64 {
        self.final_losses.iter().sum::<f64>() / self.final_losses.len() as f64
    }
}

/// Optimizes the unconditional embedding at every step so that guided DDIM
/// sampling at `cfg.guidance` tracks the pivot.
///
/// Each step starts from the previous step's optimum (or the default
/// embedding, whichever fits better) and takes at most `cfg.iters`
/// gradient steps on `mean((z_{t-1} - z*_{t-1})²)`. Steps are
/// RMS-normalized, so `cfg.learning_rate` is in embedding units. A step that
/// raises the loss is retried with half the step size, at most
/// `cfg.max_halvings` times, so accepted losses never increase. The latent
/// passed to the next step is the one produced with the optimized embedding.
pub fn null_text_optimize(
    pivot: &PivotTrajectory,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &NullTextConfig,
) -> Result<NullTextState> {
    let steps = pivot.steps();
    if steps != schedule.total_steps() {
        return Err(Error::shape(schedule.total_steps(), steps));
    }
    let default = denoiser.null_embedding()?;
    let mut embedding = default.clone();
    let w = cfg.guidance;
    let mut z = pivot.end().clone();
    let mut z_free = z.clone();
    let mut embeddings = vec![Matrix::zeros(0, 0); steps];
    let mut initial_losses = vec![0.0; steps];
    let mut final_losses = vec![0.0; steps];

    for t in (1..=steps).rev() {
        let a_t = schedule.alpha_bar(t)?;
        let a_prev = schedule.alpha_bar(t - 1)?;
        let target = &pivot.latents[t - 1];
        let eps_c = denoiser.predict(&z, a_t, &pivot.condition)?;
        let n = z.len() as f64;
        // d x_{t-1} / d eps for the deterministic update
        let c_eps = (1.0 - a_prev).sqrt() - a_prev.sqrt() * (1.0 - a_t).sqrt() / a_t.sqrt();

        let evaluate = |emb: &Matrix| -> Result<(f64, LatentGrid)> {
            let eps_u = denoiser.predict(&z, a_t, &Condition::Embedding(emb.clone()))?;
            let eps = cfg_combine(&eps_u, &eps_c, w)?;
            let x_prev = ddim_step(&z, &eps, t, schedule)?;
            let loss = x_prev.mse(target);
            Ok((loss, x_prev))
        };

        let free_eps = Guidance::new(pivot.condition.clone(), w)
            .with_unconditional(Condition::Embedding(default.clone()))
            .epsilon(denoiser, &z_free, a_t)?;
        z_free = ddim_step(&z_free, &free_eps, t, schedule)?;
        initial_losses[t - 1] = z_free.mse(target);

        let (base_loss, base_x) = evaluate(&default)?;
        if !base_loss.is_finite() {
            return Err(Error::Diverged {
                step: t,
                reason: format!("null-text loss is {base_loss}"),
            });
        }
        let (mut loss, mut x_prev) = (base_loss, base_x);
        if t < steps {
            let (wl, wx) = evaluate(&embedding)?;
            if wl < loss {
                loss = wl;
                x_prev = wx;
            } else {
                embedding = default.clone();
            }
        }
        for _ in 0..cfg.iters {
            if loss < cfg.tolerance {
                break;
            }
            let k = (1.0 - w) * c_eps * 2.0 / n;
            let upstream = x_prev.zip_map(target, |a, b| k * (a - b))?;
            let (_, grad) = denoiser.embedding_vjp(&z, a_t, &embedding, &upstream)?;
            let rms = (grad.as_slice().iter().map(|g| g * g).sum::<f64>()
                / grad.as_slice().len() as f64)
                .sqrt();
            if rms == 0.0 || !rms.is_finite() {
                break;
            }
            let mut lr = cfg.learning_rate / rms;
            let mut accepted = false;
            for _ in 0..=cfg.max_halvings {
                let mut cand = embedding.clone();
                for (c, g) in cand.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *c -= lr * g;
                }
                let (cl, cx) = evaluate(&cand)?;
                if cl.is_finite() && cl <= loss {
                    embedding = cand;
                    loss = cl;
                    x_prev = cx;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        final_losses[t - 1] = loss;
        embeddings[t - 1] = embedding.clone();
        z = x_prev;
    }
    Ok(NullTextState {
        embeddings,
        initial_losses,
        final_losses,
        reconstruction: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGaussian, ZeroDenoiser};
    use crate::diffusion::{sampling_schedule, ScheduleKind};

    #[test]
    fn zero_noise_inversion_is_pure_rescaling() {
        let s = sampling_schedule(ScheduleKind::LinearBeta, 10).unwrap();
        let x0 = LatentGrid::from_fn(2, 2, 2, |c, y, x| (c + 2 * y + x) as f64 * 0.1);
        let traj = ddim_invert_refined(&x0, &Condition::Null, &ZeroDenoiser, &s, 1.0, 0).unwrap();
        assert_eq!(traj.latents.len(), 11);
        assert_eq!(traj.start(), &x0);
        for t in 1..=10 {
            let expect = x0.map(|v| v * s.alpha_bar(t).unwrap().sqrt());
            assert!(traj.latents[t].max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn analytic_roundtrip_is_close() {
        let s = sampling_schedule(ScheduleKind::LinearBeta, 50).unwrap();
        let mu = LatentGrid::from_fn(1, 4, 4, |_, y, x| 0.5 + 0.05 * (y as f64 - x as f64));
        let d = AnalyticGaussian::new(mu.clone(), 0.01).unwrap();
        let x0 = mu.map(|v| v + 0.02);
        let traj = ddim_invert(&x0, &Condition::Null, &d, &s, 1.0).unwrap();
        let rec = ddim_sample(
            traj.end(),
            50,
            &s,
            &Guidance::unguided(Condition::Null),
            &d,
            None,
        )
        .unwrap();
        assert!(rec.max_abs_diff(&x0) < 5e-3);
    }

    #[test]
    fn refined_roundtrip_beats_plain_on_prior_draws() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mu = LatentGrid::from_fn(3, 8, 8, |c, y, x| {
            0.5 + 0.3 * ((c + y) as f64 * 0.7).sin() * (x as f64 * 0.4).cos()
        });
        let x0 = LatentGrid::from_fn(3, 8, 8, |c, y, x| mu.get(c, y, x) + noise.sample(&mut rng));
        let d = AnalyticGaussian::new(mu, 0.01).unwrap();
        let s = sampling_schedule(ScheduleKind::LinearBeta, 50).unwrap();
        let db = |refine| {
            let traj = ddim_invert_refined(&x0, &Condition::Null, &d, &s, 1.0, refine).unwrap();
            let rec = ddim_sample(
                traj.end(),
                50,
                &s,
                &Guidance::unguided(Condition::Null),
                &d,
                None,
            )
            .unwrap();
            -10.0 * rec.mse(&x0).log10()
        };
        let (plain, refined) = (db(0), db(DEFAULT_INVERSION_REFINEMENT));
        assert!(refined >= 40.0, "{refined}");
        assert!(refined > plain + 10.0, "{plain} {refined}");
    }

    #[test]
    fn null_text_needs_differentiable_denoiser() {
        let s = sampling_schedule(ScheduleKind::LinearBeta, 5).unwrap();
        let x0 = LatentGrid::zeros(1, 2, 2);
        let traj = ddim_invert(&x0, &Condition::Null, &ZeroDenoiser, &s, 1.0).unwrap();
        assert!(null_text_optimize(&traj, &ZeroDenoiser, &s, &NullTextConfig::default()).is_err());
    }
}
