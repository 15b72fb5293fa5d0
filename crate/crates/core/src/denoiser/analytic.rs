use super::{Condition, Denoiser, DenoiserOutput};
use crate::attention::KvRouting;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// Exact noise prediction under the prior `x0 ~ N(mu, sigma0_sq · I)`.
///
/// The posterior mean of `x0` given `x_t` is
/// `m = (sigma0_sq·√a·x_t + (1-a)·mu) / (a·sigma0_sq + 1 - a)` and the
/// returned noise is `(x_t - √a·m) / √(1-a)`.
pub fn analytic_epsilon(
    x_t: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    mu: &LatentGrid,
    sigma0_sq: f64,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 1,
            max: schedule.total_steps(),
        });
    }
    epsilon_at(x_t, schedule.alpha_bar(t)?, mu, sigma0_sq)
}

fn epsilon_at(x_t: &LatentGrid, a: f64, mu: &LatentGrid, sigma0_sq: f64) -> Result<LatentGrid> {
    x_t.ensure_same_shape(mu)?;
    if !(sigma0_sq > 0.0) {
        return Err(Error::invalid("prior variance must be positive"));
    }
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::invalid(format!(
            "analytic denoiser needs alpha_bar in (0, 1), got {a}"
        )));
    }
    let sa = a.sqrt();
    let sn = (1.0 - a).sqrt();
    let denom = a * sigma0_sq + 1.0 - a;
    x_t.zip_map(mu, |x, m0| {
        let m = (sigma0_sq * sa * x + (1.0 - a) * m0) / denom;
        (x - sa * m) / sn
    })
}

#[derive(Clone, Debug)]
pub struct AnalyticGaussian {
    pub mu: LatentGrid,
    pub sigma0_sq: f64,
}

impl AnalyticGaussian {
    pub fn new(mu: LatentGrid, sigma0_sq: f64) -> Result<Self> {
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::invalid("prior variance must be positive"));
        }
        Ok(Self { mu, sigma0_sq })
    }

    /// Posterior mean of `x0` given `x_t`.
    pub fn posterior_mean(&self, x_t: &LatentGrid, a: f64) -> Result<LatentGrid> {
        x_t.ensure_same_shape(&self.mu)?;
        let denom = a * self.sigma0_sq + 1.0 - a;
        let sa = a.sqrt();
        x_t.zip_map(&self.mu, |x, m0| {
            (self.sigma0_sq * sa * x + (1.0 - a) * m0) / denom
        })
    }
}

impl Denoiser for AnalyticGaussian {
    fn predict_streams(
        &self,
        latents: &[&LatentGrid],
        alpha_bar: f64,
        _condition: &Condition,
        routing: Option<&KvRouting>,
        _record: bool,
    ) -> Result<Vec<DenoiserOutput>> {
        if routing.is_some() {
            return Err(Error::Unsupported(
                "analytic denoiser has no attention layers; attention mode must be none".into(),
            ));
        }
        latents
            .iter()
            .map(|x| {
                Ok(DenoiserOutput {
                    epsilon: epsilon_at(x, alpha_bar, &self.mu, self.sigma0_sq)?,
                    attention_records: None,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g(v: &[f64]) -> LatentGrid {
        LatentGrid::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn noiseless_signal_has_zero_noise() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.7, 0.3]).unwrap();
        let mu = g(&[0.4, -1.2]);
        for sigma in [1e-3, 0.5, 4.0] {
            let x = mu.map(|v| v * 0.3f64.sqrt());
            let e = analytic_epsilon(&x, 2, &s, &mu, sigma).unwrap();
            assert!(e.as_slice().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn degenerate_prior_collapses_to_mean() {
        let d = AnalyticGaussian::new(g(&[0.25]), 1e-12).unwrap();
        for x in [-3.0, 0.0, 5.0] {
            let m = d.posterior_mean(&g(&[x]), 0.5).unwrap();
            assert!((m.as_slice()[0] - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_value_and_monte_carlo_posterior() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let e = analytic_epsilon(&g(&[1.0]), 1, &s, &g(&[0.0]), 1.0).unwrap();
        assert!((e.as_slice()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);

        // importance-weighted posterior mean of x0 given x_t = 1
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..1_000_000 {
            let x0: f64 = StandardNormal.sample(&mut rng);
            let r = 1.0 - 0.5f64.sqrt() * x0;
            let w = (-r * r / (2.0 * 0.5)).exp();
            num += w * x0;
            den += w;
        }
        let mc = num / den;
        assert!(
            (mc - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-2,
            "monte carlo posterior mean {mc}"
        );
    }

    #[test]
    fn rejects_clean_timestep_and_control() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        assert!(analytic_epsilon(&g(&[1.0]), 0, &s, &g(&[0.0]), 1.0).is_err());
        let d = AnalyticGaussian::new(g(&[0.0]), 1.0).unwrap();
        assert!(d.predict(&g(&[1.0]), 1.0, &Condition::Null).is_err());
        let routing = KvRouting::identity(1);
        assert!(d
            .predict_streams(&[&g(&[1.0])], 0.5, &Condition::Null, Some(&routing), false)
            .is_err());
        assert!(AnalyticGaussian::new(g(&[0.0]), 0.0).is_err());
    }
}
