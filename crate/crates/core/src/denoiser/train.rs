use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::unet::{grid_to_matrix, ContextInput, StreamInput, ToyUNet, ToyUNetConfig, NULL_TOKEN};
use crate::codec::LatentNormalizer;
use crate::diffusion::{forward_noise, make_schedule, ScheduleKind, DEFAULT_TRAIN_STEPS};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::Matrix;

/// Noise-prediction training settings. The optimizer is SGD with heavy-ball
/// momentum and global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Probability of replacing a sample's condition with the null token.
    pub cond_dropout: f64,
    pub schedule: ScheduleKind,
    pub train_timesteps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            cond_dropout: 0.1,
            schedule: ScheduleKind::LinearBeta,
            train_timesteps: DEFAULT_TRAIN_STEPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the losses in `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Trains a fresh network on raw (unstandardized) latents paired with
/// condition tokens. The fitted per-channel normalizer is stored in the
/// returned network, and parameters are rounded to `f32` so checkpoints
/// reproduce them exactly.
pub fn train_toy(
    corpus: &[(LatentGrid, usize)],
    net_config: ToyUNetConfig,
    cfg: &TrainConfig,
) -> Result<(ToyUNet, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid("training needs at least one step"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = ToyUNet::new(net_config)?;
    let norm = round_normalizer(LatentNormalizer::fit(corpus.iter().map(|(g, _)| g))?);
    let data: Vec<(LatentGrid, usize)> = corpus
        .iter()
        .map(|(g, tok)| {
            if *tok >= net.config().vocab {
                return Err(Error::invalid(format!(
                    "condition token {tok} outside vocabulary"
                )));
            }
            Ok((norm.standardize(g)?, *tok))
        })
        .collect::<Result<_>>()?;
    let (c, h, w) = data[0].0.shape();
    for (g, _) in &data {
        if g.shape() != (c, h, w) {
            return Err(Error::shape((c, h, w), g.shape()));
        }
    }
    net.set_normalizer(norm)?;
    let schedule = make_schedule(cfg.schedule, cfg.train_timesteps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Matrix> = net
        .named_params()
        .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut streams = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (x0, tok) = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=schedule.total_steps());
            let eps = LatentGrid::randn(c, h, w, &mut rng);
            let xt = forward_noise(x0, &eps, t, &schedule)?;
            let token = if rng.random::<f64>() < cfg.cond_dropout {
                NULL_TOKEN
            } else {
                *tok
            };
            streams.push(StreamInput {
                x: grid_to_matrix(&xt),
                alpha_bar: schedule.alpha_bar(t)?,
                context: ContextInput::Token(token),
            });
            targets.push(grid_to_matrix(&eps));
        }
        let (mut tape, graph, _) = net.build(&streams, h, w, true, None, false, false)?;
        let mut terms = graph
            .eps
            .iter()
            .zip(targets)
            .map(|(&e, t)| tape.mse(e, t))
            .collect::<Vec<_>>();
        let mut total = terms.remove(0);
        for t in terms {
            total = tape.add(total, t);
        }
        let loss_var = tape.scale(total, 1.0 / cfg.batch_size as f64);
        let loss = tape.value(loss_var).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("training loss became {loss}"),
            });
        }
        losses.push(loss);
        let grads = tape.backward(loss_var);
        let mut gs: Vec<Matrix> = graph
            .params
            .iter()
            .zip(&velocity)
            .map(|(&p, v)| {
                grads
                    .get(p)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()))
            })
            .collect();
        let norm: f64 = gs.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            gs.iter_mut().for_each(|g| g.scale(cfg.clip_norm / norm));
        }
        for ((p, v), g) in net
            .params_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(&gs)
        {
            v.scale(cfg.momentum);
            v.add_assign(g);
            for (pv, vv) in p.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *pv -= cfg.learning_rate * vv;
            }
        }
        if step % 100 == 0 {
            log::debug!("train step {step}: loss {loss:.5}");
        }
    }
    for p in net.params_mut() {
        p.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
    }
    net.set_trained(true);
    Ok((net, TrainReport { losses }))
}

fn round_normalizer(n: LatentNormalizer) -> LatentNormalizer {
    let r = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
    LatentNormalizer {
        mean: r(n.mean),
        std: r(n.std),
    }
}
