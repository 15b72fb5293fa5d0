//! Noise predictors behind the sampler.

mod analytic;
mod checkpoint;
mod train;
mod unet;

pub use analytic::{analytic_epsilon, AnalyticGaussian};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train_toy, TrainConfig, TrainReport};
pub use unet::{ToyUNet, ToyUNetConfig, NULL_TOKEN};

use crate::attention::{AttentionRecord, KvRouting};
use crate::codec::LatentNormalizer;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::Matrix;

/// Conditioning input: a vocabulary token, the null token, or an explicit
/// context embedding (used for optimized null embeddings).
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Null,
    Token(usize),
    Embedding(Matrix),
}

impl Condition {
    pub fn token(id: usize) -> Self {
        if id == NULL_TOKEN {
            Self::Null
        } else {
            Self::Token(id)
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub epsilon: LatentGrid,
    pub attention_records: Option<Vec<AttentionRecord>>,
}

/// A noise predictor `eps(x_t, alpha_bar_t, condition)`.
///
/// Time enters as the cumulative signal coefficient rather than a step index,
/// so one predictor serves every sub-sampled ladder of its training schedule.
pub trait Denoiser: Send + Sync {
    /// Evaluates several streams in lockstep. `routing` rewires self-attention
    /// keys/values across streams; `record` returns per-layer intermediates.
    fn predict_streams(
        &self,
        latents: &[&LatentGrid],
        alpha_bar: f64,
        condition: &Condition,
        routing: Option<&KvRouting>,
        record: bool,
    ) -> Result<Vec<DenoiserOutput>>;

    fn predict(&self, x: &LatentGrid, alpha_bar: f64, condition: &Condition) -> Result<LatentGrid> {
        let mut out = self.predict_streams(&[x], alpha_bar, condition, None, false)?;
        Ok(out.remove(0).epsilon)
    }

    fn supports_attention_control(&self) -> bool {
        false
    }

    /// Per-channel latent standardization the predictor was trained under.
    fn normalizer(&self) -> Option<&LatentNormalizer> {
        None
    }

    /// The default null-condition embedding, for optimizers that replace it.
    fn null_embedding(&self) -> Result<Matrix> {
        Err(Error::Unsupported(
            "denoiser has no optimizable null embedding".into(),
        ))
    }

    /// Returns `eps(x, alpha_bar, embedding)` and the vector-Jacobian product
    /// `upstreamᵀ · d eps / d embedding`.
    fn embedding_vjp(
        &self,
        _x: &LatentGrid,
        _alpha_bar: f64,
        _embedding: &Matrix,
        _upstream: &LatentGrid,
    ) -> Result<(LatentGrid, Matrix)> {
        Err(Error::Unsupported(
            "denoiser is not differentiable in its condition".into(),
        ))
    }
}

/// Always predicts zero noise. Useful for checking sampler algebra.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_streams(
        &self,
        latents: &[&LatentGrid],
        _alpha_bar: f64,
        _condition: &Condition,
        routing: Option<&KvRouting>,
        _record: bool,
    ) -> Result<Vec<DenoiserOutput>> {
        if routing.is_some() {
            return Err(Error::Unsupported(
                "zero denoiser has no attention layers".into(),
            ));
        }
        Ok(latents
            .iter()
            .map(|x| DenoiserOutput {
                epsilon: LatentGrid::zeros(x.channels(), x.height(), x.width()),
                attention_records: None,
            })
            .collect())
    }
}
