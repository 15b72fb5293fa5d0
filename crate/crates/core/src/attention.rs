//! Self-attention control across paired left/right denoiser evaluations.
//!
//! Control is expressed as key/value routing: at each selected self-attention
//! layer, stream `i` attends over the concatenated keys and values of the
//! streams listed in its route, its own queries unchanged.

use crate::denoiser::{Condition, Denoiser};
use crate::diffusion::{cfg_combine, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::inversion::Guidance;
use crate::nn::{matmul, softmax_rows, Matrix};

/// `Softmax(Q Kᵀ / √d) V` with row-max subtraction.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, d: f64) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::shape(q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(k.rows(), v.rows()));
    }
    if !(d > 0.0) {
        return Err(Error::invalid(format!(
            "attention scale dimension must be positive, got {d}"
        )));
    }
    let mut scores = matmul(q, false, k, true);
    scores.scale(1.0 / d.sqrt());
    Ok(matmul(&softmax_rows(&scores), false, v, false))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    #[default]
    None,
    /// One stream queries the other's keys and values.
    Uni,
    /// Both streams attend over the union of keys and values.
    Bi,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "uni" => Ok(Self::Uni),
            "bi" => Ok(Self::Bi),
            other => Err(Error::invalid(format!("unknown attention mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Uni => "uni",
            Self::Bi => "bi",
        })
    }
}

/// Which stream is edited in uni mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UniDirection {
    /// Right queries attend to the left stream's keys and values; left is untouched.
    #[default]
    RightQueriesLeft,
    LeftQueriesRight,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum LayerSelector {
    #[default]
    All,
    /// Self-attention layer indices in forward order.
    Only(Vec<usize>),
}

impl LayerSelector {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            Self::All => true,
            Self::Only(ls) => ls.contains(&layer),
        }
    }
}

/// Inclusive sampling-timestep window, `high` down to `low`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimestepRange {
    pub high: usize,
    pub low: usize,
}

impl TimestepRange {
    pub fn contains(&self, t: usize) -> bool {
        self.low <= t && t <= self.high
    }

    pub fn is_empty(&self) -> bool {
        self.low > self.high
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionPlan {
    pub mode: AttentionMode,
    pub layers: LayerSelector,
    /// `None` means every timestep.
    pub active: Option<TimestepRange>,
    pub uni_direction: UniDirection,
}

impl AttentionPlan {
    pub fn new(mode: AttentionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.mode != AttentionMode::None && self.active.is_none_or(|r| r.contains(t))
    }

    /// Key/value routing for a two-stream evaluation at timestep `t`, or
    /// `None` when the plan leaves both streams independent.
    pub fn routing(&self, t: usize) -> Option<KvRouting> {
        if !self.is_active(t) {
            return None;
        }
        let sources = match (self.mode, self.uni_direction) {
            (AttentionMode::None, _) => return None,
            (AttentionMode::Uni, UniDirection::RightQueriesLeft) => vec![vec![0], vec![0]],
            (AttentionMode::Uni, UniDirection::LeftQueriesRight) => vec![vec![1], vec![1]],
            (AttentionMode::Bi, _) => vec![vec![0, 1], vec![1, 0]],
        };
        Some(KvRouting {
            sources,
            layers: self.layers.clone(),
        })
    }
}

/// Per-stream key/value sources applied at the selected layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvRouting {
    pub sources: Vec<Vec<usize>>,
    pub layers: LayerSelector,
}

impl KvRouting {
    pub fn identity(streams: usize) -> Self {
        Self {
            sources: (0..streams).map(|i| vec![i]).collect(),
            layers: LayerSelector::All,
        }
    }

    /// Streams whose keys/values stream `stream` attends over at `layer`.
    pub fn sources_for(&self, layer: usize, stream: usize) -> Vec<usize> {
        if self.layers.contains(layer) {
            self.sources[stream].clone()
        } else {
            vec![stream]
        }
    }

    pub fn validate(&self, streams: usize) -> Result<()> {
        if self.sources.len() != streams {
            return Err(Error::shape(streams, self.sources.len()));
        }
        for s in self.sources.iter().flatten() {
            if *s >= streams {
                return Err(Error::invalid(format!(
                    "routing refers to stream {s} of {streams}"
                )));
            }
        }
        if self.sources.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid(
                "every stream needs at least one key/value source",
            ));
        }
        Ok(())
    }
}

/// Intermediates of one self-attention layer for one stream. `k` and `v` are
/// the (possibly rewired) keys and values actually attended over.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub stream: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// One row-stochastic map per head.
    pub maps: Vec<Matrix>,
}

/// Evaluates the denoiser on a left/right pair under `plan` at sampling
/// timestep `t`. With guidance scale `!= 1` the conditional and the
/// unconditional evaluations are controlled identically.
pub fn paired_denoise(
    left: &LatentGrid,
    right: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    guidance: &Guidance,
    plan: &AttentionPlan,
    denoiser: &dyn Denoiser,
) -> Result<(LatentGrid, LatentGrid)> {
    left.ensure_same_shape(right)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let routing = plan.routing(t);
    if routing.is_some() && !denoiser.supports_attention_control() {
        return Err(Error::Unsupported(
            "denoiser does not expose self-attention layers; attention mode must be none".into(),
        ));
    }
    let eval = |cond: &Condition| -> Result<Vec<LatentGrid>> {
        Ok(denoiser
            .predict_streams(&[left, right], alpha_bar, cond, routing.as_ref(), false)?
            .into_iter()
            .map(|o| o.epsilon)
            .collect())
    };
    let mut cond = eval(&guidance.condition)?;
    if guidance.scale != 1.0 {
        let uncond = eval(&guidance.unconditional)?;
        for (c, u) in cond.iter_mut().zip(&uncond) {
            *c = cfg_combine(u, c, guidance.scale)?;
        }
    }
    let right_eps = cond.pop().expect("two streams");
    let left_eps = cond.pop().expect("two streams");
    Ok((left_eps, right_eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_keys_average_values() {
        let out = attention(
            &m(1, 1, &[0.0]),
            &m(2, 1, &[0.0, 0.0]),
            &m(2, 1, &[1.0, 3.0]),
            1.0,
        )
        .unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn duplicated_keys_leave_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let (q, k, v) = (r(3, 4), r(5, 4), r(5, 2));
        let base = attention(&q, &k, &v, 4.0).unwrap();
        let kk = Matrix::vstack(&[&k, &k]).unwrap();
        let vv = Matrix::vstack(&[&v, &v]).unwrap();
        assert!(attention(&q, &kk, &vv, 4.0).unwrap().max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
        let (q, k, v) = (r(4, 8), r(6, 8), r(6, 3));
        let d = 8.0f64;
        let out = attention(&q, &k, &v, d).unwrap();
        for i in 0..4 {
            let scores: Vec<f64> = (0..6)
                .map(|j| (0..8).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..3 {
                let expect: f64 = (0..6).map(|j| e[j] / z * v.get(j, c)).sum();
                assert!((out.get(i, c) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        assert!(attention(
            &Matrix::zeros(1, 2),
            &Matrix::zeros(2, 3),
            &Matrix::zeros(2, 1),
            1.0
        )
        .is_err());
        assert!(attention(
            &Matrix::zeros(1, 2),
            &Matrix::zeros(2, 2),
            &Matrix::zeros(3, 1),
            1.0
        )
        .is_err());
        assert!(attention(
            &Matrix::zeros(1, 2),
            &Matrix::zeros(2, 2),
            &Matrix::zeros(2, 1),
            0.0
        )
        .is_err());
    }

    #[test]
    fn plan_routing() {
        assert_eq!(AttentionPlan::new(AttentionMode::None).routing(5), None);
        let uni = AttentionPlan::new(AttentionMode::Uni).routing(5).unwrap();
        assert_eq!(uni.sources, vec![vec![0], vec![0]]);
        let bi = AttentionPlan::new(AttentionMode::Bi).routing(5).unwrap();
        assert_eq!(bi.sources, vec![vec![0, 1], vec![1, 0]]);
        let mut windowed = AttentionPlan::new(AttentionMode::Bi);
        windowed.active = Some(TimestepRange { high: 3, low: 1 });
        assert!(windowed.routing(5).is_none() && windowed.routing(2).is_some());
        windowed.active = Some(TimestepRange { high: 0, low: 1 });
        assert!((0..10).all(|t| windowed.routing(t).is_none()));
        let mut sel = uni.clone();
        sel.layers = LayerSelector::Only(vec![1]);
        assert_eq!(sel.sources_for(0, 1), vec![1]);
        assert_eq!(sel.sources_for(1, 1), vec![0]);
    }
}
