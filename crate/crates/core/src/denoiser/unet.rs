//! A two-level attention U-Net over `(channels, height · width)` feature maps.
//!
//! Layout: `conv_in`, level 0 (residual blocks), 2× average pool, level 1
//! (residual + self-attention + cross-attention per block), a mid block of the
//! same kind, the mirrored up path with skip concatenation, and a
//! `GroupNorm → SiLU → conv` head. Time enters through a clamped log-SNR of
//! `alpha_bar`; the condition enters through cross-attention over a small
//! token context taken from an embedding table.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Condition, Denoiser, DenoiserOutput};
use crate::attention::{AttentionRecord, KvRouting};
use crate::codec::LatentNormalizer;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::nn::{Matrix, Tape, Var};

/// Token id reserved for the unconditional (null) context.
pub const NULL_TOKEN: usize = 0;

const LOG_SNR_CLAMP: f64 = 15.0;
const MAX_FREQUENCY: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyUNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Residual blocks per level.
    pub depth: usize,
    pub heads: usize,
    /// Condition vocabulary size including the null token.
    pub vocab: usize,
    pub context_tokens: usize,
    pub embed_dim: usize,
    /// Number of sinusoid frequencies in the time features.
    pub time_features: usize,
    pub seed: u64,
}

impl Default for ToyUNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            base_width: 32,
            depth: 1,
            heads: 2,
            vocab: 8,
            context_tokens: 4,
            embed_dim: 32,
            time_features: 16,
            seed: 0,
        }
    }
}

impl ToyUNetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("base_width", self.base_width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("context_tokens", self.context_tokens),
            ("embed_dim", self.embed_dim),
            ("time_features", self.time_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::invalid(
                "vocabulary needs the null token and at least one condition",
            ));
        }
        if !(2 * self.base_width).is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "attention width {} not divisible by {} heads",
                2 * self.base_width,
                self.heads
            )));
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Self-attention layers in forward order: level 1, mid, up level 1.
    pub fn self_attention_layers(&self) -> usize {
        2 * self.depth + 1
    }

    /// Serialized `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "latent_channels={}\nbase_width={}\ndepth={}\nheads={}\nvocab={}\ncontext_tokens={}\nembed_dim={}\ntime_features={}\nseed={}\n",
            self.latent_channels,
            self.base_width,
            self.depth,
            self.heads,
            self.vocab,
            self.context_tokens,
            self.embed_dim,
            self.time_features,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint", format!("bad config line '{line}'")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::format("checkpoint", format!("bad value for {k}: '{v}'")))
            };
            let n = parse(v)?;
            match k.trim() {
                "latent_channels" => cfg.latent_channels = n as usize,
                "base_width" => cfg.base_width = n as usize,
                "depth" => cfg.depth = n as usize,
                "heads" => cfg.heads = n as usize,
                "vocab" => cfg.vocab = n as usize,
                "context_tokens" => cfg.context_tokens = n as usize,
                "embed_dim" => cfg.embed_dim = n as usize,
                "time_features" => cfg.time_features = n as usize,
                "seed" => cfg.seed = n,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

fn param_specs(cfg: &ToyUNetConfig) -> Vec<(String, usize, usize, Init)> {
    let mut out = Vec::new();
    let b = cfg.base_width;
    let lc = cfg.latent_channels;
    let td = cfg.time_dim();
    let mut add = |name: String, r: usize, c: usize, init: Init| out.push((name, r, c, init));
    let conv_std = |cin: usize| (1.0 / (cin * 9) as f64).sqrt();
    let lin_std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

    let res =
        |add: &mut dyn FnMut(String, usize, usize, Init), p: &str, cin: usize, cout: usize| {
            add(format!("{p}.gn1.g"), cin, 1, Init::Ones);
            add(format!("{p}.gn1.b"), cin, 1, Init::Zeros);
            add(
                format!("{p}.conv1.w"),
                cout,
                cin * 9,
                Init::Normal(conv_std(cin)),
            );
            add(format!("{p}.conv1.b"), cout, 1, Init::Zeros);
            add(format!("{p}.temb.w"), td, cout, Init::Normal(lin_std(td)));
            add(format!("{p}.temb.b"), 1, cout, Init::Zeros);
            add(format!("{p}.gn2.g"), cout, 1, Init::Ones);
            add(format!("{p}.gn2.b"), cout, 1, Init::Zeros);
            add(
                format!("{p}.conv2.w"),
                cout,
                cout * 9,
                Init::Normal(0.5 * conv_std(cout)),
            );
            add(format!("{p}.conv2.b"), cout, 1, Init::Zeros);
            if cin != cout {
                add(format!("{p}.skip.w"), cout, cin, Init::Normal(lin_std(cin)));
                add(format!("{p}.skip.b"), cout, 1, Init::Zeros);
            }
        };
    let attn =
        |add: &mut dyn FnMut(String, usize, usize, Init), p: &str, c: usize, kv_in: usize| {
            add(format!("{p}.gn.g"), c, 1, Init::Ones);
            add(format!("{p}.gn.b"), c, 1, Init::Zeros);
            add(format!("{p}.q.w"), c, c, Init::Normal(lin_std(c)));
            add(format!("{p}.k.w"), kv_in, c, Init::Normal(lin_std(kv_in)));
            add(format!("{p}.v.w"), kv_in, c, Init::Normal(lin_std(kv_in)));
            add(format!("{p}.o.w"), c, c, Init::Normal(0.5 * lin_std(c)));
            add(format!("{p}.o.b"), 1, c, Init::Zeros);
        };

    add(
        "embed".into(),
        cfg.vocab,
        cfg.context_tokens * cfg.embed_dim,
        Init::Normal(1.0),
    );
    add(
        "time.w1".into(),
        2 * cfg.time_features,
        td,
        Init::Normal(lin_std(2 * cfg.time_features)),
    );
    add("time.b1".into(), 1, td, Init::Zeros);
    add("time.w2".into(), td, td, Init::Normal(lin_std(td)));
    add("time.b2".into(), 1, td, Init::Zeros);
    add("conv_in.w".into(), b, lc * 9, Init::Normal(conv_std(lc)));
    add("conv_in.b".into(), b, 1, Init::Zeros);
    for i in 0..cfg.depth {
        res(&mut add, &format!("down0.res{i}"), b, b);
    }
    for i in 0..cfg.depth {
        res(
            &mut add,
            &format!("down1.res{i}"),
            if i == 0 { b } else { 2 * b },
            2 * b,
        );
        attn(&mut add, &format!("down1.attn{i}"), 2 * b, 2 * b);
        attn(&mut add, &format!("down1.xattn{i}"), 2 * b, cfg.embed_dim);
    }
    res(&mut add, "mid.res", 2 * b, 2 * b);
    attn(&mut add, "mid.attn", 2 * b, 2 * b);
    attn(&mut add, "mid.xattn", 2 * b, cfg.embed_dim);
    for i in 0..cfg.depth {
        res(
            &mut add,
            &format!("up1.res{i}"),
            if i == 0 { 4 * b } else { 2 * b },
            2 * b,
        );
        attn(&mut add, &format!("up1.attn{i}"), 2 * b, 2 * b);
        attn(&mut add, &format!("up1.xattn{i}"), 2 * b, cfg.embed_dim);
    }
    for i in 0..cfg.depth {
        res(
            &mut add,
            &format!("up0.res{i}"),
            if i == 0 { 3 * b } else { b },
            b,
        );
    }
    add("out.gn.g".into(), b, 1, Init::Ones);
    add("out.gn.b".into(), b, 1, Init::Zeros);
    add(
        "out.conv.w".into(),
        lc,
        b * 9,
        Init::Normal(0.5 * conv_std(b)),
    );
    add("out.conv.b".into(), lc, 1, Init::Zeros);
    out
}

#[derive(Clone, Debug)]
pub struct ToyUNet {
    config: ToyUNetConfig,
    names: Vec<String>,
    params: Vec<Matrix>,
    index: HashMap<String, usize>,
    normalizer: LatentNormalizer,
    trained: bool,
}

/// Context source for one stream.
#[derive(Clone, Debug)]
pub(crate) enum ContextInput {
    Token(usize),
    Embedding { value: Matrix, requires_grad: bool },
}

pub(crate) struct StreamInput {
    pub x: Matrix,
    pub alpha_bar: f64,
    pub context: ContextInput,
}

pub(crate) struct Graph {
    pub eps: Vec<Var>,
    pub mid: Vec<Var>,
    pub params: Vec<Var>,
    pub contexts: Vec<Var>,
}

struct Fwd<'a> {
    tape: Tape,
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
    cfg: &'a ToyUNetConfig,
    routing: Option<&'a KvRouting>,
    records: Option<Vec<AttentionRecord>>,
    layer: usize,
}

impl Fwd<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    fn res_block(
        &mut self,
        p: &str,
        x: Var,
        temb: Var,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) -> Var {
        let gn1 = self.group_norm(&format!("{p}.gn1"), x, cin);
        let a1 = self.tape.silu(gn1);
        let (w1, b1) = (
            self.p(&format!("{p}.conv1.w")),
            self.p(&format!("{p}.conv1.b")),
        );
        let h1 = self.tape.conv3x3(a1, w1, b1, h, w);
        let (tw, tb) = (
            self.p(&format!("{p}.temb.w")),
            self.p(&format!("{p}.temb.b")),
        );
        let proj = self.tape.linear(temb, tw, tb);
        let proj = self.tape.transpose(proj);
        let h1 = self.tape.add_row_bias(h1, proj);
        let gn2 = self.group_norm(&format!("{p}.gn2"), h1, cout);
        let a2 = self.tape.silu(gn2);
        let (w2, b2) = (
            self.p(&format!("{p}.conv2.w")),
            self.p(&format!("{p}.conv2.b")),
        );
        let h2 = self.tape.conv3x3(a2, w2, b2, h, w);
        let skip = if cin != cout {
            let (sw, sb) = (
                self.p(&format!("{p}.skip.w")),
                self.p(&format!("{p}.skip.b")),
            );
            let s = self.tape.matmul(sw, false, x, false);
            self.tape.add_row_bias(s, sb)
        } else {
            x
        };
        self.tape.add(skip, h2)
    }

    fn group_norm(&mut self, p: &str, x: Var, channels: usize) -> Var {
        let (g, b) = (self.p(&format!("{p}.g")), self.p(&format!("{p}.b")));
        self.tape.group_norm(x, g, b, gcd(channels, 8))
    }

    /// Multi-head attention on token-major `q (n, c)`, `k, v (m, c)`.
    fn heads(&mut self, q: Var, k: Var, v: Var, c: usize) -> (Var, Vec<Var>) {
        let heads = self.cfg.heads;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut maps = Vec::with_capacity(heads);
        for j in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, j * dh, dh),
                    self.tape.slice_cols(k, j * dh, dh),
                    self.tape.slice_cols(v, j * dh, dh),
                )
            };
            let s = self.tape.matmul(qh, false, kh, true);
            let s = self.tape.scale(s, scale);
            let a = self.tape.softmax_rows(s);
            maps.push(a);
            outs.push(self.tape.matmul(a, false, vh, false));
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)
        };
        (o, maps)
    }

    fn self_attention(&mut self, p: &str, xs: &[Var], c: usize) -> Vec<Var> {
        let layer = self.layer;
        self.layer += 1;
        let (wq, wk, wv) = (
            self.p(&format!("{p}.q.w")),
            self.p(&format!("{p}.k.w")),
            self.p(&format!("{p}.v.w")),
        );
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for &x in xs {
            let n = self.group_norm(&format!("{p}.gn"), x, c);
            let tok = self.tape.transpose(n);
            qs.push(self.tape.matmul(tok, false, wq, false));
            ks.push(self.tape.matmul(tok, false, wk, false));
            vs.push(self.tape.matmul(tok, false, wv, false));
        }
        let (wo, bo) = (self.p(&format!("{p}.o.w")), self.p(&format!("{p}.o.b")));
        let mut out = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let sources = match self.routing {
                Some(r) => r.sources_for(layer, i),
                None => vec![i],
            };
            let (k, v) = if sources.len() == 1 {
                (ks[sources[0]], vs[sources[0]])
            } else {
                let kp: Vec<Var> = sources.iter().map(|&s| ks[s]).collect();
                let vp: Vec<Var> = sources.iter().map(|&s| vs[s]).collect();
                (self.tape.concat_rows(&kp), self.tape.concat_rows(&vp))
            };
            let (o, maps) = self.heads(qs[i], k, v, c);
            if let Some(records) = self.records.as_mut() {
                records.push(AttentionRecord {
                    layer,
                    stream: i,
                    q: self.tape.value(qs[i]).clone(),
                    k: self.tape.value(k).clone(),
                    v: self.tape.value(v).clone(),
                    maps: maps.iter().map(|&m| self.tape.value(m).clone()).collect(),
                });
            }
            let o = self.tape.linear(o, wo, bo);
            let o = self.tape.transpose(o);
            out.push(self.tape.add(x, o));
        }
        out
    }

    fn cross_attention(&mut self, p: &str, x: Var, ctx: Var, c: usize) -> Var {
        let n = self.group_norm(&format!("{p}.gn"), x, c);
        let tok = self.tape.transpose(n);
        let (wq, wk, wv) = (
            self.p(&format!("{p}.q.w")),
            self.p(&format!("{p}.k.w")),
            self.p(&format!("{p}.v.w")),
        );
        let q = self.tape.matmul(tok, false, wq, false);
        let k = self.tape.matmul(ctx, false, wk, false);
        let v = self.tape.matmul(ctx, false, wv, false);
        let (o, _) = self.heads(q, k, v, c);
        let (wo, bo) = (self.p(&format!("{p}.o.w")), self.p(&format!("{p}.o.b")));
        let o = self.tape.linear(o, wo, bo);
        let o = self.tape.transpose(o);
        self.tape.add(x, o)
    }

    /// Residual → self-attention → cross-attention over all streams.
    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &mut self,
        res: &str,
        attn: &str,
        xattn: &str,
        xs: &[Var],
        tembs: &[Var],
        ctxs: &[Var],
        cin: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Vec<Var> {
        let r: Vec<Var> = xs
            .iter()
            .zip(tembs)
            .map(|(&x, &t)| self.res_block(res, x, t, cin, c, h, w))
            .collect();
        let a = self.self_attention(attn, &r, c);
        a.iter()
            .zip(ctxs)
            .map(|(&x, &ctx)| self.cross_attention(xattn, x, ctx, c))
            .collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sinusoidal features of the clamped, rescaled log-SNR, shape `(1, 2F)`.
pub(crate) fn time_features(alpha_bar: f64, count: usize) -> Matrix {
    let log_snr = if alpha_bar >= 1.0 {
        LOG_SNR_CLAMP
    } else if alpha_bar <= 0.0 {
        -LOG_SNR_CLAMP
    } else {
        (alpha_bar / (1.0 - alpha_bar))
            .ln()
            .clamp(-LOG_SNR_CLAMP, LOG_SNR_CLAMP)
    };
    let u = log_snr / LOG_SNR_CLAMP;
    let mut out = Matrix::zeros(1, 2 * count);
    for k in 0..count {
        let f = if count == 1 {
            1.0
        } else {
            (MAX_FREQUENCY.ln() * k as f64 / (count - 1) as f64).exp()
        };
        out.set(0, k, (f * u).sin());
        out.set(0, count + k, (f * u).cos());
    }
    out
}

impl ToyUNet {
    /// Randomly initialized network with parameters drawn from `config.seed`.
    pub fn new(config: ToyUNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, r, c, init) in param_specs(&config) {
            let m = match init {
                Init::Ones => Matrix::from_fn(r, c, |_, _| 1.0),
                Init::Zeros => Matrix::zeros(r, c),
                Init::Normal(std) => Matrix::from_fn(r, c, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (std * z) as f32 as f64
                }),
            };
            names.push(name);
            params.push(m);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let normalizer = LatentNormalizer::identity(config.latent_channels);
        Ok(Self {
            config,
            names,
            params,
            index,
            normalizer,
            trained: false,
        })
    }

    /// Rebuilds a network from named tensors, checking them against the
    /// architecture implied by `config`.
    pub fn from_parts(
        config: ToyUNetConfig,
        tensors: Vec<(String, Matrix)>,
        normalizer: LatentNormalizer,
        trained: bool,
    ) -> Result<Self> {
        let mut net = Self::new(config)?;
        let mut supplied: HashMap<String, Matrix> = tensors.into_iter().collect();
        for (i, name) in net.names.iter().enumerate() {
            let m = supplied
                .remove(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if m.shape() != net.params[i].shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        m.shape(),
                        net.params[i].shape()
                    ),
                ));
            }
            net.params[i] = m;
        }
        if let Some(extra) = supplied.keys().next() {
            return Err(Error::format(
                "checkpoint",
                format!("unexpected tensor {extra}"),
            ));
        }
        if normalizer.channels() != net.config.latent_channels {
            return Err(Error::shape(
                net.config.latent_channels,
                normalizer.channels(),
            ));
        }
        net.normalizer = normalizer;
        net.trained = trained;
        Ok(net)
    }

    pub fn config(&self) -> &ToyUNetConfig {
        &self.config
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn set_normalizer(&mut self, normalizer: LatentNormalizer) -> Result<()> {
        if normalizer.channels() != self.config.latent_channels {
            return Err(Error::shape(
                self.config.latent_channels,
                normalizer.channels(),
            ));
        }
        self.normalizer = normalizer;
        Ok(())
    }

    pub fn latent_normalizer(&self) -> &LatentNormalizer {
        &self.normalizer
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.as_slice().len()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn self_attention_layers(&self) -> usize {
        self.config.self_attention_layers()
    }

    fn check_latent(&self, x: &LatentGrid) -> Result<()> {
        if x.channels() != self.config.latent_channels {
            return Err(Error::shape(self.config.latent_channels, x.channels()));
        }
        if x.height() < 2
            || x.width() < 2
            || !x.height().is_multiple_of(2)
            || !x.width().is_multiple_of(2)
        {
            return Err(Error::invalid(format!(
                "latent size {}x{} must be even and at least 2x2",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    fn context_matrix(&self, condition: &Condition) -> Result<ContextInput> {
        match condition {
            Condition::Null => Ok(ContextInput::Token(NULL_TOKEN)),
            Condition::Token(id) if *id < self.config.vocab => Ok(ContextInput::Token(*id)),
            Condition::Token(id) => Err(Error::invalid(format!(
                "condition token {id} outside vocabulary of {}",
                self.config.vocab
            ))),
            Condition::Embedding(m) => {
                let shape = (self.config.context_tokens, self.config.embed_dim);
                if m.shape() != shape {
                    return Err(Error::shape(shape, m.shape()));
                }
                Ok(ContextInput::Embedding {
                    value: m.clone(),
                    requires_grad: false,
                })
            }
        }
    }

    /// Records the full forward graph for `streams` on a fresh tape.
    pub(crate) fn build(
        &self,
        streams: &[StreamInput],
        height: usize,
        width: usize,
        params_grad: bool,
        routing: Option<&KvRouting>,
        record: bool,
        stop_at_mid: bool,
    ) -> Result<(Tape, Graph, Option<Vec<AttentionRecord>>)> {
        if let Some(r) = routing {
            r.validate(streams.len())?;
        }
        let cfg = &self.config;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), params_grad))
            .collect();
        let mut f = Fwd {
            tape,
            vars,
            index: &self.index,
            cfg,
            routing,
            records: record.then(Vec::new),
            layer: 0,
        };
        let b = cfg.base_width;
        let (h0, w0) = (height, width);
        let (h1, w1) = (height / 2, width / 2);

        let mut xs = Vec::new();
        let mut tembs = Vec::new();
        let mut ctxs = Vec::new();
        for s in streams {
            let x = f.tape.constant(s.x.clone());
            xs.push(x);
            let feats = f
                .tape
                .constant(time_features(s.alpha_bar, cfg.time_features));
            let (tw1, tb1, tw2, tb2) = (
                f.p("time.w1"),
                f.p("time.b1"),
                f.p("time.w2"),
                f.p("time.b2"),
            );
            let t = f.tape.linear(feats, tw1, tb1);
            let t = f.tape.silu(t);
            let t = f.tape.linear(t, tw2, tb2);
            tembs.push(f.tape.silu(t));
            let ctx = match &s.context {
                ContextInput::Token(id) => {
                    let one_hot =
                        Matrix::from_fn(1, cfg.vocab, |_, c| if c == *id { 1.0 } else { 0.0 });
                    let oh = f.tape.constant(one_hot);
                    let emb = f.p("embed");
                    let row = f.tape.matmul(oh, false, emb, false);
                    f.tape.reshape(row, cfg.context_tokens, cfg.embed_dim)
                }
                ContextInput::Embedding {
                    value,
                    requires_grad,
                } => f.tape.leaf(value.clone(), *requires_grad),
            };
            ctxs.push(ctx);
        }

        let (ciw, cib) = (f.p("conv_in.w"), f.p("conv_in.b"));
        let mut hs: Vec<Var> = xs
            .iter()
            .map(|&x| f.tape.conv3x3(x, ciw, cib, h0, w0))
            .collect();
        for i in 0..cfg.depth {
            hs = hs
                .iter()
                .zip(&tembs)
                .map(|(&x, &t)| f.res_block(&format!("down0.res{i}"), x, t, b, b, h0, w0))
                .collect();
        }
        let skip0 = hs.clone();
        let mut hs: Vec<Var> = hs.iter().map(|&x| f.tape.avg_pool2(x, h0, w0)).collect();
        for i in 0..cfg.depth {
            let cin = if i == 0 { b } else { 2 * b };
            hs = f.attn_block(
                &format!("down1.res{i}"),
                &format!("down1.attn{i}"),
                &format!("down1.xattn{i}"),
                &hs,
                &tembs,
                &ctxs,
                cin,
                2 * b,
                h1,
                w1,
            );
        }
        let skip1 = hs.clone();
        let mid = f.attn_block(
            "mid.res",
            "mid.attn",
            "mid.xattn",
            &hs,
            &tembs,
            &ctxs,
            2 * b,
            2 * b,
            h1,
            w1,
        );
        if stop_at_mid {
            let Fwd {
                tape,
                vars,
                records,
                ..
            } = f;
            return Ok((
                tape,
                Graph {
                    eps: Vec::new(),
                    mid,
                    params: vars,
                    contexts: ctxs,
                },
                records,
            ));
        }
        let mut hs: Vec<Var> = mid
            .iter()
            .zip(&skip1)
            .map(|(&m, &s)| f.tape.concat_rows(&[m, s]))
            .collect();
        for i in 0..cfg.depth {
            let cin = if i == 0 { 4 * b } else { 2 * b };
            hs = f.attn_block(
                &format!("up1.res{i}"),
                &format!("up1.attn{i}"),
                &format!("up1.xattn{i}"),
                &hs,
                &tembs,
                &ctxs,
                cin,
                2 * b,
                h1,
                w1,
            );
        }
        let mut hs: Vec<Var> = hs
            .iter()
            .zip(&skip0)
            .map(|(&x, &s)| {
                let u = f.tape.upsample2(x, h1, w1);
                f.tape.concat_rows(&[u, s])
            })
            .collect();
        for i in 0..cfg.depth {
            let cin = if i == 0 { 3 * b } else { b };
            hs = hs
                .iter()
                .zip(&tembs)
                .map(|(&x, &t)| f.res_block(&format!("up0.res{i}"), x, t, cin, b, h0, w0))
                .collect();
        }
        let (ow, ob) = (f.p("out.conv.w"), f.p("out.conv.b"));
        let eps: Vec<Var> = hs
            .iter()
            .map(|&x| {
                let n = f.group_norm("out.gn", x, b);
                let a = f.tape.silu(n);
                f.tape.conv3x3(a, ow, ob, h0, w0)
            })
            .collect();
        let Fwd {
            tape,
            vars,
            records,
            ..
        } = f;
        Ok((
            tape,
            Graph {
                eps,
                mid,
                params: vars,
                contexts: ctxs,
            },
            records,
        ))
    }

    /// Channel-normalized mid-block features, `(channels, positions)`.
    pub fn mid_features(&self, x: &LatentGrid, alpha_bar: f64) -> Result<Matrix> {
        self.check_latent(x)?;
        let input = StreamInput {
            x: grid_to_matrix(x),
            alpha_bar,
            context: ContextInput::Token(NULL_TOKEN),
        };
        let (tape, graph, _) =
            self.build(&[input], x.height(), x.width(), false, None, false, true)?;
        let mut m = tape.value(graph.mid[0]).clone();
        let (c, n) = m.shape();
        for j in 0..n {
            let norm = (0..c).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt() + 1e-10;
            for i in 0..c {
                m.set(i, j, m.get(i, j) / norm);
            }
        }
        Ok(m)
    }
}

pub(crate) fn grid_to_matrix(x: &LatentGrid) -> Matrix {
    Matrix::from_vec(x.channels(), x.height() * x.width(), x.as_slice().to_vec())
        .expect("sizes agree")
}

pub(crate) fn matrix_to_grid(m: &Matrix, height: usize, width: usize) -> Result<LatentGrid> {
    LatentGrid::from_vec(m.rows(), height, width, m.as_slice().to_vec())
}

impl Denoiser for ToyUNet {
    fn predict_streams(
        &self,
        latents: &[&LatentGrid],
        alpha_bar: f64,
        condition: &Condition,
        routing: Option<&KvRouting>,
        record: bool,
    ) -> Result<Vec<DenoiserOutput>> {
        let first = latents
            .first()
            .ok_or_else(|| Error::invalid("no streams to evaluate"))?;
        for x in latents {
            self.check_latent(x)?;
            x.ensure_same_shape(first)?;
        }
        let context = self.context_matrix(condition)?;
        let streams: Vec<StreamInput> = latents
            .iter()
            .map(|x| StreamInput {
                x: grid_to_matrix(x),
                alpha_bar,
                context: context.clone(),
            })
            .collect();
        let (tape, graph, records) = self.build(
            &streams,
            first.height(),
            first.width(),
            false,
            routing,
            record,
            false,
        )?;
        graph
            .eps
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let epsilon = matrix_to_grid(tape.value(e), first.height(), first.width())?;
                if !epsilon.is_finite() {
                    return Err(Error::Numerical(
                        "denoiser produced non-finite output".into(),
                    ));
                }
                Ok(DenoiserOutput {
                    epsilon,
                    attention_records: records
                        .as_ref()
                        .map(|r| r.iter().filter(|rec| rec.stream == i).cloned().collect()),
                })
            })
            .collect()
    }

    fn supports_attention_control(&self) -> bool {
        true
    }

    fn normalizer(&self) -> Option<&LatentNormalizer> {
        Some(&self.normalizer)
    }

    fn null_embedding(&self) -> Result<Matrix> {
        let table = &self.params[self.index["embed"]];
        Matrix::from_vec(1, table.cols(), table.row(NULL_TOKEN).to_vec())?
            .reshaped(self.config.context_tokens, self.config.embed_dim)
    }

    fn embedding_vjp(
        &self,
        x: &LatentGrid,
        alpha_bar: f64,
        embedding: &Matrix,
        upstream: &LatentGrid,
    ) -> Result<(LatentGrid, Matrix)> {
        self.check_latent(x)?;
        x.ensure_same_shape(upstream)?;
        let shape = (self.config.context_tokens, self.config.embed_dim);
        if embedding.shape() != shape {
            return Err(Error::shape(shape, embedding.shape()));
        }
        let input = StreamInput {
            x: grid_to_matrix(x),
            alpha_bar,
            context: ContextInput::Embedding {
                value: embedding.clone(),
                requires_grad: true,
            },
        };
        let (tape, graph, _) =
            self.build(&[input], x.height(), x.width(), false, None, false, false)?;
        let eps = matrix_to_grid(tape.value(graph.eps[0]), x.height(), x.width())?;
        let grads = tape.backward_from(graph.eps[0], grid_to_matrix(upstream));
        let g = grads
            .get(graph.contexts[0])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
        Ok((eps, g))
    }
}
