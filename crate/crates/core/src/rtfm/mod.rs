//! Temporal feature-magnitude anomaly detector.
//!
//! A multi-scale temporal network (dilated 1-D convolutions plus temporal
//! self-attention) maps snippet features `F: [T, D]` to `X: [T, D']`. The l2
//! norm of each row of `X` is the snippet's feature magnitude; a three-layer
//! head turns each row into a score in `[0, 1]`.
//!
//! Inference here runs in `f32` through the tensor kernels. Training runs the
//! same computation in `f64` on a reverse-mode tape (see [`tape`]).

pub mod tape;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::SnippetFeatures;
use crate::tensor::{self, Tensor, TensorError};

pub use train::{
    rtfm_loss, synthetic_dataset, train, Batch, FeatureVideo, LossBreakdown, SyntheticConfig, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum RtfmError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("k = {k} exceeds the {t} snippets of a video")]
    TopK { k: usize, t: usize },
    #[error("training data: {0}")]
    Data(String),
    #[error("parameter {name}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture of the temporal network and scoring head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RtfmConfig {
    /// Input feature dimension `D`.
    pub feature_dim: usize,
    /// Output channels of every branch.
    pub branch_channels: usize,
    /// One dilated-convolution branch per rate.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    /// Whether the self-attention branch is present.
    pub tsa: bool,
    pub tsa_inner: usize,
    /// Output dimension `D'` of the fusion convolution.
    pub out_dim: usize,
    pub hidden: [usize; 2],
    /// Drop probability on the last hidden layer during training.
    pub dropout: f64,
}

impl Default for RtfmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RtfmConfig {
    pub fn desk() -> Self {
        RtfmConfig {
            feature_dim: 32,
            branch_channels: 16,
            dilations: vec![1, 2, 4],
            kernel: 3,
            tsa: true,
            tsa_inner: 8,
            out_dim: 32,
            hidden: [32, 16],
            dropout: 0.7,
        }
    }

    /// Widths of the published detector on 2048-D features.
    pub fn full_scale() -> Self {
        RtfmConfig {
            feature_dim: 2048,
            branch_channels: 512,
            dilations: vec![1, 2, 4],
            kernel: 3,
            tsa: true,
            tsa_inner: 256,
            out_dim: 2048,
            hidden: [512, 128],
            dropout: 0.7,
        }
    }

    pub fn branches(&self) -> usize {
        self.dilations.len() + usize::from(self.tsa)
    }

    pub fn validate(&self) -> Result<(), RtfmError> {
        let bad = |m: &str| Err(RtfmError::Config(m.to_string()));
        if self.feature_dim == 0 || self.branch_channels == 0 || self.out_dim == 0 {
            return bad("feature_dim, branch_channels and out_dim must be positive");
        }
        if self.branches() == 0 {
            return bad("at least one branch is required");
        }
        if self.dilations.contains(&0) {
            return bad("dilation rates must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.tsa && self.tsa_inner == 0 {
            return bad("tsa_inner must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Names and shapes of all parameters in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, b, k) = (self.feature_dim, self.branch_channels, self.kernel);
        let mut v = Vec::new();
        for i in 0..self.dilations.len() {
            v.push((format!("pdc{i}.w"), vec![b, d, k]));
            v.push((format!("pdc{i}.b"), vec![b]));
        }
        if self.tsa {
            let bi = self.tsa_inner;
            v.push(("tsa.h.w".into(), vec![b, d]));
            v.push(("tsa.h.b".into(), vec![b]));
            for p in ["theta", "phi", "g"] {
                v.push((format!("tsa.{p}.w"), vec![bi, b]));
                v.push((format!("tsa.{p}.b"), vec![bi]));
            }
            v.push(("tsa.out.w".into(), vec![b, bi]));
            v.push(("tsa.out.b".into(), vec![b]));
        }
        v.push(("fuse.w".into(), vec![self.out_dim, self.branches() * b, k]));
        v.push(("fuse.b".into(), vec![self.out_dim]));
        let [h1, h2] = self.hidden;
        for (name, o, i) in [("fc1", h1, self.out_dim), ("fc2", h2, h1), ("fc3", 1, h2)] {
            v.push((format!("{name}.w"), vec![o, i]));
            v.push((format!("{name}.b"), vec![o]));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Multiply-accumulates of one forward pass over `t` snippets.
    pub fn macs(&self, t: usize) -> usize {
        let (d, b, k) = (self.feature_dim, self.branch_channels, self.kernel);
        let mut m = self.dilations.len() * t * b * d * k;
        if self.tsa {
            let bi = self.tsa_inner;
            m += t * b * d + 3 * t * bi * b + 2 * t * t * bi + t * b * bi;
        }
        m += t * self.out_dim * self.branches() * b * k;
        let [h1, h2] = self.hidden;
        m + t * (h1 * self.out_dim + h2 * h1 + h2)
    }

    pub(crate) fn slots(&self) -> Slots {
        let mut next = 0;
        let mut pair = || {
            next += 2;
            (next - 2, next - 1)
        };
        let pdc = self.dilations.iter().map(|_| pair()).collect();
        let tsa = self.tsa.then(|| [pair(), pair(), pair(), pair(), pair()]);
        Slots {
            pdc,
            tsa,
            fuse: pair(),
            fc: [pair(), pair(), pair()],
        }
    }
}

/// Indices of (weight, bias) pairs in the canonical parameter order.
#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub pdc: Vec<(usize, usize)>,
    /// h, theta, phi, g, out.
    pub tsa: Option<[(usize, usize); 5]>,
    pub fuse: (usize, usize),
    pub fc: [(usize, usize); 3],
}

/// All detector parameters in the order of [`RtfmConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct RtfmParams {
    pub config: RtfmConfig,
    pub values: Vec<Tensor>,
}

impl RtfmParams {
    /// He-normal weights and zero biases from a seeded generator.
    ///
    /// The attention output projection starts at zero, so the attention
    /// branch is its input projection `h` until training moves it.
    pub fn init(config: RtfmConfig, seed: u64) -> Result<Self, RtfmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") || name == "tsa.out.w" {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let data = (0..shape.iter().product()).map(|_| rng.sample(normal) as f32).collect();
                Tensor::new(shape, data).expect("length matches")
            })
            .collect();
        Ok(RtfmParams { config, values })
    }

    pub fn from_named(config: RtfmConfig, mut named: Vec<(String, Tensor)>) -> Result<Self, RtfmError> {
        config.validate()?;
        let mut values = Vec::new();
        for (name, shape) in config.layout() {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| RtfmError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: vec![],
                })?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(RtfmError::ParamShape {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
            values.push(t);
        }
        Ok(RtfmParams { config, values })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.config
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.values)
            .collect()
    }

    fn pair(&self, (w, b): (usize, usize)) -> (&Tensor, &Tensor) {
        (&self.values[w], &self.values[b])
    }
}

/// Whether dropout is active.
#[derive(Debug)]
pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

/// `F: [T, D]` → `X: [T, D']`.
pub fn mstn_forward(f: &Tensor, params: &RtfmParams) -> Result<Tensor, RtfmError> {
    let cfg = &params.config;
    if f.rank() != 2 || f.shape()[1] != cfg.feature_dim {
        return Err(TensorError::AxisMismatch {
            op: "mstn_forward",
            axis: "feature (axis 1)".into(),
            expected: cfg.feature_dim,
            actual: f.shape().get(1).copied().unwrap_or(0),
        }
        .into());
    }
    let slots = cfg.slots();
    let ft = tensor::transpose(f)?;
    let mut parts = Vec::with_capacity(cfg.branches());
    for (&dil, &s) in cfg.dilations.iter().zip(&slots.pdc) {
        let (w, b) = params.pair(s);
        parts.push(tensor::relu(&tensor::conv1d_dilated(&ft, w, Some(b), dil)?));
    }
    if let Some([h, th, ph, g, out]) = slots.tsa {
        let lin = |x: &Tensor, s| {
            let (w, b) = params.pair(s);
            tensor::linear(x, w, Some(b))
        };
        let hx = tensor::relu(&lin(f, h)?);
        let theta = lin(&hx, th)?;
        let phi = lin(&hx, ph)?;
        let gx = lin(&hx, g)?;
        let attn = tensor::softmax(&tensor::matmul(&theta, &tensor::transpose(&phi)?)?, 1)?;
        let z = lin(&tensor::matmul(&attn, &gx)?, out)?;
        parts.push(tensor::transpose(&tensor::add(&hx, &z)?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let cat = tensor::concat(&refs, 0)?;
    let (w, b) = params.pair(slots.fuse);
    let x = tensor::relu(&tensor::conv1d_dilated(&cat, w, Some(b), 1)?);
    Ok(tensor::transpose(&x)?)
}

/// Pre-sigmoid head outputs, one per snippet.
pub fn snippet_logits(x: &Tensor, params: &RtfmParams, mode: Mode<'_>) -> Result<Tensor, RtfmError> {
    let [fc1, fc2, fc3] = params.config.slots().fc;
    let lin = |x: &Tensor, s| {
        let (w, b) = params.pair(s);
        tensor::linear(x, w, Some(b))
    };
    let h = tensor::relu(&lin(x, fc1)?);
    let mut h = tensor::relu(&lin(&h, fc2)?);
    if let Mode::Train(rng) = mode {
        let p = params.config.dropout;
        let keep = (1.0 / (1.0 - p)) as f32;
        let data = h
            .data()
            .iter()
            .map(|&v| if rng.random::<f64>() < p { 0.0 } else { v * keep })
            .collect();
        h = Tensor::new(h.shape().to_vec(), data)?;
    }
    let t = x.shape()[0];
    Ok(lin(&h, fc3)?.reshape(&[t])?)
}

/// Per-snippet scores in `[0, 1]`.
pub fn snippet_scores(x: &Tensor, params: &RtfmParams, mode: Mode<'_>) -> Result<Tensor, RtfmError> {
    Ok(tensor::sigmoid(&snippet_logits(x, params, mode)?))
}

/// Mean of the `k` largest row magnitudes of `x` and their indices.
pub fn topk_magnitude(x: &Tensor, k: usize) -> Result<(f32, Vec<usize>), RtfmError> {
    let mags = tensor::l2_magnitude(x)?;
    if k > mags.len() {
        return Err(RtfmError::TopK { k, t: mags.len() });
    }
    let (idx, vals) = tensor::topk(&mags, k)?;
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / k as f64;
    Ok((mean as f32, idx))
}

/// Crop-averaged inference scores `[T]` for one video.
/// Inference scores straight from features: `F: [T, D]` → `[T]`.
pub fn score_features(f: &Tensor, params: &RtfmParams) -> Result<Tensor, RtfmError> {
    snippet_scores(&mstn_forward(f, params)?, params, Mode::Infer)
}

pub fn video_score(f: &SnippetFeatures, params: &RtfmParams) -> Result<Tensor, RtfmError> {
    let t = f.snippets();
    let mut acc = vec![0f64; t];
    for c in 0..f.crops() {
        let s = score_features(&f.crop(c), params)?;
        for (a, &v) in acc.iter_mut().zip(s.data()) {
            *a += v as f64;
        }
    }
    let n = f.crops() as f64;
    Ok(Tensor::new(vec![t], acc.into_iter().map(|a| (a / n) as f32).collect())?)
}
