use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use super::{RtfmConfig, RtfmError, RtfmParams, Slots};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty added to the gradient before the Adam moments.
    pub weight_decay: f64,
    /// Videos per class in each step.
    pub batch_size: usize,
    pub k: usize,
    pub margin: f64,
    pub bce_eps: f64,
    /// Weight of the l2 norm of all abnormal-video scores in a step.
    pub sparsity: f64,
    /// Weight of the summed squared score differences between neighbouring
    /// snippets of abnormal videos.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.001,
            weight_decay: 0.005,
            batch_size: 16,
            k: 3,
            margin: 100.0,
            bce_eps: 1e-7,
            sparsity: 8e-3,
            smoothness: 8e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RtfmError> {
        let weights = [self.learning_rate, self.weight_decay, self.sparsity, self.smoothness];
        if self.batch_size == 0 || self.k == 0 || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(RtfmError::Config(
                "batch_size and k must be positive; learning_rate, weight_decay, sparsity and smoothness non-negative"
                    .into(),
            ));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(RtfmError::Config("bce_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// One video's features with its bag label and, when known, snippet labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVideo {
    pub name: String,
    /// `[T, D]`.
    pub features: Tensor,
    pub abnormal: bool,
    pub snippet_labels: Vec<bool>,
}

/// Normal and abnormal videos of one optimization step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub normal: Vec<&'a Tensor>,
    pub abnormal: Vec<&'a Tensor>,
}

impl Batch<'_> {
    fn videos(&self) -> impl Iterator<Item = (&Tensor, bool)> {
        self.normal
            .iter()
            .map(|t| (*t, false))
            .chain(self.abnormal.iter().map(|t| (*t, true)))
    }

    pub fn len(&self) -> usize {
        self.normal.len() + self.abnormal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub hinge: f64,
    pub bce: f64,
    /// Weighted sparsity plus smoothness terms.
    pub regularizer: f64,
    /// One gradient per parameter, in layout order, flattened row-major.
    pub grads: Vec<Vec<f64>>,
    /// Fingerprint of all piecewise branches taken (see [`Tape::pattern`]).
    pub pattern: u64,
}

fn as_mat(shape: &[usize], data: Vec<f64>) -> Mat {
    match shape {
        [n] => Mat::new(1, *n, data),
        [r, rest @ ..] => Mat::new(*r, rest.iter().product(), data),
        [] => Mat::new(1, 1, data),
    }
}

fn tensor_mat(t: &Tensor) -> Mat {
    as_mat(t.shape(), t.data().iter().map(|&v| v as f64).collect())
}

/// Forward pass of one video on the tape: returns (`X`, scores).
fn forward(
    tape: &mut Tape,
    cfg: &RtfmConfig,
    slots: &Slots,
    leaves: &[Var],
    f: &Tensor,
    mask: Option<&[f64]>,
) -> (Var, Var) {
    let x = tape.leaf(tensor_mat(f));
    let mut parts = Vec::new();
    for (&dil, &(w, b)) in cfg.dilations.iter().zip(&slots.pdc) {
        let y = tape.conv1d(x, leaves[w], leaves[b], cfg.kernel, dil);
        parts.push(tape.relu(y));
    }
    if let Some([h, th, ph, g, out]) = slots.tsa {
        let lin = |tape: &mut Tape, v, (w, b): (usize, usize)| tape.linear(v, leaves[w], leaves[b]);
        let hx = lin(tape, x, h);
        let hx = tape.relu(hx);
        let theta = lin(tape, hx, th);
        let phi = lin(tape, hx, ph);
        let gx = lin(tape, hx, g);
        let aff = tape.matmul_nt(theta, phi);
        let attn = tape.softmax_rows(aff);
        let y = tape.matmul(attn, gx);
        let z = lin(tape, y, out);
        parts.push(tape.add(hx, z));
    }
    let cat = tape.concat_cols(&parts);
    let (w, b) = slots.fuse;
    let xo = tape.conv1d(cat, leaves[w], leaves[b], cfg.kernel, 1);
    let xo = tape.relu(xo);
    let [fc1, fc2, fc3] = slots.fc;
    let h = tape.linear(xo, leaves[fc1.0], leaves[fc1.1]);
    let h = tape.relu(h);
    let h = tape.linear(h, leaves[fc2.0], leaves[fc2.1]);
    let mut h = tape.relu(h);
    if let Some(m) = mask {
        h = tape.mask(h, m.to_vec());
    }
    let logit = tape.linear(h, leaves[fc3.0], leaves[fc3.1]);
    (xo, tape.sigmoid(logit))
}

/// Inverted-dropout masks for every video of a batch (normal videos first).
pub fn sample_masks(cfg: &RtfmConfig, batch: &Batch<'_>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let keep = 1.0 / (1.0 - cfg.dropout);
    batch
        .videos()
        .map(|(f, _)| {
            (0..f.shape()[0] * cfg.hidden[1])
                .map(|_| if rng.random::<f64>() < cfg.dropout { 0.0 } else { keep })
                .collect()
        })
        .collect()
}

/// Hinge on top-k mean magnitudes plus BCE on each video's top-k-magnitude scores.
///
/// `loss = mean_i max(0, m − M(aᵢ) + M(nᵢ)) + mean over selected snippets of BCE`,
/// where `M` is the mean of the `k` largest row norms of `X`, normal and
/// abnormal videos are paired by position (the shorter list wraps), and BCE
/// labels are 1 for abnormal videos and 0 for normal ones. On top of that,
/// `sparsity · ‖s_abn‖₂ + smoothness · Σ (s[t+1] − s[t])²` over the scores of
/// the step's abnormal videos; both weights at 0 leave hinge plus BCE.
/// `values` holds the parameters in layout order; `masks`, when given,
/// applies dropout.
pub fn rtfm_loss(
    cfg: &RtfmConfig,
    values: &[Vec<f64>],
    batch: &Batch<'_>,
    tcfg: &TrainConfig,
    masks: Option<&[Vec<f64>]>,
) -> Result<LossBreakdown, RtfmError> {
    if batch.normal.is_empty() || batch.abnormal.is_empty() {
        return Err(RtfmError::Data("each batch needs normal and abnormal videos".into()));
    }
    let layout = cfg.layout();
    let slots = cfg.slots();
    let mut tape = Tape::new();
    let leaves: Vec<Var> = layout
        .iter()
        .zip(values)
        .map(|((_, shape), v)| tape.leaf(as_mat(shape, v.clone())))
        .collect();

    let mut mags = (Vec::new(), Vec::new());
    let mut bce_terms = Vec::new();
    let mut selected = 0usize;
    let mut abnormal_scores = Vec::new();
    let mut diffs = Vec::new();
    for (vi, (f, abnormal)) in batch.videos().enumerate() {
        let t = f.shape()[0];
        if tcfg.k > t {
            return Err(RtfmError::TopK { k: tcfg.k, t });
        }
        let (x, scores) = forward(&mut tape, cfg, &slots, &leaves, f, masks.map(|m| m[vi].as_slice()));
        let norms = tape.row_norm(x);
        let nv = &tape.value(norms).data;
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| nv[b].total_cmp(&nv[a]).then(a.cmp(&b)));
        order.truncate(tcfg.k);
        let m = tape.mean_rows(norms, &order);
        if abnormal {
            mags.1.push(m);
            abnormal_scores.push(scores);
            diffs.push((tape.row_diff_sq(scores), tcfg.smoothness));
        } else {
            mags.0.push(m);
        }
        bce_terms.push(tape.bce(scores, &order, if abnormal { 1.0 } else { 0.0 }, tcfg.bce_eps));
        selected += order.len();
    }
    let pairs = mags.0.len().max(mags.1.len());
    let hinges: Vec<(Var, f64)> = (0..pairs)
        .map(|i| {
            let (n, a) = (mags.0[i % mags.0.len()], mags.1[i % mags.1.len()]);
            (tape.hinge(a, n, tcfg.margin), 1.0 / pairs as f64)
        })
        .collect();
    let hinge = tape.weighted_sum(&hinges);
    // Each BCE node is already a mean over its k entries.
    let per_video = tcfg.k as f64 / selected as f64;
    let bce_parts: Vec<(Var, f64)> = bce_terms.iter().map(|&b| (b, per_video)).collect();
    let bce = tape.weighted_sum(&bce_parts);
    let sparse = tape.norm(&abnormal_scores);
    diffs.push((sparse, tcfg.sparsity));
    let regularizer = tape.weighted_sum(&diffs);
    let total = tape.weighted_sum(&[(hinge, 1.0), (bce, 1.0), (regularizer, 1.0)]);

    let grads = tape.backward(total);
    let grads = layout
        .iter()
        .zip(&leaves)
        .map(|((_, shape), v)| match &grads[v.index()] {
            Some(m) => m.data.clone(),
            None => vec![0.0; shape.iter().product()],
        })
        .collect();
    Ok(LossBreakdown {
        total: tape.value(total).scalar(),
        hinge: tape.value(hinge).scalar(),
        bce: tape.value(bce).scalar(),
        regularizer: tape.value(regularizer).scalar(),
        grads,
        pattern: tape.pattern(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RtfmParams,
    /// Mean step loss of every epoch.
    pub losses: Vec<f64>,
}

/// Adam with L2 weight decay folded into the gradient.
struct Adam {
    lr: f64,
    wd: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(values: &[Vec<f64>], lr: f64, wd: f64) -> Self {
        let zeros: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
        Adam {
            lr,
            wd,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, values: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i] + self.wd * p[i];
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Videos `s·bs .. s·bs + bs` of `list`, wrapping around.
fn pick<'a>(list: &[&'a FeatureVideo], s: usize, bs: usize) -> Vec<&'a Tensor> {
    let n = bs.min(list.len());
    (0..n).map(|i| &list[(s * bs + i) % list.len()].features).collect()
}

/// Seeded mini-batch training. Each step draws `batch_size` videos per class
/// from independently shuffled class lists; an epoch is
/// `max(1, min(#normal, #abnormal) / batch_size)` steps.
pub fn train(
    dataset: &[FeatureVideo],
    init: RtfmParams,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome, RtfmError> {
    tcfg.validate()?;
    let cfg = init.config.clone();
    cfg.validate()?;
    let mut normal: Vec<&FeatureVideo> = dataset.iter().filter(|v| !v.abnormal).collect();
    let mut abnormal: Vec<&FeatureVideo> = dataset.iter().filter(|v| v.abnormal).collect();
    if normal.is_empty() || abnormal.is_empty() {
        return Err(RtfmError::Data(format!(
            "training needs both classes, got {} normal and {} abnormal videos",
            normal.len(),
            abnormal.len()
        )));
    }
    if let Some(v) = dataset
        .iter()
        .find(|v| v.features.rank() != 2 || v.features.shape()[1] != cfg.feature_dim)
    {
        return Err(RtfmError::Data(format!(
            "video {} has features {:?}, expected [T, {}]",
            v.name,
            v.features.shape(),
            cfg.feature_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut values: Vec<Vec<f64>> = init
        .values
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut adam = Adam::new(&values, tcfg.learning_rate, tcfg.weight_decay);
    let bs = tcfg.batch_size;
    let steps = (normal.len().min(abnormal.len()) / bs).max(1);
    let mut losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        normal.shuffle(&mut rng);
        abnormal.shuffle(&mut rng);
        let mut sum = 0.0;
        for s in 0..steps {
            let batch = Batch {
                normal: pick(&normal, s, bs),
                abnormal: pick(&abnormal, s, bs),
            };
            let masks = sample_masks(&cfg, &batch, &mut rng);
            let out = rtfm_loss(&cfg, &values, &batch, tcfg, Some(&masks))?;
            if !out.total.is_finite() {
                return Err(RtfmError::Data(format!("loss became non-finite at epoch {epoch}")));
            }
            sum += out.total;
            adam.step(&mut values, &out.grads);
        }
        let mean = sum / steps as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    let values = cfg
        .layout()
        .into_iter()
        .zip(values)
        .map(|((_, shape), v)| Tensor::new(shape, v.into_iter().map(|x| x as f32).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainOutcome {
        params: RtfmParams { config: cfg, values },
        losses,
    })
}

/// Generator for feature videos with planted high-magnitude snippets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub normal_videos: usize,
    pub abnormal_videos: usize,
    pub snippets: usize,
    pub dim: usize,
    /// Magnitude of planted snippets relative to normal ones.
    pub ratio: f64,
    /// Inclusive range of the planted window length.
    pub anomaly_len: [usize; 2],
    /// Relative spread of snippet magnitudes.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            normal_videos: 32,
            abnormal_videos: 32,
            snippets: 32,
            dim: 32,
            ratio: 3.0,
            anomaly_len: [4, 8],
            jitter: 0.1,
            seed: 7,
        }
    }
}

/// Every snippet is a random non-negative direction scaled to magnitude
/// `1 ± jitter`; abnormal videos multiply one contiguous window by `ratio`.
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<FeatureVideo>, RtfmError> {
    let [lo, hi] = cfg.anomaly_len;
    if cfg.snippets == 0 || cfg.dim == 0 || lo == 0 || lo > hi || hi > cfg.snippets {
        return Err(RtfmError::Config(format!(
            "synthetic data needs 1 ≤ anomaly_len[0] ≤ anomaly_len[1] ≤ snippets, got {:?} with {} snippets",
            cfg.anomaly_len, cfg.snippets
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for i in 0..cfg.normal_videos + cfg.abnormal_videos {
        let abnormal = i >= cfg.normal_videos;
        let mut labels = vec![false; cfg.snippets];
        if abnormal {
            let len = rng.random_range(lo..=hi);
            let start = rng.random_range(0..=cfg.snippets - len);
            labels[start..start + len].iter_mut().for_each(|l| *l = true);
        }
        let mut data = Vec::with_capacity(cfg.snippets * cfg.dim);
        for &planted in &labels {
            let dir: Vec<f64> = (0..cfg.dim).map(|_| f64::abs(normal.sample(&mut rng))).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let mut mag = 1.0 + cfg.jitter * rng.random_range(-1.0..1.0);
            if planted {
                mag *= cfg.ratio;
            }
            data.extend(dir.iter().map(|v| (v / norm * mag) as f32));
        }
        out.push(FeatureVideo {
            name: format!("{}{:03}", if abnormal { "abnormal" } else { "normal" }, i),
            features: Tensor::new(vec![cfg.snippets, cfg.dim], data)?,
            abnormal,
            snippet_labels: labels,
        });
    }
    Ok(out)
}
