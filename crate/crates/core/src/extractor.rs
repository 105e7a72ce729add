//! I3D-style 3-D residual feature extractor with embedded-Gaussian non-local blocks.
//!
//! [`build_extractor`] lowers an [`ExtractorConfig`] to a [`ComputeGraph`] that
//! maps a ten-crop clip `[crops, 3, L, S, S]` to one `D`-vector per crop. The
//! last stage output (before the optional projection and global pooling) is the
//! feature tap point, named `tap` in the graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    ComputeGraph, GraphBuilder, GraphError, MemoryPlan, NonLocalRefs, Op, ParamId, PlannedExecutor, TensorId,
};
use crate::preprocess::ClipBatch;
use crate::tensor::{nonlocal_into, Conv3dSpec, NonLocalWeights, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("invalid extractor config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("snippet {index}: {source}")]
    Snippet {
        index: usize,
        #[source]
        source: GraphError,
    },
    #[error("snippet {index}: features contain NaN or Inf")]
    NonFinite { index: usize },
    #[error("feature tensor: {0}")]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// `kt×3×3` then `1×3×3` convolutions.
    Basic,
    /// `kt×1×1` reduce, `1×3×3`, `1×1×1` expand.
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub kind: BlockKind,
    /// Bottleneck width; ignored by basic blocks.
    pub inner: usize,
    pub out: usize,
    /// Stride of the first block of the stage.
    pub stride: [usize; 3],
    /// Temporal kernel of each block's first convolution (1 = not inflated).
    pub temporal_kernels: Vec<usize>,
    /// Block indices followed by a non-local block.
    #[serde(default)]
    pub nonlocal_after: Vec<usize>,
    #[serde(default)]
    pub pool_before: Option<PoolSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub crops: usize,
    pub channels: usize,
    pub frames: usize,
    pub size: usize,
}

impl ClipSpec {
    pub fn shape(&self) -> [usize; 5] {
        [self.crops, self.channels, self.frames, self.size, self.size]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub name: String,
    pub input: ClipSpec,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub output_dim: usize,
    /// Declares the model non-local; requires at least one non-local block.
    pub non_local: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExtractorConfig {
    /// Two basic-block stages (widths 8/16), one non-local block, D = 32.
    pub fn desk() -> Self {
        ExtractorConfig {
            name: "desk".into(),
            input: ClipSpec {
                crops: 10,
                channels: 3,
                frames: 16,
                size: 224,
            },
            stem: StemConfig {
                channels: 8,
                kernel: [1, 8, 8],
                stride: [2, 8, 8],
                pad: [0, 0, 0],
                pool: Some(PoolSpec {
                    kernel: [1, 2, 2],
                    stride: [1, 2, 2],
                }),
            },
            stages: vec![
                StageConfig {
                    blocks: 1,
                    kind: BlockKind::Basic,
                    inner: 8,
                    out: 8,
                    stride: [1, 1, 1],
                    temporal_kernels: vec![3],
                    nonlocal_after: vec![],
                    pool_before: None,
                },
                StageConfig {
                    blocks: 1,
                    kind: BlockKind::Basic,
                    inner: 16,
                    out: 16,
                    stride: [2, 2, 2],
                    temporal_kernels: vec![3],
                    nonlocal_after: vec![0],
                    pool_before: None,
                },
            ],
            output_dim: 32,
            non_local: true,
        }
    }

    /// ResNet50-I3D with five non-local blocks (two in res3, three in res4), D = 2048.
    ///
    /// Meant for counting and shape contracts; build it with [`ParamInit::ShapeOnly`].
    pub fn full_scale() -> Self {
        let stage =
            |blocks: usize, inner: usize, out: usize, stride: [usize; 3], first_inflated: bool, nl: Vec<usize>| {
                StageConfig {
                    blocks,
                    kind: BlockKind::Bottleneck,
                    inner,
                    out,
                    stride,
                    temporal_kernels: (0..blocks)
                        .map(|i| if (i % 2 == 0) == first_inflated { 3 } else { 1 })
                        .collect(),
                    nonlocal_after: nl,
                    pool_before: None,
                }
            };
        let mut stages = vec![
            stage(3, 64, 256, [1, 1, 1], true, vec![]),
            stage(4, 128, 512, [1, 2, 2], true, vec![1, 3]),
            stage(6, 256, 1024, [1, 2, 2], true, vec![1, 3, 5]),
            stage(3, 512, 2048, [1, 2, 2], false, vec![]),
        ];
        stages[1].pool_before = Some(PoolSpec {
            kernel: [2, 1, 1],
            stride: [2, 1, 1],
        });
        ExtractorConfig {
            name: "resnet50-i3d-nl".into(),
            input: ClipSpec {
                crops: 1,
                channels: 3,
                frames: 16,
                size: 224,
            },
            stem: StemConfig {
                channels: 64,
                kernel: [5, 7, 7],
                stride: [1, 2, 2],
                pad: [2, 3, 3],
                pool: Some(PoolSpec {
                    kernel: [1, 2, 2],
                    stride: [1, 2, 2],
                }),
            },
            stages,
            output_dim: 2048,
            non_local: true,
        }
    }

    pub fn nonlocal_count(&self) -> usize {
        self.stages.iter().map(|s| s.nonlocal_after.len()).sum()
    }

    pub fn with_crops(mut self, crops: usize) -> Self {
        self.input.crops = crops;
        self
    }

    /// Checks structural constraints; every violation is listed.
    pub fn validate(&self) -> Result<(), ExtractorError> {
        let mut bad = Vec::new();
        if self.output_dim < 1 {
            bad.push("output_dim must be at least 1".to_string());
        }
        if self.non_local && self.nonlocal_count() == 0 {
            bad.push("a non-local config needs at least one non-local block".to_string());
        }
        let i = &self.input;
        if i.crops == 0 || i.channels == 0 || i.frames == 0 || i.size == 0 {
            bad.push(format!("input extents must be positive, got {:?}", i.shape()));
        }
        let s = &self.stem;
        if s.channels == 0 || s.kernel.contains(&0) || s.stride.contains(&0) {
            bad.push("stem channels, kernel and stride must be positive".to_string());
        }
        let pools = s
            .pool
            .iter()
            .chain(self.stages.iter().filter_map(|st| st.pool_before.as_ref()));
        for p in pools {
            if p.kernel.contains(&0) || p.stride.contains(&0) {
                bad.push(format!("pool kernel and stride must be positive, got {p:?}"));
            }
        }
        if self.stages.is_empty() {
            bad.push("at least one stage is required".to_string());
        }
        for (k, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 {
                bad.push(format!("stage {k}: blocks must be at least 1"));
            }
            if st.out == 0 || (st.kind == BlockKind::Bottleneck && st.inner == 0) {
                bad.push(format!("stage {k}: channel widths must be positive"));
            }
            if st.stride.contains(&0) {
                bad.push(format!("stage {k}: stride must be positive"));
            }
            if st.temporal_kernels.len() != st.blocks {
                bad.push(format!(
                    "stage {k}: {} temporal kernels for {} blocks",
                    st.temporal_kernels.len(),
                    st.blocks
                ));
            }
            if st.temporal_kernels.iter().any(|&t| t % 2 == 0) {
                bad.push(format!("stage {k}: temporal kernels must be odd"));
            }
            if let Some(b) = st.nonlocal_after.iter().find(|&&b| b >= st.blocks) {
                bad.push(format!(
                    "stage {k}: non-local after block {b} but the stage has {} blocks",
                    st.blocks
                ));
            }
            if st.out > 0 && st.out % 2 == 1 && !st.nonlocal_after.is_empty() {
                bad.push(format!("stage {k}: non-local blocks need an even channel count"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ExtractorError::Config(bad))
        }
    }
}

/// How parameters are materialized when building a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    /// He-normal convolutions, zero biases, zero non-local output projections.
    Seeded(u64),
    /// Shapes only; enough for counting and planning but not for execution.
    ShapeOnly,
}

struct Builder {
    b: GraphBuilder,
    rng: Option<ChaCha8Rng>,
}

impl Builder {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, zero: bool) -> ParamId {
        match &mut self.rng {
            None => self.b.declare(name, shape),
            Some(rng) => {
                let n: usize = shape.iter().product();
                let data = if zero {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    (0..n).map(|_| rng.sample(normal) as f32).collect()
                };
                self.b
                    .param(name, Tensor::new(shape.to_vec(), data).expect("length matches"))
            }
        }
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        match self.rng {
            None => self.b.declare(name, shape),
            Some(_) => self.b.param(name, Tensor::zeros(shape)),
        }
    }

    /// conv → bias_add → relu? as separate nodes, leaving fusion to the optimizer.
    fn conv(
        &mut self,
        name: &str,
        x: TensorId,
        out: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        relu: bool,
    ) -> Result<TensorId, GraphError> {
        let c = self.b.shape(x)[1];
        let w = self.weight(
            &format!("{name}.w"),
            &[out, c, kernel[0], kernel[1], kernel[2]],
            c * kernel.iter().product::<usize>(),
            false,
        );
        let bias = self.zeros(&format!("{name}.b"), &[out]);
        let y = self.b.node(
            name,
            Op::Conv3d {
                spec,
                weight: w,
                bias: None,
                relu: false,
            },
            &[x],
        )?;
        let y = self.b.node(&format!("{name}.bias"), Op::BiasAdd { bias }, &[y])?;
        if relu {
            self.b.node(&format!("{name}.relu"), Op::Relu, &[y])
        } else {
            Ok(y)
        }
    }

    fn pool(&mut self, name: &str, x: TensorId, p: &PoolSpec) -> Result<TensorId, GraphError> {
        self.b.node(
            name,
            Op::MaxPool3d {
                kernel: p.kernel,
                stride: p.stride,
            },
            &[x],
        )
    }

    fn block(
        &mut self,
        name: &str,
        x: TensorId,
        st: &StageConfig,
        kt: usize,
        stride: [usize; 3],
    ) -> Result<TensorId, GraphError> {
        let cin = self.b.shape(x)[1];
        let main = match st.kind {
            BlockKind::Basic => {
                let h = self.conv(
                    &format!("{name}.conv1"),
                    x,
                    st.out,
                    [kt, 3, 3],
                    Conv3dSpec::new(stride, [kt / 2, 1, 1]),
                    true,
                )?;
                self.conv(
                    &format!("{name}.conv2"),
                    h,
                    st.out,
                    [1, 3, 3],
                    Conv3dSpec::new([1; 3], [0, 1, 1]),
                    false,
                )?
            }
            BlockKind::Bottleneck => {
                let h = self.conv(
                    &format!("{name}.conv_a"),
                    x,
                    st.inner,
                    [kt, 1, 1],
                    Conv3dSpec::new([1; 3], [kt / 2, 0, 0]),
                    true,
                )?;
                let h = self.conv(
                    &format!("{name}.conv_b"),
                    h,
                    st.inner,
                    [1, 3, 3],
                    Conv3dSpec::new(stride, [0, 1, 1]),
                    true,
                )?;
                self.conv(
                    &format!("{name}.conv_c"),
                    h,
                    st.out,
                    [1, 1, 1],
                    Conv3dSpec::default(),
                    false,
                )?
            }
        };
        let short = if stride != [1; 3] || cin != st.out {
            self.conv(
                &format!("{name}.shortcut"),
                x,
                st.out,
                [1, 1, 1],
                Conv3dSpec::new(stride, [0; 3]),
                false,
            )?
        } else {
            x
        };
        let y = self.b.node(&format!("{name}.add"), Op::Add, &[main, short])?;
        self.b.node(&format!("{name}.relu"), Op::Relu, &[y])
    }

    fn nonlocal(&mut self, name: &str, x: TensorId) -> Result<TensorId, GraphError> {
        let c = self.b.shape(x)[1];
        let ci = c / 2;
        let proj = |this: &mut Self, p: &str, rows: usize, cols: usize, zero: bool| {
            let w = this.weight(&format!("{name}.{p}.w"), &[rows, cols], cols, zero);
            let b = this.zeros(&format!("{name}.{p}.b"), &[rows]);
            (w, b)
        };
        let refs = NonLocalRefs {
            inner: ci,
            theta: proj(self, "theta", ci, c, false),
            phi: proj(self, "phi", ci, c, false),
            g: proj(self, "g", ci, c, false),
            out: proj(self, "out", c, ci, true),
        };
        self.b.node(name, Op::NonLocal(refs), &[x])
    }
}

/// Lowers a config to an unfused graph with one input `[crops, 3, L, S, S]`
/// and one output `[crops, D]`.
pub fn build_extractor(cfg: &ExtractorConfig, init: ParamInit) -> Result<ComputeGraph, ExtractorError> {
    cfg.validate()?;
    let mut m = Builder {
        b: GraphBuilder::new(),
        rng: match init {
            ParamInit::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            ParamInit::ShapeOnly => None,
        },
    };
    let mut x = m.b.input("clip", &cfg.input.shape());
    let s = &cfg.stem;
    x = m.conv("stem", x, s.channels, s.kernel, Conv3dSpec::new(s.stride, s.pad), true)?;
    if let Some(p) = &s.pool {
        x = m.pool("stem.pool", x, p)?;
    }
    for (k, st) in cfg.stages.iter().enumerate() {
        if let Some(p) = &st.pool_before {
            x = m.pool(&format!("s{k}.pool"), x, p)?;
        }
        for (j, &kt) in st.temporal_kernels.iter().enumerate() {
            let stride = if j == 0 { st.stride } else { [1; 3] };
            x = m.block(&format!("s{k}b{j}"), x, st, kt, stride)?;
            if st.nonlocal_after.contains(&j) {
                x = m.nonlocal(&format!("s{k}b{j}.nl"), x)?;
            }
        }
    }
    m.b.rename(x, "tap");
    if m.b.shape(x)[1] != cfg.output_dim {
        x = m.conv("proj", x, cfg.output_dim, [1, 1, 1], Conv3dSpec::default(), true)?;
    }
    let y = m.b.node("pool", Op::GlobalAvgPool, &[x])?;
    m.b.output(y);
    Ok(m.b.finish()?)
}

/// Parameters of a standalone non-local block over `C` channels.
#[derive(Debug, Clone)]
pub struct NonLocalParams {
    pub theta: (Tensor, Tensor),
    pub phi: (Tensor, Tensor),
    pub g: (Tensor, Tensor),
    pub out: (Tensor, Tensor),
}

impl NonLocalParams {
    /// Seeded projections with a zero output projection (identity block).
    pub fn zero_init(channels: usize, inner: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("finite std");
        let mut proj = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.sample(normal) as f32).collect();
            (
                Tensor::new(vec![rows, cols], data).expect("length matches"),
                Tensor::zeros(&[rows]),
            )
        };
        NonLocalParams {
            theta: proj(inner, channels),
            phi: proj(inner, channels),
            g: proj(inner, channels),
            out: (Tensor::zeros(&[channels, inner]), Tensor::zeros(&[channels])),
        }
    }

    pub fn inner(&self) -> usize {
        self.theta.0.shape()[0]
    }
}

/// `y = x + W_out · attention(θ(x), φ(x), g(x)) + b_out`, with softmax attention
/// over all `D·H·W` positions of each batch item.
pub fn nonlocal_block(x: &Tensor, params: &NonLocalParams) -> Result<Tensor, TensorError> {
    if x.rank() != 5 {
        return Err(TensorError::Rank {
            op: "non_local",
            expected: 5,
            shape: x.shape().to_vec(),
        });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let ci = params.inner();
    let check = |what: &str, t: &Tensor, want: &[usize]| {
        if t.shape() == want {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "non_local",
                msg: format!("{what} has shape {:?}, expected {want:?}", t.shape()),
            })
        }
    };
    for (what, (w, b)) in [("theta", &params.theta), ("phi", &params.phi), ("g", &params.g)] {
        check(what, w, &[ci, c])?;
        check(what, b, &[ci])?;
    }
    check("out", &params.out.0, &[c, ci])?;
    check("out", &params.out.1, &[c])?;
    fn pair(p: &(Tensor, Tensor)) -> (&[f32], &[f32]) {
        (p.0.data(), p.1.data())
    }
    let wts = NonLocalWeights {
        theta: pair(&params.theta),
        phi: pair(&params.phi),
        g: pair(&params.g),
        out: pair(&params.out),
        inner: ci,
    };
    let p = x.shape()[2..].iter().product();
    let mut out = vec![0.0; x.len()];
    nonlocal_into(x.data(), n, c, p, &wts, &mut out);
    Tensor::with_precision(x.shape().to_vec(), out, x.precision())
}

/// Features of every (crop, snippet): `[crops, T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeatures {
    data: Tensor,
}

impl SnippetFeatures {
    pub fn new(data: Tensor) -> Result<Self, TensorError> {
        if data.rank() != 3 {
            return Err(TensorError::Rank {
                op: "snippet_features",
                expected: 3,
                shape: data.shape().to_vec(),
            });
        }
        if !data.is_finite() {
            return Err(TensorError::Invalid {
                op: "snippet_features",
                msg: "features contain NaN or Inf".into(),
            });
        }
        Ok(SnippetFeatures { data })
    }

    /// Stacks per-snippet `[crops, D]` rows along the snippet axis.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self, TensorError> {
        let first = rows.first().ok_or_else(|| TensorError::ZeroExtent(vec![0]))?;
        let (crops, dim) = (first.shape()[0], first.shape()[1]);
        let t = rows.len();
        let mut data = vec![0.0; crops * t * dim];
        for (s, r) in rows.iter().enumerate() {
            if r.shape() != [crops, dim] {
                return Err(TensorError::Invalid {
                    op: "snippet_features",
                    msg: format!("snippet {s} has shape {:?}, expected {:?}", r.shape(), [crops, dim]),
                });
            }
            for c in 0..crops {
                data[(c * t + s) * dim..(c * t + s + 1) * dim].copy_from_slice(&r.data()[c * dim..(c + 1) * dim]);
            }
        }
        Self::new(Tensor::new(vec![crops, t, dim], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn crops(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn snippets(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// `[T, D]` features of one crop.
    pub fn crop(&self, c: usize) -> Tensor {
        let (t, d) = (self.snippets(), self.dim());
        Tensor::new(vec![t, d], self.data.data()[c * t * d..(c + 1) * t * d].to_vec()).expect("slice matches")
    }

    pub fn row(&self, c: usize, s: usize) -> &[f32] {
        let (t, d) = (self.snippets(), self.dim());
        &self.data.data()[(c * t + s) * d..(c * t + s + 1) * d]
    }
}

/// Streams clips through one extractor graph, reusing a single arena when planned.
#[derive(Debug)]
pub struct FeatureExtractor<'g> {
    graph: &'g ComputeGraph,
    planned: Option<PlannedExecutor<'g>>,
}

impl<'g> FeatureExtractor<'g> {
    pub fn new(graph: &'g ComputeGraph, plan: Option<&MemoryPlan>) -> Result<Self, GraphError> {
        let planned = plan.map(|p| PlannedExecutor::new(graph, p)).transpose()?;
        Ok(FeatureExtractor { graph, planned })
    }

    /// `[crops, D]` features of one clip.
    pub fn extract(&mut self, clip: &ClipBatch) -> Result<Tensor, ExtractorError> {
        let inputs = std::slice::from_ref(&clip.data);
        let out = match &mut self.planned {
            Some(ex) => ex.run(inputs),
            None => crate::graph::execute(self.graph, inputs, None),
        };
        let mut out = out.map_err(|source| ExtractorError::Snippet {
            index: clip.snippet_index,
            source,
        })?;
        let row = out.swap_remove(0);
        if !row.is_finite() {
            return Err(ExtractorError::NonFinite {
                index: clip.snippet_index,
            });
        }
        Ok(row)
    }
}

/// Runs every clip through the graph and stacks the results as `[crops, T, D]`.
pub fn extract_features(
    graph: &ComputeGraph,
    plan: Option<&MemoryPlan>,
    batches: &[ClipBatch],
) -> Result<SnippetFeatures, ExtractorError> {
    let mut fx = FeatureExtractor::new(graph, plan)?;
    let rows = batches.iter().map(|b| fx.extract(b)).collect::<Result<Vec<_>, _>>()?;
    Ok(SnippetFeatures::from_rows(&rows)?)
}
