//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod oracle;

use edgevad::graph::{ComputeGraph, GraphBuilder, MemoryPlan, NonLocalRefs, Op, ParamId, TensorId};
use edgevad::tensor::{Conv3dSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Random graph builder that seeds conv/linear → bias → relu patterns among
/// adds, pools, non-local blocks and branching intermediates.
pub struct GraphGen<'r> {
    rng: &'r mut ChaCha8Rng,
    b: GraphBuilder,
    values: bool,
    names: usize,
}

impl<'r> GraphGen<'r> {
    fn name(&mut self, stem: &str) -> String {
        self.names += 1;
        format!("{stem}{}", self.names)
    }

    fn param(&mut self, shape: &[usize]) -> ParamId {
        let name = self.name("p");
        if self.values {
            let t = random_tensor(self.rng, shape);
            self.b.param(&name, t)
        } else {
            self.b.declare(&name, shape)
        }
    }

    fn node(&mut self, op: Op, inputs: &[TensorId]) -> TensorId {
        let name = self.name(op.kind());
        self.b
            .node(&name, op, inputs)
            .expect("generator emits consistent shapes")
    }

    /// conv or linear, then optionally bias-add and relu; the intermediate
    /// sometimes gets a second consumer.
    fn pattern(&mut self, x: TensorId, frontier: &mut Vec<TensorId>) -> TensorId {
        let shape = self.b.shape(x).to_vec();
        let o = self.rng.random_range(1..=4);
        let mut y = if shape.len() == 5 {
            let mut spec = Conv3dSpec::default();
            let mut k = [1; 3];
            for a in 0..3 {
                k[a] = if shape[2 + a] >= 3 {
                    [1, 3][self.rng.random_range(0..2)]
                } else {
                    1
                };
                spec.pad[a] = if self.rng.random_bool(0.7) { k[a] / 2 } else { 0 };
            }
            let weight = self.param(&[o, shape[1], k[0], k[1], k[2]]);
            let bias = self.rng.random_bool(0.2).then(|| self.param(&[o]));
            self.node(
                Op::Conv3d {
                    spec,
                    weight,
                    bias,
                    relu: false,
                },
                &[x],
            )
        } else {
            let weight = self.param(&[o, *shape.last().unwrap()]);
            self.node(
                Op::Linear {
                    weight,
                    bias: None,
                    relu: false,
                },
                &[x],
            )
        };
        if self.rng.random_bool(0.7) {
            if self.rng.random_bool(0.15) {
                frontier.push(y);
            }
            let bias = self.param(&[o]);
            y = self.node(Op::BiasAdd { bias }, &[y]);
        }
        if self.rng.random_bool(0.7) {
            if self.rng.random_bool(0.15) {
                frontier.push(y);
            }
            y = self.node(Op::Relu, &[y]);
        }
        y
    }

    fn nonlocal(&mut self, x: TensorId) -> TensorId {
        let c = self.b.shape(x)[1];
        let ci = (c / 2).max(1);
        let mut pair = |rows, cols| (self.param(&[rows, cols]), self.param(&[rows]));
        let refs = NonLocalRefs {
            inner: ci,
            theta: pair(ci, c),
            phi: pair(ci, c),
            g: pair(ci, c),
            out: pair(c, ci),
        };
        self.node(Op::NonLocal(refs), &[x])
    }
}

/// A random valid graph with one `[N, C, D, H, W]` input. With `values`, every
/// parameter carries uniform values in `[-1, 1)`.
pub fn random_graph(rng: &mut ChaCha8Rng, values: bool) -> ComputeGraph {
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=6),
        rng.random_range(2..=6),
    ];
    let mut g = GraphGen {
        rng,
        b: GraphBuilder::new(),
        values,
        names: 0,
    };
    let x = g.b.input("x", &shape);
    let mut frontier = vec![x];
    let mut flat = false;
    let steps = g.rng.random_range(1..=8);
    for _ in 0..steps {
        let pick = frontier[g.rng.random_range(0..frontier.len())];
        let rank = g.b.shape(pick).len();
        let y = match g.rng.random_range(0..10) {
            0..=4 => g.pattern(pick, &mut frontier),
            5 => {
                let same: Vec<TensorId> = frontier
                    .iter()
                    .copied()
                    .filter(|&t| g.b.shape(t) == g.b.shape(pick))
                    .collect();
                let other = same[g.rng.random_range(0..same.len())];
                g.node(Op::Add, &[pick, other])
            }
            6 => g.node(Op::Relu, &[pick]),
            7 if rank == 5 && g.b.shape(pick)[3] >= 2 && g.b.shape(pick)[4] >= 2 => g.node(
                Op::MaxPool3d {
                    kernel: [1, 2, 2],
                    stride: [1, 2, 2],
                },
                &[pick],
            ),
            8 if rank == 5 => g.nonlocal(pick),
            9 if rank == 5 && !flat => {
                flat = true;
                g.node(Op::GlobalAvgPool, &[pick])
            }
            _ => g.node(Op::Relu, &[pick]),
        };
        frontier.push(y);
    }
    let last = *frontier.last().unwrap();
    g.b.output(last);
    if frontier.len() > 2 && g.rng.random_bool(0.3) {
        let extra = frontier[g.rng.random_range(1..frontier.len() - 1)];
        if extra != last {
            g.b.output(extra);
        }
    }
    g.b.finish().unwrap()
}

/// Uniform inputs matching a graph's declared input shapes.
pub fn random_inputs(rng: &mut ChaCha8Rng, graph: &ComputeGraph) -> Vec<Tensor> {
    graph.input_shapes().iter().map(|s| random_tensor(rng, s)).collect()
}

/// Pairwise check: no two tensors with intersecting inclusive lifetimes share bytes.
pub fn assert_no_overlap(graph: &ComputeGraph, plan: &MemoryPlan) {
    let placed: Vec<_> = plan.placed().collect();
    for (i, a) in placed.iter().enumerate() {
        assert!(a.offset + a.size <= plan.arena_bytes);
        assert_eq!(a.size, graph.tensors[a.tensor].bytes());
        for b in &placed[i + 1..] {
            let live_together = a.first <= b.last && b.first <= a.last;
            let share_bytes = a.buffer == b.buffer && a.offset < b.offset + b.size && b.offset < a.offset + a.size;
            assert!(!(live_together && share_bytes), "{} and {} collide", a.name, b.name);
        }
    }
}

/// Outcome of a central-difference check over every parameter entry.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub entries: usize,
    /// Entries where every step size crossed a piecewise branch.
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor so that entries whose true gradient is zero
/// compare against absolute round-off rather than dividing by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random desk-scale instance: one normal and one abnormal video of `T`
/// snippets with seeded parameters and dropout masks. Up to `per_tensor`
/// entries of every parameter tensor are checked (all of them when the tensor
/// is smaller).
///
/// The numeric derivative is the five-point central stencil at h = 1e-3,
/// `(8·(f(x+h/2) − f(x−h/2)) − (f(x+h) − f(x−h))) / 6h`: the three-point
/// stencil's O(h²) truncation alone reaches ~2e-4 relative on entries whose
/// gradient is ~1e-6. When a step crosses a ReLU, top-k, clamp or hinge
/// boundary, h shrinks to 1e-5 and then 1e-7.
pub fn gradient_check(seed: u64, per_tensor: usize) -> GradCheck {
    use edgevad::rtfm::{rtfm_loss, Batch, RtfmConfig, RtfmParams, TrainConfig};
    use rand::seq::index::sample;
    let mut r = rng(seed);
    let cfg = RtfmConfig::desk();
    let params = RtfmParams::init(cfg.clone(), seed).unwrap();
    let mut values: Vec<Vec<f64>> = params
        .values
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    // Non-zero TSA output and biases so every path carries gradient.
    for v in values.iter_mut() {
        for x in v.iter_mut() {
            if *x == 0.0 {
                *x = r.random_range(-0.1..0.1);
            }
        }
    }
    let t = r.random_range(4..=7);
    let normal = random_tensor(&mut r, &[t, cfg.feature_dim]);
    let abnormal = random_tensor(&mut r, &[t, cfg.feature_dim]);
    let batch = Batch {
        normal: vec![&normal],
        abnormal: vec![&abnormal],
    };
    let keep = 1.0 / (1.0 - cfg.dropout);
    let masks: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            (0..t * cfg.hidden[1])
                .map(|_| if r.random_bool(cfg.dropout) { 0.0 } else { keep })
                .collect()
        })
        .collect();
    let tcfg = TrainConfig {
        margin: r.random_range(1.0..20.0),
        ..TrainConfig::default()
    };
    let base = rtfm_loss(&cfg, &values, &batch, &tcfg, Some(&masks)).unwrap();
    let mut report = GradCheck::default();
    for p in 0..values.len() {
        let n = values[p].len();
        let picked = sample(&mut r, n, per_tensor.min(n));
        for i in picked {
            report.entries += 1;
            let x0 = values[p][i];
            let eval = |values: &mut Vec<Vec<f64>>, dx: f64| {
                values[p][i] = x0 + dx;
                let out = rtfm_loss(&cfg, values, &batch, &tcfg, Some(&masks)).unwrap();
                values[p][i] = x0;
                (out.pattern == base.pattern).then_some(out.total)
            };
            let mut numeric = None;
            for h in [1e-3, 1e-5, 1e-7] {
                let f = [
                    eval(&mut values, h),
                    eval(&mut values, -h),
                    eval(&mut values, h / 2.0),
                    eval(&mut values, -h / 2.0),
                ];
                if let [Some(a), Some(b), Some(c), Some(d)] = f {
                    numeric = Some((8.0 * (c - d) - (a - b)) / (6.0 * h));
                    break;
                }
            }
            match numeric {
                Some(n) => report.max_rel_err = report.max_rel_err.max(rel_err(base.grads[p][i], n)),
                None => report.skipped += 1,
            }
        }
    }
    report
}
