use serde::{Deserialize, Serialize};

use super::{plan_memory, ComputeGraph, GraphError, MemoryPlan, Node, Op, TensorId};
use crate::tensor::Precision;

/// Which optimization passes to apply. All are on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeFlags {
    pub fuse: bool,
    pub fp16: bool,
    pub memplan: bool,
}

impl Default for OptimizeFlags {
    fn default() -> Self {
        OptimizeFlags {
            fuse: true,
            fp16: true,
            memplan: true,
        }
    }
}

impl OptimizeFlags {
    pub fn none() -> Self {
        OptimizeFlags {
            fuse: false,
            fp16: false,
            memplan: false,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.fuse {
            parts.push("fuse");
        }
        if self.fp16 {
            parts.push("fp16");
        }
        if self.memplan {
            parts.push("memplan");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizedGraph {
    pub graph: ComputeGraph,
    pub plan: Option<MemoryPlan>,
    pub flags: OptimizeFlags,
    pub nodes_before: usize,
}

/// Runs fuse → lower_precision → plan_memory, each gated by its flag.
pub fn optimize(graph: &ComputeGraph, flags: OptimizeFlags) -> Result<OptimizedGraph, GraphError> {
    graph.validate()?;
    let mut g = if flags.fuse { fuse(graph)? } else { graph.clone() };
    if flags.fp16 {
        g = lower_precision(&g);
    }
    let plan = if flags.memplan { Some(plan_memory(&g)?) } else { None };
    Ok(OptimizedGraph {
        graph: g,
        plan,
        flags,
        nodes_before: graph.nodes.len(),
    })
}

/// Folds `bias_add` and `relu` successors into the preceding conv/linear node.
///
/// A successor is absorbed only when the intermediate tensor has exactly one
/// consumer and is not a graph output. For linear nodes a `bias_add` (axis 1)
/// is absorbed only at rank 2, where axis 1 is the feature axis.
pub fn fuse(graph: &ComputeGraph) -> Result<ComputeGraph, GraphError> {
    graph.validate()?;
    let counts = graph.consumer_counts();
    let mut consumer: Vec<Option<usize>> = vec![None; graph.tensors.len()];
    for (i, n) in graph.nodes.iter().enumerate() {
        for &t in &n.inputs {
            consumer[t] = Some(i);
        }
    }
    let sole_consumer = |t: TensorId| -> Option<usize> {
        if counts[t] == 1 && !graph.outputs.contains(&t) {
            consumer[t]
        } else {
            None
        }
    };

    let mut absorbed = vec![false; graph.nodes.len()];
    let mut nodes: Vec<Node> = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        if absorbed[i] {
            continue;
        }
        let mut node = node.clone();
        let bias_axis_ok = match node.op {
            Op::Conv3d { .. } => true,
            Op::Linear { .. } => graph.tensors[node.output].shape.len() == 2,
            _ => false,
        };
        if let Op::Conv3d { bias, relu, .. } | Op::Linear { bias, relu, .. } = &mut node.op {
            if bias.is_none() && !*relu && bias_axis_ok {
                if let Some(j) = sole_consumer(node.output) {
                    if let Op::BiasAdd { bias: b } = graph.nodes[j].op {
                        *bias = Some(b);
                        node.output = graph.nodes[j].output;
                        absorbed[j] = true;
                    }
                }
            }
            if !*relu {
                if let Some(j) = sole_consumer(node.output) {
                    if graph.nodes[j].op == Op::Relu {
                        *relu = true;
                        node.output = graph.nodes[j].output;
                        absorbed[j] = true;
                    }
                }
            }
        }
        nodes.push(node);
    }
    let fused = ComputeGraph { nodes, ..graph.clone() };
    let fused = compact(fused);
    fused.validate()?;
    Ok(fused)
}

/// Drops tensors no node produces (other than graph inputs) and renumbers the rest.
fn compact(mut g: ComputeGraph) -> ComputeGraph {
    let mut keep = vec![false; g.tensors.len()];
    for &i in &g.inputs {
        keep[i] = true;
    }
    for n in &g.nodes {
        keep[n.output] = true;
    }
    let mut remap = vec![usize::MAX; g.tensors.len()];
    let mut tensors = Vec::new();
    for (i, t) in g.tensors.drain(..).enumerate() {
        if keep[i] {
            remap[i] = tensors.len();
            tensors.push(t);
        }
    }
    g.tensors = tensors;
    for t in g.inputs.iter_mut().chain(g.outputs.iter_mut()) {
        *t = remap[*t];
    }
    for n in &mut g.nodes {
        n.output = remap[n.output];
        for t in &mut n.inputs {
            *t = remap[*t];
        }
    }
    g
}

/// Tags every tensor F16 and rounds parameter values to binary16.
///
/// Kernels keep accumulating in wide precision; only stored values (node
/// outputs and parameters) are rounded.
pub fn lower_precision(graph: &ComputeGraph) -> ComputeGraph {
    let mut g = graph.clone();
    for t in &mut g.tensors {
        t.precision = Precision::F16;
    }
    for p in &mut g.params {
        if let Some(v) = p.value.take() {
            p.value = Some(v.to_precision(Precision::F16));
        }
    }
    g
}
