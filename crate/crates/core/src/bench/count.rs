use serde::{Deserialize, Serialize};

use crate::graph::{ComputeGraph, GraphError, Node, Op};
use crate::rtfm::RtfmConfig;

/// Learnable scalars and floating-point operations of one forward pass.
///
/// FLOPs count each multiply-accumulate as 2 and nothing else: bias adds,
/// activations, pooling, softmax and residual adds are free.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub params: u64,
    pub flops: u64,
}

impl Counts {
    pub fn plus(self, other: Counts) -> Counts {
        Counts {
            params: self.params + other.params,
            flops: self.flops + other.flops,
        }
    }
}

/// Multiply-accumulates of one node at the graph's declared shapes.
pub fn node_macs(graph: &ComputeGraph, node: &Node) -> u64 {
    let out = &graph.tensors[node.output].shape;
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    match &node.op {
        Op::Conv3d { weight, .. } => {
            let w = graph.param_shape(*weight);
            numel(out) * numel(&w[1..])
        }
        Op::Linear { weight, .. } => numel(out) * graph.param_shape(*weight)[1] as u64,
        Op::NonLocal(r) => {
            let (n, c, ci) = (out[0] as u64, out[1] as u64, r.inner as u64);
            let p = numel(&out[2..]);
            // theta/phi/g projections, two P×P products, output projection.
            n * (3 * p * c * ci + 2 * p * p * ci + p * ci * c)
        }
        Op::BiasAdd { .. } | Op::Relu | Op::Add | Op::MaxPool3d { .. } | Op::GlobalAvgPool => 0,
    }
}

/// Parameter count (every declared parameter) and FLOPs of a static-shape graph.
///
/// Graphs are validated first; unknown node kinds cannot reach this point
/// because [`ComputeGraph::from_json`] rejects them and names the kind.
pub fn count_params_flops(graph: &ComputeGraph) -> Result<Counts, GraphError> {
    graph.validate()?;
    let params = graph.params.iter().map(|p| p.numel() as u64).sum();
    let flops = graph.nodes.iter().map(|n| 2 * node_macs(graph, n)).sum();
    Ok(Counts { params, flops })
}

/// Counts of the temporal detector on a video of `t` snippets (one crop).
pub fn count_head(cfg: &RtfmConfig, t: usize) -> Counts {
    Counts {
        params: cfg.param_count() as u64,
        flops: 2 * cfg.macs(t) as u64,
    }
}
