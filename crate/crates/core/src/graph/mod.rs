//! Inference graph IR, its optimization passes and the executor.
//!
//! A [`ComputeGraph`] is a list of nodes kept in topological order. Every node
//! produces exactly one tensor; tensors carry static shapes and a precision tag.
//! Parameters live in the graph and are referenced by index from node ops.
//! A parameter may be declared without values (shape-only graphs are enough
//! for counting and memory planning but cannot be executed).

mod exec;
mod memory;
mod passes;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{max_pool3d_shape, Conv3dSpec, Precision, Tensor, TensorError};

pub use exec::{execute, PlannedExecutor};
pub use memory::{naive_bytes, plan_memory, Assignment, MemoryPlan};
pub use passes::{fuse, lower_precision, optimize, OptimizeFlags, OptimizedGraph};

pub type TensorId = usize;
pub type ParamId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {node} ({kind}): {source}")]
    Node {
        node: String,
        kind: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("node {node}: {msg}")]
    Invalid { node: String, msg: String },
    #[error("graph input {index}: expected shape {expected:?}, got {actual:?}")]
    InputShape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected {expected} graph inputs, got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("parameter {0} is declared without values (shape-only graph)")]
    MissingParam(String),
    #[error("memory plan does not match this graph: {0}")]
    PlanMismatch(String),
    #[error("graph JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * self.precision.elem_bytes()
    }
}

/// A learnable parameter. `value` is absent for shape-only graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub value: Option<Tensor>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter references of a non-local block (embedded Gaussian attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonLocalRefs {
    pub inner: usize,
    pub theta: (ParamId, ParamId),
    pub phi: (ParamId, ParamId),
    pub g: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// 3-D convolution with an optional bias/ReLU epilogue (set by fusion).
    Conv3d {
        spec: Conv3dSpec,
        weight: ParamId,
        bias: Option<ParamId>,
        relu: bool,
    },
    /// Affine map over the last axis with an optional bias/ReLU epilogue.
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
        relu: bool,
    },
    /// Per-channel bias along axis 1.
    BiasAdd {
        bias: ParamId,
    },
    Relu,
    Add,
    MaxPool3d {
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    GlobalAvgPool,
    NonLocal(NonLocalRefs),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv3d { bias, relu, .. } => match (bias.is_some(), relu) {
                (false, false) => "conv3d",
                (true, false) => "conv3d+bias",
                (false, true) => "conv3d+relu",
                (true, true) => "conv3d+bias+relu",
            },
            Op::Linear { bias, relu, .. } => match (bias.is_some(), relu) {
                (false, false) => "linear",
                (true, false) => "linear+bias",
                (false, true) => "linear+relu",
                (true, true) => "linear+bias+relu",
            },
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::MaxPool3d { .. } => "max_pool3d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::NonLocal(_) => "non_local",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Add => 2,
            _ => 1,
        }
    }

    /// Whether the node carries a fused epilogue.
    pub fn is_fused(&self) -> bool {
        matches!(
            self,
            Op::Conv3d { bias: Some(_), .. }
                | Op::Conv3d { relu: true, .. }
                | Op::Linear { bias: Some(_), .. }
                | Op::Linear { relu: true, .. }
        )
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Op::Conv3d { weight, bias, .. } | Op::Linear { weight, bias, .. } => {
                std::iter::once(*weight).chain(*bias).collect()
            }
            Op::BiasAdd { bias } => vec![*bias],
            Op::NonLocal(r) => vec![r.theta.0, r.theta.1, r.phi.0, r.phi.1, r.g.0, r.g.1, r.out.0, r.out.1],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeGraph {
    pub tensors: Vec<TensorInfo>,
    pub params: Vec<Param>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

fn node_err(node: &Node, source: TensorError) -> GraphError {
    GraphError::Node {
        node: node.name.clone(),
        kind: node.op.kind(),
        source,
    }
}

fn expect_shape(node: &str, what: &str, shape: &[usize], want: &[usize]) -> Result<(), GraphError> {
    if shape != want {
        return Err(GraphError::Invalid {
            node: node.to_string(),
            msg: format!("{what} has shape {shape:?}, expected {want:?}"),
        });
    }
    Ok(())
}

impl ComputeGraph {
    pub fn param_shape(&self, id: ParamId) -> &[usize] {
        &self.params[id].shape
    }

    /// Infers the output shape of `op` applied to inputs of the given shapes.
    pub fn infer_shape(&self, name: &str, op: &Op, inputs: &[&[usize]]) -> Result<Vec<usize>, GraphError> {
        let kind = op.kind();
        let terr = |source| GraphError::Node {
            node: name.to_string(),
            kind,
            source,
        };
        if inputs.len() != op.arity() {
            return Err(GraphError::Invalid {
                node: name.to_string(),
                msg: format!("{kind} takes {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        let x = inputs[0];
        match op {
            Op::Conv3d { spec, weight, bias, .. } => {
                let ws = self.param_shape(*weight);
                let out = spec.output_shape(x, ws).map_err(terr)?;
                if let Some(b) = bias {
                    expect_shape(name, "conv bias", self.param_shape(*b), &[ws[0]])?;
                }
                Ok(out.to_vec())
            }
            Op::Linear { weight, bias, .. } => {
                let ws = self.param_shape(*weight);
                if ws.len() != 2 || x.last() != Some(&ws[1]) {
                    return Err(terr(TensorError::AxisMismatch {
                        op: "linear",
                        axis: "trailing (input feature)".into(),
                        expected: ws.get(1).copied().unwrap_or(0),
                        actual: x.last().copied().unwrap_or(0),
                    }));
                }
                if let Some(b) = bias {
                    expect_shape(name, "linear bias", self.param_shape(*b), &[ws[0]])?;
                }
                let mut s = x.to_vec();
                *s.last_mut().unwrap() = ws[0];
                Ok(s)
            }
            Op::BiasAdd { bias } => {
                if x.len() < 2 {
                    return Err(terr(TensorError::Rank {
                        op: "bias_add",
                        expected: 2,
                        shape: x.to_vec(),
                    }));
                }
                expect_shape(name, "bias", self.param_shape(*bias), &[x[1]])?;
                Ok(x.to_vec())
            }
            Op::Relu => Ok(x.to_vec()),
            Op::Add => {
                expect_shape(name, "second addend", inputs[1], x)?;
                Ok(x.to_vec())
            }
            Op::MaxPool3d { kernel, stride } => Ok(max_pool3d_shape(x, *kernel, *stride).map_err(terr)?.to_vec()),
            Op::GlobalAvgPool => {
                if x.len() < 3 {
                    return Err(terr(TensorError::Rank {
                        op: "global_avg_pool",
                        expected: 3,
                        shape: x.to_vec(),
                    }));
                }
                Ok(vec![x[0], x[1]])
            }
            Op::NonLocal(r) => {
                if x.len() != 5 {
                    return Err(terr(TensorError::Rank {
                        op: "non_local",
                        expected: 5,
                        shape: x.to_vec(),
                    }));
                }
                let (c, ci) = (x[1], r.inner);
                for (what, (w, b)) in [("theta", r.theta), ("phi", r.phi), ("g", r.g)] {
                    expect_shape(name, what, self.param_shape(w), &[ci, c])?;
                    expect_shape(name, what, self.param_shape(b), &[ci])?;
                }
                expect_shape(name, "out", self.param_shape(r.out.0), &[c, ci])?;
                expect_shape(name, "out", self.param_shape(r.out.1), &[c])?;
                Ok(x.to_vec())
            }
        }
    }

    /// Checks topological order, single producers, arity and shape consistency.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut produced = vec![false; self.tensors.len()];
        let invalid = |node: &str, msg: String| GraphError::Invalid {
            node: node.to_string(),
            msg,
        };
        for &i in &self.inputs {
            if i >= self.tensors.len() || produced[i] {
                return Err(invalid("<inputs>", format!("bad or duplicate input tensor {i}")));
            }
            produced[i] = true;
        }
        for node in &self.nodes {
            for &i in &node.inputs {
                if i >= self.tensors.len() || !produced[i] {
                    return Err(invalid(&node.name, format!("reads tensor {i} before it is produced")));
                }
            }
            if node.output >= self.tensors.len() || produced[node.output] {
                return Err(invalid(
                    &node.name,
                    format!("tensor {} has more than one producer", node.output),
                ));
            }
            for p in node.op.param_ids() {
                if p >= self.params.len() {
                    return Err(invalid(&node.name, format!("unknown parameter {p}")));
                }
            }
            let shapes: Vec<&[usize]> = node.inputs.iter().map(|&i| self.tensors[i].shape.as_slice()).collect();
            let out = self.infer_shape(&node.name, &node.op, &shapes)?;
            expect_shape(&node.name, "output", &self.tensors[node.output].shape, &out)?;
            produced[node.output] = true;
        }
        for &o in &self.outputs {
            if o >= self.tensors.len() || !produced[o] {
                return Err(invalid("<outputs>", format!("output tensor {o} is never produced")));
            }
        }
        for p in &self.params {
            if let Some(v) = &p.value {
                if v.shape() != p.shape.as_slice() {
                    return Err(invalid(
                        &p.name,
                        format!("value shape {:?} != declared {:?}", v.shape(), p.shape),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of consumers of each tensor (graph outputs count as a consumer).
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.tensors.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                counts[i] += 1;
            }
        }
        for &o in &self.outputs {
            counts[o] += 1;
        }
        counts
    }

    /// Activation precision of the graph (all tensors share one tag).
    pub fn precision(&self) -> Precision {
        self.tensors.first().map(|t| t.precision).unwrap_or_default()
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|&i| self.tensors[i].shape.clone()).collect()
    }

    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        self.outputs.iter().map(|&i| self.tensors[i].shape.clone()).collect()
    }

    pub fn param_value(&self, id: ParamId) -> Result<&Tensor, GraphError> {
        self.params[id]
            .value
            .as_ref()
            .ok_or_else(|| GraphError::MissingParam(self.params[id].name.clone()))
    }

    pub fn has_values(&self) -> bool {
        self.params.iter().all(|p| p.value.is_some())
    }

    /// Structure as JSON: tensors, nodes, inputs/outputs and parameter shapes (no values).
    pub fn to_json(&self) -> Result<String, GraphError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a shape-only graph. Unknown node kinds are rejected by name.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let g: ComputeGraph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    /// Attaches parameter values by name; every parameter must be supplied.
    pub fn attach_params(&mut self, values: Vec<(String, Tensor)>) -> Result<(), GraphError> {
        let mut by_name: std::collections::HashMap<String, Tensor> = values.into_iter().collect();
        for p in &mut self.params {
            let v = by_name
                .remove(&p.name)
                .ok_or_else(|| GraphError::MissingParam(p.name.clone()))?;
            if v.shape() != p.shape.as_slice() {
                return Err(GraphError::Invalid {
                    node: p.name.clone(),
                    msg: format!("value shape {:?} != declared {:?}", v.shape(), p.shape),
                });
            }
            p.value = Some(v);
        }
        Ok(())
    }

    pub fn named_params(&self) -> Result<Vec<(String, &Tensor)>, GraphError> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| Ok((p.name.clone(), self.param_value(i)?)))
            .collect()
    }
}

/// Incremental graph construction with shape inference at every step.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: ComputeGraph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn new_tensor(&mut self, name: String, shape: Vec<usize>) -> TensorId {
        self.graph.tensors.push(TensorInfo {
            name,
            shape,
            precision: Precision::F32,
        });
        self.graph.tensors.len() - 1
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> TensorId {
        let id = self.new_tensor(name.to_string(), shape.to_vec());
        self.graph.inputs.push(id);
        id
    }

    /// Registers a parameter with values.
    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.graph.params.push(Param {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            value: Some(value),
        });
        self.graph.params.len() - 1
    }

    /// Registers a shape-only parameter.
    pub fn declare(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.graph.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value: None,
        });
        self.graph.params.len() - 1
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.graph.tensors[t].shape
    }

    pub fn params(&self) -> &[Param] {
        &self.graph.params
    }

    pub fn node(&mut self, name: &str, op: Op, inputs: &[TensorId]) -> Result<TensorId, GraphError> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.graph.tensors[i].shape.as_slice()).collect();
        let out_shape = self.graph.infer_shape(name, &op, &shapes)?;
        let out = self.new_tensor(name.to_string(), out_shape);
        self.graph.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: inputs.to_vec(),
            output: out,
        });
        Ok(out)
    }

    /// Renames a tensor (node names are unchanged).
    pub fn rename(&mut self, t: TensorId, name: &str) {
        self.graph.tensors[t].name = name.to_string();
    }

    pub fn output(&mut self, t: TensorId) {
        self.graph.outputs.push(t);
    }

    pub fn finish(self) -> Result<ComputeGraph, GraphError> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}
