use std::ops::Range;

use super::{node_err, ComputeGraph, GraphError, MemoryPlan, Node, Op};
use crate::tensor::{
    bias_add_into, conv3d_into, global_avg_pool_into, linear_into, max_pool3d_into, nonlocal_into, relu1, BiasAt,
    NonLocalWeights, Tensor, TensorError,
};

fn shape5(s: &[usize]) -> [usize; 5] {
    [s[0], s[1], s[2], s[3], s[4]]
}

fn check_inputs(graph: &ComputeGraph, inputs: &[Tensor]) -> Result<(), GraphError> {
    if inputs.len() != graph.inputs.len() {
        return Err(GraphError::InputCount {
            expected: graph.inputs.len(),
            actual: inputs.len(),
        });
    }
    for (index, (t, &id)) in inputs.iter().zip(&graph.inputs).enumerate() {
        let expected = &graph.tensors[id].shape;
        if t.shape() != expected.as_slice() {
            return Err(GraphError::InputShape {
                index,
                expected: expected.clone(),
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Evaluates one node from raw input buffers into `out`, then rounds `out` to
/// the node's output precision.
fn run_node(graph: &ComputeGraph, node: &Node, ins: &[&[f32]], out: &mut [f32]) -> Result<(), GraphError> {
    let in_shape = &graph.tensors[node.inputs[0]].shape;
    let value = |id| graph.param_value(id).map(|t| t.data());
    let precision = graph.tensors[node.output].precision;
    match &node.op {
        Op::Conv3d {
            spec,
            weight,
            bias,
            relu,
        } => {
            let w = graph.param_value(*weight)?;
            let b = bias.map(value).transpose()?.map(|b| (b, BiasAt::Epilogue));
            conv3d_into(
                ins[0],
                shape5(in_shape),
                w.data(),
                shape5(w.shape()),
                b,
                *relu,
                spec,
                precision,
                out,
            );
        }
        Op::Linear { weight, bias, relu } => {
            let w = graph.param_value(*weight)?;
            let b = bias.map(value).transpose()?.map(|b| (b, BiasAt::Epilogue));
            linear_into(ins[0], w.shape()[1], w.data(), w.shape()[0], b, *relu, precision, out);
        }
        Op::BiasAdd { bias } => bias_add_into(ins[0], in_shape, value(*bias)?, out),
        Op::Relu => {
            for (o, &v) in out.iter_mut().zip(ins[0]) {
                *o = relu1(v);
            }
        }
        Op::Add => {
            for ((o, &a), &b) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                *o = a + b;
            }
        }
        Op::MaxPool3d { kernel, stride } => max_pool3d_into(ins[0], shape5(in_shape), *kernel, *stride, out),
        Op::GlobalAvgPool => global_avg_pool_into(ins[0], in_shape[0] * in_shape[1], out),
        Op::NonLocal(r) => {
            let pair = |(w, b): (usize, usize)| -> Result<(&[f32], &[f32]), GraphError> { Ok((value(w)?, value(b)?)) };
            let wts = NonLocalWeights {
                theta: pair(r.theta)?,
                phi: pair(r.phi)?,
                g: pair(r.g)?,
                out: pair(r.out)?,
                inner: r.inner,
            };
            let p = in_shape[2..].iter().product();
            nonlocal_into(ins[0], in_shape[0], in_shape[1], p, &wts, out);
        }
    }
    precision.conform(out);
    if out.len() != graph.tensors[node.output].numel() {
        return Err(node_err(
            node,
            TensorError::Invalid {
                op: "execute",
                msg: "output buffer size mismatch".into(),
            },
        ));
    }
    Ok(())
}

/// Runs the graph in topological order.
///
/// Without a plan every tensor gets its own buffer for the whole call. With a
/// plan, tensors live at their assigned offsets in one arena. The results are
/// identical either way.
pub fn execute(graph: &ComputeGraph, inputs: &[Tensor], plan: Option<&MemoryPlan>) -> Result<Vec<Tensor>, GraphError> {
    match plan {
        Some(plan) => PlannedExecutor::new(graph, plan)?.run(inputs),
        None => execute_unplanned(graph, inputs),
    }
}

fn execute_unplanned(graph: &ComputeGraph, inputs: &[Tensor]) -> Result<Vec<Tensor>, GraphError> {
    check_inputs(graph, inputs)?;
    let mut values: Vec<Option<Vec<f32>>> = vec![None; graph.tensors.len()];
    for (t, &id) in inputs.iter().zip(&graph.inputs) {
        let mut data = t.data().to_vec();
        graph.tensors[id].precision.conform(&mut data);
        values[id] = Some(data);
    }
    for node in &graph.nodes {
        let mut out = vec![0.0; graph.tensors[node.output].numel()];
        {
            let ins: Vec<&[f32]> = node
                .inputs
                .iter()
                .map(|&i| values[i].as_deref().expect("validated topological order"))
                .collect();
            run_node(graph, node, &ins, &mut out)?;
        }
        values[node.output] = Some(out);
    }
    Ok(graph
        .outputs
        .iter()
        .map(|&o| {
            let info = &graph.tensors[o];
            let data = values[o].clone().expect("validated outputs");
            Tensor::with_precision(info.shape.clone(), data, info.precision).expect("shape checked")
        })
        .collect())
}

/// Executes a graph repeatedly inside one preallocated arena laid out by a [`MemoryPlan`].
#[derive(Debug)]
pub struct PlannedExecutor<'g> {
    graph: &'g ComputeGraph,
    slots: Vec<Option<Range<usize>>>,
    arena: Vec<f32>,
}

impl<'g> PlannedExecutor<'g> {
    pub fn new(graph: &'g ComputeGraph, plan: &MemoryPlan) -> Result<Self, GraphError> {
        let mismatch = |m: String| GraphError::PlanMismatch(m);
        if plan.assignments.len() != graph.tensors.len() {
            return Err(mismatch(format!(
                "plan covers {} tensors, graph has {}",
                plan.assignments.len(),
                graph.tensors.len()
            )));
        }
        let elem = graph.precision().elem_bytes();
        if plan.elem_bytes != elem {
            return Err(mismatch(format!(
                "plan element size {} != graph {}",
                plan.elem_bytes, elem
            )));
        }
        let mut slots = Vec::with_capacity(graph.tensors.len());
        for (info, a) in graph.tensors.iter().zip(&plan.assignments) {
            slots.push(match a {
                Some(a) => {
                    if a.size != info.bytes() || a.offset % elem != 0 {
                        return Err(mismatch(format!("tensor {} size/offset does not fit", info.name)));
                    }
                    let start = a.offset / elem;
                    Some(start..start + info.numel())
                }
                None => None,
            });
        }
        Ok(PlannedExecutor {
            graph,
            slots,
            arena: vec![0.0; plan.arena_bytes / elem],
        })
    }

    pub fn arena_len(&self) -> usize {
        self.arena.len()
    }

    fn slot(&self, id: usize) -> Result<Range<usize>, GraphError> {
        self.slots[id].clone().ok_or_else(|| {
            GraphError::PlanMismatch(format!("tensor {} has no assignment", self.graph.tensors[id].name))
        })
    }

    pub fn run(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>, GraphError> {
        let graph = self.graph;
        check_inputs(graph, inputs)?;
        for (t, &id) in inputs.iter().zip(&graph.inputs) {
            let r = self.slot(id)?;
            let dst = &mut self.arena[r];
            dst.copy_from_slice(t.data());
            graph.tensors[id].precision.conform(dst);
        }
        for node in &graph.nodes {
            let out = self.slot(node.output)?;
            let ins = node
                .inputs
                .iter()
                .map(|&i| self.slot(i))
                .collect::<Result<Vec<_>, _>>()?;
            let (ins, out) = split_io(&mut self.arena, out, &ins)
                .ok_or_else(|| GraphError::PlanMismatch(format!("node {} reads a buffer it overwrites", node.name)))?;
            run_node(graph, node, &ins, out)?;
        }
        graph
            .outputs
            .iter()
            .map(|&o| {
                let info = &graph.tensors[o];
                let data = self.arena[self.slot(o)?].to_vec();
                Ok(Tensor::with_precision(info.shape.clone(), data, info.precision).expect("shape checked"))
            })
            .collect()
    }
}

/// Borrows the output range mutably and the input ranges immutably from one
/// arena. Returns `None` when an input overlaps the output.
fn split_io<'a>(
    arena: &'a mut [f32],
    out: Range<usize>,
    ins: &[Range<usize>],
) -> Option<(Vec<&'a [f32]>, &'a mut [f32])> {
    let (left, rest) = arena.split_at_mut(out.start);
    let (o, right) = rest.split_at_mut(out.end - out.start);
    let (left, right): (&'a [f32], &'a [f32]) = (left, right);
    let mut v = Vec::with_capacity(ins.len());
    for r in ins {
        if r.end <= out.start {
            v.push(&left[r.clone()]);
        } else if r.start >= out.end {
            v.push(&right[r.start - out.end..r.end - out.end]);
        } else {
            return None;
        }
    }
    Some((v, o))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_io_rejects_overlap() {
        let mut arena = vec![0.0; 10];
        assert!(split_io(&mut arena, 2..5, &[0..2, 5..10]).is_some());
        assert!(split_io(&mut arena, 2..5, &[4..6, 9..9]).is_none());
    }
}
