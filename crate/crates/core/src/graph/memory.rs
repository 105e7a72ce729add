use std::fmt::Write as _;

use serde::Serialize;

use super::{ComputeGraph, GraphError, TensorId};

/// Placement of one tensor in the arena. Lifetimes are inclusive node steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignment {
    pub tensor: TensorId,
    pub name: String,
    pub buffer: usize,
    pub offset: usize,
    pub size: usize,
    pub first: usize,
    pub last: usize,
}

impl Assignment {
    pub fn end(&self) -> usize {
        self.offset + self.size
    }

    pub fn lifetimes_overlap(&self, other: &Assignment) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    pub fn bytes_overlap(&self, other: &Assignment) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryPlan {
    pub elem_bytes: usize,
    /// Indexed by tensor id; `None` for tensors that are never materialized.
    pub assignments: Vec<Option<Assignment>>,
    /// Sizes of the pool buffers. The planner uses a single arena.
    pub buffers: Vec<usize>,
    /// Largest sum of live tensor bytes over all steps.
    pub peak_bytes: usize,
    /// Bytes the arena must reserve for this placement (≥ `peak_bytes`).
    pub arena_bytes: usize,
    /// Sum of every tensor's bytes, i.e. one buffer per tensor.
    pub naive_bytes: usize,
    pub steps: usize,
}

/// Bytes needed when every tensor gets its own buffer.
pub fn naive_bytes(graph: &ComputeGraph) -> usize {
    materialized(graph).map(|t| graph.tensors[t].bytes()).sum()
}

fn materialized(graph: &ComputeGraph) -> impl Iterator<Item = TensorId> + '_ {
    graph.inputs.iter().copied().chain(graph.nodes.iter().map(|n| n.output))
}

/// Lifetime analysis plus greedy best-fit offset assignment.
///
/// A tensor lives from the step that produces it (step 0 for graph inputs)
/// through its last consuming step; graph outputs live through the final step.
/// Tensors are placed largest first, each into the smallest gap left by the
/// already placed tensors whose lifetimes overlap it.
pub fn plan_memory(graph: &ComputeGraph) -> Result<MemoryPlan, GraphError> {
    graph.validate()?;
    if let Some(t) = graph.tensors.iter().find(|t| t.shape.contains(&0)) {
        return Err(GraphError::Invalid {
            node: t.name.clone(),
            msg: format!(
                "shape {:?} has an unknown extent; planning needs static shapes",
                t.shape
            ),
        });
    }
    let steps = graph.nodes.len().max(1);
    let mut first = vec![usize::MAX; graph.tensors.len()];
    let mut last = vec![0usize; graph.tensors.len()];
    for &i in &graph.inputs {
        first[i] = 0;
    }
    for (step, node) in graph.nodes.iter().enumerate() {
        first[node.output] = step;
        last[node.output] = step;
        for &i in &node.inputs {
            last[i] = last[i].max(step);
        }
    }
    for &o in &graph.outputs {
        last[o] = steps - 1;
    }

    let ids: Vec<TensorId> = materialized(graph).collect();
    let size = |t: TensorId| graph.tensors[t].bytes();

    let mut peak_bytes = 0;
    for step in 0..steps {
        let live: usize = ids
            .iter()
            .filter(|&&t| first[t] <= step && step <= last[t])
            .map(|&t| size(t))
            .sum();
        peak_bytes = peak_bytes.max(live);
    }

    let mut order = ids.clone();
    order.sort_by(|&a, &b| size(b).cmp(&size(a)).then(first[a].cmp(&first[b])).then(a.cmp(&b)));

    let mut placed: Vec<Assignment> = Vec::with_capacity(order.len());
    for t in order {
        let mut a = Assignment {
            tensor: t,
            name: graph.tensors[t].name.clone(),
            buffer: 0,
            offset: 0,
            size: size(t),
            first: first[t],
            last: last[t],
        };
        let mut conflicts: Vec<&Assignment> = placed.iter().filter(|p| p.lifetimes_overlap(&a)).collect();
        conflicts.sort_by_key(|p| p.offset);
        let mut cursor = 0;
        let mut best: Option<(usize, usize)> = None; // (gap, offset)
        for p in conflicts {
            if p.offset > cursor {
                let gap = p.offset - cursor;
                if gap >= a.size && best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, cursor));
                }
            }
            cursor = cursor.max(p.end());
        }
        a.offset = best.map_or(cursor, |(_, off)| off);
        placed.push(a);
    }

    let arena_bytes = placed.iter().map(Assignment::end).max().unwrap_or(0);
    let mut assignments = vec![None; graph.tensors.len()];
    for a in placed {
        let t = a.tensor;
        assignments[t] = Some(a);
    }
    Ok(MemoryPlan {
        elem_bytes: graph.precision().elem_bytes(),
        assignments,
        buffers: vec![arena_bytes],
        peak_bytes,
        arena_bytes,
        naive_bytes: naive_bytes(graph),
        steps,
    })
}

impl MemoryPlan {
    pub fn placed(&self) -> impl Iterator<Item = &Assignment> {
        self.assignments.iter().flatten()
    }

    /// Human-readable table: tensor, lifetime, buffer, offset, size.
    pub fn table(&self) -> String {
        let mut rows: Vec<&Assignment> = self.placed().collect();
        rows.sort_by_key(|a| (a.first, a.tensor));
        let width = rows.iter().map(|a| a.name.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>6}  {:>12}  {:>12}",
            "tensor", "lifetime", "buffer", "offset", "bytes"
        );
        for a in rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>4}..{:<3}  {:>6}  {:>12}  {:>12}",
                a.name, a.first, a.last, a.buffer, a.offset, a.size
            );
        }
        let _ = writeln!(
            s,
            "peak live {} B, arena {} B, naive {} B ({:.1}% of naive)",
            self.peak_bytes,
            self.arena_bytes,
            self.naive_bytes,
            100.0 * self.arena_bytes as f64 / self.naive_bytes.max(1) as f64
        );
        s
    }
}
