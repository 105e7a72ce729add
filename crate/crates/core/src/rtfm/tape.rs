//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! Only the operations the detector's loss needs are provided. Nodes are
//! appended in evaluation order, so a single reverse sweep visits every node
//! after all of its consumers.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the result of [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    /// `x: [T, C]`, `w: [O, C·k]`, `b: [1, O]` → `[T, O]`, "same" padding.
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        dil: usize,
    },
    /// `x: [T, I]`, `w: [O, I]`, `b: [1, O]` → `[T, O]`.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// `a · bᵀ`.
    MatMulNt {
        a: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    /// l2 norm of each row → `[T, 1]`.
    RowNorm {
        x: Var,
    },
    /// Mean of the listed rows → `[1, C]`.
    MeanRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sigmoid {
        x: Var,
    },
    /// Mean binary cross-entropy of the listed entries of a `[T, 1]` score column.
    Bce {
        s: Var,
        idx: Vec<usize>,
        label: f64,
        eps: f64,
    },
    /// `max(0, margin − a + n)` on scalars.
    Hinge {
        a: Var,
        n: Var,
    },
    /// l2 norm of all entries of all parts → scalar.
    Norm {
        parts: Vec<Var>,
    },
    /// `Σ_t ‖x[t+1] − x[t]‖²` over consecutive rows → scalar.
    RowDiffSq {
        x: Var,
    },
    /// `Σ cᵢ·xᵢ` on scalars.
    WeightedSum {
        parts: Vec<(Var, f64)>,
    },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Mat>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node, value: Mat) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Node::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize, dil: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, c, o) = (xv.rows, xv.cols, wv.rows);
        assert_eq!(wv.cols, c * k, "conv1d weight columns");
        let pad = dil * (k / 2);
        let mut y = Mat::zeros(t, o);
        for ti in 0..t {
            for oi in 0..o {
                let mut acc = bv.data[oi];
                for j in 0..k {
                    let src = ti + j * dil;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let xr = &xv.data[(src - pad) * c..(src - pad + 1) * c];
                    for (ci, &xval) in xr.iter().enumerate() {
                        acc += wv.data[oi * c * k + ci * k + j] * xval;
                    }
                }
                y.data[ti * o + oi] = acc;
            }
        }
        self.push(Node::Conv1d { x, w, b, k, dil }, y)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, i, o) = (xv.rows, xv.cols, wv.rows);
        assert_eq!(wv.cols, i, "linear weight columns");
        let mut y = Mat::zeros(t, o);
        for r in 0..t {
            for oi in 0..o {
                let dot: f64 = (0..i).map(|j| xv.data[r * i + j] * wv.data[oi * i + j]).sum();
                y.data[r * o + oi] = dot + bv.data[oi];
            }
        }
        self.push(Node::Linear { x, w, b }, y)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_nt inner");
        let (n, m, kk) = (av.rows, bv.rows, av.cols);
        let mut y = Mat::zeros(n, m);
        for r in 0..n {
            for c in 0..m {
                y.data[r * m + c] = (0..kk).map(|j| av.data[r * kk + j] * bv.data[c * kk + j]).sum();
            }
        }
        self.push(Node::MatMulNt { a, b }, y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner");
        let (n, kk, m) = (av.rows, av.cols, bv.cols);
        let mut y = Mat::zeros(n, m);
        for r in 0..n {
            for c in 0..m {
                y.data[r * m + c] = (0..kk).map(|j| av.data[r * kk + j] * bv.data[j * m + c]).sum();
            }
        }
        self.push(Node::MatMul { a, b }, y)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut y = xv.clone();
        for row in y.data.chunks_mut(xv.cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Node::SoftmaxRows { x }, y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in &mut y.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Node::Relu { x }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let y = Mat::new(av.rows, av.cols, data);
        self.push(Node::Add { a, b }, y)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut y = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat rows");
            for r in 0..rows {
                y.data[r * cols + off..r * cols + off + pv.cols]
                    .copy_from_slice(&pv.data[r * pv.cols..(r + 1) * pv.cols]);
            }
            off += pv.cols;
        }
        self.push(Node::ConcatCols { parts: parts.to_vec() }, y)
    }

    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.data.len(), "mask length");
        let data = xv.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Mat::new(xv.rows, xv.cols, data);
        self.push(Node::Mask { x, mask }, y)
    }

    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data
            .chunks(xv.cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let y = Mat::new(xv.rows, 1, data);
        self.push(Node::RowNorm { x }, y)
    }

    pub fn mean_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut y = Mat::zeros(1, xv.cols);
        for &r in idx {
            for c in 0..xv.cols {
                y.data[c] += xv.at(r, c);
            }
        }
        for v in &mut y.data {
            *v /= idx.len() as f64;
        }
        self.push(Node::MeanRows { x, idx: idx.to_vec() }, y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in &mut y.data {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(Node::Sigmoid { x }, y)
    }

    pub fn bce(&mut self, s: Var, idx: &[usize], label: f64, eps: f64) -> Var {
        let sv = self.value(s);
        let mut total = 0.0;
        for &i in idx {
            let p = sv.data[i].clamp(eps, 1.0 - eps);
            total -= label * p.ln() + (1.0 - label) * (1.0 - p).ln();
        }
        let y = Mat::new(1, 1, vec![total / idx.len() as f64]);
        self.push(
            Node::Bce {
                s,
                idx: idx.to_vec(),
                label,
                eps,
            },
            y,
        )
    }

    pub fn hinge(&mut self, a: Var, n: Var, margin: f64) -> Var {
        let v = (margin - self.value(a).scalar() + self.value(n).scalar()).max(0.0);
        self.push(Node::Hinge { a, n }, Mat::new(1, 1, vec![v]))
    }

    pub fn norm(&mut self, parts: &[Var]) -> Var {
        let v = parts
            .iter()
            .flat_map(|&p| self.value(p).data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.push(Node::Norm { parts: parts.to_vec() }, Mat::new(1, 1, vec![v]))
    }

    pub fn row_diff_sq(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv
            .data
            .windows(2 * xv.cols)
            .step_by(xv.cols)
            .map(|w| {
                w[..xv.cols]
                    .iter()
                    .zip(&w[xv.cols..])
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>()
            })
            .sum();
        self.push(Node::RowDiffSq { x }, Mat::new(1, 1, vec![v]))
    }

    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Var {
        let v = parts.iter().map(|&(p, c)| c * self.value(p).scalar()).sum();
        self.push(Node::WeightedSum { parts: parts.to_vec() }, Mat::new(1, 1, vec![v]))
    }

    /// Fingerprint of every piecewise branch taken: ReLU signs, selected
    /// indices, BCE clamping and hinge activity. Finite differences are only
    /// meaningful between evaluations with the same fingerprint.
    pub fn pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (node, val) in self.nodes.iter().zip(&self.values) {
            match node {
                Node::Relu { .. } => {
                    for v in &val.data {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Node::MeanRows { idx, .. } => idx.hash(&mut h),
                Node::Bce { s, idx, eps, .. } => {
                    idx.hash(&mut h);
                    for &i in idx {
                        let p = self.values[s.0].data[i];
                        (p < *eps, p > 1.0 - eps).hash(&mut h);
                    }
                }
                Node::Hinge { .. } => (val.scalar() > 0.0).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `out` with respect to every node (`None` where unreachable).
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        let mut g: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        g[out.0] = Some(Mat::new(1, 1, vec![1.0]));
        for i in (0..=out.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            self.propagate(i, &gy, &mut g);
            g[i] = Some(gy);
        }
        g
    }

    fn propagate(&self, i: usize, gy: &Mat, g: &mut [Option<Mat>]) {
        let y = &self.values[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Mat)| {
            let shape = (self.values[v.0].rows, self.values[v.0].cols);
            let m = g[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
            f(m);
        };
        match &self.nodes[i] {
            Node::Leaf => {}
            Node::Conv1d { x, w, b, k, dil } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, c, o, k, dil) = (xv.rows, xv.cols, wv.rows, *k, *dil);
                let pad = dil * (k / 2);
                acc(*x, &mut |gx| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti + j * dil;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            for oi in 0..o {
                                let go = gy.data[ti * o + oi];
                                for ci in 0..c {
                                    gx.data[(src - pad) * c + ci] += go * wv.data[oi * c * k + ci * k + j];
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti + j * dil;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            for oi in 0..o {
                                let go = gy.data[ti * o + oi];
                                for ci in 0..c {
                                    gw.data[oi * c * k + ci * k + j] += go * xv.data[(src - pad) * c + ci];
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for ti in 0..t {
                        for oi in 0..o {
                            gb.data[oi] += gy.data[ti * o + oi];
                        }
                    }
                });
            }
            Node::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, ii, o) = (xv.rows, xv.cols, wv.rows);
                acc(*x, &mut |gx| {
                    for r in 0..t {
                        for oi in 0..o {
                            let go = gy.data[r * o + oi];
                            for j in 0..ii {
                                gx.data[r * ii + j] += go * wv.data[oi * ii + j];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..t {
                        for oi in 0..o {
                            let go = gy.data[r * o + oi];
                            for j in 0..ii {
                                gw.data[oi * ii + j] += go * xv.data[r * ii + j];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..t {
                        for oi in 0..o {
                            gb.data[oi] += gy.data[r * o + oi];
                        }
                    }
                });
            }
            Node::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, kk) = (av.rows, bv.rows, av.cols);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        for c in 0..m {
                            let go = gy.data[r * m + c];
                            for j in 0..kk {
                                ga.data[r * kk + j] += go * bv.data[c * kk + j];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..n {
                        for c in 0..m {
                            let go = gy.data[r * m + c];
                            for j in 0..kk {
                                gb.data[c * kk + j] += go * av.data[r * kk + j];
                            }
                        }
                    }
                });
            }
            Node::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, kk, m) = (av.rows, av.cols, bv.cols);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        for c in 0..m {
                            let go = gy.data[r * m + c];
                            for j in 0..kk {
                                ga.data[r * kk + j] += go * bv.data[j * m + c];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..n {
                        for c in 0..m {
                            let go = gy.data[r * m + c];
                            for j in 0..kk {
                                gb.data[j * m + c] += go * av.data[r * kk + j];
                            }
                        }
                    }
                });
            }
            Node::SoftmaxRows { x } => acc(*x, &mut |gx| {
                for ((gr, yr), dr) in gx
                    .data
                    .chunks_mut(y.cols)
                    .zip(y.data.chunks(y.cols))
                    .zip(gy.data.chunks(y.cols))
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((gv, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                        *gv += yv * (dv - dot);
                    }
                }
            }),
            Node::Relu { x } => acc(*x, &mut |gx| {
                for ((gv, &yv), &dv) in gx.data.iter_mut().zip(&y.data).zip(&gy.data) {
                    if yv > 0.0 {
                        *gv += dv;
                    }
                }
            }),
            Node::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, &mut |gv| {
                        for (g, &d) in gv.data.iter_mut().zip(&gy.data) {
                            *g += d;
                        }
                    });
                }
            }
            Node::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    acc(p, &mut |gp| {
                        for r in 0..y.rows {
                            for c in 0..pc {
                                gp.data[r * pc + c] += gy.data[r * y.cols + off + c];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Node::Mask { x, mask } => acc(*x, &mut |gx| {
                for ((g, &d), &m) in gx.data.iter_mut().zip(&gy.data).zip(mask) {
                    *g += d * m;
                }
            }),
            Node::RowNorm { x } => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    for r in 0..xv.rows {
                        let norm = y.data[r];
                        if norm > 0.0 {
                            for c in 0..xv.cols {
                                gx.data[r * xv.cols + c] += gy.data[r] * xv.at(r, c) / norm;
                            }
                        }
                    }
                });
            }
            Node::MeanRows { x, idx } => {
                let cols = y.cols;
                let scale = 1.0 / idx.len() as f64;
                acc(*x, &mut |gx| {
                    for &r in idx {
                        for c in 0..cols {
                            gx.data[r * cols + c] += gy.data[c] * scale;
                        }
                    }
                });
            }
            Node::Sigmoid { x } => acc(*x, &mut |gx| {
                for ((g, &yv), &d) in gx.data.iter_mut().zip(&y.data).zip(&gy.data) {
                    *g += d * yv * (1.0 - yv);
                }
            }),
            Node::Bce { s, idx, label, eps } => {
                let sv = self.value(*s);
                let scale = gy.scalar() / idx.len() as f64;
                acc(*s, &mut |gs| {
                    for &i in idx {
                        let p = sv.data[i];
                        // Clamped entries are constant in p.
                        if p > *eps && p < 1.0 - eps {
                            gs.data[i] += scale * (-label / p + (1.0 - label) / (1.0 - p));
                        }
                    }
                });
            }
            Node::Hinge { a, n, .. } => {
                if y.scalar() > 0.0 {
                    let d = gy.scalar();
                    acc(*a, &mut |ga| ga.data[0] -= d);
                    acc(*n, &mut |gn| gn.data[0] += d);
                }
            }
            Node::Norm { parts } => {
                let norm = y.scalar();
                if norm > 0.0 {
                    let d = gy.scalar() / norm;
                    for &p in parts {
                        let pv = self.value(p);
                        acc(p, &mut |gp| {
                            for (g, &v) in gp.data.iter_mut().zip(&pv.data) {
                                *g += d * v;
                            }
                        });
                    }
                }
            }
            Node::RowDiffSq { x } => {
                let xv = self.value(*x);
                let d = gy.scalar();
                acc(*x, &mut |gx| {
                    for r in 1..xv.rows {
                        for c in 0..xv.cols {
                            let diff = 2.0 * d * (xv.at(r, c) - xv.at(r - 1, c));
                            gx.data[r * xv.cols + c] += diff;
                            gx.data[(r - 1) * xv.cols + c] -= diff;
                        }
                    }
                });
            }
            Node::WeightedSum { parts } => {
                let d = gy.scalar();
                for &(p, c) in parts {
                    acc(p, &mut |gp| gp.data[0] += c * d);
                }
            }
        }
    }
}
