//! Brute-force references: tensor kernels in f64, AUC by pair counting and
//! parameter/FLOP counts from first principles.

use edgevad::bench::Counts;
use edgevad::graph::{ComputeGraph, Op};
use edgevad::tensor::{Conv3dSpec, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub fn rel_close(actual: f32, oracle: f64, tol: f64) -> bool {
    (actual as f64 - oracle).abs() <= tol * oracle.abs().max(1e-12)
}

/// Random conv3d operands no larger than `[2, 3, 4, 8, 8]` with random
/// stride, padding, dilation and optional bias.
pub fn random_conv3d_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Option<Tensor>, Conv3dSpec) {
    loop {
        let xs = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        ];
        let o = rng.random_range(1..=3);
        let mut ks = [0; 3];
        let mut spec = Conv3dSpec::default();
        for (a, k) in ks.iter_mut().enumerate() {
            *k = rng.random_range(1..=3);
            spec.stride[a] = rng.random_range(1..=2);
            spec.pad[a] = rng.random_range(0..=1);
            spec.dilation[a] = rng.random_range(1..=2);
        }
        let ws = [o, xs[1], ks[0], ks[1], ks[2]];
        if spec.output_shape(&xs, &ws).is_err() {
            continue;
        }
        let x = random_tensor(rng, &xs);
        let w = random_tensor(rng, &ws);
        let b = rng.random_bool(0.5).then(|| random_tensor(rng, &[o]));
        return (x, w, b, spec);
    }
}

/// Direct seven-deep loop over the definition.
pub fn conv3d_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv3dSpec) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let mut os = vec![xs[0], ws[0]];
    for a in 0..3 {
        let span = spec.dilation[a] * (ws[2 + a] - 1) + 1;
        os.push((xs[2 + a] + 2 * spec.pad[a] - span) / spec.stride[a] + 1);
    }
    let mut out = Vec::new();
    for n in 0..os[0] {
        for o in 0..os[1] {
            for od in 0..os[2] {
                for oh in 0..os[3] {
                    for ow in 0..os[4] {
                        let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                        for c in 0..xs[1] {
                            for kd in 0..ws[2] {
                                for kh in 0..ws[3] {
                                    for kw in 0..ws[4] {
                                        let pos = [od, oh, ow];
                                        let k = [kd, kh, kw];
                                        let mut idx = [0usize; 3];
                                        let mut inside = true;
                                        for a in 0..3 {
                                            let p = (pos[a] * spec.stride[a] + k[a] * spec.dilation[a]) as isize
                                                - spec.pad[a] as isize;
                                            if p < 0 || p >= xs[2 + a] as isize {
                                                inside = false;
                                            }
                                            idx[a] = p.max(0) as usize;
                                        }
                                        if inside {
                                            acc += x.at(&[n, c, idx[0], idx[1], idx[2]]) as f64
                                                * w.at(&[o, c, kd, kh, kw]) as f64;
                                        }
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (os, out)
}

/// Same-length dilated convolution over `[C, T]` with centred taps.
pub fn conv1d_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, dil: usize) -> Vec<f64> {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let half = (k / 2 * dil) as isize;
    let mut out = Vec::with_capacity(o * t);
    for oo in 0..o {
        for tt in 0..t {
            let mut acc = b.map_or(0.0, |b| b.data()[oo] as f64);
            for cc in 0..c {
                for kk in 0..k {
                    let src = tt as isize + (kk * dil) as isize - half;
                    if (0..t as isize).contains(&src) {
                        acc += x.at(&[cc, src as usize]) as f64 * w.at(&[oo, cc, kk]) as f64;
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Softmax of a vector, shifted by its maximum.
pub fn softmax_oracle(v: &[f32]) -> Vec<f64> {
    let m = v.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Row norms of a `[T, D]` matrix.
pub fn l2_oracle(f: &Tensor) -> Vec<f64> {
    let d = f.shape()[1];
    f.data()
        .chunks(d)
        .map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Indices of the `k` largest values, earliest index first among ties.
pub fn topk_oracle(v: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    // Insertion sort: stable by construction, no library ordering involved.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && v[order[j]] > v[order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    order.truncate(k);
    order
}

/// Recounts from first principles: every op's multiply-accumulates from its
/// input and weight shapes, every parameter reached through the nodes.
pub fn analytic_counts(g: &ComputeGraph) -> Counts {
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    let mut params = 0;
    let mut flops = 0;
    for node in &g.nodes {
        let x = &g.tensors[node.inputs[0]].shape;
        let y = &g.tensors[node.output].shape;
        match &node.op {
            Op::Conv3d { weight, bias, .. } => {
                let w = &g.params[*weight].shape;
                // Each output element: C·kd·kh·kw products.
                flops += 2 * numel(y) * (w[1] * w[2] * w[3] * w[4]) as u64;
                params += numel(w) + bias.map_or(0, |b| numel(&g.params[b].shape));
            }
            Op::Linear { weight, bias, .. } => {
                let w = &g.params[*weight].shape;
                flops += 2 * (x[0] * w[0] * w[1]) as u64;
                params += numel(w) + bias.map_or(0, |b| numel(&g.params[b].shape));
            }
            Op::BiasAdd { bias } => params += numel(&g.params[*bias].shape),
            Op::NonLocal(r) => {
                let (n, c, ci) = (x[0] as u64, x[1] as u64, r.inner as u64);
                let p = numel(&x[2..]);
                let proj = 3 * (p * ci * c);
                let attention = p * p * ci;
                let aggregate = p * p * ci;
                let back = p * c * ci;
                flops += 2 * n * (proj + attention + aggregate + back);
                for (w, b) in [r.theta, r.phi, r.g, r.out] {
                    params += numel(&g.params[w].shape) + numel(&g.params[b].shape);
                }
            }
            Op::Relu | Op::Add | Op::MaxPool3d { .. } | Op::GlobalAvgPool => {}
        }
    }
    Counts { params, flops }
}

/// Direct count over every (positive, negative) pair.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut half_wins = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                half_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    half_wins as f64 / (2 * pos * neg) as f64
}

/// Scores on a grid of `levels` values (few levels force ties), both classes present.
pub fn auc_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..200);
    let levels = [3, 20, 1000][r.random_range(0..3)];
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n)
        .map(|_| r.random_range(0..levels) as f64 / levels as f64)
        .collect();
    (scores, labels)
}
