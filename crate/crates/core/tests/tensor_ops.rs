mod common;

use common::oracle::{conv1d_oracle, conv3d_oracle, random_conv3d_case, rel_close};
use common::{random_tensor as random, rng};
use edgevad::tensor::{self, Conv3dSpec, Precision, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn conv3d_matches_nested_loop_oracle_on_1000_shapes() {
    let mut rng = rng(11);
    for case in 0..1000 {
        let (x, w, b, spec) = random_conv3d_case(&mut rng);
        let got = tensor::conv3d(&x, &w, b.as_ref(), &spec).unwrap();
        let (shape, want) = conv3d_oracle(&x, &w, b.as_ref(), &spec);
        assert_eq!(got.shape(), &shape[..]);
        for (i, (&g, &e)) in got.data().iter().zip(&want).enumerate() {
            assert!(rel_close(g, e, 1e-6), "case {case} entry {i}: {g} vs {e}");
        }
    }
}

#[test]
fn conv1d_matches_oracle() {
    let mut rng = rng(5);
    for case in 0..300 {
        let (c, t, o) = (
            rng.random_range(1..=4),
            rng.random_range(1..=12),
            rng.random_range(1..=4),
        );
        let k = [1, 3, 5][rng.random_range(0..3)];
        let dil = rng.random_range(1..=4);
        let x = random(&mut rng, &[c, t]);
        let w = random(&mut rng, &[o, c, k]);
        let b = random(&mut rng, &[o]);
        let got = tensor::conv1d_dilated(&x, &w, Some(&b), dil).unwrap();
        assert_eq!(got.shape(), &[o, t]);
        for (i, (&g, &e)) in got.data().iter().zip(&conv1d_oracle(&x, &w, Some(&b), dil)).enumerate() {
            assert!(rel_close(g, e, 1e-6), "case {case} entry {i}: {g} vs {e}");
        }
    }
}

#[test]
fn l2_matches_scalar_loop_on_random_matrix() {
    let mut rng = rng(8);
    let f = random(&mut rng, &[8, 16]);
    let got = tensor::l2_magnitude(&f).unwrap();
    for t in 0..8 {
        let mut sq = 0.0f64;
        for d in 0..16 {
            let v = f.at(&[t, d]) as f64;
            sq += v * v;
        }
        assert!(rel_close(got.data()[t], sq.sqrt(), 1e-6));
    }
}

#[test]
fn elementwise_examples() {
    let r = tensor::relu(&Tensor::from_slice(&[-1.0, 2.0]));
    assert_eq!(r.data(), &[0.0, 2.0]);
    let m = tensor::mean(&Tensor::from_slice(&[2.0, 4.0]), 0).unwrap();
    assert_eq!(m.data(), &[3.0]);
    let c = Tensor::full(&[1, 2, 4, 6, 6], 1.25);
    let p = tensor::max_pool3d(&c, [2, 3, 3], [2, 2, 2]).unwrap();
    assert_eq!(p.shape(), &[1, 2, 2, 2, 2]);
    assert!(p.data().iter().all(|&v| v == 1.25));
    assert!(tensor::add(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 2])).is_err());
    assert!(tensor::add(&Tensor::zeros(&[2, 3]), &Tensor::scalar(1.0)).is_ok());
}

#[test]
fn f16_inputs_give_f16_outputs() {
    let mut rng = rng(3);
    let x = random(&mut rng, &[1, 2, 3, 4, 4]).to_precision(Precision::F16);
    let w = random(&mut rng, &[2, 2, 1, 3, 3]).to_precision(Precision::F16);
    let outs = [
        tensor::conv3d(&x, &w, None, &Conv3dSpec::default()).unwrap(),
        tensor::relu(&x),
        tensor::mul_scalar(&x, 0.3),
        tensor::softmax(&x, 4).unwrap(),
        tensor::global_avg_pool(&x).unwrap(),
        tensor::max_pool3d(&x, [1, 2, 2], [1, 2, 2]).unwrap(),
    ];
    for o in outs {
        assert_eq!(o.precision(), Precision::F16);
        for &v in o.data() {
            assert_eq!(tensor::half::round_f16(v), v);
        }
    }
}

/// Multiples of 1/64 below 2^8, so adding a shift of the same kind is exact in f32.
fn sixty_fourths(lo: i32, hi: i32) -> impl Strategy<Value = f32> {
    (lo * 64..hi * 64).prop_map(|i| i as f32 / 64.0)
}

fn vec_strategy() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(sixty_fourths(-50, 50), 1..24)
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in vec_strategy(), shift in sixty_fourths(-100, 100)) {
        let p = tensor::softmax(&Tensor::from_slice(&v), 0).unwrap();
        let sum: f64 = p.data().iter().map(|&x| x as f64).sum();
        prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
        let q = tensor::softmax(&Tensor::from_slice(&shifted), 0).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn l2_scales_with_abs_c(v in prop::collection::vec(-10.0f32..10.0, 12), c in -20.0f32..20.0) {
        let f = Tensor::new(vec![3, 4], v.clone()).unwrap();
        let scaled = Tensor::new(vec![3, 4], v.iter().map(|x| x * c).collect()).unwrap();
        let a = tensor::l2_magnitude(&f).unwrap();
        let b = tensor::l2_magnitude(&scaled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(*y >= 0.0);
            let want = c.abs() as f64 * *x as f64;
            prop_assert!((*y as f64 - want).abs() <= 1e-6 * want.max(1e-12));
        }
    }

    #[test]
    fn topk_is_prefix_of_stable_sort(v in prop::collection::vec(prop::sample::select(vec![0.0f32, 0.5, 1.0, -2.0, 3.25]), 1..30), kf in 0.0f64..1.0) {
        let k = 1 + ((v.len() - 1) as f64 * kf) as usize;
        let (idx, vals) = tensor::topk(&Tensor::from_slice(&v), k).unwrap();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
        prop_assert_eq!(&idx[..], &order[..k]);
        let want: Vec<f32> = order[..k].iter().map(|&i| v[i]).collect();
        prop_assert_eq!(vals, want);
    }
}
