use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use actloc_core::lstm::{lstm_cell_backward, lstm_cell_forward, LstmCellParams};
use actloc_core::tensor::{matmul, softmax2d};
use actloc_core::Tensor;

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    let mut out = vec![0.0; m * n];
    let mut bound = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                let prod = a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                out[i * n + j] += prod;
                bound[i * n + j] += prod.abs();
            }
        }
    }
    (out, bound)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut shapes = vec![(5, 7, 3)];
    for _ in 0..99 {
        shapes.push((rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12)));
    }
    for (m, k, n) in shapes {
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[m, n]);
        let (want, bound) = triple_loop(&a, &b);
        for ((got, want), bound) in c.data().iter().zip(&want).zip(&bound) {
            assert!((*got as f64 - want).abs() <= 1e-6 * bound.max(1.0), "{m}x{k}x{n}: {got} vs {want}");
        }
    }
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One cell step for a single row, in f64, straight from the gate equations.
fn scalar_cell(p: &[Vec<f64>; 3], d_in: usize, d_h: usize, x: &[f64], h: &[f64], m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (wx, wh, b) = (&p[0], &p[1], &p[2]);
    let pre = |r: usize| -> f64 {
        let mut s = b[r];
        for c in 0..d_in {
            s += wx[r * d_in + c] * x[c];
        }
        for c in 0..d_h {
            s += wh[r * d_h + c] * h[c];
        }
        s
    };
    let mut new_m = vec![0.0; d_h];
    let mut new_h = vec![0.0; d_h];
    for k in 0..d_h {
        let i = sig(pre(k));
        let f = sig(pre(d_h + k));
        let o = sig(pre(2 * d_h + k));
        let g = pre(3 * d_h + k).tanh();
        new_m[k] = f * m[k] + i * g;
        new_h[k] = o * new_m[k].tanh();
    }
    (new_h, new_m)
}

fn f64_params(p: &LstmCellParams) -> [Vec<f64>; 3] {
    p.tensors().map(|t| t.data().iter().map(|&v| v as f64).collect())
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

#[test]
fn cell_forward_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d_in, d_h) = (3, 4);
    let mut params = LstmCellParams::random(d_in, d_h, 0.6, 1.0, &mut rng);
    for v in params.bias.data_mut() {
        *v += rng.random_range(-0.5f32..0.5);
    }
    let oracle = f64_params(&params);
    let mut h = Tensor::zeros(&[1, d_h]);
    let mut m = Tensor::zeros(&[1, d_h]);
    let (mut oh, mut om) = (vec![0.0; d_h], vec![0.0; d_h]);
    for _ in 0..5 {
        let x = random_tensor(&mut rng, &[1, d_in]);
        let out = lstm_cell_forward(&params, &x, &h, &m, None).unwrap();
        let (nh, nm) = scalar_cell(&oracle, d_in, d_h, &f64s(&x), &oh, &om);
        for (a, b) in out.h.data().iter().zip(&nh) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in out.m.data().iter().zip(&nm) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        (h, m, oh, om) = (out.h, out.m, nh, nm);
    }
}

#[test]
fn cell_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d_in, d_h, rows) = (3, 4, 2);
    let mut params = LstmCellParams::random(d_in, d_h, 0.6, 1.0, &mut rng);
    for v in params.bias.data_mut() {
        *v += rng.random_range(-0.5f32..0.5);
    }
    let x = random_tensor(&mut rng, &[rows, d_in]);
    let h0 = random_tensor(&mut rng, &[rows, d_h]);
    let m0 = random_tensor(&mut rng, &[rows, d_h]);
    let wh = random_tensor(&mut rng, &[rows, d_h]);
    let wm = random_tensor(&mut rng, &[rows, d_h]);

    let out = lstm_cell_forward(&params, &x, &h0, &m0, None).unwrap();
    let mut grads = LstmCellParams::zeros(d_in, d_h);
    lstm_cell_backward(&params, &out.cache, &wh, &wm, &mut grads).unwrap();

    // L = Σ wh·h + Σ wm·m over rows.
    let loss = |p: &[Vec<f64>; 3]| -> f64 {
        let mut total = 0.0;
        for r in 0..rows {
            let row = |t: &Tensor, w: usize| f64s(t)[r * w..(r + 1) * w].to_vec();
            let (h, m) = scalar_cell(p, d_in, d_h, &row(&x, d_in), &row(&h0, d_h), &row(&m0, d_h));
            let (a, b) = (row(&wh, d_h), row(&wm, d_h));
            total += h.iter().zip(&a).map(|(u, v)| u * v).sum::<f64>();
            total += m.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>();
        }
        total
    };
    let base = f64_params(&params);
    let analytic = f64_params(&grads);
    let step = 1e-3;
    for part in 0..3 {
        for k in 0..base[part].len() {
            let mut up = base.clone();
            up[part][k] += step;
            let mut down = base.clone();
            down[part][k] -= step;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * step);
            let a = analytic[part][k];
            let diff = (a - numeric).abs();
            if numeric.abs() < 1e-3 {
                assert!(diff < 1e-6, "tensor {part} entry {k}: {a} vs {numeric}");
            } else {
                assert!(diff / numeric.abs() < 1e-4, "tensor {part} entry {k}: {a} vs {numeric}");
            }
        }
    }
}

proptest! {
    #[test]
    fn matmul_of_finite_is_finite(
        m in 1usize..6, k in 1usize..6, n in 1usize..6,
        seed in any::<u64>(), scale in 1e-3f32..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        a.scale(scale);
        prop_assert!(matmul(&a, &b).unwrap().is_finite());
    }

    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-1e4f32..1e4, 1..64)) {
        let n = values.len();
        let t = Tensor::new(vec![1, n], values).unwrap();
        let s = softmax2d(&t).unwrap();
        prop_assert!(s.is_finite());
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        prop_assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cell_outputs_are_bounded(seed in any::<u64>(), big in 1.0f32..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LstmCellParams::random(3, 4, 1.0, 1.0, &mut rng);
        let mut x = random_tensor(&mut rng, &[2, 3]);
        x.scale(big);
        let z = Tensor::zeros(&[2, 4]);
        let out = lstm_cell_forward(&params, &x, &z, &z, None).unwrap();
        prop_assert!(out.h.is_finite() && out.m.is_finite());
        prop_assert!(out.h.data().iter().all(|v| v.abs() <= 1.0));
    }
}
