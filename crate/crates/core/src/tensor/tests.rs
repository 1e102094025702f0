use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect()
}

/// Direct quadruple loop, zero padding, stride 1.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[o];
                for c in 0..ci {
                    for a in 0..k {
                        for bb in 0..k {
                            let (y, xx) = (i as isize + a as isize - pad as isize, j as isize + bb as isize - pad as isize);
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += w.data()[((o * ci + c) * k + a) * k + bb] * x.data()[(c * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = Tensor::from_fn(vec![1, 3, 3], |i| i as f64 + 1.0);
    let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w), t.constant(Tensor::zeros(vec![1])));
    let y = t.conv2d(xv, wv, bv, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_constant_input_counts_in_bounds_taps() {
    let c = 2.5;
    let x = Tensor::full(vec![1, 4, 4], c);
    let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(Tensor::zeros(vec![1])));
    let y = t.conv2d(xv, wv, bv, 1).unwrap();
    let d = t.value(y).data();
    assert_eq!(d[0], 4.0 * c); // corner
    assert_eq!(d[1], 6.0 * c); // edge
    assert_eq!(d[5], 9.0 * c); // interior
    assert_eq!(d[15], 4.0 * c);
}

#[test]
fn conv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (ci, co, k, pad, h) in [(1, 1, 3, 1, 5), (2, 3, 5, 2, 6), (3, 2, 3, 0, 5), (1, 4, 1, 0, 4)] {
        let x = rand_tensor(&mut rng, vec![ci, h, h + 1]);
        let w = rand_tensor(&mut rng, vec![co, ci, k, k]);
        let b = rand_tensor(&mut rng, vec![co]);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, pad).unwrap();
        let expect = naive_conv(&x, &w, b.data(), pad);
        for (a, e) in t.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_is_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, vec![2, 6, 6]);
    let y = rand_tensor(&mut rng, vec![2, 6, 6]);
    let w = rand_tensor(&mut rng, vec![3, 2, 5, 5]);
    let (alpha, beta) = (0.7, -1.3);
    let run = |inp: Tensor<f64>| {
        let mut t = Tape::<f64>::new();
        let (a, b, c) = (t.constant(inp), t.constant(w.clone()), t.constant(Tensor::zeros(vec![3])));
        let o = t.conv2d(a, b, c, 2).unwrap();
        t.value(o).data().to_vec()
    };
    let combo = Tensor::from_fn(vec![2, 6, 6], |i| alpha * x.data()[i] + beta * y.data()[i]);
    let lhs = run(combo);
    let (cx, cy) = (run(x), run(y));
    for i in 0..lhs.len() {
        assert!((lhs[i] - (alpha * cx[i] + beta * cy[i])).abs() < 1e-10);
    }
}

#[test]
fn conv_shape_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(vec![2, 4, 4]));
    let w = t.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(vec![1]));
    assert!(matches!(t.conv2d(x, w, b, 1), Err(TensorError::Shape { .. })));
    let w2 = t.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    assert!(t.conv2d(x, w2, b, 1).is_err());
}

#[test]
fn relu_forward_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = t.constant(Tensor::full(vec![2, 2], -3.0));
    let r = t.relu(z);
    assert!(t.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn maxpool_picks_window_max_and_breaks_ties_first() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (y, idx) = t.maxpool2(x).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);
    assert_eq!(idx.argmax(), &[3]);

    let c = t.constant(Tensor::full(vec![1, 4, 4], 7.0));
    let (p, idx) = t.maxpool2(c).unwrap();
    assert!(t.value(p).data().iter().all(|&v| v == 7.0));
    assert_eq!(idx.argmax(), &[0, 2, 8, 10]);
    let u = t.max_unpool2(p, &idx).unwrap();
    let ud = t.value(u).data();
    for (i, &v) in ud.iter().enumerate() {
        let (r, col) = (i / 4, i % 4);
        assert_eq!(v, if r % 2 == 0 && col % 2 == 0 { 7.0 } else { 0.0 });
    }
}

#[test]
fn maxpool_six_times_reaches_one_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::<f64>::new();
    let mut x = t.constant(rand_tensor(&mut rng, vec![1, 64, 64]));
    for _ in 0..6 {
        x = t.maxpool2(x).unwrap().0;
    }
    assert_eq!(t.value(x).shape(), &[1, 1, 1]);
    let odd = t.constant(Tensor::zeros(vec![1, 3, 4]));
    assert!(t.maxpool2(odd).is_err());
}

#[test]
fn unpool_of_pool_keeps_window_max_in_place() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, vec![2, 4, 6]);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let (p, idx) = t.maxpool2(xv).unwrap();
    let u = t.max_unpool2(p, &idx).unwrap();
    let ud = t.value(u).data();
    for ch in 0..2 {
        for i in 0..2 {
            for j in 0..3 {
                let cells: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| ch * 24 + (2 * i + a) * 6 + 2 * j + b)
                    .collect();
                let m = cells.iter().map(|&c| x.data()[c]).fold(f64::MIN, f64::max);
                let nz: Vec<usize> = cells.iter().copied().filter(|&c| ud[c] != 0.0).collect();
                assert_eq!(nz.len(), 1);
                assert_eq!(ud[nz[0]], m);
                assert_eq!(x.data()[nz[0]], m);
            }
        }
    }
    let wrong = t.constant(Tensor::zeros(vec![2, 1, 3]));
    assert!(t.max_unpool2(wrong, &idx).is_err());
}

#[test]
fn batch_norm_normalizes_and_handles_constant_channel() {
    let mut t = Tape::<f64>::new();
    // channel 0: zero mean, unit (biased) variance; channel 1: constant
    let x = Tensor::new(vec![2, 2, 2], vec![1.0, -1.0, 1.0, -1.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
    let xv = t.constant(x);
    let g = t.constant(Tensor::full(vec![2], 1.0));
    let b = t.constant(Tensor::new(vec![2], vec![0.0, 0.25]).unwrap());
    let mut st = BnStats::new(2);
    let y = t.batch_norm2d(xv, g, b, &mut st, true).unwrap();
    let d = t.value(y).data();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((d[0] - s).abs() < 1e-12 && (d[1] + s).abs() < 1e-12);
    assert!(d[4..].iter().all(|&v| (v - 0.25).abs() < 1e-12));
    // running stats moved by momentum 0.1 toward batch stats (unbiased var 4/3)
    assert!((st.mean[1] - 0.3).abs() < 1e-12);
    assert!((st.var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);

    // eval mode is deterministic and leaves stats untouched
    let before = st.clone();
    let y1 = t.batch_norm2d(xv, g, b, &mut st, false).unwrap();
    let y2 = t.batch_norm2d(xv, g, b, &mut st, false).unwrap();
    assert_eq!(t.value(y1), t.value(y2));
    assert_eq!(st, before);
}

#[test]
fn gather_at_vertices_and_cell_centers() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = rand_tensor(&mut rng, vec![3, 5, 4]);
    let mut t = Tape::<f64>::new();
    let fv = t.constant(f.clone());
    let (r, c) = (2usize, 3usize);
    let pts = [[c as f64 / 3.0, r as f64 / 4.0], [0.5 / 3.0, 0.5 / 4.0]];
    let g = t.bilinear_gather(fv, &pts).unwrap();
    let out = t.value(g).data();
    for ch in 0..3 {
        assert!((out[ch] - f.data()[ch * 20 + r * 4 + c]).abs() < 1e-12);
        let mean = (f.data()[ch * 20] + f.data()[ch * 20 + 1] + f.data()[ch * 20 + 4] + f.data()[ch * 20 + 5]) / 4.0;
        assert!((out[3 + ch] - mean).abs() < 1e-12);
    }
}

#[test]
fn gather_matches_closed_form_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (h, w) = (7, 9);
    let f = rand_tensor(&mut rng, vec![2, h, w]);
    let pts = rand_points(&mut rng, 50);
    let mut t = Tape::<f64>::new();
    let fv = t.constant(f.clone());
    let g = t.bilinear_gather(fv, &pts).unwrap();
    for (n, p) in pts.iter().enumerate() {
        let (u, v) = (p[0] * (w - 1) as f64, p[1] * (h - 1) as f64);
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (fx, fy) = (u - c0 as f64, v - r0 as f64);
        for ch in 0..2 {
            let at = |r: usize, c: usize| f.data()[ch * h * w + r * w + c];
            let expect = (1.0 - fx) * (1.0 - fy) * at(r0, c0)
                + fx * (1.0 - fy) * at(r0, c0 + 1)
                + (1.0 - fx) * fy * at(r0 + 1, c0)
                + fx * fy * at(r0 + 1, c0 + 1);
            assert!((t.value(g).data()[n * 2 + ch] - expect).abs() < 1e-7);
        }
    }
}

#[test]
fn gather_edges_and_domain() {
    let f = Tensor::from_fn(vec![1, 3, 3], |i| i as f64);
    let mut t = Tape::<f64>::new();
    let fv = t.constant(f);
    let g = t.bilinear_gather(fv, &[[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert_eq!(t.value(g).data(), &[8.0, 2.0, 6.0]);
    assert_eq!(t.bilinear_gather(fv, &[[1.0 + 1e-9, 0.5]]).unwrap_err(), TensorError::OutOfDomain { x: 1.0 + 1e-9, y: 0.5 });
    assert!(t.bilinear_gather(fv, &[[0.5, -0.1]]).is_err());
    // partition of unity on a constant map, including a 1x1 map
    let c = t.constant(Tensor::full(vec![2, 4, 4], 3.25));
    let one = t.constant(Tensor::full(vec![1, 1, 1], -2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = rand_points(&mut rng, 20);
    let gc = t.bilinear_gather(c, &pts).unwrap();
    assert!(t.value(gc).data().iter().all(|&v| (v - 3.25).abs() < 1e-13));
    let g1 = t.bilinear_gather(one, &pts).unwrap();
    assert!(t.value(g1).data().iter().all(|&v| v == -2.0));
}

#[test]
fn dense_forward_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let y = t.dense(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 3.0]);

    let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let z = t.constant(Tensor::zeros(vec![2]));
    let y2 = t.dense(x, eye, z).unwrap();
    assert_eq!(t.value(y2).data(), &[1.0, 2.0]);
    let bad = t.constant(Tensor::zeros(vec![2, 3]));
    assert!(t.dense(x, bad, z).is_err());
}

#[test]
fn mse_values() {
    let mut t = Tape::<f64>::new();
    let p = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 4.0]).unwrap());
    let l = t.mse_loss(p, &[1.0, 2.0, 3.0]).unwrap();
    assert!((t.value(l).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    let l0 = t.mse_loss(p, &[1.0, 2.0, 4.0]).unwrap();
    assert_eq!(t.value(l0).data()[0], 0.0);
    let q = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
    let l2 = t.mse_loss(q, &[2.0]).unwrap();
    assert_eq!(t.value(l2).data()[0], 4.0);
    assert!(t.mse_loss(p, &[1.0]).is_err());
}

#[test]
fn backward_of_sum_is_ones_and_unused_params_get_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let unused = t.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zeros(&t, unused), vec![0.0; 3]);
    let not_scalar = t.relu(x);
    assert!(t.backward(not_scalar).is_err());
}

#[test]
fn concat_along_axes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 3]);
    assert_eq!(t.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let d = t.concat(&[b, b], 0).unwrap();
    assert_eq!(t.value(d).data(), &[3.0, 4.0, 5.0, 6.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(t.concat(&[a, b], 0).is_err());
}

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn mse_to(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let n = tape.value(v).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.mse_loss(v, &target)
}

#[test]
fn gradcheck_conv2d() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![rand_tensor(&mut rng, vec![2, 5, 5]), rand_tensor(&mut rng, vec![3, 2, 3, 3]), rand_tensor(&mut rng, vec![3])];
        let r = check_gradients(&inputs, H, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1)?;
            mse_to(t, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{:?}", r);
    }
}

#[test]
fn gradcheck_relu_away_from_kink() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = Tensor::from_fn(vec![12], |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let r = check_gradients(&[x], H, |t, v| {
            let y = t.relu(v[0]);
            mse_to(t, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{:?}", r);
    }
}

#[test]
fn gradcheck_pool_and_unpool() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_tensor(&mut rng, vec![2, 4, 6]);
        let r = check_gradients(&[x], H, |t, v| {
            let (p, idx) = t.maxpool2(v[0])?;
            let p = t.relu(p);
            let u = t.max_unpool2(p, &idx)?;
            mse_to(t, u, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{:?}", r);
    }
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let inputs = vec![rand_tensor(&mut rng, vec![2, 4, 4]), rand_tensor(&mut rng, vec![2]), rand_tensor(&mut rng, vec![2])];
        for training in [true, false] {
            let r = check_gradients(&inputs, H, |t, v| {
                let mut st = BnStats { mean: vec![0.1, -0.2], var: vec![0.8, 1.3] };
                let y = t.batch_norm2d(v[0], v[1], v[2], &mut st, training)?;
                mse_to(t, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_err < TOL, "{:?}", r);
        }
    }
}

#[test]
fn gradcheck_gather() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let f = rand_tensor(&mut rng, vec![3, 4, 5]);
        let pts = rand_points(&mut rng, 9);
        let r = check_gradients(&[f], H, |t, v| {
            let y = t.bilinear_gather(v[0], &pts)?;
            mse_to(t, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{:?}", r);
    }
}

#[test]
fn gradcheck_dense_and_concat() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let inputs = vec![
            rand_tensor(&mut rng, vec![5, 3]),
            rand_tensor(&mut rng, vec![5, 2]),
            rand_tensor(&mut rng, vec![4, 5]),
            rand_tensor(&mut rng, vec![4]),
        ];
        let r = check_gradients(&inputs, H, |t, v| {
            let x = t.concat(&[v[0], v[1]], 1)?;
            let y = t.dense(x, v[2], v[3])?;
            mse_to(t, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}

#[test]
fn gradcheck_composite_conv_relu_gather_dense_mse() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let pts = rand_points(&mut rng, 6);
        let inputs = vec![
            rand_tensor(&mut rng, vec![1, 6, 6]),
            rand_tensor(&mut rng, vec![3, 1, 3, 3]),
            rand_tensor(&mut rng, vec![3]),
            rand_tensor(&mut rng, vec![3, 3, 3, 3]),
            rand_tensor(&mut rng, vec![3]),
            rand_tensor(&mut rng, vec![1, 6]),
            rand_tensor(&mut rng, vec![1]),
        ];
        let r = check_gradients(&inputs, H, |t, v| {
            let a = t.conv2d(v[0], v[1], v[2], 1)?;
            let a = t.relu(a);
            let g1 = t.bilinear_gather(a, &pts)?;
            let (p, _) = t.maxpool2(a)?;
            let b = t.conv2d(p, v[3], v[4], 1)?;
            let b = t.relu(b);
            let g2 = t.bilinear_gather(b, &pts)?;
            let feats = t.concat(&[g1, g2], 1)?;
            let y = t.dense(feats, v[5], v[6])?;
            mse_to(t, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{:?}", r);
    }
}
