use codephys_autograd::check::{numeric_grad, relative_error};
use codephys_autograd::{concat, uniform, Array, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_arr(shape: &[usize], seed: u64) -> Array {
    uniform(shape, 1.0, &mut rng(seed))
}

/// Checks d/dx sum(op(x) * r) against central differences for every input.
fn check_op(inputs: &[Array], op: impl for<'g> Fn(&[Var<'g>]) -> Var<'g>) {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let out = op(&vars);
    let r = rand_arr(out.shape(), 99);
    let loss = out.mul(&g.constant(r.clone())).sum();
    let grads = g.backward(&loss);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let numeric = numeric_grad(&inputs[i], 1e-5, |probe| {
            let g = Graph::new();
            let vars: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| g.constant(if i == j { probe.clone() } else { a.clone() }))
                .collect();
            op(&vars).mul(&g.constant(r.clone())).sum().item()
        });
        let err = relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-6, "input {i}: relative error {err}");
    }
}

#[test]
fn elementwise_grads() {
    let a = rand_arr(&[3, 4], 1);
    let b = rand_arr(&[3, 4], 2);
    let row = rand_arr(&[4], 3);
    check_op(&[a.clone(), b.clone()], |v| v[0].add(&v[1]).mul(&v[0]));
    check_op(&[a.clone(), row.clone()], |v| v[0].sub(&v[1]));
    check_op(&[a.clone(), row.mapv(|x| x + 2.0)], |v| v[0].div(&v[1]));
    check_op(&[a.clone()], |v| v[0].gelu().add(&v[0].sigmoid()));
    check_op(&[a.mapv(|x| x + 2.0)], |v| v[0].sqrt().add(&v[0].ln()));
    check_op(&[a.clone()], |v| {
        v[0].exp().scale(0.3).add_scalar(1.0).square()
    });
    check_op(&[a.mapv(|x| 3.0 * x)], |v| v[0].smooth_l1(1.0));
}

#[test]
fn reduction_and_shape_grads() {
    let a = rand_arr(&[2, 3, 4], 4);
    check_op(&[a.clone()], |v| v[0].sum_axis(1));
    check_op(&[a.clone()], |v| v[0].mean_axis(0).mean());
    check_op(&[a.clone()], |v| v[0].max_axis(2));
    check_op(&[a.clone()], |v| v[0].permute(&[2, 0, 1]).reshape(&[4, 6]));
    check_op(&[rand_arr(&[2, 1, 4], 5)], |v| {
        v[0].broadcast_to(&[2, 3, 4])
    });
    check_op(&[a.clone()], |v| v[0].slice_axis(1, 1, 3));
    check_op(&[a.clone(), rand_arr(&[2, 2, 4], 6)], |v| {
        concat(&[&v[0], &v[1]], 1)
    });
    check_op(&[rand_arr(&[5, 3], 7)], |v| v[0].gather_rows(&[4, 0, 4, 2]));
}

#[test]
fn matmul_layer_norm_and_cross_entropy_grads() {
    check_op(&[rand_arr(&[3, 5], 8), rand_arr(&[5, 2], 9)], |v| {
        v[0].matmul(&v[1])
    });
    check_op(
        &[
            rand_arr(&[6, 7], 10),
            rand_arr(&[6], 11),
            rand_arr(&[6], 12),
        ],
        |v| v[0].layer_norm(&v[1], &v[2], 1e-5),
    );
    check_op(&[rand_arr(&[4, 6], 13).mapv(|x| 3.0 * x)], |v| {
        v[0].cross_entropy_rows(&[0, 5, 2, 2])
    });
}

#[test]
fn layer_norm_standardizes_each_position() {
    let g = Graph::new();
    let x = g.constant(rand_arr(&[8, 3, 2], 14).mapv(|v| 5.0 * v + 2.0));
    let y = x.layer_norm(
        &g.constant(codephys_autograd::ones(&[8])),
        &g.constant(codephys_autograd::zeros(&[8])),
        1e-12,
    );
    let y = y.value().clone().into_shape_with_order((8, 6)).unwrap();
    for col in y.columns() {
        let mean = col.sum() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

// ---- convolution oracles -------------------------------------------------

fn direct_conv1d(x: &Array, w: &Array, b: &[f64], stride: usize, pad: usize) -> Array {
    let (cin, len) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let out_len = (len + 2 * pad - k) / stride + 1;
    ArrayD::from_shape_fn(IxDyn(&[cout, out_len]), |idx| {
        let (o, t) = (idx[0], idx[1]);
        let mut acc = b[o];
        for c in 0..cin {
            for j in 0..k {
                let i = (t * stride + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < len {
                    acc += w[[o, c, j]] * x[[c, i as usize]];
                }
            }
        }
        acc
    })
}

fn direct_conv_transpose1d(
    x: &Array,
    w: &Array,
    b: &[f64],
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Array {
    let (cin, len) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let out_len = (len - 1) * stride + k + output_pad - 2 * pad;
    let mut out = ArrayD::zeros(IxDyn(&[cout, out_len]));
    for o in 0..cout {
        for t in 0..out_len {
            out[[o, t]] = b[o];
        }
    }
    for c in 0..cin {
        for i in 0..len {
            for o in 0..cout {
                for j in 0..k {
                    let t = (i * stride + j) as isize - pad as isize;
                    if t >= 0 && (t as usize) < out_len {
                        out[[o, t as usize]] += w[[c, o, j]] * x[[c, i]];
                    }
                }
            }
        }
    }
    out
}

fn direct_conv3d(x: &Array, w: &Array, b: &[f64], pad: [usize; 3]) -> Array {
    let s = x.shape();
    let ws = w.shape();
    let out: Vec<usize> = (0..3)
        .map(|d| s[d + 1] + 2 * pad[d] - ws[d + 2] + 1)
        .collect();
    ArrayD::from_shape_fn(IxDyn(&[ws[0], out[0], out[1], out[2]]), |idx| {
        let mut acc = b[idx[0]];
        for c in 0..s[0] {
            for a in 0..ws[2] {
                for bb in 0..ws[3] {
                    for k in 0..ws[4] {
                        let p = [
                            (idx[1] + a) as isize - pad[0] as isize,
                            (idx[2] + bb) as isize - pad[1] as isize,
                            (idx[3] + k) as isize - pad[2] as isize,
                        ];
                        if (0..3).all(|d| p[d] >= 0 && (p[d] as usize) < s[d + 1]) {
                            acc += w[[idx[0], c, a, bb, k]]
                                * x[[c, p[0] as usize, p[1] as usize, p[2] as usize]];
                        }
                    }
                }
            }
        }
        acc
    })
}

fn max_abs_diff(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn conv1d_matches_direct_loop() {
    let x = rand_arr(&[3, 17], 20);
    let w = rand_arr(&[4, 3, 5], 21);
    let b = rand_arr(&[4], 22);
    for (stride, pad) in [(1, 2), (4, 2), (2, 0), (3, 1)] {
        let g = Graph::new();
        let y = g.constant(x.clone()).conv1d(
            &g.constant(w.clone()),
            Some(&g.constant(b.clone())),
            stride,
            pad,
        );
        let expect = direct_conv1d(&x, &w, b.as_slice().unwrap(), stride, pad);
        assert!(
            max_abs_diff(y.value(), &expect) < 1e-12,
            "stride {stride} pad {pad}"
        );
    }
    check_op(&[x.clone(), w.clone(), b.clone()], |v| {
        v[0].conv1d(&v[1], Some(&v[2]), 4, 2)
    });
}

#[test]
fn conv_transpose1d_matches_direct_loop_and_restores_length() {
    let x = rand_arr(&[4, 10], 23);
    let w = rand_arr(&[4, 3, 5], 24);
    let b = rand_arr(&[3], 25);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv_transpose1d(
        &g.constant(w.clone()),
        Some(&g.constant(b.clone())),
        4,
        2,
        3,
    );
    assert_eq!(y.shape(), [3, 40]);
    let expect = direct_conv_transpose1d(&x, &w, b.as_slice().unwrap(), 4, 2, 3);
    assert!(max_abs_diff(y.value(), &expect) < 1e-12);
    check_op(&[x, w, b], |v| {
        v[0].conv_transpose1d(&v[1], Some(&v[2]), 4, 2, 3)
    });
}

#[test]
fn conv3d_matches_direct_loop() {
    let x = rand_arr(&[2, 5, 6, 7], 30);
    let w = rand_arr(&[3, 2, 3, 3, 3], 31);
    let b = rand_arr(&[3], 32);
    for pad in [[1, 1, 1], [0, 2, 2], [0, 0, 0]] {
        let g = Graph::new();
        let y =
            g.constant(x.clone())
                .conv3d(&g.constant(w.clone()), Some(&g.constant(b.clone())), pad);
        let expect = direct_conv3d(&x, &w, b.as_slice().unwrap(), pad);
        assert!(max_abs_diff(y.value(), &expect) < 1e-12, "pad {pad:?}");
    }
    let w155 = rand_arr(&[3, 2, 1, 5, 5], 33);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv3d(
        &g.constant(w155.clone()),
        Some(&g.constant(b.clone())),
        [0, 2, 2],
    );
    assert_eq!(y.shape(), [3, 5, 6, 7]);
    assert!(
        max_abs_diff(
            y.value(),
            &direct_conv3d(&x, &w155, b.as_slice().unwrap(), [0, 2, 2])
        ) < 1e-12
    );
    check_op(&[x, w, b], |v| v[0].conv3d(&v[1], Some(&v[2]), [1, 1, 1]));
}

#[test]
fn max_pool_picks_window_maxima() {
    let x = rand_arr(&[2, 3, 4, 6], 34);
    let g = Graph::new();
    let y = g.constant(x.clone()).max_pool_hw2();
    assert_eq!(y.shape(), [2, 3, 2, 3]);
    for c in 0..2 {
        for t in 0..3 {
            for i in 0..2 {
                for j in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(a, b)| x[[c, t, 2 * i + a, 2 * j + b]])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.value()[[c, t, i, j]], m);
                }
            }
        }
    }
    check_op(&[x], |v| v[0].max_pool_hw2());
}

#[test]
fn deform_conv_with_zero_offsets_is_plain_conv() {
    let x = rand_arr(&[2, 4, 5, 5], 40);
    let w = rand_arr(&[3, 2, 3, 3, 3], 41);
    let b = rand_arr(&[3], 42);
    let g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
    let plain = xv.conv3d(&wv, Some(&bv), [1, 1, 1]);
    let off = g.constant(ArrayD::zeros(IxDyn(&[81, 4, 5, 5])));
    let deformed = xv.deform_conv3d(&off, &wv, Some(&bv), [1, 1, 1]);
    assert_eq!(plain.value(), deformed.value());
}

#[test]
fn deform_conv_integer_shift_equals_conv_of_shifted_input() {
    // x'(t, h, w) = x(t, h + 1, w): sampling x' at h - 1 reads x at h.
    let x = rand_arr(&[2, 4, 7, 6], 43);
    let shifted = ArrayD::from_shape_fn(IxDyn(&[2, 4, 7, 6]), |i| {
        if i[2] >= 1 {
            x[[i[0], i[1], i[2] - 1, i[3]]]
        } else {
            0.0
        }
    });
    let w = rand_arr(&[3, 2, 3, 3, 3], 44);
    let g = Graph::new();
    let mut offsets = ArrayD::zeros(IxDyn(&[81, 4, 7, 6]));
    for tap in 0..27 {
        offsets
            .index_axis_mut(ndarray::Axis(0), 3 * tap + 1)
            .fill(1.0);
    }
    let wv = g.constant(w);
    let deformed = g
        .constant(shifted)
        .deform_conv3d(&g.constant(offsets), &wv, None, [1, 1, 1]);
    let plain = g.constant(x).conv3d(&wv, None, [1, 1, 1]);
    // Interior rows only: the shifted copy lost its last row.
    for o in 0..3 {
        for t in 0..4 {
            for h in 1..5 {
                for w in 0..6 {
                    let d = deformed.value()[[o, t, h, w]] - plain.value()[[o, t, h, w]];
                    assert!(d.abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn deform_conv_grads_at_fractional_offsets() {
    let x = rand_arr(&[2, 3, 4, 4], 45);
    let off = rand_arr(&[81, 3, 4, 4], 46).mapv(|v| 0.3 * v + 0.37);
    let w = rand_arr(&[2, 2, 3, 3, 3], 47);
    let b = rand_arr(&[2], 48);
    check_op(&[x, off, w, b], |v| {
        v[0].deform_conv3d(&v[1], &v[2], Some(&v[3]), [1, 1, 1])
    });
}

#[test]
fn trilinear_half_offset_is_neighbor_mean() {
    // Linear ramp along w: sample at w + 0.5 is the mean of both neighbors.
    let dims = [2, 3, 5];
    let x: Vec<f64> = (0..30).map(|i| (i % 5) as f64 * 1.7 + 0.2).collect();
    let (v, _) = codephys_autograd::kernels::trilinear(&x, dims, [1.0, 2.0, 2.5]);
    let mean = 0.5 * (x[(1 * 3 + 2) * 5 + 2] + x[(1 * 3 + 2) * 5 + 3]);
    assert!((v - mean).abs() < 1e-14);
}

#[test]
fn stop_gradient_blocks_flow() {
    let g = Graph::new();
    let x = g.leaf(rand_arr(&[4], 50));
    let y = x.detach().square().sum().add(&x.sum());
    let grads = g.backward(&y);
    assert!(grads.get(&x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn shared_parameter_accumulates_across_uses() {
    let mut store = codephys_autograd::ParamStore::new();
    store.insert("w", rand_arr(&[3], 51));
    let g = Graph::with_params(&store);
    let a = g.param("w").sum();
    let b = g.param("w").scale(2.0).sum();
    let grads = g.backward(&a.add(&b));
    assert!(grads
        .param("w")
        .unwrap()
        .iter()
        .all(|&v| (v - 3.0).abs() < 1e-15));
    assert_eq!(g.accessed_params().len(), 1);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = codephys_autograd::ParamStore::new();
    store.insert("frozen.w", rand_arr(&[3], 52));
    store.insert("live.w", rand_arr(&[3], 53));
    let g = Graph::with_frozen(&store, |n| n.starts_with("frozen."));
    let loss = g.param("frozen.w").mul(&g.param("live.w")).sum();
    let grads = g.backward(&loss).params();
    assert!(grads.contains_key("live.w"));
    assert!(!grads.contains_key("frozen.w"));
}

#[test]
fn adam_moves_against_gradient() {
    let mut store = codephys_autograd::ParamStore::new();
    store.insert("p", ArrayD::from_elem(IxDyn(&[2]), 1.0));
    let mut adam = codephys_autograd::Adam::new(0.1);
    for _ in 0..50 {
        let g = Graph::with_params(&store);
        let loss = g.param("p").square().sum();
        let grads = g.backward(&loss).params();
        drop(g);
        adam.step(&mut store, &grads);
    }
    assert!(store.get("p").unwrap().iter().all(|v| v.abs() < 0.2));
}
