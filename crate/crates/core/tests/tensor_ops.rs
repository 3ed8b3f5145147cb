mod common;

use common::{naive_conv2d, random_tensor};
use proptest::prelude::*;
use saccn::gradcheck::grad_check;
use saccn::{ConvGeometry, Error, PoolKind, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ------------------------------------------------------------ elementwise

#[test]
fn scalar_scaling() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = tape.scale(x, 0.5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 1.0, 1.5, 2.0]);
    let half = tape.constant(t(&[1], &[0.5])).unwrap();
    let z = tape.mul(x, half).unwrap();
    assert_eq!(tape.value(z).data(), &[0.5, 1.0, 1.5, 2.0]);
}

#[test]
fn add_zeros_is_identity() {
    let mut tape: Tape<f64> = Tape::new();
    let xv = random_tensor(1, &[2, 3, 4, 5], -1.0, 1.0);
    let x = tape.constant(xv.clone()).unwrap();
    let z = tape.constant(Tensor::zeros(&[2, 3, 4, 5])).unwrap();
    let y = tape.add(x, z).unwrap();
    assert_eq!(tape.value(y), &xv);
}

#[test]
fn per_channel_broadcast_mul() {
    let mut tape: Tape<f64> = Tape::new();
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let x = tape.constant(t(&[1, 2, 2, 2], &xs)).unwrap();
    let s = tape.constant(t(&[1, 2, 1, 1], &[0.5, 2.0])).unwrap();
    let y = tape.mul(x, s).unwrap();
    // Hand expansion: channel 0 is xs[0..4] * 0.5, channel 1 is xs[4..8] * 2.
    let expected: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, v)| if i < 4 { v * 0.5 } else { v * 2.0 })
        .collect();
    assert_eq!(tape.value(y).data(), expected.as_slice());
}

#[test]
fn spatial_broadcast_mul() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 3, 2, 2])).unwrap();
    let s = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let y = tape.mul(x, s).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]
    );
}

#[test]
fn non_broadcastable_shapes_are_reported() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::ones(&[1, 2, 3, 3])).unwrap();
    let b = tape.constant(Tensor::ones(&[1, 3, 1, 1])).unwrap();
    match tape.mul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 2, 3, 3]);
            assert_eq!(rhs, vec![1, 3, 1, 1]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn broadcast_gradients_match_finite_differences() {
    let s = random_tensor(3, &[1, 3, 1, 1], -1.0, 1.0);
    let x = random_tensor(4, &[2, 3, 4, 4], -1.0, 1.0);
    let xs = x.clone();
    // d/ds
    let r = grad_check(
        |tape, v| {
            let xv = tape.constant(xs.clone())?;
            let y = tape.mul(xv, v)?;
            let y2 = tape.mul(y, y)?;
            tape.sum_all(y2)
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    // d/dx, with the broadcast operand as a constant; sub exercises the
    // sign of the second-operand rule.
    let r = grad_check(
        |tape, v| {
            let sv = tape.constant(s.clone())?;
            let y = tape.sub(v, sv)?;
            let y = tape.mul(y, y)?;
            tape.sum_all(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
    let r = grad_check(
        |tape, v| {
            let xv = tape.constant(x.clone())?;
            let y = tape.sub(xv, v)?;
            let y = tape.mul(y, y)?;
            tape.sum_all(y)
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ------------------------------------------------------------ matmul

#[test]
fn matmul_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let bv = random_tensor(5, &[2, 3], -1.0, 1.0);
    let b = tape.constant(bv.clone()).unwrap();
    let y = tape.matmul(eye, b).unwrap();
    assert_eq!(tape.value(y), &bv);

    let r = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let c = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let y = tape.matmul(r, c).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0]);

    let bad = tape.constant(Tensor::ones(&[3, 3])).unwrap();
    assert!(matches!(tape.matmul(r, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_of_sum() {
    let a = random_tensor(6, &[3, 4], -1.0, 1.0);
    let b = random_tensor(7, &[4, 5], -1.0, 1.0);
    let mut tape: Tape<f64> = Tape::new();
    let av = tape.parameter(a.clone()).unwrap();
    let bv = tape.constant(b.clone()).unwrap();
    let y = tape.matmul(av, bv).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ga = grads.get(av).unwrap();
    // Each row of dA holds the row sums of B.
    for i in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = b.data()[k * 5..(k + 1) * 5].iter().sum();
            assert!((ga.data()[i * 4 + k] - row_sum).abs() < 1e-12);
        }
    }
    let r = grad_check(
        |tape, v| {
            let bv = tape.constant(b.clone())?;
            let y = tape.matmul(v, bv)?;
            tape.sum_all(y)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn batched_matmul_gradients() {
    let a = random_tensor(8, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(9, &[2, 4, 3], -1.0, 1.0);
    for wrt_a in [true, false] {
        let x = if wrt_a { a.clone() } else { b.clone() };
        let r = grad_check(
            |tape, v| {
                let (l, r) = if wrt_a {
                    (v, tape.constant(b.clone())?)
                } else {
                    (tape.constant(a.clone())?, v)
                };
                let y = tape.matmul(l, r)?;
                let y = tape.mul(y, y)?;
                tape.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

// ------------------------------------------------------------ softmax / activations

#[test]
fn softmax_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

    let x = tape.constant(t(&[2], &[1000.0, 1000.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_close(tape.value(y).data(), &[0.25, 0.75], 1e-15);

    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_gradient_along_each_axis() {
    let x = random_tensor(10, &[2, 3, 4], -2.0, 2.0);
    let w = random_tensor(11, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        let r = grad_check(
            |tape, v| {
                let s = tape.softmax(v, axis)?;
                let wv = tape.constant(w.clone())?;
                let y = tape.mul(s, wv)?;
                tape.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "axis {axis}: {r:?}");
    }
}

#[test]
fn activation_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let z = tape.constant(t(&[1], &[0.0])).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    let x = tape.constant(t(&[2], &[-1.0, 2.0])).unwrap();
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

    let r = grad_check(
        |tape, v| {
            let s = tape.sigmoid(v)?;
            tape.sum_all(s)
        },
        &t(&[1], &[0.0]),
        1e-5,
    )
    .unwrap();
    assert!((r.numeric - 0.25).abs() < 1e-9);
    assert!((r.analytic - 0.25).abs() < 1e-15);
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = t(&[6], &[-1.5, -0.3, 0.2, 0.9, 2.0, -0.01]);
    let r = grad_check(
        |tape, v| {
            let y = tape.relu(v)?;
            let y = tape.mul(y, y)?;
            tape.sum_all(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

// ------------------------------------------------------------ reductions

#[test]
fn reduce_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let m = tape.mean(x, &[2, 3]).unwrap();
    assert_eq!(tape.shape(m), &[1, 1, 1, 1]);
    assert_eq!(tape.value(m).data(), &[2.5]);

    let c = tape.constant(t(&[1, 2, 1, 1], &[1.0, 3.0])).unwrap();
    let mx = tape.max(c, &[1]).unwrap();
    assert_eq!(tape.value(mx).data(), &[3.0]);

    assert!(tape.sum(x, &[]).is_err());
    assert!(tape.sum(x, &[1, 1]).is_err());
    assert!(tape.sum(x, &[4]).is_err());
}

#[test]
fn sum_backward_is_all_ones() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(random_tensor(12, &[2, 3, 4], -1.0, 1.0)).unwrap();
    let s = tape.sum_all(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn max_ties_route_to_first_index() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[1, 3, 1, 2], &[5.0, 1.0, 5.0, 1.0, 2.0, 1.0])).unwrap();
    let m = tape.max(x, &[1]).unwrap();
    assert_eq!(tape.value(m).data(), &[5.0, 1.0]);
    let s = tape.sum_all(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn reduction_gradients() {
    let x = random_tensor(13, &[2, 3, 4, 5], -1.0, 1.0);
    let w = random_tensor(14, &[2, 1, 4, 1], -1.0, 1.0);
    for kind in ["sum", "mean", "max"] {
        let r = grad_check(
            |tape, v| {
                let y = match kind {
                    "sum" => tape.sum(v, &[1, 3])?,
                    "mean" => tape.mean(v, &[1, 3])?,
                    _ => tape.max(v, &[1, 3])?,
                };
                let wv = tape.constant(w.clone())?;
                let y = tape.mul(y, wv)?;
                tape.sum_all(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{kind}: {r:?}");
    }
}

// ------------------------------------------------------------ layout

#[test]
fn reshape_round_trip_and_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let xv = random_tensor(15, &[1, 2, 2, 2], -1.0, 1.0);
    let x = tape.constant(xv.clone()).unwrap();
    let y = tape.reshape(x, &[2, 4]).unwrap();
    let z = tape.reshape(y, &[1, 2, 2, 2]).unwrap();
    assert_eq!(tape.value(z), &xv);
    assert!(matches!(tape.reshape(x, &[3, 3]), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn concat_shapes_and_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::ones(&[1, 2, 4, 4])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
    assert_eq!(tape.value(c).sum(), 32.0);
    let d = tape.constant(Tensor::zeros(&[1, 3, 4, 5])).unwrap();
    assert!(matches!(tape.concat(&[a, d], 1), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn concat_backward_slices_per_input() {
    let a = random_tensor(16, &[2, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(17, &[2, 3, 3, 3], -1.0, 1.0);
    let w = random_tensor(18, &[2, 5, 3, 3], -1.0, 1.0);
    for first in [true, false] {
        let x = if first { a.clone() } else { b.clone() };
        let r = grad_check(
            |tape, v| {
                let (l, r) = if first {
                    (v, tape.constant(b.clone())?)
                } else {
                    (tape.constant(a.clone())?, v)
                };
                let c = tape.concat(&[l, r], 1)?;
                let wv = tape.constant(w.clone())?;
                let y = tape.mul(c, wv)?;
                let y = tape.mul(y, y)?;
                tape.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

// ------------------------------------------------------------ backward

#[test]
fn backward_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
    let y = tape.scale(x, 2.0).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[2], &[1.0, 2.0])).unwrap();
    let y = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[2], &[1.0, 2.0])).unwrap();
    let other = tape.parameter(t(&[2], &[3.0, 4.0])).unwrap();
    let loss = tape.sum_all(other).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_errors() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let s = tape.sum_all(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
    tape.reset_backward();
    assert!(tape.backward(s).is_ok());

    let mut other: Tape<f64> = Tape::new();
    let foreign = other.parameter(t(&[1], &[1.0])).unwrap();
    assert!(matches!(tape.backward(foreign), Err(Error::DetachedGraph)));
    assert!(matches!(tape.add(x, foreign), Err(Error::DetachedGraph)));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { .. })));
    assert!(matches!(
        tape.constant(t(&[1], &[f64::NAN])),
        Err(Error::NonFinite { .. })
    ));
}

// ------------------------------------------------------------ conv / pool / upsample

fn conv_case(seed: u64, dims: (usize, usize, usize, usize), cout: usize, k: (usize, usize), pad: (usize, usize), dil: (usize, usize), stride: (usize, usize)) {
    let (n, cin, h, w) = dims;
    let x = random_tensor(seed, &[n, cin, h, w], -1.0, 1.0);
    let wt = random_tensor(seed + 1, &[cout, cin, k.0, k.1], -1.0, 1.0);
    let b = random_tensor(seed + 2, &[cout], -1.0, 1.0);
    let (expected, ho, wo) = naive_conv2d(
        x.data(),
        dims,
        wt.data(),
        (cout, k.0, k.1),
        Some(b.data()),
        stride,
        pad,
        dil,
    );
    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.constant(x).unwrap();
    let wv = tape.constant(wt).unwrap();
    let bv = tape.constant(b).unwrap();
    let geometry = ConvGeometry {
        stride,
        padding: pad,
        dilation: dil,
    };
    let y = tape.conv2d(xv, wv, Some(bv), geometry).unwrap();
    assert_eq!(tape.shape(y), &[n, cout, ho, wo]);
    assert_close(tape.value(y).data(), &expected, 1e-10);
}

#[test]
fn conv_matches_direct_oracle_with_stride() {
    conv_case(100, (2, 3, 9, 8), 2, (3, 3), (1, 0), (1, 1), (2, 1));
    conv_case(110, (1, 2, 7, 9), 3, (3, 1), (2, 0), (2, 1), (1, 3));
}

#[test]
fn conv_gradients() {
    let x = random_tensor(20, &[2, 2, 6, 7], -1.0, 1.0);
    let w = random_tensor(21, &[3, 2, 3, 1], -1.0, 1.0);
    let b = random_tensor(22, &[3], -1.0, 1.0);
    let geometry = ConvGeometry {
        stride: (1, 2),
        padding: (2, 0),
        dilation: (2, 1),
    };
    let run = |which: usize, v: Var, tape: &mut Tape<f64>| -> saccn::Result<Var> {
        let xs = if which == 0 { v } else { tape.constant(x.clone())? };
        let ws = if which == 1 { v } else { tape.constant(w.clone())? };
        let bs = if which == 2 { v } else { tape.constant(b.clone())? };
        let y = tape.conv2d(xs, ws, Some(bs), geometry)?;
        let y = tape.mul(y, y)?;
        tape.sum_all(y)
    };
    for (which, input) in [&x, &w, &b].into_iter().enumerate() {
        let r = grad_check(|tape, v| run(which, v, tape), input, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "input {which}: {r:?}");
    }
}

#[test]
fn pool_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let m = tape.pool2d(PoolKind::Max, x, (2, 2), (2, 2)).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0]);
    let a = tape.pool2d(PoolKind::Avg, x, (2, 2), (2, 2)).unwrap();
    assert_eq!(tape.value(a).data(), &[2.5]);
    assert!(tape.pool2d(PoolKind::Max, x, (3, 3), (3, 3)).is_err());
}

#[test]
fn maxpool_constant_input_routes_to_one_cell_per_window() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(Tensor::full(&[1, 2, 4, 6], 0.7)).unwrap();
    let m = tape.pool2d(PoolKind::Max, x, (2, 2), (2, 2)).unwrap();
    let s = tape.sum_all(m).unwrap();
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap();
    for plane in 0..2 {
        for wy in 0..2 {
            for wx in 0..3 {
                let mut hits = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = gx.data()[plane * 24 + (2 * wy + dy) * 6 + 2 * wx + dx];
                        if v != 0.0 {
                            assert_eq!(v, 1.0);
                            hits += 1;
                        }
                    }
                }
                assert_eq!(hits, 1);
            }
        }
    }
    // Constant input sits on a kink, so compare along a smooth direction:
    // shifting a whole window by +h raises its max by h, and the analytic
    // directional derivative is the window's gradient sum.
    let f = |data: &Tensor<f64>| {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(data.clone()).unwrap();
        let m = tape.pool2d(PoolKind::Max, x, (2, 2), (2, 2)).unwrap();
        tape.value(m).sum()
    };
    let base = Tensor::full(&[1, 2, 4, 6], 0.7);
    let h = 1e-4;
    for (wy, wx) in [(0, 0), (1, 2), (0, 1)] {
        let mut plus = base.clone();
        let mut minus = base.clone();
        let mut analytic = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                let i = (2 * wy + dy) * 6 + 2 * wx + dx;
                plus.data_mut()[i] += h;
                minus.data_mut()[i] -= h;
                analytic += gx.data()[i];
            }
        }
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        assert!((numeric - analytic).abs() < 1e-9);
    }
}

#[test]
fn pool_gradients() {
    let x = random_tensor(30, &[2, 2, 6, 6], -1.0, 1.0);
    for kind in [PoolKind::Max, PoolKind::Avg] {
        for (k, s) in [((2, 2), (2, 2)), ((3, 2), (1, 2))] {
            let r = grad_check(
                |tape, v| {
                    let y = tape.pool2d(kind, v, k, s)?;
                    let y = tape.mul(y, y)?;
                    tape.sum_all(y)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{kind:?} {k:?}: {r:?}");
        }
    }
}

#[test]
fn upsample_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.parameter(t(&[1, 1, 1, 1], &[1.0])).unwrap();
    let u = tape.upsample2x(x).unwrap();
    assert_eq!(tape.value(u).data(), &[1.0, 1.0, 1.0, 1.0]);

    let xv = random_tensor(31, &[2, 3, 3, 5], -1.0, 1.0);
    let x2 = tape.constant(xv.clone()).unwrap();
    let u2 = tape.upsample2x(x2).unwrap();
    assert_eq!(tape.shape(u2), &[2, 3, 6, 10]);
    let back = tape.pool2d(PoolKind::Avg, u2, (2, 2), (2, 2)).unwrap();
    assert_eq!(tape.value(back), &xv);

    let s = tape.sum_all(u).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0]);

    let r = grad_check(
        |tape, v| {
            let y = tape.upsample2x(v)?;
            tape.sum_all(y)
        },
        &xv,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9);
    assert!((r.numeric - 4.0).abs() < 1e-8);
}

// ------------------------------------------------------------ properties

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(data in finite_vec(24), axis in 0usize..3) {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 3, 4], data).unwrap()).unwrap();
        let y = tape.softmax(x, axis).unwrap();
        let s = tape.sum(y, &[axis]).unwrap();
        for v in tape.value(s).data() {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layout_involutions_are_bit_exact(data in finite_vec(60)) {
        let xv = Tensor::from_vec(&[1, 3, 4, 5], data).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(xv.clone()).unwrap();
        let r = tape.reshape(x, &[3, 20]).unwrap();
        let r = tape.reshape(r, &[1, 3, 4, 5]).unwrap();
        prop_assert_eq!(tape.value(r), &xv);
        let tt = tape.transpose2d(x).unwrap();
        prop_assert_eq!(tape.shape(tt), &[1, 3, 5, 4]);
        let tt = tape.transpose2d(tt).unwrap();
        prop_assert_eq!(tape.value(tt), &xv);
    }

    #[test]
    fn broadcast_mul_by_ones_is_identity(data in finite_vec(48), which in 0usize..3) {
        let xv = Tensor::from_vec(&[2, 3, 2, 4], data).unwrap();
        let ones_shape: &[usize] = match which {
            0 => &[2, 3, 1, 1],
            1 => &[2, 1, 2, 4],
            _ => &[1],
        };
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(xv.clone()).unwrap();
        let o = tape.constant(Tensor::ones(ones_shape)).unwrap();
        let y = tape.mul(x, o).unwrap();
        prop_assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn forward_on_finite_input_is_finite(data in finite_vec(32)) {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2, 4, 4], data).unwrap()).unwrap();
        let outs = [
            tape.sigmoid(x).unwrap(),
            tape.relu(x).unwrap(),
            tape.softmax(x, 1).unwrap(),
            tape.upsample2x(x).unwrap(),
            tape.pool2d(PoolKind::Max, x, (2, 2), (2, 2)).unwrap(),
            tape.max(x, &[1]).unwrap(),
        ];
        for o in outs {
            prop_assert!(tape.value(o).is_finite());
        }
    }
}
