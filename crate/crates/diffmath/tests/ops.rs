use diffmath::gradcheck::{check_gradients, rel_error};
use diffmath::{Conv2dSpec, DiffError, PadMode, ReduceOp, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

// Contract a tensor to a scalar with fixed, non-uniform weights so every
// output element receives a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: diffmath::Var, seed: u64) -> diffmath::Result<diffmath::Var> {
    let w = random(tape.shape(v), seed);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

#[test]
fn add_is_elementwise() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn exp_derivative_at_zero_is_one() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.0));
    let y = t.exp(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 1.0);
}

#[test]
fn square_and_product_gradients() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(2.0));
    let y = t.param(Tensor::scalar(5.0));
    let z = t.mul(x, y).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 5.0);
    assert_eq!(t.grad(y).unwrap().item(), 2.0);
}

#[test]
fn repeated_backward_accumulates() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 12.0);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn domain_and_shape_errors() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(t.log(z), Err(DiffError::Domain { .. })));
    let one = t.constant(Tensor::full(&[2], 1.0));
    assert!(matches!(t.div(one, z), Err(DiffError::Domain { .. })));
    assert!(matches!(t.div(one, 0.0), Err(DiffError::Domain { .. })));
    let three = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        t.add(one, three),
        Err(DiffError::ShapeMismatch { .. })
    ));
    let m = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        t.matmul(m, m),
        Err(DiffError::ShapeMismatch { .. })
    ));
    assert!(matches!(t.backward(one), Err(DiffError::Contract { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut t = Tape::new();
    let big = t.constant(Tensor::scalar(1000.0));
    assert!(matches!(t.exp(big), Err(DiffError::NonFinite { .. })));
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::from_fn(
        &[3, 3],
        |i| if i % 4 == 0 { 1.0 } else { 0.0 },
    ));
    let a = t.constant(random(&[3, 4], 1));
    let p = t.matmul(eye, a).unwrap();
    assert_eq!(t.value(p), t.value(a));
    let zero = t.constant(Tensor::zeros(&[4, 2]));
    let q = t.matmul(a, zero).unwrap();
    assert!(t.value(q).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_grads_match_finite_differences() {
    let inputs = [random(&[4, 5], 2), random(&[5, 3], 3)];
    let report = check_gradients(&inputs, STEP, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        weighted_sum(t, p, 4)
    })
    .unwrap();
    assert_eq!(report.probes.len(), 35);
    assert!(report.max_rel_err() < OP_TOL, "{:?}", report.worst());
}

#[test]
fn bmm_grads_match_finite_differences() {
    let inputs = [random(&[2, 3, 4], 5), random(&[2, 4, 2], 6)];
    let report = check_gradients(&inputs, STEP, |t, v| {
        let p = t.bmm(v[0], v[1])?;
        weighted_sum(t, p, 7)
    })
    .unwrap();
    assert!(report.max_rel_err() < OP_TOL, "{:?}", report.worst());
}

#[test]
fn elementwise_grads_match_finite_differences() {
    let shape = [3, 4];
    // Binary ops with a same-shape and a broadcast scalar right-hand side.
    let inputs = [random(&shape, 10), positive(&shape, 11), positive(&[1], 12)];
    let report = check_gradients(&inputs, STEP, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[2])?;
        let c = t.mul(b, v[1])?;
        let d = t.div(c, v[1])?;
        let e = t.div(d, v[2])?;
        let f = t.mul(e, 0.7)?;
        weighted_sum(t, f, 13)
    })
    .unwrap();
    assert!(report.max_rel_err() < OP_TOL, "{:?}", report.worst());

    let inputs = [random(&shape, 14), positive(&shape, 15)];
    let report = check_gradients(&inputs, STEP, |t, v| {
        let a = t.exp(v[0])?;
        let b = t.log(v[1])?;
        let c = t.abs(v[0])?;
        let d = t.relu(v[0])?;
        let e = t.clamp(v[0], -0.5, 0.5)?;
        let f = t.sigmoid(v[0])?;
        let mut acc = a;
        for (i, x) in [b, c, d, e, f].into_iter().enumerate() {
            let w = weighted_sum(t, x, 20 + i as u64)?;
            let s = weighted_sum(t, acc, 30 + i as u64)?;
            acc = t.add(s, w)?;
        }
        Ok(acc)
    })
    .unwrap();
    assert!(report.max_rel_err() < OP_TOL, "{:?}", report.worst());
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::new();
    let x = t.constant(random(&[1, 5, 5], 40));
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let spec = Conv2dSpec {
        stride: 1,
        pad: 0,
        mode: PadMode::Zero,
    };
    let y = t.conv2d(x, w, None, spec).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let c = 0.37;
    let x = t.constant(Tensor::full(&[1, 6, 6], c));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let spec = Conv2dSpec {
        stride: 1,
        pad: 1,
        mode: PadMode::Zero,
    };
    let y = t.conv2d(x, w, None, spec).unwrap();
    let v = t.value(y);
    assert_eq!(v.shape(), &[1, 6, 6]);
    assert!((v.data()[2 * 6 + 3] - 9.0 * c).abs() < 1e-15);
    // Corner sees only 4 in-bounds taps under zero padding.
    assert!((v.data()[0] - 4.0 * c).abs() < 1e-15);

    let w2 = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(t.conv2d(x, w2, None, spec).is_err());
}

#[test]
fn conv2d_grads_match_finite_differences() {
    for (mode, stride, seed) in [
        (PadMode::Zero, 1, 50),
        (PadMode::Reflect, 1, 51),
        (PadMode::Zero, 2, 52),
    ] {
        let inputs = [
            random(&[2, 6, 6], seed),
            random(&[3, 2, 3, 3], seed + 100),
            random(&[3], seed + 200),
        ];
        let spec = Conv2dSpec {
            stride,
            pad: 1,
            mode,
        };
        let report = check_gradients(&inputs, STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(t, y, seed + 300)
        })
        .unwrap();
        assert!(
            report.max_rel_err() < OP_TOL,
            "{mode:?}/{stride}: {:?}",
            report.worst()
        );
    }
}

#[test]
fn conv2d_grads_on_large_planes_and_pointwise() {
    // 9x9 output crosses the layout switch used for small planes.
    for (k, pad, stride, size, seed) in [
        (3, 1, 1, 9, 53),
        (1, 0, 1, 9, 54),
        (1, 0, 1, 3, 55),
        (5, 2, 2, 17, 56),
    ] {
        let inputs = [
            random(&[2, size, size], seed),
            random(&[3, 2, k, k], seed + 100),
            random(&[3], seed + 200),
        ];
        let spec = Conv2dSpec {
            stride,
            pad,
            mode: PadMode::Zero,
        };
        let report = check_gradients(&inputs, STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(t, y, seed + 300)
        })
        .unwrap();
        assert!(
            report.max_rel_err() < OP_TOL,
            "k{k} s{stride} {size}: {:?}",
            report.worst()
        );
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    for (size, seed) in [(4, 57), (12, 58)] {
        let mut t = Tape::new();
        let xv = random(&[2, size, size], seed);
        let wv = random(&[3, 2, 3, 3], seed + 1);
        let x = t.constant(xv.clone());
        let w = t.constant(wv.clone());
        let spec = Conv2dSpec {
            stride: 1,
            pad: 1,
            mode: PadMode::Zero,
        };
        let y = t.conv2d(x, w, None, spec).unwrap();
        let (xd, wd) = (xv.data(), wv.data());
        for co in 0..3 {
            for oy in 0..size {
                for ox in 0..size {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < size
                                    && (ix as usize) < size
                                {
                                    acc += wd[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * xd[(ci * size + iy as usize) * size + ix as usize];
                                }
                            }
                        }
                    }
                    let got = t.value(y).data()[(co * size + oy) * size + ox];
                    assert!((got - acc).abs() < 1e-12, "{size}: {got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2]));
    let s = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);

    let x = t.constant(random(&[8, 8], 60));
    let s = t.softmax(x, 1).unwrap();
    for row in t.value(s).data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let shifted = t.add(x, 3.25).unwrap();
    let s2 = t.softmax(shifted, 1).unwrap();
    assert!(t.value(s).max_abs_diff(t.value(s2)) < 1e-15);
}

#[test]
fn softmax_and_log_softmax_grads() {
    for axis in 0..3 {
        let inputs = [random(&[2, 3, 4], 70 + axis as u64)];
        let report = check_gradients(&inputs, STEP, |t, v| {
            let s = t.softmax(v[0], axis)?;
            let l = t.log_softmax(v[0], axis)?;
            let a = weighted_sum(t, s, 80)?;
            let b = weighted_sum(t, l, 81)?;
            t.add(a, b)
        })
        .unwrap();
        assert!(
            report.max_rel_err() < OP_TOL,
            "axis {axis}: {:?}",
            report.worst()
        );
    }
}

#[test]
fn reduce_examples_and_grads() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2], vec![2.0, 4.0]).unwrap());
    let m = t.mean_all(x).unwrap();
    assert_eq!(t.value(m).item(), 3.0);
    let z = t.constant(Tensor::zeros(&[3, 4]));
    let s = t.sum_all(z).unwrap();
    assert_eq!(t.value(s).item(), 0.0);

    // Mean gradient is 1/n everywhere.
    let mut t = Tape::new();
    let x = t.param(random(&[5, 3], 90));
    let m = t.mean_all(x).unwrap();
    t.backward(m).unwrap();
    assert!(t
        .grad(x)
        .unwrap()
        .data()
        .iter()
        .all(|&g| (g - 1.0 / 15.0).abs() < 1e-16));

    for kind in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
        for axis in [None, Some(0), Some(1), Some(2)] {
            let inputs = [random(&[3, 4, 2], 91)];
            let report = check_gradients(&inputs, STEP, |t, v| {
                let r = t.reduce(kind, v[0], axis)?;
                weighted_sum(t, r, 92)
            })
            .unwrap();
            assert!(
                report.max_rel_err() < OP_TOL,
                "{kind:?} {axis:?}: {:?}",
                report.worst()
            );
        }
    }
}

#[test]
fn data_movement_grads() {
    let inputs = [random(&[2, 3, 5], 100), random(&[2, 2, 5], 101)];
    let report = check_gradients(&inputs, STEP, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let n = t.narrow(p, 0, 1, 3)?;
        let r = t.reshape(n, &[3, 10])?;
        let tr = t.transpose(r)?;
        let b = t.param(Tensor::full(&[3], 0.5));
        let ab = t.add_broadcast(tr, b, 1)?;
        let img = t.reshape(ab, &[3, 2, 5])?;
        let up = t.resize_bilinear(img, 5, 9)?;
        weighted_sum(t, up, 102)
    })
    .unwrap();
    assert!(report.max_rel_err() < OP_TOL, "{:?}", report.worst());
}

#[test]
fn tapes_are_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(random(&[2, 6, 6], 110));
        let w = t.param(random(&[4, 2, 3, 3], 111));
        let y = t
            .conv2d(
                x,
                w,
                None,
                Conv2dSpec {
                    stride: 2,
                    pad: 1,
                    mode: PadMode::Reflect,
                },
            )
            .unwrap();
        let s = t.softmax(y, 0).unwrap();
        let l = t.log(s).unwrap();
        let m = t.mean_all(l).unwrap();
        t.backward(m).unwrap();
        (
            t.len(),
            t.value(m).clone(),
            t.grad(x).unwrap().clone(),
            t.grad(w).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.data()[0].to_bits(), b.1.data()[0].to_bits());
    assert!(a
        .2
        .data()
        .iter()
        .zip(b.2.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a
        .3
        .data()
        .iter()
        .zip(b.3.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn rel_error_floor() {
    assert_eq!(rel_error(1.0, 1.0), 0.0);
    assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
}

proptest! {
    #[test]
    fn abs_is_symmetric(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let mut t = Tape::new();
        let n = v.len();
        let x = t.constant(Tensor::new(vec![n], v.clone()).unwrap());
        let neg = t.mul(x, -1.0).unwrap();
        let a = t.abs(x).unwrap();
        let b = t.abs(neg).unwrap();
        prop_assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let x = t.constant(random(&[6, 7], seed));
        let x = t.mul(x, 10.0).unwrap();
        let s = t.softmax(x, 1).unwrap();
        let xs = t.add(x, shift).unwrap();
        let s2 = t.softmax(xs, 1).unwrap();
        for row in t.value(s).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(t.value(s).max_abs_diff(t.value(s2)) < 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_root(seed in 0u64..1000, alpha in -4.0f64..4.0) {
        let grads = |scale: f64| {
            let mut t = Tape::new();
            let x = t.param(random(&[3, 4], seed));
            let w = t.constant(random(&[4, 2], seed + 1));
            let y = t.matmul(x, w).unwrap();
            let y = t.sigmoid(y).unwrap();
            let l = t.mean_all(y).unwrap();
            let l = t.mul(l, scale).unwrap();
            t.backward(l).unwrap();
            t.grad(x).unwrap().clone()
        };
        let base = grads(1.0);
        let scaled = grads(alpha);
        for (a, b) in base.data().iter().zip(scaled.data()) {
            prop_assert!((a * alpha - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn every_primitive_passes_the_op_suite() {
    let checks = diffmath::gradcheck::op_suite(STEP).unwrap();
    assert!(checks.len() >= 30);
    for c in &checks {
        assert!(c.probes > 0, "{}", c.name);
        assert!(c.max_rel_err < OP_TOL, "{}: {}", c.name, c.max_rel_err);
    }
}
