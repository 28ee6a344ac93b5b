use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const OP_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` with fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn check<F>(shape: &[usize], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    grad_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, seed + 1000)
        },
        &x,
        GRAD_CHECK_STEP,
    )
    .unwrap()
}

const SHAPES: [&[usize]; 5] = [&[3], &[2, 3], &[4, 5], &[2, 3, 4], &[1, 7]];

#[test]
fn elementwise_ops_pass_grad_check() {
    for (s, shape) in SHAPES.iter().enumerate() {
        let seed = s as u64;
        let err = [
            check(shape, seed, |t, x| Ok(t.relu(x))),
            check(shape, seed, |t, x| Ok(t.gelu(x))),
            check(shape, seed, |t, x| Ok(t.sigmoid(x))),
            check(shape, seed, |t, x| Ok(t.tanh(x))),
            check(shape, seed, |t, x| Ok(t.abs(x))),
            check(shape, seed, |t, x| Ok(t.square(x))),
            check(shape, seed, |t, x| Ok(t.exp(x))),
            check(shape, seed, |t, x| Ok(t.smooth_l1(x, 0.5))),
            check(shape, seed, |t, x| {
                let sq = t.square(x);
                let p = t.add_scalar(sq, 0.5);
                Ok(t.sqrt(p))
            }),
            check(shape, seed, |t, x| Ok(t.scale(x, -2.5))),
        ];
        for (i, e) in err.iter().enumerate() {
            assert!(*e <= OP_TOL, "unary op {i} on {shape:?}: {e}");
        }
    }
}

#[test]
fn binary_ops_pass_grad_check_on_both_operands() {
    for (s, shape) in SHAPES.iter().enumerate() {
        let seed = 10 + s as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let other = random(shape, &mut rng);
        let positive = Tensor::from_fn(shape, |_| rng.gen_range(0.5..2.0));
        let scalar = Tensor::scalar(rng.gen_range(0.5..2.0));
        for kind in 0..4 {
            let op = |t: &mut Tape, a: Var, b: Var| match kind {
                0 => t.add(a, b),
                1 => t.sub(a, b),
                2 => t.mul(a, b),
                _ => t.div(a, b),
            };
            let rhs = if kind == 3 { &positive } else { &other };
            let e_left = check(shape, seed, |t, x| {
                let b = t.constant(rhs.clone());
                op(t, x, b)
            });
            assert!(e_left <= OP_TOL, "binary {kind} lhs {shape:?}: {e_left}");
            let e_right = grad_check(
                |t, b| {
                    let a = t.constant(other.clone());
                    let y = op(t, a, b)?;
                    weighted_sum(t, y, seed)
                },
                rhs,
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(e_right <= OP_TOL, "binary {kind} rhs {shape:?}: {e_right}");
            // scalar-tensor broadcast
            let e_scalar = grad_check(
                |t, b| {
                    let a = t.constant(other.clone());
                    let y = op(t, a, b)?;
                    weighted_sum(t, y, seed)
                },
                &scalar,
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(e_scalar <= OP_TOL, "binary {kind} scalar {shape:?}: {e_scalar}");
        }
    }
}

#[test]
fn matmul_passes_grad_check() {
    let cases: [(&[usize], &[usize]); 5] = [
        (&[2, 3], &[3, 4]),
        (&[1, 5], &[5, 1]),
        (&[4, 4], &[4, 2]),
        (&[2, 3, 4], &[2, 4, 2]),
        (&[3, 2, 3], &[3, 5]),
    ];
    for (s, (sa, sb)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s as u64);
        let a = random(sa, &mut rng);
        let b = random(sb, &mut rng);
        let ea = grad_check(
            |t, x| {
                let bv = t.constant(b.clone());
                let y = t.matmul(x, bv)?;
                weighted_sum(t, y, 5)
            },
            &a,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        let eb = grad_check(
            |t, x| {
                let av = t.constant(a.clone());
                let y = t.matmul(av, x)?;
                weighted_sum(t, y, 5)
            },
            &b,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(ea <= OP_TOL && eb <= OP_TOL, "matmul {sa:?}x{sb:?}: {ea} {eb}");
    }
}

#[test]
fn structural_ops_pass_grad_check() {
    let shapes: [&[usize]; 5] = [&[2, 3], &[3, 4], &[2, 3, 4], &[4, 2, 2], &[3, 3, 2]];
    for (s, shape) in shapes.iter().enumerate() {
        let seed = 200 + s as u64;
        let rank = shape.len();
        let n: usize = shape.iter().product();
        let errs = [
            check(shape, seed, |t, x| t.transpose(x, 0, rank - 1)),
            check(shape, seed, |t, x| t.reshape(x, &[n])),
            check(shape, seed, |t, x| {
                let y = t.square(x);
                t.concat(&[x, y], rank - 1)
            }),
            check(shape, seed, |t, x| {
                let y = t.tanh(x);
                t.concat(&[y, x], 0)
            }),
            check(shape, seed, |t, x| t.slice(x, 0, 1, shape[0])),
            check(shape, seed, |t, x| t.slice(x, rank - 1, 0, 1)),
            check(shape, seed, |t, x| t.sum_axis(x, 0)),
            check(shape, seed, |t, x| t.mean_axis(x, rank - 1)),
            check(shape, seed, |t, x| {
                let mut target = vec![2];
                target.extend_from_slice(shape);
                t.expand(x, &target)
            }),
            check(shape, seed, |t, x| Ok(t.mean_all(x))),
        ];
        for (i, e) in errs.iter().enumerate() {
            assert!(*e <= OP_TOL, "structural op {i} on {shape:?}: {e}");
        }
    }
}

#[test]
fn softmax_and_layer_norm_pass_grad_check() {
    let shapes: [&[usize]; 5] = [&[4], &[2, 5], &[3, 3], &[2, 2, 6], &[1, 8]];
    for (s, shape) in shapes.iter().enumerate() {
        let seed = 300 + s as u64;
        let last = *shape.last().unwrap();
        let mut mask = Tensor::zeros(&[last]);
        mask.data_mut()[last - 1] = MASK_BLOCKED;
        let e1 = check(shape, seed, |t, x| t.softmax_lastaxis(x, None));
        let e2 = check(shape, seed, |t, x| t.softmax_lastaxis(x, Some(&mask)));
        let e3 = check(shape, seed, |t, x| t.layer_norm_lastaxis(x, 1e-5));
        assert!(
            e1 <= OP_TOL && e2 <= OP_TOL && e3 <= OP_TOL,
            "{shape:?}: {e1} {e2} {e3}"
        );
    }
}

#[test]
fn convolutions_and_propagation_pass_grad_check() {
    let cases = [
        (3, 5, 2, 3, 2),
        (1, 3, 1, 1, 3),
        (4, 6, 3, 2, 2),
        (2, 4, 2, 4, 1),
        (5, 7, 1, 3, 3),
    ];
    for (s, &(nodes, time, c_in, c_out, k)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + s as u64);
        let x = random(&[nodes, time, c_in], &mut rng);
        let w = random(&[k, c_in, c_out], &mut rng);
        let b = random(&[c_out], &mut rng);
        let f_x = |t: &mut Tape, xv: Var| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv1d_time(xv, wv, Some(bv))?;
            weighted_sum(t, y, 1)
        };
        let f_w = |t: &mut Tape, wv: Var| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let y = t.conv1d_time(xv, wv, Some(bv))?;
            weighted_sum(t, y, 1)
        };
        let f_b = |t: &mut Tape, bv: Var| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv1d_time(xv, wv, Some(bv))?;
            weighted_sum(t, y, 1)
        };
        for e in [
            grad_check(f_x, &x, GRAD_CHECK_STEP).unwrap(),
            grad_check(f_w, &w, GRAD_CHECK_STEP).unwrap(),
            grad_check(f_b, &b, GRAD_CHECK_STEP).unwrap(),
        ] {
            assert!(e <= OP_TOL, "conv1d case {s}: {e}");
        }
    }

    let sobel = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let shapes: [&[usize]; 5] = [&[3, 3], &[4, 5], &[2, 4, 4], &[5, 3], &[2, 2, 3, 6]];
    for (s, shape) in shapes.iter().enumerate() {
        let e = check(shape, 500 + s as u64, |t, x| t.fixed_kernel_conv2d(x, sobel));
        assert!(e <= OP_TOL, "conv2d {shape:?}: {e}");
    }

    for (s, nodes) in [2usize, 3, 5, 6, 9].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + s as u64);
        // random sparse matrix with a few entries per row
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for _ in 0..nodes {
            for j in 0..nodes {
                if rng.gen_bool(0.5) {
                    col_idx.push(j);
                    values.push(rng.gen_range(-1.0..1.0));
                }
            }
            row_ptr.push(col_idx.len());
        }
        let adj = Rc::new(SparseMatrix {
            rows: nodes,
            cols: nodes,
            row_ptr,
            col_idx,
            values,
        });
        let e = check(&[nodes, 3], 700 + s as u64, |t, x| t.graph_propagate(x, &adj));
        assert!(e <= OP_TOL, "graph_propagate {nodes}: {e}");
    }
}

#[test]
fn softmax_full_mask_is_one_hot() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let mask = Tensor::new(&[2], vec![0.0, f64::NEG_INFINITY]).unwrap();
    let y = tape.softmax_lastaxis(x, Some(&mask)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn masked_softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[5, 6], &mut rng);
    let mask = Tensor::from_fn(&[5, 6], |i| if (i % 6) > (i / 6) { MASK_BLOCKED } else { 0.0 });
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.softmax_lastaxis(xv, Some(&mask)).unwrap();
    for (r, row) in tape.value(y).data().chunks(6).enumerate() {
        let allowed: f64 = row[..=r].iter().sum();
        assert!((allowed - 1.0).abs() < 1e-12);
        assert!(row[r + 1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 4], 3.5));
    let y = tape.layer_norm_lastaxis(x, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let (iv, av) = (tape.constant(eye), tape.constant(a.clone()));
    let y = tape.matmul(iv, av).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn square_gradient_by_hand() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[1], vec![3.0]).unwrap());
    let sq = tape.square(x);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let y = tape.add(x, x).unwrap();
    let w = tape.constant(Tensor::new(&[2], vec![0.5, 3.0]).unwrap());
    let p = tape.mul(y, w).unwrap();
    let loss = tape.sum_all(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 6.0]);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[3], 1.0));
    let unused = tape.param(Tensor::full(&[2, 2], 4.0));
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0; 4]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[3], 1.0));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn affine_function_grad_check_is_exact() {
    let x = Tensor::new(&[4], vec![0.1, -0.3, 2.0, 5.0]).unwrap();
    let err = grad_check(
        |t, v| {
            let s = t.scale(v, 0.75);
            let s = t.add_scalar(s, 2.0);
            Ok(t.sum_all(s))
        },
        &x,
        GRAD_CHECK_STEP,
    )
    .unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random(&[6, 5], &mut rng);
        let b = random(&[5, 5], &mut rng);
        let mut tape = Tape::new();
        let av = tape.param(a);
        let bv = tape.param(b);
        let y = tape.matmul(av, bv).unwrap();
        let y = tape.softmax_lastaxis(y, None).unwrap();
        let y = tape.layer_norm_lastaxis(y, 1e-5).unwrap();
        let loss = weighted_sum(&mut tape, y, 8).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).item(), tape.grad(av).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}
