use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Scalar-valued function of one tensor through the tape, plus its analytic gradient.
fn value_and_grad(
    x: &Tensor,
    build: &dyn Fn(&mut Tape, Var) -> crate::Result<Var>,
) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.value(loss).item(), g.get(xv).unwrap().clone())
}

fn check_against_fd(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> crate::Result<Var>, tol: f64) {
    let (_, analytic) = value_and_grad(x, build);
    let numeric = finite_diff_gradient(
        |p| evaluate(|t| {
            let v = t.leaf(p.clone());
            build(t, v)
        })
        .unwrap()
        .item(),
        x,
        DEFAULT_STEP,
    );
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let err = relative_error(*a, *n, 1e-6);
        assert!(err <= tol, "analytic {a} vs numeric {n} (rel {err})");
    }
}

/// Random weights fixed for the lifetime of a test, mixed into a scalar.
fn probe(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn contract(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = t.constant(probe(t.value(y).shape(), seed));
    t.dot(y, w)
}

#[test]
fn matmul_identity_and_hand_cases() {
    let eval = |a: Tensor, b: Tensor| {
        evaluate(|t| {
            let (a, b) = (t.constant(a), t.constant(b));
            t.matmul(a, b)
        })
        .unwrap()
    };
    let b = mat(&[&[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(eval(mat(&[&[1.0, 0.0], &[0.0, 1.0]]), b.clone()), b);
    assert_eq!(eval(mat(&[&[1.0, 2.0]]), mat(&[&[3.0], &[4.0]])).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng(2));
    let c = evaluate(|t| {
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        t.matmul(a, b)
    })
    .unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - s).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(crate::Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn row_l2_norm_cases() {
    let norm = |x: Tensor, eps: f64| {
        evaluate(|t| {
            let x = t.constant(x);
            t.row_l2_norm(x, eps)
        })
        .unwrap()
    };
    assert_eq!(norm(mat(&[&[3.0, 4.0]]), 0.0).data(), &[5.0]);
    let z = norm(mat(&[&[0.0, 0.0, 0.0]]), 1e-12);
    assert!((z.data()[0] - 1e-6).abs() < 1e-18);

    let x = Tensor::randn(&[2, 8], 1.0, &mut rng(3));
    let out = norm(x.clone(), NORM_EPS);
    assert_eq!(out.shape(), &[2]);
    for i in 0..2 {
        let mut s = 0.0;
        for j in 0..8 {
            s += x.get(i, j) * x.get(i, j);
        }
        assert!((out.data()[i] - (s + NORM_EPS).sqrt()).abs() <= 1e-12);
    }
}

#[test]
fn elementwise_cases() {
    let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
    let r = evaluate(|t| {
        let x = t.constant(x);
        Ok(t.relu(x))
    })
    .unwrap();
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);

    let s = evaluate(|t| {
        let x = t.constant(Tensor::scalar(0.0));
        Ok(t.silu(x))
    })
    .unwrap();
    assert_eq!(s.item(), 0.0);

    let c = 3.7;
    let n = evaluate(|t| {
        let x = t.constant(Tensor::full(&[1, 5], c));
        let g = t.constant(Tensor::full(&[5], 1.0));
        t.rmsnorm_rows(x, Some(g), RMS_EPS)
    })
    .unwrap();
    for v in n.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn elementwise_rejects_incompatible_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, b), Err(crate::Error::Dimension { .. })));
    let s = t.constant(Tensor::scalar(2.0));
    let out = t.mul(a, s).unwrap();
    assert_eq!(t.value(out).shape(), &[2, 3]);
}

#[test]
fn detach_freezes_one_factor() {
    // d/dx [detach(x)·x] at 3 = 3
    let (_, g) = value_and_grad(&Tensor::scalar(3.0), &|t, x| {
        let d = t.detach(x);
        t.mul(d, x)
    });
    assert_eq!(g.item(), 3.0);
    // d/dx [detach(x)²] = 0
    let (_, g) = value_and_grad(&Tensor::scalar(3.0), &|t, x| {
        let d = t.detach(x);
        t.mul(d, d)
    });
    assert_eq!(g.item(), 0.0);
}

#[test]
fn backward_simple_cases() {
    let (v, g) = value_and_grad(&Tensor::scalar(3.0), &|t, x| t.mul(x, x));
    assert_eq!(v, 9.0);
    assert_eq!(g.item(), 6.0);

    // loss = sum(x·W): dx[i,j] = Σ_n W[j,n]
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng(4));
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng(5));
    let (_, g) = value_and_grad(&x, &|t, x| {
        let w = t.constant(w.clone());
        let y = t.matmul(x, w)?;
        Ok(t.sum(y))
    });
    for i in 0..2 {
        for j in 0..3 {
            let row_sum: f64 = (0..4).map(|n| w.get(j, n)).sum();
            assert!((g.get(i, j) - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let unused = t.leaf(Tensor::zeros(&[3]));
    let loss = t.mul(x, x).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn finite_diff_oracle_cases() {
    let g = finite_diff_gradient(|x| x.item() * x.item(), &Tensor::scalar(3.0), 1e-5);
    assert!((g.item() - 6.0).abs() < 1e-8);

    let g = finite_diff_gradient(
        |x| x.data().iter().map(|v| v.max(0.0)).sum(),
        &Tensor::vector(vec![2.0, -2.0]),
        1e-5,
    );
    assert!((g.data()[0] - 1.0).abs() < 1e-9 && g.data()[1].abs() < 1e-12);

    let g = finite_diff_gradient(
        |x| (x.data()[0].powi(2) + x.data()[1].powi(2)).sqrt(),
        &Tensor::vector(vec![3.0, 4.0]),
        1e-5,
    );
    assert!((g.data()[0] - 0.6).abs() < 1e-9 && (g.data()[1] - 0.8).abs() < 1e-9);
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let tol = 1e-5;
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng(10));
    // Keep ReLU inputs well away from the kink.
    let x_relu = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });

    check_against_fd(&x, &|t, x| {
        let w = t.constant(probe(&[6, 3], 11));
        let y = t.matmul(x, w)?;
        contract(t, y, 12)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let a = t.constant(probe(&[2, 4], 13));
        let y = t.matmul(a, x)?;
        contract(t, y, 14)
    }, tol);
    check_against_fd(&x_relu, &|t, x| {
        let y = t.relu(x);
        contract(t, y, 15)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.silu(x);
        contract(t, y, 16)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.scale(x, -2.5);
        contract(t, y, 17)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let o = t.constant(probe(&[4, 6], 18));
        let a = t.mul(x, o)?;
        let b = t.sub(a, x)?;
        let c = t.add(b, x)?;
        let y = t.mul(c, x)?;
        contract(t, y, 19)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let g = t.constant(probe(&[6], 20));
        let y = t.rmsnorm_rows(x, Some(g), RMS_EPS)?;
        contract(t, y, 21)
    }, tol);
    check_against_fd(&Tensor::randn(&[6], 1.0, &mut rng(22)), &|t, g| {
        let x = t.constant(probe(&[4, 6], 23));
        let y = t.rmsnorm_rows(x, Some(g), RMS_EPS)?;
        contract(t, y, 24)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.group_l2_norm(x, 3, NORM_EPS)?;
        contract(t, y, 25)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.row_l2_norm(x, NORM_EPS)?;
        contract(t, y, 26)
    }, tol);
    check_against_fd(&Tensor::randn(&[6], 1.0, &mut rng(27)), &|t, b| {
        let x = t.constant(probe(&[4, 6], 28));
        let y = t.sub_bias(x, b)?;
        let z = t.mul(y, y)?;
        contract(t, z, 29)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let a = t.col_mean(x)?;
        let b = t.row_mean(x)?;
        let c = t.mean(x);
        let s = t.sum(x);
        let d = t.dot(a, a)?;
        let e = t.dot(b, b)?;
        let f = t.mul(c, s)?;
        let g = t.add(d, e)?;
        t.add(f, g)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let o = t.constant(probe(&[4, 2], 30));
        let c = t.concat_cols(&[x, o, x])?;
        contract(t, c, 31)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let g = t.gather_block(x, &[3, 0, 3], 2, 3)?;
        contract(t, g, 32)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let e = t.embedding(x, &[1, 1, 3, 0, 2])?;
        contract(t, e, 33)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.softmax_rows(x)?;
        contract(t, y, 34)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.topk_softmax(x, 2)?;
        contract(t, y, 35)
    }, tol);
    check_against_fd(&x, &|t, x| {
        let y = t.transpose(x)?;
        contract(t, y, 36)
    }, tol);
    check_against_fd(&x, &|t, x| t.cross_entropy(x, &[0, 5, 2, 2]), tol);
}

#[test]
fn expert_combine_matches_finite_differences() {
    let w = Tensor::uniform(&[5, 3], 0.1, 1.0, &mut rng(40));
    let y0 = Tensor::randn(&[2, 4], 1.0, &mut rng(41));
    let y2 = Tensor::randn(&[3, 4], 1.0, &mut rng(42));
    let build = |t: &mut Tape, w: Var, y0: Var, y2: Var| -> crate::Result<Var> {
        let parts = vec![
            ExpertPart { expert: 0, output: y0, rows: vec![1, 4] },
            ExpertPart { expert: 2, output: y2, rows: vec![0, 1, 3] },
        ];
        let out = t.expert_combine(w, parts, 4)?;
        contract(t, out, 43)
    };
    check_against_fd(&w, &|t, w| {
        let (a, b) = (t.constant(y0.clone()), t.constant(y2.clone()));
        build(t, w, a, b)
    }, 1e-5);
    check_against_fd(&y2, &|t, y2| {
        let (a, b) = (t.constant(w.clone()), t.constant(y0.clone()));
        build(t, a, b, y2)
    }, 1e-5);
}

#[test]
fn causal_attention_matches_finite_differences() {
    let (n_seq, seq, d) = (2, 5, 4);
    let q = Tensor::randn(&[n_seq * seq, d], 1.0, &mut rng(50));
    let k = Tensor::randn(&[n_seq * seq, d], 1.0, &mut rng(51));
    let v = Tensor::randn(&[n_seq * seq, d], 1.0, &mut rng(52));
    for which in 0..3 {
        let x = [&q, &k, &v][which].clone();
        check_against_fd(&x, &|t, x| {
            let mut ins = [q.clone(), k.clone(), v.clone()].map(|m| t.constant(m));
            ins[which] = x;
            let o = t.causal_attention(ins[0], ins[1], ins[2], seq)?;
            contract(t, o, 53)
        }, 1e-5);
    }
}

#[test]
fn causal_attention_ignores_future_rows() {
    let seq = 4;
    let base = Tensor::randn(&[seq, 3], 1.0, &mut rng(60));
    let run = |v: &Tensor| {
        evaluate(|t| {
            let q = t.constant(base.clone());
            let k = t.constant(base.clone());
            let v = t.constant(v.clone());
            t.causal_attention(q, k, v, seq)
        })
        .unwrap()
    };
    let mut changed = base.clone();
    for c in 0..3 {
        changed.data_mut()[3 * 3 + c] += 10.0;
    }
    let (a, b) = (run(&base), run(&changed));
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(2), b.row(2));
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let x = Tensor::randn(&[8, 6], 1.0, &mut rng(70));
    let build = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let w = t.constant(probe(&[6, 6], 71));
        let h = t.matmul(x, w)?;
        let h = t.silu(h);
        let q = t.causal_attention(h, h, x, 4)?;
        let s = t.softmax_rows(q)?;
        contract(t, s, 72)
    };
    let (_, g1) = value_and_grad(&x, &build);
    let (_, g2) = value_and_grad(&x, &build);
    assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn detached_branch_matches_frozen_finite_differences() {
    // loss = Σ detach(silu(x)) ⊙ x²; freezing silu(x) at its forward value
    // must reproduce the analytic gradient.
    let x = Tensor::randn(&[3, 3], 1.0, &mut rng(80));
    let frozen = x.map(|v| v * super::kernels::sigmoid(v));
    let (_, analytic) = value_and_grad(&x, &|t, x| {
        let s = t.silu(x);
        let d = t.detach(s);
        let sq = t.mul(x, x)?;
        t.dot(d, sq)
    });
    let numeric = finite_diff_gradient(
        |p| p.data().iter().zip(frozen.data()).map(|(v, f)| f * v * v).sum(),
        &x,
        DEFAULT_STEP,
    );
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(relative_error(*a, *n, 1e-6) < 1e-6);
    }
}

#[test]
fn custom_op_uses_supplied_backward() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let y = t.custom(
        &[x],
        Tensor::scalar(8.0),
        Box::new(|g, ins, _| vec![Tensor::scalar(g.item() * 3.0 * ins[0].item().powi(2))]),
    );
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 12.0);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn composed_graph_gradients_match_fd(seed in 0u64..10_000) {
            let x = Tensor::randn(&[3, 4], 1.0, &mut rng(seed));
            let w = probe(&[4, 4], seed + 1);
            let (_, analytic) = value_and_grad(&x, &|t, x| {
                let w = t.constant(w.clone());
                let h = t.matmul(x, w)?;
                let h = t.silu(h);
                let n = t.rmsnorm_rows(h, None, RMS_EPS)?;
                let s = t.group_l2_norm(n, 2, NORM_EPS)?;
                contract(t, s, seed + 2)
            });
            let numeric = finite_diff_gradient(
                |p| evaluate(|t| {
                    let x = t.constant(p.clone());
                    let w = t.constant(w.clone());
                    let h = t.matmul(x, w)?;
                    let h = t.silu(h);
                    let n = t.rmsnorm_rows(h, None, RMS_EPS)?;
                    let s = t.group_l2_norm(n, 2, NORM_EPS)?;
                    contract(t, s, seed + 2)
                }).unwrap().item(),
                &x,
                DEFAULT_STEP,
            );
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                prop_assert!(relative_error(*a, *n, 1e-6) <= 1e-5, "{a} vs {n}");
            }
        }
    }
}
