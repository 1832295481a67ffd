use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// sum(out * r) for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabc)));
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = tape.constant(t64(&[1, 1, 1, 1], &[1.]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv_all_ones_kernel_sums() {
    let mut tape = Tape::new();
    let x = tape.constant(t64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[45.0]);
}

#[test]
fn conv_output_extent_and_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 7, 9]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 4, 5]);
    let bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, bad, None, 1, 0), Err(Error::Dimension(_))));
    let big = tape.constant(Tensor::zeros(&[4, 3, 10, 3]));
    assert!(matches!(tape.conv2d(x, big, None, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(0);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[4], 0.5, &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let errs = grad_check_inputs(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(tape, y, 0)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-4,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-5, "stride {stride} pad {pad}: rel err {e}");
        }
    }
}

#[test]
fn bn_train_normalizes_two_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2, 1, 1, 1], &[1.0, 3.0]));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut st = BnState::new(1);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Train).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 0.999995).abs() < 1e-6, "{out:?}");
    assert!((out[1] - 0.999995).abs() < 1e-6, "{out:?}");
}

#[test]
fn bn_eval_with_unit_stats_is_identity() {
    let mut tape = Tape::<f64>::new();
    let xs = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng(5));
    let x = tape.constant(xs.clone());
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let mut st = BnState::new(2);
    st.epsilon = 1e-12;
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Eval).unwrap();
    assert!(tape.value(y).max_abs_diff(&xs) < 1e-4);
    assert_eq!(st, {
        let mut s = BnState::new(2);
        s.epsilon = 1e-12;
        s
    });
}

#[test]
fn bn_running_update_uses_momentum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2, 1, 1, 1], &[1.0, 3.0]));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut st = BnState::new(1);
    st.running_var = vec![1.0];
    tape.batch_norm(x, g, b, &mut st, Mode::Train).unwrap();
    assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
    // biased batch variance is 1, so the running estimate stays at 1
    assert!((st.running_var[0] - 1.0).abs() < 1e-12);
}

#[test]
fn bn_rejects_degenerate_batch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let mut st = BnState::new(2);
    let err = tape.batch_norm(x, g, b, &mut st, Mode::Train).unwrap_err();
    assert!(matches!(err, Error::DegenerateBatch(_)));
    // eval mode has no such restriction
    assert!(tape.batch_norm(x, g, b, &mut st, Mode::Eval).is_ok());
}

#[test]
fn bn_train_output_is_standardized() {
    let mut tape = Tape::<f64>::new();
    let xs = Tensor::randn(&[4, 3, 5, 5], 3.0, &mut rng(9)).map(|v| v + 7.0);
    let x = tape.constant(xs);
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut st = BnState::new(3);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Train).unwrap();
    let data = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| data[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn bn_gradients_match_finite_differences() {
    let mut r = rng(3);
    let x = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let g = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
    let b = Tensor::randn(&[2], 1.0, &mut r);
    for mode in [Mode::Train, Mode::Eval] {
        let errs = grad_check_inputs(
            |tape, v| {
                let mut st = BnState::new(2);
                st.running_mean = vec![0.3, -0.2];
                st.running_var = vec![1.7, 0.6];
                let y = tape.batch_norm(v[0], v[1], v[2], &mut st, mode)?;
                project(tape, y, 1)
            },
            &[x.clone(), g.clone(), b.clone()],
            1e-4,
        )
        .unwrap();
        for e in errs {
            assert!(e < 1e-5, "{mode:?}: {e}");
        }
    }
}

#[test]
fn relu_gap_linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 1, 3], &[-1., 0., 2.]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0., 2.]);

    let x = tape.constant(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1]);
    assert_eq!(tape.value(y).data(), &[2.5]);

    let xs = t64(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]);
    let x = tape.constant(xs.clone());
    let w = tape.constant(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y), &xs);

    let bad = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.linear(x, w, bad), Err(Error::Dimension(_))));
    assert!(matches!(tape.global_avg_pool(b), Err(Error::Dimension(_))));
}

#[test]
fn linear_relu_gap_affine_gradients() {
    let mut r = rng(11);
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    for e in grad_check_inputs(
        |tape, v| {
            let y = tape.linear(v[0], v[1], v[2])?;
            project(tape, y, 2)
        },
        &[x, w, b],
        1e-4,
    )
    .unwrap()
    {
        assert!(e < 1e-5);
    }

    // keep activations away from the kink
    let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let e = grad_check(|tape, x| {
        let y = tape.relu(x)?;
        project(tape, y, 3)
    }, &x, 1e-4)
    .unwrap();
    assert!(e < 1e-5);
    let e = grad_check(|tape, x| {
        let y = tape.global_avg_pool(x)?;
        project(tape, y, 4)
    }, &x, 1e-4)
    .unwrap();
    assert!(e < 1e-5);
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(&[1, 3]));
    let loss = tape.softmax_cross_entropy(l, &[1]).unwrap();
    assert!((tape.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);

    let l = tape.constant(t64(&[2, 3], &[30., 0., 0., 0., 0., 30.]));
    let loss = tape.softmax_cross_entropy(l, &[0, 2]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-9);

    assert!(matches!(tape.softmax_cross_entropy(l, &[0, 3]), Err(Error::Index(_))));
    assert!(matches!(tape.softmax_cross_entropy(l, &[0]), Err(Error::Dimension(_))));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = Tensor::randn(&[4, 5], 2.0, &mut rng(1));
    let labels = [0, 3, 4, 1];
    let e = grad_check(|tape, x| tape.softmax_cross_entropy(x, &labels), &logits, 1e-4).unwrap();
    assert!(e < 1e-5, "{e}");

    // closed form: (softmax - onehot) / N
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let loss = tape.softmax_cross_entropy(x, &labels).unwrap();
    let g = tape.backward(loss).unwrap();
    let p = softmax_rows(logits.data(), 5);
    for (i, &gv) in g.get(x).unwrap().data().iter().enumerate() {
        let onehot = if labels[i / 5] == i % 5 { 1.0 } else { 0.0 };
        assert!((gv - (p[i] - onehot) / 4.0).abs() < 1e-15);
    }
}

#[test]
fn backward_linear_chain() {
    // y = sum(gamma * x + beta), x = [1, 2], gamma = 2, beta = 0
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[1, 1, 1, 2], &[1., 2.]), true);
    let g = tape.leaf(t64(&[1], &[2.]), true);
    let b = tape.leaf(t64(&[1], &[0.]), true);
    let y = tape.channel_affine(x, g, b).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(g).unwrap().data(), &[3.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn detached_tensor_gets_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1., 2.]), true);
    let unused = tape.leaf(t64(&[2], &[5., 6.]), true);
    let frozen = tape.leaf(t64(&[2], &[3., 4.]), false);
    let p = tape.mul(x, frozen).unwrap();
    let s = tape.sum(p).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.contains(x));
    assert!(!grads.contains(unused));
    assert!(!grads.contains(frozen));
    assert_eq!(grads.len(), 1);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1., 2.]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    tape.reset();
    let x = tape.leaf(t64(&[2], &[1., 2.]), true);
    let s = tape.sum(x).unwrap();
    assert!(tape.backward(s).is_ok());
}

#[test]
fn gradients_accumulate_over_branches() {
    let xs = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng(21));
    let single = {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xs.clone(), true);
        let y = project(&mut tape, x, 7).unwrap();
        tape.backward(y).unwrap().take(x).unwrap()
    };
    for k in 2..=4usize {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xs.clone(), true);
        let mut acc = x;
        for _ in 1..k {
            acc = tape.add(acc, x).unwrap();
        }
        let y = project(&mut tape, acc, 7).unwrap();
        let g = tape.backward(y).unwrap().take(x).unwrap();
        let scaled = single.map(|v| v * k as f64);
        assert!(g.max_abs_diff(&scaled) < 1e-12);
    }
}

#[test]
fn composite_conv_bn_relu_matches_finite_differences() {
    let mut r = rng(4);
    let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let g = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let b = Tensor::randn(&[3], 0.5, &mut r);
    let errs = grad_check_inputs(
        |tape, v| {
            let c = tape.conv2d(v[0], v[1], None, 1, 1)?;
            let mut st = BnState::new(3);
            let n = tape.batch_norm(c, v[2], v[3], &mut st, Mode::Train)?;
            let a = tape.relu(n)?;
            project(tape, a, 5)
        },
        &[x, w, g, b],
        1e-6,
    )
    .unwrap();
    for e in errs {
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn grad_check_simple_functions() {
    let x = t64(&[2], &[1.0, -2.0]);
    let e = grad_check(|tape, x| {
        let sq = tape.mul(x, x)?;
        tape.sum(sq)
    }, &x, 1e-4)
    .unwrap();
    assert!(e < 1e-8, "{e}");

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(xv).unwrap().data(), &[2.0, -4.0]);

    let x = t64(&[1, 1, 1, 3], &[0.5, 1.0, 2.0]);
    let e = grad_check(|tape, x| {
        let r = tape.relu(x)?;
        tape.sum(r)
    }, &x, 1e-4)
    .unwrap();
    assert!(e < 1e-8);
}

#[test]
fn grad_check_detects_inconsistent_closure() {
    let calls = std::cell::Cell::new(0u32);
    let x = t64(&[1], &[1.0]);
    let err = grad_check(
        |tape, x| {
            calls.set(calls.get() + 1);
            let c = tape.constant(t64(&[1], &[calls.get() as f64]));
            let p = tape.mul(x, c)?;
            tape.sum(p)
        },
        &x,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::InconsistentEvaluation(_)));
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::full(&[2], f32::MAX));
    assert!(matches!(tape.add(a, a), Err(Error::Numeric(_))));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(8);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r), true);
        let w = tape.leaf(Tensor::randn(&[4, 3, 3, 3], 0.3, &mut r), true);
        let c = tape.conv2d(x, w, None, 2, 1).unwrap();
        let p = tape.global_avg_pool(c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(c).clone(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
