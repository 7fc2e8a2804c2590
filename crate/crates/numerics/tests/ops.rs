use m2curl_numerics::{
    checkpoint, grad_check, Binding, Conv2d, Linear, Mlp, Module, NumericsError, Parameter, Tape,
    Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn param(name: &str, shape: &[usize], data: Vec<f64>) -> Parameter {
    Parameter::new(name, Tensor::new(shape, data).unwrap())
}

fn affine_out(w: &Parameter, b: &Parameter, x: Vec<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let n = x.len();
    let x = tape.constant(Tensor::new(&[1, n], x).unwrap()).unwrap();
    let (wv, bv) = (tape.param(w).unwrap(), tape.param(b).unwrap());
    let y = tape.affine(x, wv, bv).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn affine_identity_passes_input_through() {
    let w = Parameter::new("w", Tensor::identity(2));
    let b = param("b", &[2], vec![0.0, 0.0]);
    assert_eq!(affine_out(&w, &b, vec![3.0, -1.0]), vec![3.0, -1.0]);
}

#[test]
fn affine_matches_hand_multiply() {
    let w = param("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = param("b", &[2], vec![1.0, 1.0]);
    // [1,1]·W = [1+3, 2+4]
    assert_eq!(affine_out(&w, &b, vec![1.0, 1.0]), vec![5.0, 7.0]);
}

#[test]
fn affine_zero_weight_returns_bias() {
    let w = param("w", &[3, 1], vec![0.0; 3]);
    let b = param("b", &[1], vec![-2.5]);
    assert_eq!(affine_out(&w, &b, vec![9.0, -4.0, 0.5]), vec![-2.5]);
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let w = param("w", &[3, 2], vec![0.0; 6]);
    let b = param("b", &[2], vec![0.0; 2]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    let (wv, bv) = (tape.param(&w).unwrap(), tape.param(&b).unwrap());
    let err = tape.affine(x, wv, bv).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, NumericsError::Dimension(_)));
    assert!(msg.contains("[1, 4]") && msg.contains("[3, 2]"), "{msg}");
}

fn conv_out(kernel: &Parameter, bias: &Parameter, x: Tensor, stride: usize) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(x).unwrap();
    let (k, b) = (tape.param(kernel).unwrap(), tape.param(bias).unwrap());
    let y = tape.conv2d(x, k, b, stride).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let k = param("k", &[1, 1, 1, 1], vec![1.0]);
    let b = param("b", &[1], vec![0.0]);
    let x = Tensor::new(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    assert_eq!(conv_out(&k, &b, x.clone(), 1), x);
}

#[test]
fn conv_all_ones_kernel_sums_window() {
    let k = param("k", &[1, 1, 2, 2], vec![1.0; 4]);
    let b = param("b", &[1], vec![0.0]);
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = conv_out(&k, &b, x, 1);
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.data(), &[10.0]);
}

#[test]
fn conv_zero_input_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = Conv2d::new("c", 2, 3, 3, 2, &mut rng);
    let y = conv_out(&conv.kernel, &conv.bias, Tensor::zeros(&[4, 2, 9, 9]), 2);
    assert_eq!(y.shape(), &[4, 3, 4, 4]);
    for (i, v) in y.data().iter().enumerate() {
        let channel = (i / 16) % 3;
        assert_eq!(*v, conv.bias.value.data()[channel]);
    }
}

#[test]
fn conv_output_size_and_stride() {
    // Direct summation oracle for a strided multi-channel case.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let conv = Conv2d::new("c", 2, 2, 3, 2, &mut rng);
    let x: Vec<f64> = (0..2 * 7 * 7).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    let y = conv_out(&conv.kernel, &conv.bias, Tensor::new(&[2, 7, 7], x.clone()).unwrap(), 2);
    assert_eq!(y.shape(), &[2, 3, 3]);
    let kd = conv.kernel.value.data();
    for o in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                let mut s = conv.bias.value.data()[o];
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            s += kd[((o * 2 + c) * 3 + ki) * 3 + kj] * x[c * 49 + (2 * i + ki) * 7 + 2 * j + kj];
                        }
                    }
                }
                assert!((y.data()[(o * 3 + i) * 3 + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_kernel_larger_than_input_is_rejected() {
    let k = param("k", &[1, 1, 3, 3], vec![0.0; 9]);
    let b = param("b", &[1], vec![0.0]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
    let (kv, bv) = (tape.param(&k).unwrap(), tape.param(&b).unwrap());
    assert!(matches!(tape.conv2d(x, kv, bv, 1), Err(NumericsError::Dimension(_))));
}

#[test]
fn relu_values_and_subgradients() {
    let p = param("x", &[3], vec![-1.0, 0.0, 2.0]);
    let mut tape = Tape::new();
    let x = tape.param(&p).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(p.id()).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let neg = tape.constant(Tensor::from_vec(vec![-3.0, -0.1, -7.0])).unwrap();
    let y = tape.relu(neg).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_of_summed_product() {
    // loss = sum(xW), x = [1,1], W 2×1 → dW = xᵀ = [1,1]ᵀ
    let mut w = param("w", &[2, 1], vec![0.4, -0.3]);
    let mut unused = param("unused", &[2], vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    let wv = tape.param(&w).unwrap();
    let _ = tape.param(&unused).unwrap();
    let y = tape.matmul(x, wv).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.grad_eval(loss, &mut [&mut w, &mut unused]).unwrap();
    assert_eq!(w.grad().data(), &[1.0, 1.0]);
    assert_eq!(unused.grad().data(), &[0.0, 0.0]);

    // A second evaluation accumulates.
    tape.grad_eval(loss, &mut [&mut w, &mut unused]).unwrap();
    assert_eq!(w.grad().data(), &[2.0, 2.0]);

    w.zero_grads();
    assert_eq!(w.grad().data(), &[0.0, 0.0]);
}

#[test]
fn backward_requires_scalar() {
    let p = param("p", &[2], vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let x = tape.param(&p).unwrap();
    let y = tape.square(x).unwrap();
    assert!(matches!(tape.backward(y), Err(NumericsError::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 1.0])).unwrap();
    assert!(matches!(tape.log(x), Err(NumericsError::NonFinite("log"))));
    let big = tape.constant(Tensor::from_vec(vec![1e300])).unwrap();
    assert!(matches!(tape.exp(big), Err(NumericsError::NonFinite(_))));
}

#[test]
fn detached_paths_carry_no_gradient() {
    let mut p = param("p", &[2], vec![0.5, -1.5]);
    let mut tape = Tape::new();
    let x = tape.param(&p).unwrap();
    let d = tape.detach(x).unwrap();
    let y = tape.mul(d, d).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.grad_eval(loss, &mut [&mut p]).unwrap();
    assert!(grads.is_empty());
    assert_eq!(p.grad().data(), &[0.0, 0.0]);
}

#[test]
fn affine_layer_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut layer = Linear::new("fc", 3, 3, &mut rng);
    let x = Tensor::new(&[3, 3], (0..9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let report = grad_check(
        &mut layer,
        |tape, m| {
            let xv = tape.constant(x.clone())?;
            let y = m.forward(tape, xv, Binding::Trainable)?;
            let y = tape.tanh(y)?;
            let sq = tape.square(y)?;
            tape.sum(sq)
        },
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.entries_checked, 12);
}

#[test]
fn conv_layer_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut layer = Conv2d::new("conv", 1, 2, 3, 1, &mut rng);
    let x = Tensor::new(&[1, 6, 6], (0..36).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
    let report = grad_check(
        &mut layer,
        |tape, m| {
            let xv = tape.constant(x.clone())?;
            let y = m.forward(tape, xv, Binding::Trainable)?;
            let sq = tape.square(y)?;
            tape.mean(sq)
        },
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gradcheck_reports_offenders() {
    // A wrong analytic gradient: the forward closure behaves differently
    // under the tape than under finite differences because it reads the
    // parameter value through a constant on alternate calls.
    use std::cell::Cell;
    let calls = Cell::new(0);
    let mut p = param("sneaky", &[1], vec![1.0]);
    let err = grad_check(
        &mut p,
        |tape, m| {
            calls.set(calls.get() + 1);
            let x = tape.param(m)?;
            let y = if calls.get() == 1 { tape.scale(x, 5.0)? } else { tape.scale(x, 1.0)? };
            tape.sum(y)
        },
        1e-4,
    )
    .unwrap_err();
    match err {
        NumericsError::GradCheck { offenders, .. } => assert_eq!(offenders, vec!["sneaky".to_string()]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn composite_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mlp = Mlp::new("mlp", &[4, 5, 3], &mut rng);
    let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
    let row = Tensor::from_vec(vec![0.3, -0.2, 0.5]);
    grad_check(
        &mut mlp,
        |tape, m| {
            let xv = tape.constant(x.clone())?;
            let h = m.forward(tape, xv, Binding::Trainable)?;
            let r = tape.constant(row.clone())?;
            let h = tape.mul_row(h, r)?;
            let h = tape.add_row(h, r)?;
            let n = tape.l2_normalize_rows(h)?;
            let logits = tape.matmul_bt(n, n)?;
            let logits = tape.scale(logits, 1.0 / 0.2)?;
            let ls = tape.log_softmax_rows(logits)?;
            let d = tape.diagonal(ls)?;
            let sp = tape.softplus(h)?;
            let sc = tape.sum_cols(sp)?;
            let mn = tape.minimum(d, sc)?;
            let cl = tape.clamp(h, -0.4, 0.4)?;
            let a = tape.slice_cols(cl, 1, 3)?;
            let b = tape.concat_cols(&[a, h])?;
            let e = tape.exp(b)?;
            let s1 = tape.mean(mn)?;
            let s2 = tape.mean(e)?;
            tape.sub(s2, s1)
        },
        1e-4,
    )
    .unwrap();
}

#[test]
fn zero_grads_makes_history_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut mlp = Mlp::new("m", &[3, 4, 1], &mut rng);
    let run = |mlp: &mut Mlp, input: f64| {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3], input)).unwrap();
        let y = mlp.forward(&mut tape, x, Binding::Trainable).unwrap();
        let l = tape.sum(y).unwrap();
        tape.grad_eval(l, &mut [mlp]).unwrap();
    };
    run(&mut mlp, 0.7);
    let fresh = mlp.clone();
    let mut fresh = fresh;
    fresh.zero_grads();
    mlp.zero_grads();
    run(&mut mlp, -0.3);
    run(&mut fresh, -0.3);
    let mut a = Vec::new();
    let mut b = Vec::new();
    mlp.visit(&mut |p| a.extend_from_slice(p.grad().data()));
    fresh.visit(&mut |p| b.extend_from_slice(p.grad().data()));
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mlp = Mlp::new("net", &[5, 7, 2], &mut rng);
    let stem = dir.path().join("ckpt");
    checkpoint::save(&mlp, &stem).unwrap();
    let first_json = std::fs::read(stem.with_extension("json")).unwrap();
    let first_bin = std::fs::read(stem.with_extension("bin")).unwrap();
    assert_eq!(first_bin.len(), 4 * mlp.num_params());

    let mut other = Mlp::new("net", &[5, 7, 2], &mut ChaCha8Rng::seed_from_u64(99));
    checkpoint::load(&mut other, &stem).unwrap();
    let stem2 = dir.path().join("ckpt2");
    checkpoint::save(&other, &stem2).unwrap();
    assert_eq!(first_bin, std::fs::read(stem2.with_extension("bin")).unwrap());
    let j2 = String::from_utf8(std::fs::read(stem2.with_extension("json")).unwrap()).unwrap();
    assert_eq!(String::from_utf8(first_json).unwrap().replace("ckpt.bin", "ckpt2.bin"), j2);

    let mut wrong = Mlp::new("net", &[5, 6, 2], &mut rng);
    assert!(checkpoint::load(&mut wrong, &stem).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new("m", &[3, 6, 2], &mut rng);
        let x = Tensor::new(&[rows, 3], (0..rows * 3).map(|i| (i as f64 + seed as f64).sin()).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let y = mlp.forward(&mut tape, xv, Binding::Trainable).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_values_survive_f32_roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let narrowed: Vec<f64> = values.iter().map(|&v| v as f32 as f64).collect();
        let p = Parameter::new("p", Tensor::from_vec(narrowed.clone()));
        let (manifest, blob) = checkpoint::encode(&p, "p.bin");
        let mut q = Parameter::new("p", Tensor::zeros(&[narrowed.len()]));
        checkpoint::decode_into(&mut q, &manifest, &blob).unwrap();
        prop_assert_eq!(q.value.data(), &narrowed[..]);
    }
}
