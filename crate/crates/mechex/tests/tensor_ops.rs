//! Oracle tests for every tensor primitive: hand-computable cases, direct
//! nested-loop reference implementations, and finite-difference gradient
//! checks.

use mechex::rng::{stream_rng, Stream};
use mechex::tensor::gradcheck::{check_gradients, GradCheckOptions};
use mechex::tensor::tape::{BackwardOpts, Mode, Tape, BCE_EPS};
use mechex::tensor::{Param, Real, Tensor};

fn random_tensor(shape: Vec<usize>, lo: Real, hi: Real, stream_index: u64) -> Tensor {
    use rand::Rng;
    let mut rng = stream_rng(1234, Stream::Eval, stream_index);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn assert_close(a: &[Real], b: &[Real], tol: Real, what: &str) {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Direct cross-correlation with 1-px zero padding, no cleverness.
fn conv_oracle(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
) -> Tensor {
    let (b, cin, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let cout = kernels.shape()[0];
    let mut out = vec![0.0; b * cout * h * w];
    for bi in 0..b {
        for co in 0..cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias.data()[co] as f64;
                    for ci in 0..cin {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (iy, ix) = (y + ky, x + kx);
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernels.data()
                                    [((co * cin + ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                                acc += iv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * cout + co) * h + y as usize) * w + x as usize] = acc as Real;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, h, w], out).unwrap()
}

fn run_conv(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let k = tape.input(kernels.clone());
    let b = tape.input(bias.clone());
    let out = tape.conv2d(x, k, b).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv2d_zero_input_yields_bias() {
    let input = Tensor::zeros(vec![1, 1, 3, 3]);
    let kernels = random_tensor(vec![2, 1, 3, 3], -1.0, 1.0, 0);
    let bias = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
    let out = run_conv(&input, &kernels, &bias);
    for co in 0..2 {
        for p in 0..9 {
            assert_eq!(out.data()[co * 9 + p], bias.data()[co]);
        }
    }
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let input = random_tensor(vec![2, 1, 5, 4], 0.0, 1.0, 1);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let kernels = Tensor::new(vec![1, 1, 3, 3], k).unwrap();
    let bias = Tensor::zeros(vec![1]);
    let out = run_conv(&input, &kernels, &bias);
    assert_eq!(out.data(), input.data());
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    // the 4x4 ramp with an all-ones kernel
    let input = Tensor::new(vec![1, 1, 4, 4], (1..=16).map(|i| i as Real).collect()).unwrap();
    let kernels = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let bias = Tensor::zeros(vec![1]);
    let got = run_conv(&input, &kernels, &bias);
    let want = conv_oracle(&input, &kernels, &bias);
    assert_eq!(got.data(), want.data());

    // and a multi-channel random case
    let input = random_tensor(vec![2, 3, 6, 5], -1.0, 1.0, 2);
    let kernels = random_tensor(vec![4, 3, 3, 3], -0.5, 0.5, 3);
    let bias = random_tensor(vec![4], -0.1, 0.1, 4);
    let got = run_conv(&input, &kernels, &bias);
    let want = conv_oracle(&input, &kernels, &bias);
    assert_close(got.data(), want.data(), 2e-4, "conv");
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = tape.input(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = tape.input(Tensor::zeros(vec![1]));
    let err = tape.conv2d(x, k, b).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn conv2d_is_linear_in_its_input_without_bias() {
    let input = random_tensor(vec![1, 2, 6, 6], -1.0, 1.0, 5);
    let kernels = random_tensor(vec![3, 2, 3, 3], -0.5, 0.5, 6);
    let bias = Tensor::zeros(vec![3]);
    let base = run_conv(&input, &kernels, &bias);
    // doubling is an exponent bump, so equality is bit-exact
    let doubled = run_conv(&input.map(|v| 2.0 * v), &kernels, &bias);
    let scaled: Vec<Real> = base.data().iter().map(|&v| 2.0 * v).collect();
    assert_eq!(doubled.data(), scaled.as_slice());
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

#[test]
fn batch_norm_constant_input_gives_zeros_and_gamma_zero_gives_beta() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(vec![2, 2, 2, 2], 0.7));
    let gamma = tape.input(Tensor::full(vec![2], 1.0));
    let beta = tape.input(Tensor::zeros(vec![2]));
    let (out, _, _) = tape.batch_norm(x, gamma, beta, 1e-5, Mode::Train, None).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v.abs() < 1e-6));

    let mut tape = Tape::new();
    let x = tape.input(random_tensor(vec![2, 2, 2, 2], 0.0, 1.0, 7));
    let gamma = tape.input(Tensor::zeros(vec![2]));
    let beta = tape.input(Tensor::new(vec![2], vec![0.3, -0.4]).unwrap());
    let (out, _, _) = tape.batch_norm(x, gamma, beta, 1e-5, Mode::Train, None).unwrap();
    let got = tape.value(out).data();
    for bi in 0..2 {
        for c in 0..2 {
            for p in 0..4 {
                let want = if c == 0 { 0.3 } else { -0.4 };
                assert_eq!(got[(bi * 2 + c) * 4 + p], want);
            }
        }
    }
}

#[test]
fn batch_norm_matches_direct_statistics_oracle() {
    let input = random_tensor(vec![2, 3, 4, 4], -2.0, 2.0, 8);
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let gamma = tape.input(Tensor::full(vec![3], 1.0));
    let beta = tape.input(Tensor::zeros(vec![3]));
    let (out, _, _) = tape.batch_norm(x, gamma, beta, 1e-5, Mode::Train, None).unwrap();
    let got = tape.value(out).data();

    // direct per-channel mean/variance in f64
    let hw = 16;
    for c in 0..3 {
        let mut values = Vec::new();
        for b in 0..2 {
            for p in 0..hw {
                values.push(input.data()[(b * 3 + c) * hw + p] as f64);
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for b in 0..2 {
            for p in 0..hw {
                let xv = input.data()[(b * 3 + c) * hw + p] as f64;
                let want = (xv - mean) / (var + 1e-5).sqrt();
                let have = got[(b * 3 + c) * hw + p] as f64;
                assert!((want - have).abs() < 1e-5, "{want} vs {have}");
            }
        }
    }
}

#[test]
fn batch_norm_train_requires_two_values_and_eval_requires_stats() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(vec![1, 2, 1, 1], 0.5));
    let gamma = tape.input(Tensor::full(vec![2], 1.0));
    let beta = tape.input(Tensor::zeros(vec![2]));
    assert!(tape.batch_norm(x, gamma, beta, 1e-5, Mode::Train, None).is_err());
    assert!(tape.batch_norm(x, gamma, beta, 1e-5, Mode::Eval, None).is_err());
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[test]
fn activation_fixed_points_and_asymptote() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![3], vec![0.0, -20.0, 2.0]).unwrap());
    let e = tape.elu(x);
    let got = tape.value(e).data();
    assert_eq!(got[0], 0.0);
    assert!((got[1] + 1.0).abs() < 1e-6, "elu(-20) = {}", got[1]);
    assert_eq!(got[2], 2.0);

    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[0], 0.5);
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter_by_finite_differences() {
    let h = 1e-3 as Real;
    let eval = |v: Real| -> Real {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar_value(v));
        let s = tape.sigmoid(x);
        tape.value(s).data()[0]
    };
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    assert!((numeric - 0.25).abs() < 1e-3, "{numeric}");

    let mut tape = Tape::new();
    let x = tape.traced_input(Tensor::scalar_value(0.0));
    let s = tape.sigmoid(x);
    let grads = tape.backward(s, BackwardOpts::TRACED).unwrap();
    let analytic = grads.traced(x).unwrap().data()[0];
    assert!((analytic - 0.25).abs() < 1e-7);
}

// ---------------------------------------------------------------------------
// avg_pool2
// ---------------------------------------------------------------------------

#[test]
fn avg_pool_examples_and_oracle() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(vec![1, 1, 4, 4], 0.6));
    let p = tape.avg_pool2(x).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 0.6).abs() < 1e-7));

    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = tape.avg_pool2(x).unwrap();
    assert_eq!(tape.value(p).data(), &[2.5]);

    // random case against a nested-loop oracle
    let input = random_tensor(vec![1, 2, 8, 8], -1.0, 1.0, 9);
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let p = tape.avg_pool2(x).unwrap();
    let got = tape.value(p).clone();
    for c in 0..2 {
        for y in 0..4 {
            for x_ in 0..4 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += input.data()[c * 64 + (2 * y + dy) * 8 + 2 * x_ + dx];
                    }
                }
                let want = acc / 4.0;
                let have = got.data()[c * 16 + y * 4 + x_];
                assert!((want - have).abs() < 1e-6);
            }
        }
    }

    // global mean is preserved
    let in_mean = input.mean();
    let out_mean = got.mean();
    assert!((in_mean - out_mean).abs() < 1e-6);
}

#[test]
fn avg_pool_rejects_odd_sides() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(vec![1, 1, 5, 4]));
    assert!(tape.avg_pool2(x).is_err());
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

#[test]
fn linear_examples_and_triple_loop_oracle() {
    // zero weight -> bias broadcast
    let mut tape = Tape::new();
    let x = tape.input(random_tensor(vec![2, 3], -1.0, 1.0, 10));
    let w = tape.input(Tensor::zeros(vec![4, 3]));
    let b = tape.input(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);

    // identity weight, zero bias -> identity
    let input = random_tensor(vec![2, 3], -1.0, 1.0, 11);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let w = tape.input(Tensor::new(vec![3, 3], eye).unwrap());
    let b = tape.input(Tensor::zeros(vec![3]));
    let out = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(out).data(), input.data());

    // random case vs naive triple loop
    let input = random_tensor(vec![2, 3], -1.0, 1.0, 12);
    let weight = random_tensor(vec![5, 3], -1.0, 1.0, 13);
    let bias = random_tensor(vec![5], -1.0, 1.0, 14);
    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let w = tape.input(weight.clone());
    let b = tape.input(bias.clone());
    let out = tape.linear(x, w, b).unwrap();
    for bi in 0..2 {
        for o in 0..5 {
            let mut acc = bias.data()[o] as f64;
            for f in 0..3 {
                acc += input.data()[bi * 3 + f] as f64 * weight.data()[o * 3 + f] as f64;
            }
            let have = tape.value(out).data()[bi * 5 + o];
            assert!((acc as Real - have).abs() < 1e-5);
        }
    }
}

// ---------------------------------------------------------------------------
// bce
// ---------------------------------------------------------------------------

#[test]
fn bce_hand_values() {
    let mut tape = Tape::new();
    let p = tape.input(Tensor::scalar_value(0.5));
    let loss = tape.bce(p, &Tensor::scalar_value(1.0)).unwrap();
    let ln2 = (2.0f64).ln() as Real;
    assert!((tape.value(loss).scalar().unwrap() - ln2).abs() < 1e-6);

    // perfect prediction collapses to the clamp residue
    let mut tape = Tape::new();
    let p = tape.input(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let loss = tape.bce(p, &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
    let v = tape.value(loss).scalar().unwrap();
    assert!(v >= 0.0 && v <= 1.5 * BCE_EPS, "{v}");

    // p = [0.9, 0.1], t = [1, 0] -> mean of -ln 0.9 twice
    let mut tape = Tape::new();
    let p = tape.input(Tensor::new(vec![2], vec![0.9, 0.1]).unwrap());
    let loss = tape.bce(p, &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
    let want = -(0.9f64.ln()) as Real;
    assert!((tape.value(loss).scalar().unwrap() - want).abs() < 1e-6);
}

#[test]
fn bce_is_nonnegative_on_random_inputs() {
    for i in 0..20 {
        let p = random_tensor(vec![8], 1e-6, 1.0 - 1e-6, 100 + i);
        let t = random_tensor(vec![8], 0.0, 1.0, 200 + i).map(|v| v.round());
        let mut tape = Tape::new();
        let pr = tape.input(p);
        let loss = tape.bce(pr, &t).unwrap();
        assert!(tape.value(loss).scalar().unwrap() >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones_and_unreached_parameters_get_nothing() {
    let p = Param::new("p", random_tensor(vec![2, 3], -1.0, 1.0, 15), 1e-3);
    let q = Param::new("q", random_tensor(vec![2, 3], -1.0, 1.0, 16), 1e-3);
    let mut tape = Tape::new();
    let pr = tape.param(&p);
    let _qr = tape.param(&q);
    let loss = tape.sum(pr);
    let grads = tape.backward(loss, BackwardOpts::PARAMS).unwrap();
    assert!(grads.param(p.id()).unwrap().data().iter().all(|&g| g == 1.0));
    // q does not reach the loss: zero gradient, reported as absent
    assert!(grads.param(q.id()).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.traced_input(Tensor::zeros(vec![2, 2]));
    let s = tape.sigmoid(x);
    assert!(tape.backward(s, BackwardOpts::TRACED).is_err());
}

#[test]
fn three_layer_conv_net_gradient_matches_finite_differences() {
    // weights and biases of a small conv stack, checked end to end
    let input = random_tensor(vec![1, 1, 8, 8], 0.0, 1.0, 17);
    let w1 = random_tensor(vec![4, 1, 3, 3], -0.5, 0.5, 18);
    let b1 = random_tensor(vec![4], -0.1, 0.1, 19);
    let w2 = random_tensor(vec![4, 4, 3, 3], -0.3, 0.3, 20);
    let b2 = random_tensor(vec![4], -0.1, 0.1, 21);
    let w3 = random_tensor(vec![1, 4, 3, 3], -0.5, 0.5, 22);
    let b3 = random_tensor(vec![1], -0.1, 0.1, 23);
    let target = random_tensor(vec![1, 1, 8, 8], 0.0, 1.0, 24);

    let inputs = vec![w1, b1, w2, b2, w3, b3];
    let opts = GradCheckOptions {
        step: 1e-3,
        #[cfg(not(feature = "f64"))]
        tolerance: 5e-2,
        #[cfg(feature = "f64")]
        tolerance: 1e-2,
        floor: 1e-4,
    };
    let report = check_gradients(&inputs, &opts, |tape, refs| {
        let x = tape.input(input.clone());
        let c1 = tape.conv2d(x, refs[0], refs[1])?;
        let a1 = tape.elu(c1);
        let c2 = tape.conv2d(a1, refs[2], refs[3])?;
        let a2 = tape.elu(c2);
        let c3 = tape.conv2d(a2, refs[4], refs[5])?;
        let out = tape.sigmoid(c3);
        tape.mse(out, &target)
    })
    .unwrap();
    assert!(report.passed(&opts), "{report:?}");
}

#[test]
fn gradients_sum_when_a_parameter_feeds_multiple_operations() {
    // p enters linear() as both the input and the weight; its gradient must
    // be the sum of both roles' gradients, not one overwriting the other
    let value = random_tensor(vec![3, 3], -1.0, 1.0, 28);
    let p = Param::new("p", value.clone(), 1e-3);
    let mut tape = Tape::new();
    let x = tape.param(&p);
    let w = tape.param(&p);
    let b = tape.input(Tensor::zeros(vec![3]));
    let l = tape.linear(x, w, b).unwrap();
    let loss = tape.sum(l);
    let grads = tape.backward(loss, BackwardOpts::PARAMS).unwrap();
    let combined = grads.param(p.id()).unwrap();

    // reference: the same program with the two roles as distinct parameters
    let px = Param::new("px", value.clone(), 1e-3);
    let pw = Param::new("pw", value.clone(), 1e-3);
    let mut tape = Tape::new();
    let x = tape.param(&px);
    let w = tape.param(&pw);
    let b = tape.input(Tensor::zeros(vec![3]));
    let l = tape.linear(x, w, b).unwrap();
    let loss = tape.sum(l);
    let grads = tape.backward(loss, BackwardOpts::PARAMS).unwrap();
    let gx = grads.param(px.id()).unwrap();
    let gw = grads.param(pw.id()).unwrap();
    for i in 0..combined.len() {
        let want = gx.data()[i] + gw.data()[i];
        assert!((combined.data()[i] - want).abs() < 1e-6);
    }
}

#[test]
fn forward_is_deterministic_and_replayable() {
    let input = random_tensor(vec![2, 1, 8, 8], 0.0, 1.0, 25);
    let w = random_tensor(vec![2, 1, 3, 3], -0.5, 0.5, 26);
    let b = random_tensor(vec![2], -0.1, 0.1, 27);
    let run = || -> Vec<Real> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let wk = tape.input(w.clone());
        let bb = tape.input(b.clone());
        let c = tape.conv2d(x, wk, bb).unwrap();
        let a = tape.elu(c);
        let p = tape.avg_pool2(a).unwrap();
        let s = tape.sigmoid(p);
        tape.value(s).data().to_vec()
    };
    assert_eq!(run(), run());

    let mut tape = Tape::new();
    let x = tape.input(input.clone());
    let wk = tape.input(w.clone());
    let bb = tape.input(b.clone());
    let c = tape.conv2d(x, wk, bb).unwrap();
    let gamma = tape.input(Tensor::full(vec![2], 1.0));
    let beta = tape.input(Tensor::zeros(vec![2]));
    let (bn, _, _) = tape.batch_norm(c, gamma, beta, 1e-5, Mode::Train, None).unwrap();
    let a = tape.elu(bn);
    let loss_target = Tensor::zeros(vec![2, 2, 8, 8]);
    let _loss = tape.mse(a, &loss_target).unwrap();
    assert!(tape.replay_matches().unwrap());
}

// ---------------------------------------------------------------------------
// per-primitive randomized gradient checks
// ---------------------------------------------------------------------------

#[test]
fn primitive_gradients_match_finite_differences() {
    let opts = GradCheckOptions::default();
    for trial in 0..5 {
        let s = 1000 + trial * 37;

        // conv2d wrt input, kernels, bias under a smooth scalarization
        let x = random_tensor(vec![1, 2, 4, 4], -1.0, 1.0, s);
        let k = random_tensor(vec![2, 2, 3, 3], -0.5, 0.5, s + 1);
        let b = random_tensor(vec![2], -0.2, 0.2, s + 2);
        let target = random_tensor(vec![1, 2, 4, 4], 0.0, 1.0, s + 3);
        let report = check_gradients(&[x, k, b], &opts, |tape, r| {
            let c = tape.conv2d(r[0], r[1], r[2])?;
            let sg = tape.sigmoid(c);
            tape.mse(sg, &target)
        })
        .unwrap();
        assert!(report.passed(&opts), "conv2d trial {trial}: {report:?}");

        // batch_norm wrt input, gamma, beta
        let x = random_tensor(vec![2, 2, 3, 3], -1.0, 1.0, s + 4);
        let gamma = random_tensor(vec![2], 0.5, 1.5, s + 5);
        let beta = random_tensor(vec![2], -0.5, 0.5, s + 6);
        let target = random_tensor(vec![2, 2, 3, 3], -1.0, 1.0, s + 7);
        let report = check_gradients(&[x, gamma, beta], &opts, |tape, r| {
            let (bn, _, _) = tape.batch_norm(r[0], r[1], r[2], 1e-5, Mode::Train, None)?;
            tape.mse(bn, &target)
        })
        .unwrap();
        assert!(report.passed(&opts), "batch_norm trial {trial}: {report:?}");

        // elu / sigmoid / avg_pool / upsample / linear / bce / masked /
        // softmax-ce in one composite program
        let x = random_tensor(vec![2, 6], -1.5, 1.5, s + 8);
        let w = random_tensor(vec![4, 6], -0.7, 0.7, s + 9);
        let bb = random_tensor(vec![4], -0.2, 0.2, s + 10);
        let report = check_gradients(&[x, w, bb], &opts, |tape, r| {
            let l = tape.linear(r[0], r[1], r[2])?;
            let e = tape.elu(l);
            let sg = tape.sigmoid(e);
            tape.bce(sg, &Tensor::new(vec![2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap())
        })
        .unwrap();
        assert!(report.passed(&opts), "linear/bce trial {trial}: {report:?}");

        let x = random_tensor(vec![1, 1, 4, 4], -1.0, 1.0, s + 11);
        let target = random_tensor(vec![1, 1, 4, 4], 0.0, 1.0, s + 12);
        let report = check_gradients(&[x], &opts, |tape, r| {
            let p = tape.avg_pool2(r[0])?;
            let u = tape.upsample2(p)?;
            let sg = tape.sigmoid(u);
            tape.mse(sg, &target)
        })
        .unwrap();
        assert!(report.passed(&opts), "pool/upsample trial {trial}: {report:?}");

        let x = random_tensor(vec![3, 4], -1.0, 1.0, s + 13);
        let report = check_gradients(&[x], &opts, |tape, r| {
            tape.softmax_cross_entropy(r[0], &[1, 0, 3])
        })
        .unwrap();
        assert!(report.passed(&opts), "softmax trial {trial}: {report:?}");

        let x = random_tensor(vec![4, 1], 0.1, 0.9, s + 14);
        let report = check_gradients(&[x], &opts, |tape, r| {
            tape.masked_neg_log_mean(r[0], &[1.0, 0.0, 1.0, 0.0])
        })
        .unwrap();
        assert!(report.passed(&opts), "masked trial {trial}: {report:?}");
    }
}
