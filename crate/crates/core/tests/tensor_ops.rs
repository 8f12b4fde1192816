//! Oracle checks for the autodiff engine.
//!
//! Convolutions are compared against an independent scatter-based
//! reimplementation and hand-computed frozen values; every differentiable
//! op is checked against central finite differences; conv2d and
//! conv_transpose2d are verified to be exact adjoints.

use hyvic_core::gradcheck::{finite_diff, max_rel_err, DEFAULT_STEP};
use hyvic_core::tape::{NodeId, Tape};
use hyvic_core::tensor::{ParamSet, Tensor4};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rand_tensor(rng: &mut ChaCha20Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Scatter-based convolution oracle: walks input positions and pushes
/// contributions outward, the reverse loop structure of the library's
/// gather implementation.
fn conv2d_oracle(x: &Tensor4, w: &Tensor4, bias: &Tensor4, stride: usize, padding: usize) -> Tensor4 {
    let [bs, cin, h, win] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (win + 2 * padding - kw) / stride + 1;
    let mut out = Tensor4::zeros([bs, cout, oh, ow]);
    for b in 0..bs {
        for oc in 0..cout {
            for r in 0..oh {
                for c in 0..ow {
                    *out.at_mut(b, oc, r, c) = bias.at(0, oc, 0, 0);
                }
            }
        }
        for ic in 0..cin {
            for ih in 0..h {
                for iw in 0..win {
                    // ih = oh*stride + kh - padding  =>  contributes to all
                    // (orow, krow) pairs with orow*stride + krow = ih + padding.
                    for oc in 0..cout {
                        for krow in 0..kh {
                            let num = ih + padding;
                            if num < krow || (num - krow) % stride != 0 {
                                continue;
                            }
                            let orow = (num - krow) / stride;
                            if orow >= oh {
                                continue;
                            }
                            for kcol in 0..kw {
                                let numc = iw + padding;
                                if numc < kcol || (numc - kcol) % stride != 0 {
                                    continue;
                                }
                                let ocol = (numc - kcol) / stride;
                                if ocol >= ow {
                                    continue;
                                }
                                *out.at_mut(b, oc, orow, ocol) += x.at(b, ic, ih, iw) * w.at(oc, ic, krow, kcol);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gather-based transposed-convolution oracle (the library scatters).
fn convt2d_oracle(x: &Tensor4, w: &Tensor4, bias: &Tensor4, stride: usize, padding: usize, output_padding: usize) -> Tensor4 {
    let [bs, cin, h, win] = x.shape();
    let [_, cout, kh, kw] = w.shape();
    let oh = (h - 1) * stride + kh + output_padding - 2 * padding;
    let ow = (win - 1) * stride + kw + output_padding - 2 * padding;
    let mut out = Tensor4::zeros([bs, cout, oh, ow]);
    for b in 0..bs {
        for oc in 0..cout {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = bias.at(0, oc, 0, 0);
                    for ic in 0..cin {
                        for krow in 0..kh {
                            // orow = row*stride + krow - padding
                            let num = orow + padding;
                            if num < krow || (num - krow) % stride != 0 {
                                continue;
                            }
                            let row = (num - krow) / stride;
                            if row >= h {
                                continue;
                            }
                            for kcol in 0..kw {
                                let numc = ocol + padding;
                                if numc < kcol || (numc - kcol) % stride != 0 {
                                    continue;
                                }
                                let col = (numc - kcol) / stride;
                                if col >= win {
                                    continue;
                                }
                                acc += x.at(b, ic, row, col) * w.at(ic, oc, krow, kcol);
                            }
                        }
                    }
                    *out.at_mut(b, oc, orow, ocol) = acc;
                }
            }
        }
    }
    out
}

fn tape_conv2d(x: &Tensor4, w: &Tensor4, b: &Tensor4, stride: usize, padding: usize) -> Tensor4 {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let wn = tape.constant(w.clone());
    let bn = tape.constant(b.clone());
    let y = tape.conv2d(xn, wn, bn, stride, padding).unwrap();
    tape.value(y).clone()
}

fn tape_convt2d(x: &Tensor4, w: &Tensor4, b: &Tensor4, stride: usize, padding: usize, opad: usize) -> Tensor4 {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let wn = tape.constant(w.clone());
    let bn = tape.constant(b.clone());
    let y = tape.conv_transpose2d(xn, wn, bn, stride, padding, opad).unwrap();
    tape.value(y).clone()
}

fn assert_close(a: &Tensor4, b: &Tensor4, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    for i in 0..a.len() {
        let d = (a.data()[i] - b.data()[i]).abs();
        assert!(d <= tol, "{what}: element {i} differs by {d}: {} vs {}", a.data()[i], b.data()[i]);
    }
}

#[test]
fn conv2d_frozen_hand_computed_case() {
    let x = Tensor4::from_vec([1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let w = Tensor4::from_vec([1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
    let b = Tensor4::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
    let y = tape_conv2d(&x, &w, &b, 1, 0);
    assert_eq!(y.shape(), [1, 1, 2, 2]);
    assert_eq!(y.data(), &[6.5, 8.5, 12.5, 14.5]);
}

#[test]
fn conv_transpose_frozen_hand_computed_case() {
    let x = Tensor4::from_vec([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    let w = Tensor4::from_vec([1, 1, 2, 2], vec![1., 1., 1., 1.]).unwrap();
    let b = Tensor4::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
    let y = tape_convt2d(&x, &w, &b, 2, 0, 0);
    assert_eq!(y.shape(), [1, 1, 4, 4]);
    #[rustfmt::skip]
    let expected = vec![
        1., 1., 2., 2.,
        1., 1., 2., 2.,
        3., 3., 4., 4.,
        3., 3., 4., 4.,
    ];
    assert_eq!(y.data(), &expected[..]);
}

#[test]
fn conv2d_matches_oracle_on_random_shapes() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for &(shape, wshape, stride, padding) in &[
        ([2, 3, 5, 4], [4, 3, 3, 3], 1usize, 1usize),
        ([1, 2, 8, 8], [3, 2, 3, 3], 2, 1),
        ([2, 1, 7, 9], [2, 1, 5, 5], 2, 2),
        ([1, 4, 6, 6], [4, 4, 1, 1], 1, 0),
        ([1, 2, 9, 9], [2, 2, 7, 7], 1, 3),
    ] {
        let x = rand_tensor(&mut rng, shape, -1.0, 1.0);
        let w = rand_tensor(&mut rng, wshape, -1.0, 1.0);
        let b = rand_tensor(&mut rng, [1, wshape[0], 1, 1], -0.5, 0.5);
        let got = tape_conv2d(&x, &w, &b, stride, padding);
        let want = conv2d_oracle(&x, &w, &b, stride, padding);
        assert_close(&got, &want, 1e-12, "conv2d vs oracle");
    }
}

#[test]
fn conv_transpose_matches_oracle_on_random_shapes() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for &(shape, wshape, stride, padding, opad) in &[
        ([1, 3, 4, 4], [3, 2, 3, 3], 2usize, 1usize, 1usize),
        ([2, 2, 5, 3], [2, 4, 3, 3], 1, 1, 0),
        ([1, 1, 4, 6], [1, 2, 5, 5], 2, 2, 1),
        ([2, 3, 2, 2], [3, 3, 1, 1], 1, 0, 0),
    ] {
        let x = rand_tensor(&mut rng, shape, -1.0, 1.0);
        let w = rand_tensor(&mut rng, wshape, -1.0, 1.0);
        let b = rand_tensor(&mut rng, [1, wshape[1], 1, 1], -0.5, 0.5);
        let got = tape_convt2d(&x, &w, &b, stride, padding, opad);
        let want = convt2d_oracle(&x, &w, &b, stride, padding, opad);
        assert_close(&got, &want, 1e-12, "conv_transpose2d vs oracle");
    }
}

fn inner(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// <conv2d(a, w), b> must equal <a, conv_transpose2d(b, w)> with matching
/// geometry and zero bias: the transposed convolution is the exact adjoint.
#[test]
fn conv_transpose_is_exact_adjoint() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    for &(ashape, wshape, stride, padding) in &[
        ([1, 2, 6, 6], [3, 2, 3, 3], 2usize, 1usize),
        ([2, 3, 5, 5], [2, 3, 3, 3], 1, 1),
        ([1, 1, 8, 4], [2, 1, 5, 5], 2, 2),
        ([1, 4, 4, 4], [4, 4, 1, 1], 1, 0),
    ] {
        let a = rand_tensor(&mut rng, ashape, -1.0, 1.0);
        let w = rand_tensor(&mut rng, wshape, -1.0, 1.0);
        let zb_out = Tensor4::zeros([1, wshape[0], 1, 1]);
        let conv_a = tape_conv2d(&a, &w, &zb_out, stride, padding);
        let b = rand_tensor(&mut rng, conv_a.shape(), -1.0, 1.0);
        // Adjoint maps b back to a's geometry; output_padding restores the
        // extent lost to flooring in the forward direction.
        let opad_h = ashape[2] + 2 * padding - ((conv_a.shape()[2] - 1) * stride + wshape[2]);
        assert!(opad_h < stride.max(1) + 1);
        let zb_in = Tensor4::zeros([1, wshape[1], 1, 1]);
        let adj_b = tape_convt2d(&b, &w, &zb_in, stride, padding, opad_h);
        assert_eq!(adj_b.shape(), a.shape());
        let lhs = inner(&conv_a, &b);
        let rhs = inner(&a, &adj_b);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0), "adjoint identity violated: {lhs} vs {rhs}");
    }
}

/// Gradient of a tape graph with respect to one constant input, read back
/// after backward, against central differences of the recomputed loss.
fn fd_check_input(
    build: &dyn Fn(&mut Tape, NodeId) -> NodeId,
    x: &Tensor4,
    tol: f64,
    what: &str,
) {
    let mut set = ParamSet::new();
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let loss = build(&mut tape, xn);
    tape.backward(loss, &mut set).unwrap();
    let analytic = tape.grad(xn).expect("input gradient").clone();
    let mut f = |t: &Tensor4| {
        let mut tape = Tape::new();
        let xn = tape.constant(t.clone());
        let loss = build(&mut tape, xn);
        tape.value(loss).item()
    };
    let numeric = finite_diff(&mut f, x, DEFAULT_STEP);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "{what}: max rel err {err}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let x = rand_tensor(&mut rng, [1, 2, 3, 2], -0.9, 0.9);
    let xpos = rand_tensor(&mut rng, [1, 2, 3, 2], 0.3, 2.0);
    let other = rand_tensor(&mut rng, [1, 2, 3, 2], 0.5, 1.5);

    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> NodeId>, &Tensor4)> = vec![
        ("add", Box::new({ let o = other.clone(); move |t, x| { let o = t.constant(o.clone()); let y = t.add(x, o); t.sum_all(y) } }), &x),
        ("sub", Box::new({ let o = other.clone(); move |t, x| { let o = t.constant(o.clone()); let y = t.sub(x, o); t.sum_all(y) } }), &x),
        ("mul", Box::new({ let o = other.clone(); move |t, x| { let o = t.constant(o.clone()); let y = t.mul(x, o); t.sum_all(y) } }), &x),
        ("div", Box::new({ let o = other.clone(); move |t, x| { let o = t.constant(o.clone()); let y = t.div(x, o); t.sum_all(y) } }), &x),
        ("div_rhs", Box::new({ let o = other.clone(); move |t, x| { let o = t.constant(o.clone()); let y = t.div(o, x); t.sum_all(y) } }), &xpos),
        ("sqrt", Box::new(|t: &mut Tape, x| { let y = t.sqrt(x); t.sum_all(y) }), &xpos),
        ("exp", Box::new(|t: &mut Tape, x| { let y = t.exp(x); t.sum_all(y) }), &x),
        ("ln", Box::new(|t: &mut Tape, x| { let y = t.ln(x); t.sum_all(y) }), &xpos),
        ("tanh", Box::new(|t: &mut Tape, x| { let y = t.tanh(x); t.sum_all(y) }), &x),
        ("sigmoid", Box::new(|t: &mut Tape, x| { let y = t.sigmoid(x); t.sum_all(y) }), &x),
        ("softplus", Box::new(|t: &mut Tape, x| { let y = t.softplus(x); t.sum_all(y) }), &x),
        ("abs", Box::new(|t: &mut Tape, x| { let y = t.abs(x); t.sum_all(y) }), &xpos),
        ("leaky_relu", Box::new(|t: &mut Tape, x| { let y = t.leaky_relu(x, 0.01); t.sum_all(y) }), &x),
        ("add_scalar", Box::new(|t: &mut Tape, x| { let y = t.add_scalar(x, 0.7); t.sum_all(y) }), &x),
        ("mul_scalar", Box::new(|t: &mut Tape, x| { let y = t.mul_scalar(x, -1.3); t.sum_all(y) }), &x),
        ("clamp_min", Box::new(|t: &mut Tape, x| { let y = t.clamp_min(x, 1.0); t.sum_all(y) }), &other),
        ("reshape", Box::new(|t: &mut Tape, x| { let y = t.reshape(x, [1, 1, 12, 1]).unwrap(); let z = t.mul(y, y); t.sum_all(z) }), &x),
        ("slice_channels", Box::new(|t: &mut Tape, x| { let y = t.slice_channels(x, 1, 1).unwrap(); let z = t.mul(y, y); t.sum_all(z) }), &x),
        // Composite expression: mixes several ops so cross-terms appear.
        ("composite", Box::new({ let o = other.clone(); move |t, x| {
            let o = t.constant(o.clone());
            let p = t.mul(x, x);
            let q = t.add(p, o);
            let r = t.sqrt(q);
            let s = t.leaky_relu(r, 0.01);
            t.sum_all(s)
        } }), &x),
    ];

    for (name, build, input) in &cases {
        fd_check_input(build.as_ref(), input, 1e-6, name);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(22);
    let x = rand_tensor(&mut rng, [2, 2, 5, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, [3, 2, 3, 3], -0.6, 0.6);
    let b = rand_tensor(&mut rng, [1, 3, 1, 1], -0.2, 0.2);

    // Weighted sum output so the gradient is not uniform.
    let mix = {
        let mut t = Tape::new();
        let xn = t.constant(x.clone());
        let wn = t.constant(w.clone());
        let bn = t.constant(b.clone());
        let y = t.conv2d(xn, wn, bn, 2, 1).unwrap();
        rand_tensor(&mut rng, t.value(y).shape(), -1.0, 1.0)
    };

    // d/dx
    fd_check_input(
        &{
            let (w, b, mix) = (w.clone(), b.clone(), mix.clone());
            move |t: &mut Tape, xn| {
                let wn = t.constant(w.clone());
                let bn = t.constant(b.clone());
                let mn = t.constant(mix.clone());
                let y = t.conv2d(xn, wn, bn, 2, 1).unwrap();
                let z = t.mul(y, mn);
                t.sum_all(z)
            }
        },
        &x,
        1e-6,
        "conv2d d/dx",
    );
    // d/dw
    fd_check_input(
        &{
            let (x, b, mix) = (x.clone(), b.clone(), mix.clone());
            move |t: &mut Tape, wn| {
                let xn = t.constant(x.clone());
                let bn = t.constant(b.clone());
                let mn = t.constant(mix.clone());
                let y = t.conv2d(xn, wn, bn, 2, 1).unwrap();
                let z = t.mul(y, mn);
                t.sum_all(z)
            }
        },
        &w,
        1e-6,
        "conv2d d/dw",
    );
    // d/db
    fd_check_input(
        &{
            let (x, w, mix) = (x.clone(), w.clone(), mix.clone());
            move |t: &mut Tape, bn| {
                let xn = t.constant(x.clone());
                let wn = t.constant(w.clone());
                let mn = t.constant(mix.clone());
                let y = t.conv2d(xn, wn, bn, 2, 1).unwrap();
                let z = t.mul(y, mn);
                t.sum_all(z)
            }
        },
        &b,
        1e-6,
        "conv2d d/db",
    );
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let x = rand_tensor(&mut rng, [1, 3, 3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, [3, 2, 3, 3], -0.6, 0.6);
    let b = rand_tensor(&mut rng, [1, 2, 1, 1], -0.2, 0.2);
    let mix = {
        let mut t = Tape::new();
        let xn = t.constant(x.clone());
        let wn = t.constant(w.clone());
        let bn = t.constant(b.clone());
        let y = t.conv_transpose2d(xn, wn, bn, 2, 1, 1).unwrap();
        rand_tensor(&mut rng, t.value(y).shape(), -1.0, 1.0)
    };

    let variants: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> NodeId>, &Tensor4)> = vec![
        ("convT d/dx", Box::new({
            let (w, b, mix) = (w.clone(), b.clone(), mix.clone());
            move |t: &mut Tape, xn| {
                let wn = t.constant(w.clone());
                let bn = t.constant(b.clone());
                let mn = t.constant(mix.clone());
                let y = t.conv_transpose2d(xn, wn, bn, 2, 1, 1).unwrap();
                let z = t.mul(y, mn);
                t.sum_all(z)
            }
        }), &x),
        ("convT d/dw", Box::new({
            let (x, b, mix) = (x.clone(), b.clone(), mix.clone());
            move |t: &mut Tape, wn| {
                let xn = t.constant(x.clone());
                let bn = t.constant(b.clone());
                let mn = t.constant(mix.clone());
                let y = t.conv_transpose2d(xn, wn, bn, 2, 1, 1).unwrap();
                let z = t.mul(y, mn);
                t.sum_all(z)
            }
        }), &w),
        ("convT d/db", Box::new({
            let (x, w, mix) = (x.clone(), w.clone(), mix.clone());
            move |t: &mut Tape, bn| {
                let xn = t.constant(x.clone());
                let wn = t.constant(w.clone());
                let mn = t.constant(mix.clone());
                let y = t.conv_transpose2d(xn, wn, bn, 2, 1, 1).unwrap();
                let z = t.mul(y, mn);
                t.sum_all(z)
            }
        }), &b),
    ];
    for (name, build, input) in &variants {
        fd_check_input(build.as_ref(), input, 1e-6, name);
    }
}

#[test]
fn channel_matmul_and_mul_cvec_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(24);
    let h = rand_tensor(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
    let x = rand_tensor(&mut rng, [2, 2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, [1, 2, 3, 1], -0.5, 0.5);
    let v = rand_tensor(&mut rng, [1, 2, 3, 1], 0.2, 1.2);

    let parts: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> NodeId>, &Tensor4)> = vec![
        ("channel_matmul d/dh", Box::new({
            let (x, b) = (x.clone(), b.clone());
            move |t: &mut Tape, hn| {
                let xn = t.constant(x.clone());
                let bn = t.constant(b.clone());
                let y = t.channel_matmul(hn, xn, bn).unwrap();
                let z = t.mul(y, y);
                t.sum_all(z)
            }
        }), &h),
        ("channel_matmul d/dx", Box::new({
            let (h, b) = (h.clone(), b.clone());
            move |t: &mut Tape, xn| {
                let hn = t.constant(h.clone());
                let bn = t.constant(b.clone());
                let y = t.channel_matmul(hn, xn, bn).unwrap();
                let z = t.mul(y, y);
                t.sum_all(z)
            }
        }), &x),
        ("channel_matmul d/db", Box::new({
            let (h, x) = (h.clone(), x.clone());
            move |t: &mut Tape, bn| {
                let hn = t.constant(h.clone());
                let xn = t.constant(x.clone());
                let y = t.channel_matmul(hn, xn, bn).unwrap();
                let z = t.mul(y, y);
                t.sum_all(z)
            }
        }), &b),
        ("mul_cvec d/dx", Box::new({
            let v = v.clone();
            move |t: &mut Tape, xn| {
                let vn = t.constant(v.clone());
                let y = t.mul_cvec(xn, vn).unwrap();
                let z = t.mul(y, y);
                t.sum_all(z)
            }
        }), &x),
        ("mul_cvec d/dv", Box::new({
            let x = x.clone();
            move |t: &mut Tape, vn| {
                let xn = t.constant(x.clone());
                let y = t.mul_cvec(xn, vn).unwrap();
                let z = t.mul(y, y);
                t.sum_all(z)
            }
        }), &v),
    ];
    for (name, build, input) in &parts {
        fd_check_input(build.as_ref(), input, 1e-6, name);
    }
}

#[test]
fn gaussian_interval_prob_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(25);
    let y = rand_tensor(&mut rng, [1, 2, 2, 3], -2.0, 2.0);
    let mu = rand_tensor(&mut rng, [1, 2, 2, 3], -1.0, 1.0);
    let sigma = rand_tensor(&mut rng, [1, 2, 2, 3], 0.3, 3.0);

    let parts: Vec<(&str, Box<dyn Fn(&mut Tape, NodeId) -> NodeId>, &Tensor4)> = vec![
        ("gaussian d/dy", Box::new({
            let (mu, sigma) = (mu.clone(), sigma.clone());
            move |t: &mut Tape, yn| {
                let mn = t.constant(mu.clone());
                let sn = t.constant(sigma.clone());
                let p = t.gaussian_interval_prob(yn, mn, sn).unwrap();
                let lp = t.ln(p);
                t.sum_all(lp)
            }
        }), &y),
        ("gaussian d/dmu", Box::new({
            let (y, sigma) = (y.clone(), sigma.clone());
            move |t: &mut Tape, mn| {
                let yn = t.constant(y.clone());
                let sn = t.constant(sigma.clone());
                let p = t.gaussian_interval_prob(yn, mn, sn).unwrap();
                let lp = t.ln(p);
                t.sum_all(lp)
            }
        }), &mu),
        ("gaussian d/dsigma", Box::new({
            let (y, mu) = (y.clone(), mu.clone());
            move |t: &mut Tape, sn| {
                let yn = t.constant(y.clone());
                let mn = t.constant(mu.clone());
                let p = t.gaussian_interval_prob(yn, mn, sn).unwrap();
                let lp = t.ln(p);
                t.sum_all(lp)
            }
        }), &sigma),
    ];
    for (name, build, input) in &parts {
        fd_check_input(build.as_ref(), input, 1e-5, name);
    }
}

#[test]
fn add_noise_backward_is_identity_and_bounded() {
    let mut rng = ChaCha20Rng::seed_from_u64(26);
    let x = rand_tensor(&mut rng, [1, 1, 10, 10], -1.0, 1.0);
    let mut set = ParamSet::new();
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let noisy = tape.add_noise(xn, &mut rng);
    for i in 0..x.len() {
        let d = (tape.value(noisy).data()[i] - x.data()[i]).abs();
        assert!(d <= 0.5, "noise magnitude {d} exceeds 0.5");
    }
    let loss = tape.sum_all(noisy);
    tape.backward(loss, &mut set).unwrap();
    let g = tape.grad(xn).unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Adjoint identity on randomized geometry: the transposed convolution
    /// with the same weight tensor is the exact adjoint of conv2d.
    #[test]
    fn adjoint_identity_holds(
        seed in 0u64..1000,
        cin in 1usize..3,
        cout in 1usize..3,
        h in 3usize..7,
        w in 3usize..7,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
    ) {
        let padding = k / 2;
        prop_assume!(h + 2 * padding >= k && w + 2 * padding >= k);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, [1, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, [cout, cin, k, k], -1.0, 1.0);
        let zb_out = Tensor4::zeros([1, cout, 1, 1]);
        let conv_a = tape_conv2d(&a, &wt, &zb_out, stride, padding);
        let oh = conv_a.shape()[2];
        let ow = conv_a.shape()[3];
        let opad_h = h + 2 * padding - ((oh - 1) * stride + k);
        let opad_w = w + 2 * padding - ((ow - 1) * stride + k);
        prop_assume!(opad_h == opad_w && opad_h < stride);
        let b = rand_tensor(&mut rng, conv_a.shape(), -1.0, 1.0);
        let zb_in = Tensor4::zeros([1, cin, 1, 1]);
        let adj_b = tape_convt2d(&b, &wt, &zb_in, stride, padding, opad_h);
        prop_assert_eq!(adj_b.shape(), a.shape());
        let lhs = inner(&conv_a, &b);
        let rhs = inner(&a, &adj_b);
        prop_assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}
