//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! The tape records eagerly: each operation computes its output at record
//! time and remembers its inputs. `backward` replays the records in
//! reverse, accumulating vector-Jacobian products. Node indices are
//! topological by construction, so a single reverse sweep visits every
//! consumer of a node before the node itself.
//!
//! Parameter gradients accumulate into the owning [`ParamSet`]; repeated
//! backward calls keep adding until the caller zeroes the grads.

use std::sync::Arc;

use rand::Rng;

use crate::math::{normal_pdf, sigmoid, softplus};
use crate::tensor::{ParamId, ParamSet, ShapeError, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Sqrt { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Softplus { a: NodeId },
    Abs { a: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    ClampMin { a: NodeId, c: f64 },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
    AddNoise { a: NodeId },
    SliceChannels { a: NodeId, start: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize },
    ChannelMatmul { h: NodeId, x: NodeId, b: NodeId },
    MulCvec { x: NodeId, v: NodeId },
    GaussianIntervalProb { y: NodeId, mu: NodeId, sigma: NodeId },
}

struct Node {
    value: Arc<Tensor4>,
    grad: Option<Tensor4>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, what: &'static str, expected: impl ToString, got: impl ToString) -> ShapeError {
    ShapeError::Mismatch {
        op,
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor4, op: Op) -> NodeId {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Tensor4>, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Tensor4 {
        &self.nodes[n.0].value
    }

    pub fn value_arc(&self, n: NodeId) -> Arc<Tensor4> {
        Arc::clone(&self.nodes[n.0].value)
    }

    /// Gradient of the last backward target with respect to node `n`.
    pub fn grad(&self, n: NodeId) -> Option<&Tensor4> {
        self.nodes[n.0].grad.as_ref()
    }

    pub fn constant(&mut self, t: Tensor4) -> NodeId {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor4>) -> NodeId {
        self.push_arc(t, Op::Leaf { param: None })
    }

    /// Injects a parameter value (shared, not copied).
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> NodeId {
        let value = Arc::clone(&set.get(id).value);
        self.push_arc(value, Op::Leaf { param: Some(id) })
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{op_name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::from_vec(ta.shape(), data).expect("same length by construction")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_same_shape("add", a, b, |x, y| x + y);
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_same_shape("sub", a, b, |x, y| x - y);
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_same_shape("mul", a, b, |x, y| x * y);
        self.push(v, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_same_shape("div", a, b, |x, y| x / y);
        self.push(v, Op::Div { a, b })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs { a })
    }

    /// max(x, 0) + slope * min(x, 0). The derivative at exactly 0 is taken
    /// as `slope`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu { a, slope })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar { a, c })
    }

    /// max(x, c). The derivative where x <= c is 0.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(c));
        self.push(v, Op::ClampMin { a, c })
    }

    /// Sum over every element, producing a [1,1,1,1] scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor4::scalar(s), Op::SumAll { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: [usize; 4]) -> Result<NodeId, ShapeError> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { a }))
    }

    /// x + u with u drawn i.i.d. from U(-0.5, 0.5). The noise is treated
    /// as a constant: the backward pass is the identity.
    pub fn add_noise<R: Rng>(&mut self, a: NodeId, rng: &mut R) -> NodeId {
        let mut v = (*self.value_arc(a)).clone();
        for x in v.data_mut() {
            *x += rng.gen::<f64>() - 0.5;
        }
        self.push(v, Op::AddNoise { a })
    }

    /// Channels [start, start+len) of a (B,C,H,W) node.
    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, ShapeError> {
        let t = self.value(a);
        let [bs, c, h, w] = t.shape();
        if start + len > c {
            return Err(mismatch("slice_channels", "channel range", format!("<= {c}"), start + len));
        }
        let mut out = Tensor4::zeros([bs, len, h, w]);
        for b in 0..bs {
            for oc in 0..len {
                for row in 0..h {
                    for col in 0..w {
                        *out.at_mut(b, oc, row, col) = t.at(b, start + oc, row, col);
                    }
                }
            }
        }
        Ok(self.push(out, Op::SliceChannels { a, start }))
    }

    /// 2-D convolution. `x` is (B, Cin, H, W), `w` is (Cout, Cin, kh, kw),
    /// `b` is (1, Cout, 1, 1). Stride must be 1 or 2.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId, ShapeError> {
        let v = conv2d_fwd(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Transposed 2-D convolution, the adjoint of [`Tape::conv2d`] in its
    /// spatial indexing. `x` is (B, Cin, H, W), `w` is (Cin, Cout, kh, kw),
    /// `b` is (1, Cout, 1, 1). Output extent is
    /// (H-1)*stride - 2*padding + kh + output_padding.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<NodeId, ShapeError> {
        let v = convt2d_fwd(self.value(x), self.value(w), self.value(b), stride, padding, output_padding)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, stride, padding }))
    }

    /// Per-channel affine map: out[b,c,:,l] = h[0,c] @ x[b,c,:,l] + bias[0,c].
    /// `h` is (1, C, Rout, Rin), `x` is (B, C, Rin, L), `bias` is (1, C, Rout, 1).
    pub fn channel_matmul(&mut self, h: NodeId, x: NodeId, bias: NodeId) -> Result<NodeId, ShapeError> {
        let v = channel_matmul_fwd(self.value(h), self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::ChannelMatmul { h, x, b: bias }))
    }

    /// Elementwise multiply with a per-channel column vector broadcast over
    /// batch and the last axis: `x` (B, C, R, L) * `v` (1, C, R, 1).
    pub fn mul_cvec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, ShapeError> {
        let tx = self.value(x);
        let tv = self.value(v);
        let [bs, c, r, l] = tx.shape();
        if tv.shape() != [1, c, r, 1] {
            return Err(mismatch("mul_cvec", "vector shape", format!("[1, {c}, {r}, 1]"), format!("{:?}", tv.shape())));
        }
        let mut out = Tensor4::zeros([bs, c, r, l]);
        for b in 0..bs {
            for ch in 0..c {
                for row in 0..r {
                    let s = tv.at(0, ch, row, 0);
                    for col in 0..l {
                        *out.at_mut(b, ch, row, col) = tx.at(b, ch, row, col) * s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MulCvec { x, v }))
    }

    /// Probability that a unit-width interval centered on `y` falls under a
    /// Gaussian with the given mean and scale:
    /// Phi((y - mu + 1/2) / sigma) - Phi((y - mu - 1/2) / sigma).
    /// Unclamped; compose with [`Tape::clamp_min`] before taking logs.
    pub fn gaussian_interval_prob(&mut self, y: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId, ShapeError> {
        let (ty, tm, ts) = (self.value(y), self.value(mu), self.value(sigma));
        if ty.shape() != tm.shape() {
            return Err(mismatch("gaussian_interval_prob", "mean shape", format!("{:?}", ty.shape()), format!("{:?}", tm.shape())));
        }
        if ty.shape() != ts.shape() {
            return Err(mismatch("gaussian_interval_prob", "scale shape", format!("{:?}", ty.shape()), format!("{:?}", ts.shape())));
        }
        let mut out = Tensor4::zeros(ty.shape());
        for i in 0..ty.len() {
            let d = ty.data()[i] - tm.data()[i];
            let s = ts.data()[i];
            out.data_mut()[i] = crate::math::normal_cdf((d + 0.5) / s) - crate::math::normal_cdf((d - 0.5) / s);
        }
        Ok(self.push(out, Op::GaussianIntervalProb { y, mu, sigma }))
    }

    fn add_grad(&mut self, n: NodeId, contribution: Tensor4) {
        match &mut self.nodes[n.0].grad {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from `loss` (must be a [1,1,1,1] scalar). Gradients of
    /// parameter leaves accumulate into `params.grad`; gradients of every
    /// reached node stay readable through [`Tape::grad`] until the next
    /// backward call.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<(), ShapeError> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", "loss shape", "[1, 1, 1, 1]", format!("{:?}", self.value(loss).shape())));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor4::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            let out_val = Arc::clone(&self.nodes[i].value);
            match op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        params.get_mut(pid).grad.add_assign(&g);
                    }
                }
                Op::Add { a, b } => {
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g.clone());
                }
                Op::Sub { a, b } => {
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value_arc(a), self.value_arc(b));
                    self.add_grad(a, zip3(&g, &vb, |gi, bi| gi * bi));
                    self.add_grad(b, zip3(&g, &va, |gi, ai| gi * ai));
                }
                Op::Div { a, b } => {
                    let vb = self.value_arc(b);
                    self.add_grad(a, zip3(&g, &vb, |gi, bi| gi / bi));
                    let ga = zip4(&g, &out_val, &vb, |gi, yi, bi| -gi * yi / bi);
                    self.add_grad(b, ga);
                }
                Op::Sqrt { a } => {
                    self.add_grad(a, zip3(&g, &out_val, |gi, yi| 0.5 * gi / yi));
                }
                Op::Exp { a } => {
                    self.add_grad(a, zip3(&g, &out_val, |gi, yi| gi * yi));
                }
                Op::Ln { a } => {
                    let va = self.value_arc(a);
                    self.add_grad(a, zip3(&g, &va, |gi, ai| gi / ai));
                }
                Op::Tanh { a } => {
                    self.add_grad(a, zip3(&g, &out_val, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Sigmoid { a } => {
                    self.add_grad(a, zip3(&g, &out_val, |gi, yi| gi * yi * (1.0 - yi)));
                }
                Op::Softplus { a } => {
                    let va = self.value_arc(a);
                    self.add_grad(a, zip3(&g, &va, |gi, ai| gi * sigmoid(ai)));
                }
                Op::Abs { a } => {
                    let va = self.value_arc(a);
                    self.add_grad(a, zip3(&g, &va, |gi, ai| gi * if ai > 0.0 { 1.0 } else if ai < 0.0 { -1.0 } else { 0.0 }));
                }
                Op::LeakyRelu { a, slope } => {
                    let va = self.value_arc(a);
                    self.add_grad(a, zip3(&g, &va, |gi, ai| gi * if ai > 0.0 { 1.0 } else { slope }));
                }
                Op::AddScalar { a } => self.add_grad(a, g.clone()),
                Op::MulScalar { a, c } => self.add_grad(a, g.map(|v| v * c)),
                Op::ClampMin { a, c } => {
                    let va = self.value_arc(a);
                    self.add_grad(a, zip3(&g, &va, |gi, ai| if ai > c { gi } else { 0.0 }));
                }
                Op::SumAll { a } => {
                    let shape = self.value(a).shape();
                    self.add_grad(a, Tensor4::filled(shape, g.item()));
                }
                Op::Reshape { a } => {
                    let shape = self.value(a).shape();
                    self.add_grad(a, g.reshaped(shape).expect("reshape grad length"));
                }
                Op::AddNoise { a } => self.add_grad(a, g.clone()),
                Op::SliceChannels { a, start } => {
                    let shape = self.value(a).shape();
                    let mut da = Tensor4::zeros(shape);
                    let [bs, len, h, w] = g.shape();
                    for b in 0..bs {
                        for c in 0..len {
                            for row in 0..h {
                                for col in 0..w {
                                    *da.at_mut(b, start + c, row, col) = g.at(b, c, row, col);
                                }
                            }
                        }
                    }
                    self.add_grad(a, da);
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    let (vx, vw) = (self.value_arc(x), self.value_arc(w));
                    let (dx, dw, db) = conv2d_bwd(&vx, &vw, &g, stride, padding);
                    self.add_grad(x, dx);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
                Op::ConvTranspose2d { x, w, b, stride, padding } => {
                    let (vx, vw) = (self.value_arc(x), self.value_arc(w));
                    let (dx, dw, db) = convt2d_bwd(&vx, &vw, &g, stride, padding);
                    self.add_grad(x, dx);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
                Op::ChannelMatmul { h, x, b } => {
                    let (vh, vx) = (self.value_arc(h), self.value_arc(x));
                    let (dh, dx, db) = channel_matmul_bwd(&vh, &vx, &g);
                    self.add_grad(h, dh);
                    self.add_grad(x, dx);
                    self.add_grad(b, db);
                }
                Op::MulCvec { x, v } => {
                    let (vx, vv) = (self.value_arc(x), self.value_arc(v));
                    let [bs, c, r, l] = vx.shape();
                    let mut dx = Tensor4::zeros([bs, c, r, l]);
                    let mut dv = Tensor4::zeros([1, c, r, 1]);
                    for b in 0..bs {
                        for ch in 0..c {
                            for row in 0..r {
                                let s = vv.at(0, ch, row, 0);
                                let mut acc = 0.0;
                                for col in 0..l {
                                    let gi = g.at(b, ch, row, col);
                                    *dx.at_mut(b, ch, row, col) = gi * s;
                                    acc += gi * vx.at(b, ch, row, col);
                                }
                                *dv.at_mut(0, ch, row, 0) += acc;
                            }
                        }
                    }
                    self.add_grad(x, dx);
                    self.add_grad(v, dv);
                }
                Op::GaussianIntervalProb { y, mu, sigma } => {
                    let (vy, vm, vs) = (self.value_arc(y), self.value_arc(mu), self.value_arc(sigma));
                    let mut dy = Tensor4::zeros(vy.shape());
                    let mut dm = Tensor4::zeros(vy.shape());
                    let mut ds = Tensor4::zeros(vy.shape());
                    for i in 0..vy.len() {
                        let gi = g.data()[i];
                        let d = vy.data()[i] - vm.data()[i];
                        let s = vs.data()[i];
                        let up = (d + 0.5) / s;
                        let un = (d - 0.5) / s;
                        let (pu, pn) = (normal_pdf(up), normal_pdf(un));
                        let ddy = (pu - pn) / s;
                        dy.data_mut()[i] = gi * ddy;
                        dm.data_mut()[i] = -gi * ddy;
                        ds.data_mut()[i] = -gi * (pu * up - pn * un) / s;
                    }
                    self.add_grad(y, dy);
                    self.add_grad(mu, dm);
                    self.add_grad(sigma, ds);
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

fn zip3(g: &Tensor4, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    debug_assert_eq!(g.shape(), other.shape());
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor4::from_vec(g.shape(), data).expect("same length")
}

fn zip4(g: &Tensor4, u: &Tensor4, v: &Tensor4, f: impl Fn(f64, f64, f64) -> f64) -> Tensor4 {
    let data = g
        .data()
        .iter()
        .zip(u.data())
        .zip(v.data())
        .map(|((&a, &b), &c)| f(a, b, c))
        .collect();
    Tensor4::from_vec(g.shape(), data).expect("same length")
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn check_bias(op: &'static str, bias: &Tensor4, cout: usize) -> Result<(), ShapeError> {
    if bias.shape() != [1, cout, 1, 1] {
        return Err(mismatch(op, "bias shape", format!("[1, {cout}, 1, 1]"), format!("{:?}", bias.shape())));
    }
    Ok(())
}

/// Half-open output range [lo, hi) for which `o*stride + k - padding`
/// lands inside [0, in_extent). May be empty (lo >= hi).
#[inline]
fn conv_span(out_extent: usize, in_extent: usize, stride: usize, k: usize, padding: usize) -> (usize, usize) {
    if in_extent + padding <= k {
        return (0, 0);
    }
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    let hi = ((in_extent - 1 + padding - k) / stride).min(out_extent.saturating_sub(1)) + 1;
    (lo.min(hi), hi)
}

fn conv2d_fwd(x: &Tensor4, w: &Tensor4, bias: &Tensor4, stride: usize, padding: usize) -> Result<Tensor4, ShapeError> {
    if stride != 1 && stride != 2 {
        return Err(mismatch("conv2d", "stride", "1 or 2", stride));
    }
    let [bs, cin, h, win] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if wcin != cin {
        return Err(mismatch("conv2d", "input channels", cin, wcin));
    }
    check_bias("conv2d", bias, cout)?;
    let oh = conv_out_extent(h, kh, stride, padding)
        .ok_or_else(|| mismatch("conv2d", "input rows", format!(">= {}", kh.saturating_sub(2 * padding)), h))?;
    let ow = conv_out_extent(win, kw, stride, padding)
        .ok_or_else(|| mismatch("conv2d", "input cols", format!(">= {}", kw.saturating_sub(2 * padding)), win))?;

    let mut out = Tensor4::zeros([bs, cout, oh, ow]);
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let od = out.data_mut();
    // Per-output accumulation order is bias, then (ic, krow, kcol)
    // ascending over the in-bounds taps.
    for b in 0..bs {
        for oc in 0..cout {
            let obase = (b * cout + oc) * oh * ow;
            od[obase..obase + oh * ow].fill(bd[oc]);
            for ic in 0..cin {
                let xcbase = (b * cin + ic) * h * win;
                let wcbase = (oc * cin + ic) * kh * kw;
                for krow in 0..kh {
                    let (orow_lo, orow_hi) = conv_span(oh, h, stride, krow, padding);
                    for orow in orow_lo..orow_hi {
                        let xrbase = xcbase + (orow * stride + krow - padding) * win;
                        let orbase = obase + orow * ow;
                        for kcol in 0..kw {
                            let wv = wd[wcbase + krow * kw + kcol];
                            let (lo, hi) = conv_span(ow, win, stride, kcol, padding);
                            let mut i = xrbase + lo * stride + kcol - padding;
                            for o in &mut od[orbase + lo..orbase + hi] {
                                *o += xd[i] * wv;
                                i += stride;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_bwd(x: &Tensor4, w: &Tensor4, g: &Tensor4, stride: usize, padding: usize) -> (Tensor4, Tensor4, Tensor4) {
    let [bs, cin, h, win] = x.shape();
    let [cout, _, kh, kw] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    let mut db = Tensor4::zeros([1, cout, 1, 1]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..bs {
        for oc in 0..cout {
            let gbase = (b * cout + oc) * oh * ow;
            *db.at_mut(0, oc, 0, 0) += gd[gbase..gbase + oh * ow].iter().sum::<f64>();
            for ic in 0..cin {
                let xcbase = (b * cin + ic) * h * win;
                let wcbase = (oc * cin + ic) * kh * kw;
                for krow in 0..kh {
                    let (orow_lo, orow_hi) = conv_span(oh, h, stride, krow, padding);
                    for orow in orow_lo..orow_hi {
                        let xrbase = xcbase + (orow * stride + krow - padding) * win;
                        let grbase = gbase + orow * ow;
                        for kcol in 0..kw {
                            let wslot = wcbase + krow * kw + kcol;
                            let wv = wd[wslot];
                            let (lo, hi) = conv_span(ow, win, stride, kcol, padding);
                            let mut i = xrbase + lo * stride + kcol - padding;
                            let mut wacc = 0.0;
                            for &gi in &gd[grbase + lo..grbase + hi] {
                                dxd[i] += gi * wv;
                                wacc += gi * xd[i];
                                i += stride;
                            }
                            dwd[wslot] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn convt2d_fwd(
    x: &Tensor4,
    w: &Tensor4,
    bias: &Tensor4,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor4, ShapeError> {
    if stride != 1 && stride != 2 {
        return Err(mismatch("conv_transpose2d", "stride", "1 or 2", stride));
    }
    if output_padding >= stride {
        return Err(mismatch("conv_transpose2d", "output_padding", format!("< stride {stride}"), output_padding));
    }
    let [bs, cin, h, win] = x.shape();
    let [wcin, cout, kh, kw] = w.shape();
    if wcin != cin {
        return Err(mismatch("conv_transpose2d", "input channels", cin, wcin));
    }
    check_bias("conv_transpose2d", bias, cout)?;
    let oh_signed = (h - 1) * stride + kh + output_padding;
    let ow_signed = (win - 1) * stride + kw + output_padding;
    if oh_signed <= 2 * padding || ow_signed <= 2 * padding {
        return Err(mismatch("conv_transpose2d", "output extent", "> 0", format!("{} x {}", oh_signed as isize - 2 * padding as isize, ow_signed as isize - 2 * padding as isize)));
    }
    let (oh, ow) = (oh_signed - 2 * padding, ow_signed - 2 * padding);

    let mut out = Tensor4::zeros([bs, cout, oh, ow]);
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let od = out.data_mut();
    for b in 0..bs {
        for oc in 0..cout {
            let obase = (b * cout + oc) * oh * ow;
            od[obase..obase + oh * ow].fill(bd[oc]);
        }
        // Scatter per input tap: the kcol window lands contiguously in
        // the output row, clipped at the borders.
        for ic in 0..cin {
            let xcbase = (b * cin + ic) * h * win;
            for row in 0..h {
                let xrbase = xcbase + row * win;
                for col in 0..win {
                    let xv = xd[xrbase + col];
                    if xv == 0.0 {
                        continue;
                    }
                    for oc in 0..cout {
                        let obase = (b * cout + oc) * oh * ow;
                        let wcbase = (ic * cout + oc) * kh * kw;
                        for krow in 0..kh {
                            let orow = row * stride + krow;
                            if orow < padding || orow - padding >= oh {
                                continue;
                            }
                            let orbase = obase + (orow - padding) * ow;
                            let kc_lo = padding.saturating_sub(col * stride);
                            let kc_hi = kw.min((ow + padding).saturating_sub(col * stride));
                            if kc_lo >= kc_hi {
                                continue;
                            }
                            let wrbase = wcbase + krow * kw;
                            let mut o = orbase + col * stride + kc_lo - padding;
                            for &wv in &wd[wrbase + kc_lo..wrbase + kc_hi] {
                                od[o] += xv * wv;
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn convt2d_bwd(x: &Tensor4, w: &Tensor4, g: &Tensor4, stride: usize, padding: usize) -> (Tensor4, Tensor4, Tensor4) {
    let [bs, cin, h, win] = x.shape();
    let [_, cout, kh, kw] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    let mut db = Tensor4::zeros([1, cout, 1, 1]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..bs {
        for oc in 0..cout {
            let gbase = (b * cout + oc) * oh * ow;
            *db.at_mut(0, oc, 0, 0) += gd[gbase..gbase + oh * ow].iter().sum::<f64>();
        }
        for ic in 0..cin {
            let xcbase = (b * cin + ic) * h * win;
            for row in 0..h {
                let xrbase = xcbase + row * win;
                for col in 0..win {
                    let xv = xd[xrbase + col];
                    let mut dxac = 0.0;
                    for oc in 0..cout {
                        let gbase = (b * cout + oc) * oh * ow;
                        let wcbase = (ic * cout + oc) * kh * kw;
                        for krow in 0..kh {
                            let orow = row * stride + krow;
                            if orow < padding || orow - padding >= oh {
                                continue;
                            }
                            let grbase = gbase + (orow - padding) * ow;
                            let kc_lo = padding.saturating_sub(col * stride);
                            let kc_hi = kw.min((ow + padding).saturating_sub(col * stride));
                            if kc_lo >= kc_hi {
                                continue;
                            }
                            let wrbase = wcbase + krow * kw;
                            let gstart = grbase + col * stride + kc_lo - padding;
                            let grow = &gd[gstart..gstart + (kc_hi - kc_lo)];
                            let wrow = &wd[wrbase + kc_lo..wrbase + kc_hi];
                            let dwrow = &mut dwd[wrbase + kc_lo..wrbase + kc_hi];
                            for ((&gi, &wv), dwv) in grow.iter().zip(wrow).zip(dwrow) {
                                dxac += gi * wv;
                                *dwv += gi * xv;
                            }
                        }
                    }
                    dxd[xrbase + col] += dxac;
                }
            }
        }
    }
    (dx, dw, db)
}

fn channel_matmul_fwd(h: &Tensor4, x: &Tensor4, bias: &Tensor4) -> Result<Tensor4, ShapeError> {
    let [hb, hc, rout, rin] = h.shape();
    let [bs, xc, xrin, l] = x.shape();
    if hb != 1 {
        return Err(mismatch("channel_matmul", "matrix batch", 1, hb));
    }
    if xc != hc {
        return Err(mismatch("channel_matmul", "channels", hc, xc));
    }
    if xrin != rin {
        return Err(mismatch("channel_matmul", "inner extent", rin, xrin));
    }
    if bias.shape() != [1, hc, rout, 1] {
        return Err(mismatch("channel_matmul", "bias shape", format!("[1, {hc}, {rout}, 1]"), format!("{:?}", bias.shape())));
    }
    let mut out = Tensor4::zeros([bs, hc, rout, l]);
    for b in 0..bs {
        for c in 0..hc {
            for r in 0..rout {
                let b0 = bias.at(0, c, r, 0);
                for col in 0..l {
                    let mut acc = b0;
                    for q in 0..rin {
                        acc += h.at(0, c, r, q) * x.at(b, c, q, col);
                    }
                    *out.at_mut(b, c, r, col) = acc;
                }
            }
        }
    }
    Ok(out)
}

fn channel_matmul_bwd(h: &Tensor4, x: &Tensor4, g: &Tensor4) -> (Tensor4, Tensor4, Tensor4) {
    let [_, c, rout, rin] = h.shape();
    let [bs, _, _, l] = x.shape();
    let mut dh = Tensor4::zeros(h.shape());
    let mut dx = Tensor4::zeros(x.shape());
    let mut db = Tensor4::zeros([1, c, rout, 1]);
    for b in 0..bs {
        for ch in 0..c {
            for r in 0..rout {
                let mut bacc = 0.0;
                for col in 0..l {
                    let gi = g.at(b, ch, r, col);
                    bacc += gi;
                    for q in 0..rin {
                        *dh.at_mut(0, ch, r, q) += gi * x.at(b, ch, q, col);
                        *dx.at_mut(b, ch, q, col) += gi * h.at(0, ch, r, q);
                    }
                }
                *db.at_mut(0, ch, r, 0) += bacc;
            }
        }
    }
    (dh, dx, db)
}
