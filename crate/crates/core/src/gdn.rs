//! Generalized divisive normalization: `y_i = x_i / sqrt(beta_i + Σ_j
//! gamma_ij · x_j²)`, and the multiplicative form that replaces the
//! division with a product. Constraints (`beta ≥ BETA_MIN`, `gamma ≥ 0`)
//! are enforced by storing square roots and squaring on use, so plain
//! optimizer steps can never leave the feasible set.

use crate::gradcheck::{finite_diff, max_rel_err, DEFAULT_STEP};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamId, ParamSet, ShapeError, Tensor4};

/// Floor added to the squared beta parameter; keeps the divisor bounded
/// away from zero for any raw value, including exact zero.
pub const BETA_MIN: f64 = 1e-6;

/// Small positive pedestal under the squared gamma entries at init.
/// A raw gamma stored as exactly zero has zero gradient through the
/// squaring (d(g²)/dg = 2g), so off-diagonal couplings could never start
/// moving; seeding every entry slightly above zero keeps them trainable.
const GAMMA_PEDESTAL: f64 = 1.0 / ((1u64 << 18) as f64);

/// One (inverse) divisive-normalization layer over a fixed channel count.
#[derive(Clone, Copy, Debug)]
pub struct GdnLayer {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
    pub channels: usize,
}

impl GdnLayer {
    /// Registers `{prefix}.beta` (shape 1×C×1×1) and `{prefix}.gamma`
    /// (C×C×1×1) with effective values beta ≈ 1 and gamma ≈ 0.1·I, a
    /// near-identity start.
    pub fn new(set: &mut ParamSet, prefix: &str, channels: usize, inverse: bool) -> Self {
        let beta_raw = (1.0 - BETA_MIN).sqrt();
        let beta = set.add(
            &format!("{prefix}.beta"),
            Tensor4::filled([1, channels, 1, 1], beta_raw),
        );
        let mut g = Tensor4::zeros([channels, channels, 1, 1]);
        for i in 0..channels {
            for j in 0..channels {
                let eff = if i == j { 0.1 + GAMMA_PEDESTAL } else { GAMMA_PEDESTAL };
                *g.at_mut(i, j, 0, 0) = eff.sqrt();
            }
        }
        let gamma = set.add(&format!("{prefix}.gamma"), g);
        GdnLayer {
            beta,
            gamma,
            inverse,
            channels,
        }
    }

    /// Current effective (beta, gamma) after the squaring reparameterization.
    pub fn effective(&self, set: &ParamSet) -> (Tensor4, Tensor4) {
        let beta = set.get(self.beta).value.map(|v| v * v + BETA_MIN);
        let gamma = set.get(self.gamma).value.map(|v| v * v);
        (beta, gamma)
    }

    /// Records the layer onto `tape`. The channel-mixing sum is a 1×1
    /// convolution of the squared input by the effective gamma with the
    /// effective beta as bias.
    pub fn apply(&self, tape: &mut Tape, set: &ParamSet, x: NodeId) -> Result<NodeId, ShapeError> {
        let got = tape.value(x).shape()[1];
        if got != self.channels {
            return Err(ShapeError::Mismatch {
                op: "gdn",
                what: "input channels",
                expected: self.channels.to_string(),
                got: got.to_string(),
            });
        }
        let beta_raw = tape.param(set, self.beta);
        let gamma_raw = tape.param(set, self.gamma);
        let beta_sq = tape.mul(beta_raw, beta_raw);
        let beta_eff = tape.add_scalar(beta_sq, BETA_MIN);
        let gamma_eff = tape.mul(gamma_raw, gamma_raw);
        let xsq = tape.mul(x, x);
        let pooled = tape.conv2d(xsq, gamma_eff, beta_eff, 1, 0)?;
        let d = tape.sqrt(pooled);
        Ok(if self.inverse { tape.mul(x, d) } else { tape.div(x, d) })
    }
}

/// Max relative error between analytic and central-finite-difference
/// gradients of `Σ (y + y²)` w.r.t. the input, beta, and gamma. The linear
/// term keeps the check meaningful at zero input, where the quadratic
/// loss alone has an identically zero gradient.
pub fn gdn_gradcheck(set: &ParamSet, layer: &GdnLayer, input: &Tensor4) -> f64 {
    fn loss(set: &ParamSet, layer: &GdnLayer, input: &Tensor4) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = layer.apply(&mut tape, set, x).expect("gdn apply");
        let ysq = tape.mul(y, y);
        let s = tape.add(y, ysq);
        let l = tape.sum_all(s);
        tape.value(l).item()
    }

    let mut work = set.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = layer.apply(&mut tape, &work, x).expect("gdn apply");
    let ysq = tape.mul(y, y);
    let s = tape.add(y, ysq);
    let l = tape.sum_all(s);
    tape.backward(l, &mut work).expect("gdn backward");

    let mut worst: f64 = 0.0;

    let analytic_x = tape.grad(x).expect("input grad").clone();
    let mut f_x = |t: &Tensor4| loss(set, layer, t);
    let numeric_x = finite_diff(&mut f_x, input, DEFAULT_STEP);
    worst = worst.max(max_rel_err(&analytic_x, &numeric_x));

    for id in [layer.beta, layer.gamma] {
        let analytic = work.get(id).grad.clone();
        let base = (*set.get(id).value).clone();
        let mut f_p = |t: &Tensor4| {
            let mut probe = set.clone();
            probe.get_mut(id).value = std::sync::Arc::new(t.clone());
            loss(&probe, layer, input)
        };
        let numeric = finite_diff(&mut f_p, &base, DEFAULT_STEP);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}
