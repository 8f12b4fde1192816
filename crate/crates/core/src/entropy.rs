//! Probability models for the two latent tensors and their quantized
//! frequency tables for the range coder.
//!
//! The inner latent uses a conditional Gaussian whose per-element scale is
//! snapped to a fixed log-spaced table; the outer (hyper) latent uses a
//! small learned monotone CDF network per channel. Both express the
//! probability of an integer symbol as `CDF(v + 1/2) - CDF(v - 1/2)`.

use std::sync::Arc;

use thiserror::Error;

use crate::math::{normal_cdf, normal_sf, sigmoid, softplus, softplus_inv};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamId, ParamSet, ShapeError, Tensor4};

/// Smallest representable Gaussian scale; also the scale-table floor.
pub const SCALE_MIN: f64 = 0.11;
/// Largest scale-table entry.
pub const SCALE_MAX: f64 = 256.0;
/// Number of log-spaced scale-table entries.
pub const NUM_SCALES: usize = 64;
/// Probability mass allowed outside a table's explicit symbol range.
pub const TAIL_MASS: f64 = 1e-9;
/// Coder precision: all frequency tables total `2^PRECISION_BITS`.
pub const PRECISION_BITS: u32 = 16;
/// Total frequency count per table.
pub const FREQ_TOTAL: u32 = 1 << PRECISION_BITS;
/// Likelihoods are clamped here before any logarithm: 2^-64.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 18446744073709551616.0;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("scale {got} at flat index {index} is below the floor {floor}; clamp scales upstream")]
    ScaleBelowFloor { got: f64, floor: f64, index: usize },
    #[error("degenerate pmf for {table}: all probability mass falls outside the symbol range")]
    DegeneratePmf { table: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// The 64 log-spaced coding scales in `[SCALE_MIN, SCALE_MAX]`.
pub fn scale_table() -> Vec<f64> {
    let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    (0..NUM_SCALES)
        .map(|i| (lo + (hi - lo) * i as f64 / (NUM_SCALES - 1) as f64).exp())
        .collect()
}

/// Index of the smallest table entry ≥ `sigma` (the conservative snap:
/// coding with a wider Gaussian than the true one stays decodable). Scales
/// beyond the last entry use the last entry.
pub fn scale_index(table: &[f64], sigma: f64) -> usize {
    table
        .iter()
        .position(|&s| s >= sigma)
        .unwrap_or(table.len() - 1)
}

/// Records `p_i = Phi((y_i - mu_i + 1/2) / sigma_i) - Phi(... - 1/2 ...)`,
/// clamped below at [`LIKELIHOOD_FLOOR`], onto the tape. Errors if any
/// scale sits below [`SCALE_MIN`], which signals a missing clamp upstream.
pub fn gaussian_likelihood(
    tape: &mut Tape,
    y_hat: NodeId,
    mu: NodeId,
    sigma: NodeId,
) -> Result<NodeId, EntropyError> {
    let s = tape.value(sigma);
    for (i, &v) in s.data().iter().enumerate() {
        if !(v >= SCALE_MIN - 1e-12) {
            return Err(EntropyError::ScaleBelowFloor {
                got: v,
                floor: SCALE_MIN,
                index: i,
            });
        }
    }
    let p = tape.gaussian_interval_prob(y_hat, mu, sigma)?;
    Ok(tape.clamp_min(p, LIKELIHOOD_FLOOR))
}

/// Exact mass of the unit bin centered on integer `v` under a zero-mean
/// Gaussian of scale `sigma`, evaluated through the survival function in
/// the tails so far-out bins keep full relative precision.
pub fn gaussian_bin_mass(v: i64, sigma: f64) -> f64 {
    let v = v as f64;
    if v > 0.0 {
        normal_sf((v - 0.5) / sigma) - normal_sf((v + 0.5) / sigma)
    } else if v < 0.0 {
        normal_sf((-v - 0.5) / sigma) - normal_sf((-v + 0.5) / sigma)
    } else {
        2.0 * normal_cdf(0.5 / sigma) - 1.0
    }
}

/// Smallest radius `r` such that the mass outside `[-r, r]` is at most
/// `tail_mass`: the leftover `2·sf((r+1/2)/sigma)` becomes the escape bin.
pub fn support_radius(sigma: f64, tail_mass: f64) -> i64 {
    let mut r: i64 = 0;
    while 2.0 * normal_sf((r as f64 + 0.5) / sigma) > tail_mass {
        r += 1;
    }
    r
}

/// Deterministic largest-remainder quantization of a nonnegative mass
/// vector to integers summing to exactly `total`, every entry ≥ 1.
/// Ties break toward the lower index at both the top-up and steal stages.
/// Returns `None` when the masses cannot be normalized (zero/non-finite
/// sum) — the caller labels that as a degenerate table.
pub fn quantize_pmf(pmf: &[f64], total: u32) -> Option<Vec<u32>> {
    let n = pmf.len();
    if n == 0 || (n as u64) > total as u64 {
        return None;
    }
    let sum: f64 = pmf.iter().sum();
    if !sum.is_finite() || sum <= 0.0 || pmf.iter().any(|&p| !(p >= 0.0)) {
        return None;
    }
    let ideals: Vec<f64> = pmf.iter().map(|&p| p / sum * total as f64).collect();
    let mut freqs: Vec<u32> = ideals.iter().map(|&x| x.floor() as u32).collect();
    let mut assigned: i64 = freqs.iter().map(|&f| f as i64).sum();

    // Top up by largest fractional remainder.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = ideals[a] - ideals[a].floor();
        let rb = ideals[b] - ideals[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut k = 0;
    while assigned < total as i64 {
        freqs[order[k % n]] += 1;
        assigned += 1;
        k += 1;
    }
    // Floating error can only leave the floor-sum short or equal, never
    // over: each floor ≤ its ideal and the ideals sum to `total` up to
    // rounding that the loop above absorbs. Guard anyway.
    while assigned > total as i64 {
        let imax = (0..n).max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a)))?;
        if freqs[imax] == 0 {
            return None;
        }
        freqs[imax] -= 1;
        assigned -= 1;
    }

    // Every symbol must stay codable: raise zeros to 1, stealing from the
    // currently largest entry.
    for i in 0..n {
        if freqs[i] == 0 {
            let imax = (0..n).max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a)))?;
            if freqs[imax] <= 1 {
                return None;
            }
            freqs[imax] -= 1;
            freqs[i] = 1;
        }
    }
    debug_assert_eq!(freqs.iter().map(|&f| f as u64).sum::<u64>(), total as u64);
    Some(freqs)
}

/// One coder table: integer symbols `offset .. offset + n - 2` plus a
/// final escape slot, with 16-bit quantized frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyTable {
    offset: i64,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl EntropyTable {
    /// Builds a table from raw masses where the final entry is the escape
    /// mass. `label` names the table in the degenerate-pmf error.
    pub fn from_pmf(offset: i64, pmf_with_escape: &[f64], label: &str) -> Result<Self, EntropyError> {
        let freqs = quantize_pmf(pmf_with_escape, FREQ_TOTAL).ok_or_else(|| {
            EntropyError::DegeneratePmf {
                table: label.to_owned(),
            }
        })?;
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(EntropyTable { offset, freqs, cum })
    }

    pub fn num_symbols(&self) -> usize {
        self.freqs.len()
    }

    pub fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.freqs[index]
    }

    pub fn start(&self, index: usize) -> u32 {
        self.cum[index]
    }

    /// Table probability of a symbol index.
    pub fn prob(&self, index: usize) -> f64 {
        self.freqs[index] as f64 / FREQ_TOTAL as f64
    }

    /// Symbol index for an integer value, or `None` when the value falls
    /// outside the explicit range and must be escaped.
    pub fn index_of_value(&self, v: i64) -> Option<usize> {
        let last_plain = self.freqs.len() as i64 - 2;
        let rel = v - self.offset;
        if rel >= 0 && rel <= last_plain {
            Some(rel as usize)
        } else {
            None
        }
    }

    /// Integer value of a non-escape symbol index.
    pub fn value_of_index(&self, index: usize) -> i64 {
        debug_assert!(index < self.escape_index());
        self.offset + index as i64
    }

    /// The symbol index whose cumulative span contains `slot`
    /// (binary search over the cumulative array).
    pub fn find_slot(&self, slot: u32) -> usize {
        debug_assert!(slot < FREQ_TOTAL);
        // partition_point: first index with cum[i] > slot; symbol is i-1.
        self.cum.partition_point(|&c| c <= slot) - 1
    }
}

/// Conditional-Gaussian coding model: the fixed scale table plus one
/// frequency table per scale, all centered (the mean is subtracted before
/// symbolization).
#[derive(Clone, Debug)]
pub struct GaussianConditional {
    pub scale_table: Vec<f64>,
    pub tables: Vec<EntropyTable>,
}

impl GaussianConditional {
    pub fn build() -> Result<Self, EntropyError> {
        let scales = scale_table();
        let mut tables = Vec::with_capacity(scales.len());
        for (i, &s) in scales.iter().enumerate() {
            let r = support_radius(s, TAIL_MASS);
            let mut pmf: Vec<f64> = (-r..=r).map(|v| gaussian_bin_mass(v, s)).collect();
            pmf.push(2.0 * normal_sf((r as f64 + 0.5) / s));
            tables.push(EntropyTable::from_pmf(-r, &pmf, &format!("gaussian scale[{i}]={s}"))?);
        }
        Ok(GaussianConditional {
            scale_table: scales,
            tables,
        })
    }

    pub fn scale_index(&self, sigma: f64) -> usize {
        scale_index(&self.scale_table, sigma)
    }
}

const PRIOR_STAGES: usize = 4;
// Vector widths between the stages of the per-channel CDF network.
const PRIOR_WIDTHS: [usize; PRIOR_STAGES + 1] = [1, 3, 3, 3, 1];
const PRIOR_INIT_SCALE: f64 = 10.0;

/// Learned per-channel factorized prior: a tiny monotone network mapping a
/// scalar to a CDF value. Monotone by construction — softplus keeps the
/// matrices nonnegative, the tanh gates have slope magnitude < 1, and the
/// final sigmoid is increasing — so it stays a valid CDF for any parameter
/// values the optimizer can reach.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub h: [ParamId; PRIOR_STAGES],
    pub b: [ParamId; PRIOR_STAGES],
    pub a: [ParamId; PRIOR_STAGES - 1],
    /// Per-channel (left tail, median, right tail) positions, shape
    /// `[1, C, 1, 3]`; the aux objective drives these toward the target
    /// CDF values and the coder uses them to bound each symbol range.
    pub quantiles: ParamId,
    pub channels: usize,
}

impl FactorizedPrior {
    pub fn new(
        set: &mut ParamSet,
        prefix: &str,
        channels: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let per_stage_gain = PRIOR_INIT_SCALE.powf(1.0 / PRIOR_STAGES as f64);
        let mut h = Vec::with_capacity(PRIOR_STAGES);
        let mut b = Vec::with_capacity(PRIOR_STAGES);
        let mut a = Vec::with_capacity(PRIOR_STAGES - 1);
        for k in 0..PRIOR_STAGES {
            let (rin, rout) = (PRIOR_WIDTHS[k], PRIOR_WIDTHS[k + 1]);
            // Raw value whose softplus gives each stage an equal share of
            // the overall init gain, split across the fan-in.
            let raw = softplus_inv(per_stage_gain / rout as f64);
            h.push(set.add(
                &format!("{prefix}.h{k}"),
                Tensor4::filled([1, channels, rout, rin], raw),
            ));
            let mut bias = Tensor4::zeros([1, channels, rout, 1]);
            for v in bias.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            b.push(set.add(&format!("{prefix}.b{k}"), bias));
            if k + 1 < PRIOR_STAGES {
                a.push(set.add(
                    &format!("{prefix}.a{k}"),
                    Tensor4::zeros([1, channels, rout, 1]),
                ));
            }
        }
        let mut q = Tensor4::zeros([1, channels, 1, 3]);
        for c in 0..channels {
            *q.at_mut(0, c, 0, 0) = -PRIOR_INIT_SCALE;
            *q.at_mut(0, c, 0, 2) = PRIOR_INIT_SCALE;
        }
        let quantiles = set.add(&format!("{prefix}.quantiles"), q);
        FactorizedPrior {
            h: h.try_into().unwrap(),
            b: b.try_into().unwrap(),
            a: a.try_into().unwrap(),
            quantiles,
            channels,
        }
    }

    /// Records the CDF chain on the tape. `x` must be `[B, C, 1, L]`; the
    /// result has the same shape with values in (0, 1). When `detached` is
    /// true the network parameters enter as constants, so gradients reach
    /// only `x` — the aux objective uses this to train quantiles alone.
    pub fn cdf(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        x: NodeId,
        detached: bool,
    ) -> Result<NodeId, ShapeError> {
        let shape = tape.value(x).shape();
        if shape[1] != self.channels {
            return Err(ShapeError::Mismatch {
                op: "factorized_cdf",
                what: "input channels",
                expected: self.channels.to_string(),
                got: shape[1].to_string(),
            });
        }
        if shape[2] != 1 {
            return Err(ShapeError::Mismatch {
                op: "factorized_cdf",
                what: "input row extent",
                expected: "1".to_string(),
                got: shape[2].to_string(),
            });
        }
        let inject = |tape: &mut Tape, id: ParamId| -> NodeId {
            if detached {
                tape.constant_arc(Arc::clone(&set.get(id).value))
            } else {
                tape.param(set, id)
            }
        };
        let mut cur = x;
        for k in 0..PRIOR_STAGES {
            let hk = inject(tape, self.h[k]);
            let bk = inject(tape, self.b[k]);
            let hpos = tape.softplus(hk);
            cur = tape.channel_matmul(hpos, cur, bk)?;
            if k + 1 < PRIOR_STAGES {
                let ak = inject(tape, self.a[k]);
                let gate = tape.tanh(ak);
                let tcur = tape.tanh(cur);
                let bend = tape.mul_cvec(tcur, gate)?;
                cur = tape.add(cur, bend);
            }
        }
        Ok(tape.sigmoid(cur))
    }

    /// Plain-f64 CDF of one channel at `v` — the table builder's path,
    /// shared with nothing differentiable.
    pub fn cdf_scalar(&self, set: &ParamSet, channel: usize, v: f64) -> f64 {
        assert!(channel < self.channels);
        let mut cur = [v, 0.0, 0.0];
        let mut width = 1usize;
        for k in 0..PRIOR_STAGES {
            let (rin, rout) = (PRIOR_WIDTHS[k], PRIOR_WIDTHS[k + 1]);
            debug_assert_eq!(rin, width);
            let hv = &set.get(self.h[k]).value;
            let bv = &set.get(self.b[k]).value;
            let mut next = [0.0f64; 3];
            for r in 0..rout {
                let mut acc = bv.at(0, channel, r, 0);
                for c in 0..rin {
                    acc += softplus(hv.at(0, channel, r, c)) * cur[c];
                }
                next[r] = acc;
            }
            if k + 1 < PRIOR_STAGES {
                let av = &set.get(self.a[k]).value;
                for r in 0..rout {
                    next[r] += av.at(0, channel, r, 0).tanh() * next[r].tanh();
                }
            }
            cur = next;
            width = rout;
        }
        sigmoid(cur[0])
    }

    /// Per-channel coder tables spanning the integer range the quantiles
    /// bracket; mass beyond the range goes to the escape symbol.
    pub fn tables(&self, set: &ParamSet) -> Result<Vec<EntropyTable>, EntropyError> {
        let q = &set.get(self.quantiles).value;
        let mut out = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let (ql, qr) = (q.at(0, c, 0, 0), q.at(0, c, 0, 2));
            let lo = ql.min(qr).floor() as i64;
            let hi = ql.max(qr).ceil() as i64;
            let mut pmf = Vec::with_capacity((hi - lo + 1) as usize + 1);
            for v in lo..=hi {
                let p = self.cdf_scalar(set, c, v as f64 + 0.5)
                    - self.cdf_scalar(set, c, v as f64 - 0.5);
                pmf.push(p.max(0.0));
            }
            let escape = (self.cdf_scalar(set, c, lo as f64 - 0.5)
                + (1.0 - self.cdf_scalar(set, c, hi as f64 + 0.5)))
            .max(0.0);
            pmf.push(escape);
            let in_range: f64 = pmf[..pmf.len() - 1].iter().sum();
            if in_range <= 0.0 {
                return Err(EntropyError::DegeneratePmf {
                    table: format!("factorized channel {c}"),
                });
            }
            out.push(EntropyTable::from_pmf(
                lo,
                &pmf,
                &format!("factorized channel {c}"),
            )?);
        }
        Ok(out)
    }
}

/// Records `CDF(z + 1/2) - CDF(z - 1/2)` per element of a `[B, C, H, W]`
/// tensor, clamped below at [`LIKELIHOOD_FLOOR`].
pub fn factorized_likelihood(
    tape: &mut Tape,
    set: &ParamSet,
    prior: &FactorizedPrior,
    z_hat: NodeId,
) -> Result<NodeId, ShapeError> {
    let [bs, c, h, w] = tape.value(z_hat).shape();
    if c != prior.channels {
        return Err(ShapeError::Mismatch {
            op: "factorized_likelihood",
            what: "input channels",
            expected: prior.channels.to_string(),
            got: c.to_string(),
        });
    }
    let flat = tape.reshape(z_hat, [bs, c, 1, h * w])?;
    let plus = tape.add_scalar(flat, 0.5);
    let minus = tape.add_scalar(flat, -0.5);
    let cdf_plus = prior.cdf(tape, set, plus, false)?;
    let cdf_minus = prior.cdf(tape, set, minus, false)?;
    let p = tape.sub(cdf_plus, cdf_minus);
    let clamped = tape.clamp_min(p, LIKELIHOOD_FLOOR);
    tape.reshape(clamped, [bs, c, h, w])
}

/// Records the quantile-placement objective: `Σ_c |CDF(q_left) - t/2| +
/// |CDF(q_med) - 1/2| + |CDF(q_right) - (1 - t/2)|` with `t` the tail
/// mass. Network parameters are injected detached, so the gradient reaches
/// exactly the quantile tensor.
pub fn aux_loss(tape: &mut Tape, set: &ParamSet, prior: &FactorizedPrior) -> Result<NodeId, ShapeError> {
    let q = tape.param(set, prior.quantiles);
    let cdf = prior.cdf(tape, set, q, true)?;
    let mut target = Tensor4::zeros([1, prior.channels, 1, 3]);
    for c in 0..prior.channels {
        *target.at_mut(0, c, 0, 0) = TAIL_MASS / 2.0;
        *target.at_mut(0, c, 0, 1) = 0.5;
        *target.at_mut(0, c, 0, 2) = 1.0 - TAIL_MASS / 2.0;
    }
    let t = tape.constant(target);
    let diff = tape.sub(cdf, t);
    let dev = tape.abs(diff);
    Ok(tape.sum_all(dev))
}

/// Everything the coder needs, derived deterministically from the model
/// parameters: Gaussian tables per scale plus factorized tables per
/// channel.
#[derive(Clone, Debug)]
pub struct CodebookSet {
    pub gaussian: GaussianConditional,
    pub factorized: Vec<EntropyTable>,
}

pub fn build_cdf_tables(set: &ParamSet, prior: &FactorizedPrior) -> Result<CodebookSet, EntropyError> {
    Ok(CodebookSet {
        gaussian: GaussianConditional::build()?,
        factorized: prior.tables(set)?,
    })
}
