//! Rate-distortion training: the differentiable loss, bias-corrected Adam,
//! and the dual-optimizer loop — a main optimizer over every transform
//! parameter and an auxiliary one owning exactly the prior's quantiles.
//!
//! The loop is deterministic given the seed: model init, per-epoch data
//! order, and quantization noise each draw from their own seeded stream,
//! so identical configs reproduce bit-identical loss traces.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::data::{center_crop, DataError};
use crate::entropy::{aux_loss, factorized_likelihood, gaussian_likelihood, EntropyError};
use crate::model::{HyvicConfig, ModelError, ModelParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamId, ParamSet, ShapeError, Tensor4};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("likelihood tensor {which} has non-positive entry {value}")]
    NonPositiveLikelihood { which: &'static str, value: f64 },
    #[error("non-finite value in {tensor} at step {step}; training aborted")]
    NonFinite { tensor: &'static str, step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset cube {index} has shape {got:?}, expected {expected:?}")]
    CubeShape {
        index: usize,
        expected: [usize; 4],
        got: [usize; 4],
    },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_aux: f64,
    pub seed: u64,
    /// Center-crop every cube to this spatial size before training.
    pub patch: Option<usize>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Global-norm gradient clip over the main parameter group; off by
    /// default.
    pub clip_norm: Option<f64>,
    /// Serialize a checkpoint every this many steps (the final state is
    /// always captured).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-4,
            epochs: 150,
            batch_size: 16,
            lr_main: 1e-4,
            lr_aux: 1e-3,
            seed: 0,
            patch: None,
            max_steps: None,
            clip_norm: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::Config(reason));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive and finite, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [("lr_main", self.lr_main), ("lr_aux", self.lr_aux)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if self.patch == Some(0) {
            return bad("patch size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm must be positive and finite, got {c}"));
            }
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    pub total: NodeId,
    pub rate_bpppc: NodeId,
    pub distortion: NodeId,
}

/// total = rate + λ·MSE, with rate = (Σ −log2 p_y + Σ −log2 p_z) scaled to
/// bits per pixel per channel of the input cube. λ = 0 leaves total equal
/// to the rate bit-for-bit.
pub fn rd_loss(
    tape: &mut Tape,
    x: NodeId,
    x_hat: NodeId,
    p_y: NodeId,
    p_z: NodeId,
    lambda: f64,
) -> Result<RdTerms, TrainError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TrainError::Config(format!(
            "lambda must be non-negative and finite, got {lambda}"
        )));
    }
    let xs = tape.value(x).shape();
    let hs = tape.value(x_hat).shape();
    if xs != hs {
        return Err(TrainError::Shape(ShapeError::Mismatch {
            op: "rd_loss",
            what: "reconstruction shape",
            expected: format!("{xs:?}"),
            got: format!("{hs:?}"),
        }));
    }
    for (which, node) in [("p_y", p_y), ("p_z", p_z)] {
        if let Some(&value) = tape.value(node).data().iter().find(|v| **v <= 0.0) {
            return Err(TrainError::NonPositiveLikelihood { which, value });
        }
    }

    let elements = tape.value(x).len() as f64; // B·C·H·W

    let ln_y = tape.ln(p_y);
    let ln_z = tape.ln(p_z);
    let sum_y = tape.sum_all(ln_y);
    let sum_z = tape.sum_all(ln_z);
    let nats = tape.add(sum_y, sum_z);
    let rate_bpppc = tape.mul_scalar(nats, -1.0 / (std::f64::consts::LN_2 * elements));

    let diff = tape.sub(x, x_hat);
    let sq = tape.mul(diff, diff);
    let sum_sq = tape.sum_all(sq);
    let distortion = tape.mul_scalar(sum_sq, 1.0 / elements);

    let weighted = tape.mul_scalar(distortion, lambda);
    let total = tape.add(rate_bpppc, weighted);
    Ok(RdTerms {
        total,
        rate_bpppc,
        distortion,
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over a fixed group of parameters.
pub struct Adam {
    pub lr: f64,
    ids: Vec<ParamId>,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, ids: Vec<ParamId>, set: &ParamSet) -> Self {
        let m = ids.iter().map(|&id| Tensor4::zeros(set.get(id).value.shape())).collect();
        let v = ids.iter().map(|&id| Tensor4::zeros(set.get(id).value.shape())).collect();
        Adam { lr, ids, m, v, t: 0 }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step(&mut self, set: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (slot, &id) in self.ids.iter().enumerate() {
            let p = set.get_mut(id);
            let value = Arc::make_mut(&mut p.value);
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..value.len() {
                let g = p.grad.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Everything except the prior's quantiles: the group the main optimizer
/// owns.
pub fn main_param_ids(model: &ModelParams) -> Vec<ParamId> {
    model.set.ids().filter(|&id| id != model.prior.quantiles).collect()
}

/// Exactly the quantiles: the auxiliary optimizer's group.
pub fn aux_param_ids(model: &ModelParams) -> Vec<ParamId> {
    vec![model.prior.quantiles]
}

pub const LOG_CSV_HEADER: &str = "step,total,rate_bpppc,mse,aux_loss,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub rate_bpppc: f64,
    pub mse: f64,
    pub aux_loss: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.rate_bpppc, self.mse, self.aux_loss, self.wall_ms
        )
    }
}

pub fn log_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(LOG_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub struct Checkpoint {
    pub step: usize,
    pub bytes: Vec<u8>,
}

pub struct TrainOutput {
    pub model: ModelParams,
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

fn check_finite(tensor: &'static str, t: &Tensor4, step: usize) -> Result<(), TrainError> {
    if t.first_non_finite().is_some() {
        return Err(TrainError::NonFinite { tensor, step });
    }
    Ok(())
}

fn stack(cubes: &[Tensor4], picks: &[usize]) -> Tensor4 {
    let [_, c, h, w] = cubes[picks[0]].shape();
    let plane = c * h * w;
    let mut out = Tensor4::zeros([picks.len(), c, h, w]);
    for (row, &i) in picks.iter().enumerate() {
        out.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(cubes[i].data());
    }
    out
}

fn clip_global_norm(set: &mut ParamSet, ids: &[ParamId], max_norm: f64) {
    let mut sq = 0.0;
    for &id in ids {
        sq += set.get(id).grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for &id in ids {
            for g in set.get_mut(id).grad.data_mut() {
                *g *= scale;
            }
        }
    }
}

/// One main-optimizer step: noisy-quantized forward pass, RD loss,
/// backward, optional clip, update. Returns (total, rate, mse).
fn train_step(
    model: &mut ModelParams,
    batch: &Tensor4,
    tc: &TrainConfig,
    noise_rng: &mut ChaCha20Rng,
    step: usize,
    main_opt: &mut Adam,
) -> Result<(f64, f64, f64), TrainError> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let y = model.encode(&mut tape, x)?;
    check_finite("y", tape.value(y), step)?;
    let z = model.hyper_encode(&mut tape, y)?;
    check_finite("z", tape.value(z), step)?;

    // Noise draws happen in a fixed order (z first, then y) from the
    // dedicated stream — part of the determinism contract.
    let z_tilde = tape.add_noise(z, noise_rng);
    let (mu, sigma) = model.hyper_decode(&mut tape, z_tilde)?;
    check_finite("mu", tape.value(mu), step)?;
    check_finite("sigma", tape.value(sigma), step)?;
    let y_tilde = tape.add_noise(y, noise_rng);

    let p_y = gaussian_likelihood(&mut tape, y_tilde, mu, sigma)?;
    check_finite("p_y", tape.value(p_y), step)?;
    let p_z = factorized_likelihood(&mut tape, &model.set, &model.prior, z_tilde)?;
    check_finite("p_z", tape.value(p_z), step)?;

    let x_hat = model.decode(&mut tape, y_tilde)?;
    check_finite("x_hat", tape.value(x_hat), step)?;

    let terms = rd_loss(&mut tape, x, x_hat, p_y, p_z, tc.lambda)?;
    let total = tape.value(terms.total).item();
    let rate = tape.value(terms.rate_bpppc).item();
    let mse = tape.value(terms.distortion).item();
    for (name, value) in [("rate", rate), ("mse", mse), ("total", total)] {
        if !value.is_finite() {
            return Err(TrainError::NonFinite { tensor: name, step });
        }
    }

    model.set.zero_grads();
    tape.backward(terms.total, &mut model.set)?;
    if let Some(c) = tc.clip_norm {
        clip_global_norm(&mut model.set, main_opt.ids(), c);
    }
    main_opt.step(&mut model.set);
    model.set.zero_grads();
    Ok((total, rate, mse))
}

/// One auxiliary step: quantile calibration against the detached prior.
fn aux_step(model: &mut ModelParams, aux_opt: &mut Adam, step: usize) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let loss = aux_loss(&mut tape, &model.set, &model.prior)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::NonFinite { tensor: "aux_loss", step });
    }
    model.set.zero_grads();
    tape.backward(loss, &mut model.set)?;
    aux_opt.step(&mut model.set);
    model.set.zero_grads();
    Ok(value)
}

/// Train a fresh model on normalized batch-1 cubes. Checkpoints include
/// the final state; the per-step log carries (total, rate, mse, aux,
/// wall-clock), of which everything but wall-clock is seed-deterministic.
pub fn train(
    dataset: &[Tensor4],
    config: HyvicConfig,
    tc: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cubes: Vec<Tensor4> = match tc.patch {
        Some(p) => dataset
            .iter()
            .map(|t| center_crop(t, p, p))
            .collect::<Result<_, _>>()?,
        None => dataset.to_vec(),
    };
    let expected = cubes[0].shape();
    for (index, t) in cubes.iter().enumerate() {
        if t.shape() != expected {
            return Err(TrainError::CubeShape {
                index,
                expected,
                got: t.shape(),
            });
        }
    }
    let [b, c, h, w] = expected;
    if b != 1 {
        return Err(TrainError::Config(format!("dataset cubes must be batch-1, got batch {b}")));
    }
    if c != config.c {
        return Err(TrainError::Config(format!(
            "dataset has {c} bands but the model expects {}",
            config.c
        )));
    }
    let div = config.pipeline_divisor();
    if h % div != 0 {
        return Err(TrainError::Model(ModelError::Divisibility {
            what: "training height",
            got: h,
            divisor: div,
        }));
    }
    if w % div != 0 {
        return Err(TrainError::Model(ModelError::Divisibility {
            what: "training width",
            got: w,
            divisor: div,
        }));
    }

    let mut model = ModelParams::new(config, tc.seed)?;
    let mut main_opt = Adam::new(tc.lr_main, main_param_ids(&model), &model.set);
    let mut aux_opt = Adam::new(tc.lr_aux, aux_param_ids(&model), &model.set);
    // Distinct derived streams so reordering one kind of draw can never
    // silently shift another.
    let mut noise_rng = ChaCha20Rng::seed_from_u64(tc.seed.wrapping_add(0x517c_c1b7_2722_0a95));
    let mut order_rng = ChaCha20Rng::seed_from_u64(tc.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let cap = tc.max_steps.unwrap_or(usize::MAX);
    let mut log = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut step = 0usize;
    'epochs: for _ in 0..tc.epochs {
        let mut order: Vec<usize> = (0..cubes.len()).collect();
        order.shuffle(&mut order_rng);
        for picks in order.chunks(tc.batch_size) {
            if step >= cap {
                break 'epochs;
            }
            step += 1;
            let t0 = Instant::now();
            let batch = stack(&cubes, picks);
            let (total, rate_bpppc, mse) =
                train_step(&mut model, &batch, tc, &mut noise_rng, step, &mut main_opt)?;
            let aux = aux_step(&mut model, &mut aux_opt, step)?;
            log.push(StepRecord {
                step,
                total,
                rate_bpppc,
                mse,
                aux_loss: aux,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            if let Some(every) = tc.checkpoint_every {
                if step % every == 0 {
                    checkpoints.push(Checkpoint {
                        step,
                        bytes: model.serialize(),
                    });
                }
            }
        }
    }
    if checkpoints.last().map(|ck| ck.step) != Some(step) {
        checkpoints.push(Checkpoint {
            step,
            bytes: model.serialize(),
        });
    }
    Ok(TrainOutput {
        model,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_cube_tensor;
    use crate::entropy::FactorizedPrior;
    use crate::gradcheck::{finite_diff, max_rel_err};
    use rand::Rng;

    fn tape_with(values: &[(f64, [usize; 4])]) -> (Tape, Vec<NodeId>) {
        let mut tape = Tape::new();
        let nodes = values
            .iter()
            .map(|&(v, shape)| tape.constant(Tensor4::filled(shape, v)))
            .collect();
        (tape, nodes)
    }

    #[test]
    fn rd_loss_closed_forms() {
        // Perfect reconstruction, certain symbols: everything is zero.
        let (mut tape, n) = tape_with(&[
            (0.3, [1, 2, 2, 2]),
            (0.3, [1, 2, 2, 2]),
            (1.0, [1, 3, 1, 1]),
            (1.0, [1, 2, 1, 1]),
        ]);
        let terms = rd_loss(&mut tape, n[0], n[1], n[2], n[3], 7.0).unwrap();
        assert_eq!(tape.value(terms.total).item(), 0.0);
        assert_eq!(tape.value(terms.rate_bpppc).item(), 0.0);
        assert_eq!(tape.value(terms.distortion).item(), 0.0);

        // One pixel, p_y = ½: exactly 1 bit per pixel per channel.
        let (mut tape, n) = tape_with(&[
            (0.4, [1, 1, 1, 1]),
            (0.4, [1, 1, 1, 1]),
            (0.5, [1, 1, 1, 1]),
            (1.0, [1, 1, 1, 1]),
        ]);
        let terms = rd_loss(&mut tape, n[0], n[1], n[2], n[3], 3.0).unwrap();
        assert!((tape.value(terms.rate_bpppc).item() - 1.0).abs() < 1e-12);
        assert!((tape.value(terms.total).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rd_loss_lambda_zero_is_rate_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, rng: &mut ChaCha20Rng, lo: f64, hi: f64, shape| {
            let t = Tensor4::from_vec(
                shape,
                (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(lo..hi)).collect(),
            )
            .unwrap();
            tape.constant(t)
        };
        let x = mk(&mut tape, &mut rng, 0.0, 1.0, [1, 2, 3, 3]);
        let xh = mk(&mut tape, &mut rng, 0.0, 1.0, [1, 2, 3, 3]);
        let py = mk(&mut tape, &mut rng, 0.1, 0.9, [1, 4, 2, 2]);
        let pz = mk(&mut tape, &mut rng, 0.1, 0.9, [1, 2, 1, 1]);
        let terms = rd_loss(&mut tape, x, xh, py, pz, 0.0).unwrap();
        assert_eq!(
            tape.value(terms.total).item().to_bits(),
            tape.value(terms.rate_bpppc).item().to_bits()
        );
        assert!(tape.value(terms.distortion).item() > 0.0);
    }

    #[test]
    fn rd_loss_rejects_non_positive_likelihoods() {
        let (mut tape, n) = tape_with(&[
            (0.5, [1, 1, 2, 2]),
            (0.5, [1, 1, 2, 2]),
            (0.0, [1, 1, 1, 1]),
            (0.5, [1, 1, 1, 1]),
        ]);
        match rd_loss(&mut tape, n[0], n[1], n[2], n[3], 1.0) {
            Err(TrainError::NonPositiveLikelihood { which: "p_y", .. }) => {}
            other => panic!("expected p_y rejection, got {other:?}"),
        }
        let (mut tape, n) = tape_with(&[
            (0.5, [1, 1, 2, 2]),
            (0.5, [1, 1, 2, 2]),
            (0.5, [1, 1, 1, 1]),
            (-0.25, [1, 1, 1, 1]),
        ]);
        match rd_loss(&mut tape, n[0], n[1], n[2], n[3], 1.0) {
            Err(TrainError::NonPositiveLikelihood { which: "p_z", value }) => {
                assert_eq!(value, -0.25)
            }
            other => panic!("expected p_z rejection, got {other:?}"),
        }
    }

    #[test]
    fn rd_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let rand_tensor = |rng: &mut ChaCha20Rng, lo: f64, hi: f64, shape: [usize; 4]| {
            Tensor4::from_vec(
                shape,
                (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(lo..hi)).collect(),
            )
            .unwrap()
        };
        let x0 = rand_tensor(&mut rng, 0.0, 1.0, [1, 2, 2, 2]);
        let xh0 = rand_tensor(&mut rng, 0.0, 1.0, [1, 2, 2, 2]);
        let py0 = rand_tensor(&mut rng, 0.2, 0.9, [1, 3, 2, 2]);
        let pz0 = rand_tensor(&mut rng, 0.2, 0.9, [1, 2, 1, 1]);

        // Gradient wrt each input in turn, with the others held fixed.
        for slot in 0..3 {
            let mut set = ParamSet::new();
            let subject = set.add(
                "subject",
                [&xh0, &py0, &pz0][slot].clone(),
            );
            let build = |set: &ParamSet| -> (Tape, NodeId) {
                let mut tape = Tape::new();
                let x = tape.constant(x0.clone());
                let sub = tape.param(set, subject);
                let xh = if slot == 0 { sub } else { tape.constant(xh0.clone()) };
                let py = if slot == 1 { sub } else { tape.constant(py0.clone()) };
                let pz = if slot == 2 { sub } else { tape.constant(pz0.clone()) };
                let terms = rd_loss(&mut tape, x, xh, py, pz, 2.5).unwrap();
                (tape, terms.total)
            };
            let (mut tape, total) = build(&set);
            tape.backward(total, &mut set).unwrap();
            let analytic = set.get(subject).grad.clone();

            let mut eval = |t: &Tensor4| -> f64 {
                let mut probe = ParamSet::new();
                let id = probe.add("subject", t.clone());
                let mut tape = Tape::new();
                let x = tape.constant(x0.clone());
                let sub = tape.param(&probe, id);
                let xh = if slot == 0 { sub } else { tape.constant(xh0.clone()) };
                let py = if slot == 1 { sub } else { tape.constant(py0.clone()) };
                let pz = if slot == 2 { sub } else { tape.constant(pz0.clone()) };
                let terms = rd_loss(&mut tape, x, xh, py, pz, 2.5).unwrap();
                tape.value(terms.total).item()
            };
            let numeric = finite_diff(&mut eval, [&xh0, &py0, &pz0][slot], 1e-6);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "slot {slot}: rel err {err}");
        }
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor4::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(1e-3, vec![id], &set);

        // Zero gradients keep the parameter exactly still.
        for _ in 0..3 {
            opt.step(&mut set);
        }
        assert_eq!(set.get(id).value.data(), &[1.0, -2.0, 0.5]);

        // First real step moves by at most lr (bias-corrected sign step).
        let mut opt = Adam::new(1e-3, vec![id], &set);
        set.get_mut(id).grad = Tensor4::from_vec([1, 1, 1, 3], vec![0.3, -7.0, 1e-3]).unwrap();
        let before = set.get(id).value.data().to_vec();
        opt.step(&mut set);
        for (i, (b, a)) in before.iter().zip(set.get(id).value.data()).enumerate() {
            let delta = (a - b).abs();
            assert!(delta <= 1e-3 * (1.0 + 1e-6), "element {i} moved {delta}");
            assert!(delta > 0.0, "element {i} did not move");
        }
    }

    #[test]
    fn adam_optimizes_a_quadratic_bowl() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor4::filled([1, 1, 1, 4], 1.0));
        let mut opt = Adam::new(1e-2, vec![id], &set);
        for _ in 0..2000 {
            let grad = set.get(id).value.map(|w| 2.0 * w);
            set.get_mut(id).grad = grad;
            opt.step(&mut set);
        }
        let norm = set.get(id).value.data().iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "‖w‖ = {norm}");
    }

    #[test]
    fn aux_optimizer_places_the_quantiles() {
        // A deliberately steep prior so 500 steps at the default aux lr
        // are plenty to bracket its mass.
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let prior = FactorizedPrior::new(&mut set, "prior", 2, &mut rng);
        let steep = 5.0f64;
        for k in 0..4 {
            let id = set.id_of(&format!("prior.h{k}")).unwrap();
            let shape = set.get(id).value.shape();
            let raw = crate::math::softplus_inv(steep.powf(0.25) / shape[2] as f64);
            set.get_mut(id).value = Arc::new(Tensor4::filled(shape, raw));
        }
        let q = set.id_of("prior.quantiles").unwrap();
        let mut quantiles = Tensor4::zeros([1, 2, 1, 3]);
        for ch in 0..2 {
            *quantiles.at_mut(0, ch, 0, 0) = -1.0;
            *quantiles.at_mut(0, ch, 0, 1) = 0.3;
            *quantiles.at_mut(0, ch, 0, 2) = 1.0;
        }
        set.get_mut(q).value = Arc::new(quantiles);

        let eval = |set: &ParamSet| {
            let mut tape = Tape::new();
            let node = aux_loss(&mut tape, set, &prior).unwrap();
            tape.value(node).item()
        };
        let initial = eval(&set);
        // The tail quantiles must travel ≈ |logit(tail/2)|/gain ≈ 3.3
        // units; Adam moves ≈ lr per step, so budget well past that.
        let mut opt = Adam::new(3e-3, vec![q], &set);
        for _ in 0..3000 {
            let mut tape = Tape::new();
            let node = aux_loss(&mut tape, &set, &prior).unwrap();
            set.zero_grads();
            tape.backward(node, &mut set).unwrap();
            opt.step(&mut set);
            set.zero_grads();
        }
        let converged = eval(&set);
        assert!(
            converged < initial / 10.0,
            "aux loss {initial} → {converged}"
        );
    }

    fn desk_dataset(count: usize, seed: u64) -> Vec<Tensor4> {
        (0..count).map(|i| synth_cube_tensor(3, 8, 8, seed, i as u64)).collect()
    }

    fn desk_config() -> HyvicConfig {
        HyvicConfig::new(3, 6, 8, 1, 3).unwrap()
    }

    fn desk_tc(steps: usize) -> TrainConfig {
        TrainConfig {
            lambda: 1e2,
            epochs: 1000,
            batch_size: 2,
            seed: 5,
            max_steps: Some(steps),
            checkpoint_every: Some(25),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn optimizer_groups_partition_the_parameter_set() {
        let model = ModelParams::new(desk_config(), 0).unwrap();
        let main = main_param_ids(&model);
        let aux = aux_param_ids(&model);
        assert_eq!(main.len() + aux.len(), model.set.len());
        assert!(main.iter().all(|id| !aux.contains(id)));
        assert_eq!(aux, vec![model.prior.quantiles]);
    }

    #[test]
    fn loss_gradients_never_touch_quantiles_and_vice_versa() {
        let mut model = ModelParams::new(desk_config(), 1).unwrap();
        let batch = stack(&desk_dataset(2, 7), &[0, 1]);
        let mut noise = ChaCha20Rng::seed_from_u64(9);

        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let y = model.encode(&mut tape, x).unwrap();
        let z = model.hyper_encode(&mut tape, y).unwrap();
        let zt = tape.add_noise(z, &mut noise);
        let (mu, sigma) = model.hyper_decode(&mut tape, zt).unwrap();
        let yt = tape.add_noise(y, &mut noise);
        let py = gaussian_likelihood(&mut tape, yt, mu, sigma).unwrap();
        let pz = factorized_likelihood(&mut tape, &model.set, &model.prior, zt).unwrap();
        let xh = model.decode(&mut tape, yt).unwrap();
        let terms = rd_loss(&mut tape, x, xh, py, pz, 1.0).unwrap();
        model.set.zero_grads();
        tape.backward(terms.total, &mut model.set).unwrap();
        let qgrad = &model.set.get(model.prior.quantiles).grad;
        assert!(qgrad.data().iter().all(|&g| g == 0.0), "rd loss leaked into quantiles");

        model.set.zero_grads();
        let mut tape = Tape::new();
        let aux = aux_loss(&mut tape, &model.set, &model.prior).unwrap();
        tape.backward(aux, &mut model.set).unwrap();
        let qgrad = &model.set.get(model.prior.quantiles).grad;
        assert!(qgrad.data().iter().any(|&g| g != 0.0), "aux loss missed the quantiles");
        for id in main_param_ids(&model) {
            assert!(
                model.set.get(id).grad.data().iter().all(|&g| g == 0.0),
                "aux loss leaked into {}",
                model.set.get(id).name
            );
        }
    }

    #[test]
    fn training_runs_are_deterministic_and_finite() {
        let data = desk_dataset(4, 11);
        let out1 = train(&data, desk_config(), &desk_tc(40)).unwrap();
        let out2 = train(&data, desk_config(), &desk_tc(40)).unwrap();
        assert_eq!(out1.log.len(), 40);
        for (a, b) in out1.log.iter().zip(&out2.log) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.rate_bpppc.to_bits(), b.rate_bpppc.to_bits());
            assert_eq!(a.mse.to_bits(), b.mse.to_bits());
            assert_eq!(a.aux_loss.to_bits(), b.aux_loss.to_bits());
            assert!(a.total.is_finite() && a.aux_loss.is_finite());
        }
        // Different seed → different trace.
        let tc3 = TrainConfig { seed: 6, ..desk_tc(40) };
        let out3 = train(&data, desk_config(), &tc3).unwrap();
        assert_ne!(
            out1.log[5].total.to_bits(),
            out3.log[5].total.to_bits(),
            "seed had no effect"
        );

        // Checkpoints: cadence plus final, and the final bytes round-trip
        // into a model that matches the trained one.
        assert_eq!(
            out1.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
            vec![25, 40]
        );
        let restored = ModelParams::deserialize(&out1.checkpoints.last().unwrap().bytes).unwrap();
        assert_eq!(restored.serialize(), out1.model.serialize());
    }

    #[test]
    fn absurd_learning_rate_aborts_with_a_named_tensor() {
        let data = desk_dataset(2, 13);
        let tc = TrainConfig {
            lr_main: 1e280,
            ..desk_tc(10)
        };
        match train(&data, desk_config(), &tc) {
            // The blow-up may already surface within step 1: the main
            // update precedes that step's aux pass, which reads the
            // freshly wrecked prior parameters.
            Err(TrainError::NonFinite { tensor, step }) => {
                assert!(step >= 1);
                assert!(!tensor.is_empty());
            }
            other => panic!("expected NaN abort, got {:?}", other.map(|_| "Ok")),
        }
    }

    #[test]
    fn gradient_clip_bounds_the_main_group() {
        let mut model = ModelParams::new(desk_config(), 2).unwrap();
        let ids = main_param_ids(&model);
        // Plant a huge gradient on one parameter.
        let victim = ids[3];
        let shape = model.set.get(victim).value.shape();
        model.set.get_mut(victim).grad = Tensor4::filled(shape, 1e6);
        clip_global_norm(&mut model.set, &ids, 10.0);
        let mut sq = 0.0;
        for &id in &ids {
            sq += model.set.get(id).grad.data().iter().map(|g| g * g).sum::<f64>();
        }
        assert!((sq.sqrt() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation_and_dataset_checks() {
        let data = desk_dataset(2, 17);
        let bad_lambda = TrainConfig { lambda: 0.0, ..desk_tc(5) };
        assert!(matches!(
            train(&data, desk_config(), &bad_lambda),
            Err(TrainError::Config(_))
        ));
        let bad_batch = TrainConfig { batch_size: 0, ..desk_tc(5) };
        assert!(matches!(
            train(&data, desk_config(), &bad_batch),
            Err(TrainError::Config(_))
        ));
        assert!(matches!(
            train(&[], desk_config(), &desk_tc(5)),
            Err(TrainError::EmptyDataset)
        ));

        // Band count mismatch.
        let wrong_bands: Vec<Tensor4> = (0..2).map(|i| synth_cube_tensor(5, 8, 8, 1, i)).collect();
        assert!(matches!(
            train(&wrong_bands, desk_config(), &desk_tc(5)),
            Err(TrainError::Config(_))
        ));

        // S=1 needs spatial divisibility by 8: a 12×12 cube must be
        // rejected up front.
        let not_divisible: Vec<Tensor4> = (0..2).map(|i| synth_cube_tensor(3, 12, 12, 1, i)).collect();
        assert!(matches!(
            train(&not_divisible, desk_config(), &desk_tc(5)),
            Err(TrainError::Model(ModelError::Divisibility { .. }))
        ));

        // The patch option crops the same cubes into a legal size.
        let patched = TrainConfig { patch: Some(8), max_steps: Some(2), ..desk_tc(2) };
        assert!(train(&not_divisible, desk_config(), &patched).is_ok());
    }

    #[test]
    fn csv_log_shape() {
        let records = vec![StepRecord {
            step: 1,
            total: 2.5,
            rate_bpppc: 2.0,
            mse: 0.005,
            aux_loss: 1.25,
            wall_ms: 3.5,
        }];
        let csv = log_to_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,total,rate_bpppc,mse,aux_loss,wall_ms"));
        assert_eq!(lines.next(), Some("1,2.5,2,0.005,1.25,3.5"));
        assert_eq!(lines.next(), None);
    }
}
