//! The four-transform model: analysis encoder, hyperencoder, hyperdecoder,
//! synthesis decoder, plus the factorized prior over the hyperlatent —
//! with construction, initialization, and the binary checkpoint format.
//!
//! Layer stacks (k odd, stride-2 layers use padding k/2 so spatial extents
//! halve/double exactly):
//!   encode:       Conv1x1 C→N; GDN; S × (Conv k ↓2 N→N; GDN); Conv1x1 N→M
//!   hyper_encode: Conv1x1 M→N; LReLU; Conv k ↓2 N→N; LReLU; Conv k ↓2 N→N
//!   hyper_decode: ConvT k ↑2 N→M; LReLU; ConvT k ↑2 M→3M/2; LReLU;
//!                 Conv1x1 3M/2→2M; split into (μ, raw); σ = max(exp(raw), 0.11)
//!   decode:       Conv1x1 M→N; IGDN; S × (ConvT k ↑2 N→N; IGDN); Conv1x1 N→C

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::entropy::{FactorizedPrior, SCALE_MIN};
use crate::gdn::GdnLayer;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ParamId, ParamSet, ShapeError, Tensor4};

/// Negative-side slope of every LeakyReLU in the hyper transforms.
pub const LEAKY_SLOPE: f64 = 0.01;

const CHECKPOINT_MAGIC: &[u8; 4] = b"HVWT";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what} {got} is not divisible by {divisor}")]
    Divisibility {
        what: &'static str,
        got: usize,
        divisor: usize,
    },
    #[error("invalid config: {reason}")]
    Config { reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated at byte {at}")]
    Truncated { at: usize },
    #[error("checkpoint record {name:?}: expected rank 4, got {rank}")]
    BadRank { name: String, rank: u8 },
    #[error("parameter {name:?}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: [usize; 4],
        got: [usize; 4],
    },
    #[error("checkpoint carries unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint repeats parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint parameter name is not UTF-8")]
    BadName,
    #[error("invalid config in checkpoint: {reason}")]
    Config { reason: String },
}

/// Architecture hyperparameters. `c` input bands, `n` feature/hyperlatent
/// channels, `m` latent channels, `s` spatial stages, `k` kernel size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyvicConfig {
    pub c: usize,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub k: usize,
}

impl HyvicConfig {
    pub fn new(c: usize, n: usize, m: usize, s: usize, k: usize) -> Result<Self, ModelError> {
        let cfg = HyvicConfig { c, n, m, s, k };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives the hyperlatent width from the latent width: N = ⌊3M/5⌋.
    pub fn from_m(c: usize, m: usize, s: usize, k: usize) -> Result<Self, ModelError> {
        Self::new(c, 3 * m / 5, m, s, k)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::Config { reason });
        if self.c == 0 || self.n == 0 {
            return fail(format!("channel counts must be positive (C={}, N={})", self.c, self.n));
        }
        if self.m < 2 || self.m % 2 != 0 {
            return fail(format!("M must be even and ≥ 2 for the 3M/2 widening stage, got {}", self.m));
        }
        if self.s > 4 {
            return fail(format!("spatial stages S must be in 0..=4, got {}", self.s));
        }
        if !matches!(self.k, 3 | 5 | 7) {
            return fail(format!("kernel size k must be 3, 5, or 7, got {}", self.k));
        }
        Ok(())
    }

    /// Spatial divisibility demanded by the full compression pipeline:
    /// S encoder halvings plus two hyperencoder halvings.
    pub fn pipeline_divisor(&self) -> usize {
        1 << (self.s + 2)
    }

    /// Closed-form trainable-scalar count; pinned against constructed
    /// models in tests.
    pub fn param_count(&self) -> usize {
        let (c, n, m, s, k) = (self.c, self.n, self.m, self.s, self.k);
        let k2 = k * k;
        let gdn = n + n * n;
        let enc = (n * c + n) + (s + 1) * gdn + s * (n * n * k2 + n) + (m * n + m);
        let hyp_enc = (n * m + n) + 2 * (n * n * k2 + n);
        let hyp_dec = (n * m * k2 + m) + (m * (3 * m / 2) * k2 + 3 * m / 2) + (2 * m * (3 * m / 2) + 2 * m);
        let dec = (n * m + n) + (s + 1) * gdn + s * (n * n * k2 + n) + (c * n + c);
        let prior = 46 * n;
        enc + hyp_enc + hyp_dec + dec + prior
    }
}

/// One convolution layer's parameter handles and geometry.
#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
    output_padding: usize,
    transposed: bool,
}

/// The full parameter collection plus the layer handles that wire it.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: HyvicConfig,
    pub set: ParamSet,
    enc_in: ConvLayer,
    enc_gdn: Vec<GdnLayer>,
    enc_stages: Vec<ConvLayer>,
    enc_out: ConvLayer,
    hyp_in: ConvLayer,
    hyp_down: [ConvLayer; 2],
    hyp_up: [ConvLayer; 2],
    hyp_out: ConvLayer,
    dec_in: ConvLayer,
    dec_igdn: Vec<GdnLayer>,
    dec_stages: Vec<ConvLayer>,
    dec_out: ConvLayer,
    pub prior: FactorizedPrior,
}

fn init_conv(
    set: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    transposed: bool,
) -> ConvLayer {
    // Weights and biases draw from U(±1/sqrt(cin·k²)), weight first, in
    // storage order — the draw order is part of the determinism contract.
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let wshape = if transposed {
        [cin, cout, k, k]
    } else {
        [cout, cin, k, k]
    };
    let wlen: usize = wshape.iter().product();
    let wdata: Vec<f64> = (0..wlen).map(|_| rng.gen_range(-bound..bound)).collect();
    let w = set.add(&format!("{name}.w"), Tensor4::from_vec(wshape, wdata).unwrap());
    let bdata: Vec<f64> = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
    let b = set.add(
        &format!("{name}.b"),
        Tensor4::from_vec([1, cout, 1, 1], bdata).unwrap(),
    );
    ConvLayer {
        w,
        b,
        stride,
        padding: if k == 1 { 0 } else { k / 2 },
        output_padding: if transposed && stride == 2 { 1 } else { 0 },
        transposed,
    }
}

impl ModelParams {
    pub fn new(config: HyvicConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (c, n, m, s, k) = (config.c, config.n, config.m, config.s, config.k);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();

        let enc_in = init_conv(&mut set, &mut rng, "enc.in", c, n, 1, 1, false);
        let mut enc_gdn = vec![GdnLayer::new(&mut set, "enc.gdn0", n, false)];
        let mut enc_stages = Vec::with_capacity(s);
        for i in 0..s {
            enc_stages.push(init_conv(&mut set, &mut rng, &format!("enc.stage{i}"), n, n, k, 2, false));
            enc_gdn.push(GdnLayer::new(&mut set, &format!("enc.gdn{}", i + 1), n, false));
        }
        let enc_out = init_conv(&mut set, &mut rng, "enc.out", n, m, 1, 1, false);

        let hyp_in = init_conv(&mut set, &mut rng, "hyp_enc.in", m, n, 1, 1, false);
        let hyp_down = [
            init_conv(&mut set, &mut rng, "hyp_enc.down0", n, n, k, 2, false),
            init_conv(&mut set, &mut rng, "hyp_enc.down1", n, n, k, 2, false),
        ];

        let hyp_up = [
            init_conv(&mut set, &mut rng, "hyp_dec.up0", n, m, k, 2, true),
            init_conv(&mut set, &mut rng, "hyp_dec.up1", m, 3 * m / 2, k, 2, true),
        ];
        let hyp_out = init_conv(&mut set, &mut rng, "hyp_dec.out", 3 * m / 2, 2 * m, 1, 1, false);

        let dec_in = init_conv(&mut set, &mut rng, "dec.in", m, n, 1, 1, false);
        let mut dec_igdn = vec![GdnLayer::new(&mut set, "dec.igdn0", n, true)];
        let mut dec_stages = Vec::with_capacity(s);
        for i in 0..s {
            dec_stages.push(init_conv(&mut set, &mut rng, &format!("dec.stage{i}"), n, n, k, 2, true));
            dec_igdn.push(GdnLayer::new(&mut set, &format!("dec.igdn{}", i + 1), n, true));
        }
        let dec_out = init_conv(&mut set, &mut rng, "dec.out", n, c, 1, 1, false);
        {
            // Start the reconstruction at the dynamic-range midpoint so
            // early training refines structure instead of spending its
            // step budget dragging the output mean up from zero.
            let bias = &mut set.get_mut(dec_out.b);
            let mut v = (*bias.value).clone();
            for e in v.data_mut() {
                *e += 0.5;
            }
            bias.value = Arc::new(v);
        }

        let prior = FactorizedPrior::new(&mut set, "prior", n, &mut rng);

        Ok(ModelParams {
            config,
            set,
            enc_in,
            enc_gdn,
            enc_stages,
            enc_out,
            hyp_in,
            hyp_down,
            hyp_up,
            hyp_out,
            dec_in,
            dec_igdn,
            dec_stages,
            dec_out,
            prior,
        })
    }

    fn conv(&self, tape: &mut Tape, x: NodeId, l: &ConvLayer) -> Result<NodeId, ShapeError> {
        let w = tape.param(&self.set, l.w);
        let b = tape.param(&self.set, l.b);
        if l.transposed {
            tape.conv_transpose2d(x, w, b, l.stride, l.padding, l.output_padding)
        } else {
            tape.conv2d(x, w, b, l.stride, l.padding)
        }
    }

    /// Analysis transform: `[B, C, H, W] -> [B, M, H/2^S, W/2^S]`.
    pub fn encode(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, ModelError> {
        let [_, c, h, w] = tape.value(x).shape();
        if c != self.config.c {
            return Err(ShapeError::Mismatch {
                op: "encode",
                what: "input channels",
                expected: self.config.c.to_string(),
                got: c.to_string(),
            }
            .into());
        }
        // The full pipeline halves S times here and twice more in the
        // hyperencoder, so reject inputs the hyperlatent can't tile now.
        let div = self.config.pipeline_divisor();
        if h % div != 0 {
            return Err(ModelError::Divisibility { what: "input height", got: h, divisor: div });
        }
        if w % div != 0 {
            return Err(ModelError::Divisibility { what: "input width", got: w, divisor: div });
        }
        let mut cur = self.conv(tape, x, &self.enc_in)?;
        cur = self.enc_gdn[0].apply(tape, &self.set, cur)?;
        for i in 0..self.config.s {
            cur = self.conv(tape, cur, &self.enc_stages[i])?;
            cur = self.enc_gdn[i + 1].apply(tape, &self.set, cur)?;
        }
        Ok(self.conv(tape, cur, &self.enc_out)?)
    }

    /// Hyper analysis: `[B, M, Σ, Ω] -> [B, N, Σ/4, Ω/4]`.
    pub fn hyper_encode(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId, ModelError> {
        let [_, c, h, w] = tape.value(y).shape();
        if c != self.config.m {
            return Err(ShapeError::Mismatch {
                op: "hyper_encode",
                what: "input channels",
                expected: self.config.m.to_string(),
                got: c.to_string(),
            }
            .into());
        }
        if h % 4 != 0 {
            return Err(ModelError::Divisibility { what: "latent height", got: h, divisor: 4 });
        }
        if w % 4 != 0 {
            return Err(ModelError::Divisibility { what: "latent width", got: w, divisor: 4 });
        }
        let mut cur = self.conv(tape, y, &self.hyp_in)?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        cur = self.conv(tape, cur, &self.hyp_down[0])?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        Ok(self.conv(tape, cur, &self.hyp_down[1])?)
    }

    /// Hyper synthesis: `[B, N, Π, Ξ] -> (μ, σ)` each `[B, M, 4Π, 4Ξ]`,
    /// with σ = max(exp(raw), [`SCALE_MIN`]).
    pub fn hyper_decode(&self, tape: &mut Tape, z_hat: NodeId) -> Result<(NodeId, NodeId), ModelError> {
        let [_, c, _, _] = tape.value(z_hat).shape();
        if c != self.config.n {
            return Err(ShapeError::Mismatch {
                op: "hyper_decode",
                what: "input channels",
                expected: self.config.n.to_string(),
                got: c.to_string(),
            }
            .into());
        }
        let mut cur = self.conv(tape, z_hat, &self.hyp_up[0])?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        cur = self.conv(tape, cur, &self.hyp_up[1])?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        cur = self.conv(tape, cur, &self.hyp_out)?;
        let m = self.config.m;
        let mu = tape.slice_channels(cur, 0, m)?;
        let raw = tape.slice_channels(cur, m, m)?;
        let exp = tape.exp(raw);
        let sigma = tape.clamp_min(exp, SCALE_MIN);
        Ok((mu, sigma))
    }

    /// Synthesis transform: `[B, M, Σ, Ω] -> [B, C, 2^S·Σ, 2^S·Ω]`.
    pub fn decode(&self, tape: &mut Tape, y_hat: NodeId) -> Result<NodeId, ModelError> {
        let [_, c, _, _] = tape.value(y_hat).shape();
        if c != self.config.m {
            return Err(ShapeError::Mismatch {
                op: "decode",
                what: "input channels",
                expected: self.config.m.to_string(),
                got: c.to_string(),
            }
            .into());
        }
        let mut cur = self.conv(tape, y_hat, &self.dec_in)?;
        cur = self.dec_igdn[0].apply(tape, &self.set, cur)?;
        for i in 0..self.config.s {
            cur = self.conv(tape, cur, &self.dec_stages[i])?;
            cur = self.dec_igdn[i + 1].apply(tape, &self.set, cur)?;
        }
        Ok(self.conv(tape, cur, &self.dec_out)?)
    }

    /// Serializes every parameter, in registration order, to the
    /// checkpoint byte format.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.config.c, self.config.n, self.config.m, self.config.s, self.config.k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in self.set.iter() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(4u8);
            for &e in &p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint back into a model. Every expected parameter
    /// must be present with its exact shape; extras, repeats, and
    /// truncation are errors.
    pub fn deserialize(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *pos + n > bytes.len() {
                return Err(CheckpointError::Truncated { at: bytes.len() });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let config = HyvicConfig::new(dims[0], dims[1], dims[2], dims[3], dims[4])
            .map_err(|e| CheckpointError::Config { reason: e.to_string() })?;

        let mut records: std::collections::HashMap<String, Tensor4> = std::collections::HashMap::new();
        while pos < bytes.len() {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_owned();
            let rank = take(&mut pos, 1)?[0];
            if rank != 4 {
                return Err(CheckpointError::BadRank { name, rank });
            }
            let mut shape = [0usize; 4];
            for e in &mut shape {
                *e = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            }
            let count: usize = shape.iter().product();
            let payload = take(&mut pos, count * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor4::from_vec(shape, data).expect("length matches by construction");
            if records.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::DuplicateParam(name));
            }
        }

        // Seed value is irrelevant: every parameter gets overwritten, and
        // missing ones are an error.
        let mut model = ModelParams::new(config, 0)
            .map_err(|e| CheckpointError::Config { reason: e.to_string() })?;
        let ids: Vec<ParamId> = model.set.ids().collect();
        for id in ids {
            let (name, expected) = {
                let p = model.set.get(id);
                (p.name.clone(), p.value.shape())
            };
            let t = records
                .remove(&name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            if t.shape() != expected {
                return Err(CheckpointError::ParamShape {
                    name,
                    expected,
                    got: t.shape(),
                });
            }
            model.set.get_mut(id).value = Arc::new(t);
        }
        if let Some(name) = records.keys().next() {
            return Err(CheckpointError::UnknownParam(name.clone()));
        }
        Ok(model)
    }
}

/// SHA-256 of a serialized checkpoint; the bitstream header pins the
/// weights it was produced with through this digest.
pub fn checkpoint_hash(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

/// Eval-mode quantizer: `round(y - offset) + offset`, ties away from zero
/// (`f64::round`), with `offset` the predicted mean for mean-removed
/// symbolization.
pub fn quantize_eval(y: &Tensor4, offset: Option<&Tensor4>) -> Result<Tensor4, ShapeError> {
    match offset {
        None => Ok(y.map(f64::round)),
        Some(o) => {
            if o.shape() != y.shape() {
                return Err(ShapeError::Mismatch {
                    op: "quantize_eval",
                    what: "offset shape",
                    expected: format!("{:?}", y.shape()),
                    got: format!("{:?}", o.shape()),
                });
            }
            let mut out = y.clone();
            for (v, &ov) in out.data_mut().iter_mut().zip(o.data()) {
                *v = (*v - ov).round() + ov;
            }
            Ok(out)
        }
    }
}

/// Train-mode quantizer proxy: adds i.i.d. Uniform(-1/2, 1/2) noise.
pub fn quantize_train<R: Rng>(y: &Tensor4, rng: &mut R) -> Tensor4 {
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += rng.gen::<f64>() - 0.5;
    }
    out
}
