//! End-to-end compression: transforms → quantization → range coding into
//! the on-disk container, and the exact inverse.
//!
//! Both sides derive (μ, σ) from the *quantized* hyperlatent through the
//! same f64 code path, so the Gaussian tables and symbol meanings match
//! bit-for-bit; the only information loss in the whole pipeline is the
//! quantizer itself.

use thiserror::Error;

use crate::entropy::{
    factorized_likelihood, gaussian_likelihood, CodebookSet, EntropyError, build_cdf_tables,
};
use crate::metrics::MetricsError;
use crate::model::{checkpoint_hash, quantize_eval, ModelError, ModelParams};
use crate::rans::{rans_decode, rans_encode, stream_cost_bits, CoderError};
use crate::tape::Tape;
use crate::tensor::{ShapeError, Tensor4};

const BITSTREAM_MAGIC: &[u8; 4] = b"HVIC";
const BITSTREAM_VERSION: u16 = 1;
/// Fixed header size: magic, version, N_b, C/H/W, S/M/N/k, hash, two lengths.
const HEADER_BYTES: usize = 4 + 2 + 1 + 12 + 16 + 32 + 16;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("bitstream truncated: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("not a bitstream (bad magic)")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    Version(u16),
    #[error("bitstream config (C={c}, S={s}, M={m}, N={n}, k={k}) does not match the loaded model")]
    ConfigMismatch {
        c: u32,
        s: u32,
        m: u32,
        n: u32,
        k: u32,
    },
    #[error("checkpoint hash mismatch: bitstream was produced with different weights")]
    HashMismatch,
    #[error("coding expects a single cube (batch 1), got batch {0}")]
    Batch(usize),
    #[error(transparent)]
    Metric(#[from] MetricsError),
}

/// Parsed container header; everything needed to size the payloads and
/// compute the compression ratio without touching a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub n_b: u8,
    pub c: u32,
    pub h: u32,
    pub w: u32,
    pub s: u32,
    pub m: u32,
    pub n: u32,
    pub k: u32,
    pub checkpoint_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub hyper: Vec<u8>,
    pub latent: Vec<u8>,
}

impl Bitstream {
    pub fn serialize(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.hyper.len() + self.latent.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
        out.push(h.n_b);
        for v in [h.c, h.h, h.w, h.s, h.m, h.n, h.k] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.checkpoint_hash);
        out.extend_from_slice(&(self.hyper.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.latent.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&self.latent);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Bitstream, CodecError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CodecError> {
            if *pos + n > bytes.len() {
                return Err(CodecError::Truncated {
                    have: bytes.len(),
                    need: *pos + n,
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != BITSTREAM_MAGIC {
            return Err(CodecError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != BITSTREAM_VERSION {
            return Err(CodecError::Version(version));
        }
        let n_b = take(&mut pos, 1)?[0];
        let mut dims = [0u32; 7];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        }
        let mut hash = [0u8; 32];
        hash.copy_from_slice(take(&mut pos, 32)?);
        let hyper_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let latent_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let hyper = take(&mut pos, hyper_len)?.to_vec();
        let latent = take(&mut pos, latent_len)?.to_vec();
        if pos != bytes.len() {
            return Err(CodecError::Truncated {
                have: bytes.len(),
                need: pos,
            });
        }
        Ok(Bitstream {
            header: BitstreamHeader {
                n_b,
                c: dims[0],
                h: dims[1],
                w: dims[2],
                s: dims[3],
                m: dims[4],
                n: dims[5],
                k: dims[6],
                checkpoint_hash: hash,
            },
            hyper,
            latent,
        })
    }

    /// Total stream size in bits, header included.
    pub fn total_bits(&self) -> u64 {
        8 * (HEADER_BYTES + self.hyper.len() + self.latent.len()) as u64
    }

    /// CR = raw cube bits / stream bits, with raw = N_b · H · W · C.
    pub fn compression_ratio(&self) -> f64 {
        let h = &self.header;
        let raw = h.n_b as u64 * h.h as u64 * h.w as u64 * h.c as u64;
        raw as f64 / self.total_bits() as f64
    }
}

#[derive(Debug)]
pub struct CompressOutput {
    pub bitstream: Bitstream,
    /// Latent the coder actually represents (symbols + μ), kept for
    /// determinism checks against the decoder.
    pub y_hat: Tensor4,
    pub z_hat: Tensor4,
    /// Ideal table cost of both payloads in bits (escapes included).
    pub ideal_bits: f64,
}

pub struct DecompressOutput {
    pub cube: Tensor4,
    pub y_hat: Tensor4,
    pub z_hat: Tensor4,
}

/// Symbol scan order: channel-major row-major — exactly the tensor's
/// storage order for batch 1.
fn to_symbols(t: &Tensor4) -> Vec<i64> {
    t.data().iter().map(|&v| v.round() as i64).collect()
}

fn channel_indices(shape: [usize; 4]) -> Vec<usize> {
    let [_, c, h, w] = shape;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        out.extend(std::iter::repeat(ch).take(h * w));
    }
    out
}

pub fn compress(model: &ModelParams, cube: &Tensor4, n_b: u8) -> Result<CompressOutput, CodecError> {
    let books = build_cdf_tables(&model.set, &model.prior)?;
    let hash = checkpoint_hash(&model.serialize());
    compress_with(model, &books, hash, cube, n_b)
}

/// Compression against prebuilt tables and a precomputed weight hash —
/// the path for callers coding many cubes with one model.
pub fn compress_with(
    model: &ModelParams,
    books: &CodebookSet,
    hash: [u8; 32],
    cube: &Tensor4,
    n_b: u8,
) -> Result<CompressOutput, CodecError> {
    let [b, c, h, w] = cube.shape();
    if b != 1 {
        return Err(CodecError::Batch(b));
    }
    if c != model.config.c {
        return Err(CodecError::Shape(ShapeError::Mismatch {
            op: "compress",
            what: "input channels",
            expected: model.config.c.to_string(),
            got: c.to_string(),
        }));
    }
    let div = model.config.pipeline_divisor();
    if h % div != 0 {
        return Err(CodecError::Model(ModelError::Divisibility {
            what: "input height",
            got: h,
            divisor: div,
        }));
    }
    if w % div != 0 {
        return Err(CodecError::Model(ModelError::Divisibility {
            what: "input width",
            got: w,
            divisor: div,
        }));
    }

    // Forward transforms (no gradients needed; the tape is just the
    // shared evaluation path).
    let mut tape = Tape::new();
    let x = tape.constant(cube.clone());
    let y_node = model.encode(&mut tape, x)?;
    let z_node = model.hyper_encode(&mut tape, y_node)?;
    let y = tape.value(y_node).clone();

    // Hyperlatent payload: one symbol per element, table = its channel.
    // ẑ is reconstituted from the symbols exactly as the decoder will do
    // it — in particular round(-0.2) is -0.0, which must not survive.
    let z_symbols = to_symbols(&quantize_eval(tape.value(z_node), None)?);
    let mut z_hat = Tensor4::zeros(tape.value(z_node).shape());
    for (i, &s) in z_symbols.iter().enumerate() {
        z_hat.data_mut()[i] = s as f64;
    }
    let z_indices = channel_indices(z_hat.shape());
    let hyper_payload = rans_encode(&z_symbols, &z_indices, &books.factorized)?;
    let hyper_bits = stream_cost_bits(&z_symbols, &z_indices, &books.factorized);

    // Both sides reconstruct (μ, σ) from ẑ via an identical fresh pass.
    let (mu, sigma) = hyper_stats(model, &z_hat)?;

    // Latent payload: mean-removed residuals against the snapped scale.
    let mut y_symbols = Vec::with_capacity(y.len());
    let mut y_indices = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        y_symbols.push((y.data()[i] - mu.data()[i]).round() as i64);
        y_indices.push(books.gaussian.scale_index(sigma.data()[i]));
    }
    let latent_payload = rans_encode(&y_symbols, &y_indices, &books.gaussian.tables)?;
    let latent_bits = stream_cost_bits(&y_symbols, &y_indices, &books.gaussian.tables);

    // The latent the decoder will see: symbol + μ, same op order.
    let mut y_hat = mu.clone();
    for (i, &s) in y_symbols.iter().enumerate() {
        y_hat.data_mut()[i] = s as f64 + mu.data()[i];
    }

    let bitstream = Bitstream {
        header: BitstreamHeader {
            n_b,
            c: c as u32,
            h: h as u32,
            w: w as u32,
            s: model.config.s as u32,
            m: model.config.m as u32,
            n: model.config.n as u32,
            k: model.config.k as u32,
            checkpoint_hash: hash,
        },
        hyper: hyper_payload,
        latent: latent_payload,
    };
    Ok(CompressOutput {
        bitstream,
        y_hat,
        z_hat,
        ideal_bits: hyper_bits + latent_bits,
    })
}

/// The shared μ/σ derivation from the quantized hyperlatent.
fn hyper_stats(model: &ModelParams, z_hat: &Tensor4) -> Result<(Tensor4, Tensor4), CodecError> {
    let mut tape = Tape::new();
    let z = tape.constant(z_hat.clone());
    let (mu, sigma) = model.hyper_decode(&mut tape, z)?;
    Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
}

pub fn decompress(model: &ModelParams, stream: &Bitstream) -> Result<DecompressOutput, CodecError> {
    let books = build_cdf_tables(&model.set, &model.prior)?;
    let hash = checkpoint_hash(&model.serialize());
    decompress_with(model, &books, hash, stream)
}

pub fn decompress_with(
    model: &ModelParams,
    books: &CodebookSet,
    hash: [u8; 32],
    stream: &Bitstream,
) -> Result<DecompressOutput, CodecError> {
    let hd = &stream.header;
    let cfg = &model.config;
    if (hd.c, hd.s, hd.m, hd.n, hd.k)
        != (cfg.c as u32, cfg.s as u32, cfg.m as u32, cfg.n as u32, cfg.k as u32)
    {
        return Err(CodecError::ConfigMismatch {
            c: hd.c,
            s: hd.s,
            m: hd.m,
            n: hd.n,
            k: hd.k,
        });
    }
    if hd.checkpoint_hash != hash {
        return Err(CodecError::HashMismatch);
    }

    let (h, w) = (hd.h as usize, hd.w as usize);
    let zh = h >> (cfg.s + 2);
    let zw = w >> (cfg.s + 2);
    let z_shape = [1usize, cfg.n, zh, zw];
    let z_indices = channel_indices(z_shape);
    let z_values = rans_decode(&stream.hyper, &z_indices, &books.factorized)?;
    let z_hat = Tensor4::from_vec(z_shape, z_values.iter().map(|&v| v as f64).collect())?;

    let (mu, sigma) = hyper_stats(model, &z_hat)?;

    let y_shape = [1usize, cfg.m, h >> cfg.s, w >> cfg.s];
    let y_indices: Vec<usize> = sigma.data().iter().map(|&s| books.gaussian.scale_index(s)).collect();
    let y_values = rans_decode(&stream.latent, &y_indices, &books.gaussian.tables)?;
    let mut y_hat = Tensor4::zeros(y_shape);
    for i in 0..y_hat.len() {
        y_hat.data_mut()[i] = y_values[i] as f64 + mu.data()[i];
    }

    let mut tape = Tape::new();
    let y = tape.constant(y_hat.clone());
    let x_node = model.decode(&mut tape, y)?;
    Ok(DecompressOutput {
        cube: tape.value(x_node).clone(),
        y_hat,
        z_hat,
    })
}

/// One cube's end-to-end scorecard: the entropy model's own rate estimate
/// next to what the coder actually spent, plus reconstruction quality.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    /// The objective's rate term evaluated on the quantized latents: exact
    /// interval likelihoods, per pixel per channel. Agreement with
    /// `realized_bpppc` is what makes the trained estimate trustworthy.
    pub est_rate_bpppc: f64,
    /// Entropy-coded payload (both streams, trailers included), per pixel
    /// per channel. Excludes the fixed container header.
    pub realized_bpppc: f64,
    pub mse: f64,
    pub psnr_db: f64,
    /// est_rate + λ·mse: the eval-mode objective at the given tradeoff.
    pub total: f64,
    pub compression_ratio: f64,
}

/// Compress, decompress, and score one cube against itself.
pub fn eval_rd(
    model: &ModelParams,
    books: &CodebookSet,
    hash: [u8; 32],
    cube: &Tensor4,
    n_b: u8,
    lambda: f64,
) -> Result<EvalReport, CodecError> {
    let out = compress_with(model, books, hash, cube, n_b)?;
    let back = decompress_with(model, books, hash, &out.bitstream)?;
    let elements = cube.len() as f64;
    // Rate term of the eval-mode objective: exact interval likelihoods of
    // the coded symbols; the coder's tables are their 16-bit quantization.
    let mut tape = Tape::new();
    let yq = tape.constant(out.y_hat.clone());
    let zq = tape.constant(out.z_hat.clone());
    let (mu, sigma) = model.hyper_decode(&mut tape, zq)?;
    let p_y = gaussian_likelihood(&mut tape, yq, mu, sigma)?;
    let p_z = factorized_likelihood(&mut tape, &model.set, &model.prior, zq)?;
    let ln_py = tape.ln(p_y);
    let ln_pz = tape.ln(p_z);
    let sum_y = tape.sum_all(ln_py);
    let sum_z = tape.sum_all(ln_pz);
    let model_bits =
        -(tape.value(sum_y).item() + tape.value(sum_z).item()) / std::f64::consts::LN_2;
    let est_rate_bpppc = model_bits / elements;
    let payload_bits = 8.0 * (out.bitstream.hyper.len() + out.bitstream.latent.len()) as f64;
    let mse = crate::metrics::mse(cube, &back.cube)?;
    let psnr_db = crate::metrics::psnr(cube, &back.cube, 1.0)?;
    Ok(EvalReport {
        est_rate_bpppc,
        realized_bpppc: payload_bits / elements,
        mse,
        psnr_db,
        total: est_rate_bpppc + lambda * mse,
        compression_ratio: out.bitstream.compression_ratio(),
    })
}

/// Debug path with the quantizer and coder removed: decode(encode(x)).
/// Comparing this against the coded round trip isolates quantization as
/// the pipeline's only lossy step.
pub fn reconstruct_unquantized(model: &ModelParams, cube: &Tensor4) -> Result<Tensor4, CodecError> {
    let mut tape = Tape::new();
    let x = tape.constant(cube.clone());
    let y = model.encode(&mut tape, x)?;
    let xh = model.decode(&mut tape, y)?;
    Ok(tape.value(xh).clone())
}
