//! Hyperspectral cube file format, normalization, cropping, deterministic
//! splits, and a synthetic desk-scale dataset generator.
//!
//! Cube container layout (all integers little-endian):
//!   magic "HSIC" · version u16 · bit depth N_b u8 · payload kind u8
//!   (0 = raw u16, 1 = reflectance f32) · C,H,W u32 · metadata length u32 +
//!   UTF-8 JSON bytes · band-sequential samples (u16 or f32 per kind).
//! Raw samples must fit the declared bit depth; reads and writes are
//! bit-exact round trips.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ShapeError, Tensor4};

const CUBE_MAGIC: &[u8; 4] = b"HSIC";
const CUBE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("not a cube file (bad magic)")]
    BadMagic,
    #[error("unsupported cube version {0}")]
    Version(u16),
    #[error("bit depth must be 1..=16, got {0}")]
    BadBitDepth(u8),
    #[error("unknown payload kind {0}")]
    BadPayloadKind(u8),
    #[error("cube file truncated: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("cube file has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("sample {index} is {value}, exceeding bit depth limit {limit}")]
    SampleRange { index: usize, value: u16, limit: u16 },
    #[error("sample count {got} does not match C·H·W = {expected}")]
    SampleCount { expected: usize, got: usize },
    #[error("metadata is not UTF-8: {0}")]
    Metadata(std::str::Utf8Error),
    #[error("crop target {target} exceeds extent {extent} on {axis}")]
    CropTarget {
        axis: &'static str,
        target: usize,
        extent: usize,
    },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("values must lie in [0,1] to quantize: sample {index} is {value}")]
    ValueRange { index: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum CubePayload {
    /// Sensor counts; normalized by 2^N_b − 1 on load.
    RawU16(Vec<u16>),
    /// Already-normalized reflectance; clamped to [0,1] on load.
    ReflectanceF32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeFile {
    pub n_b: u8,
    pub c: u32,
    pub h: u32,
    pub w: u32,
    /// Free-form JSON blob; empty string means none.
    pub metadata: String,
    pub payload: CubePayload,
}

impl CubeFile {
    fn validate(&self) -> Result<(), DataError> {
        if !(1..=16).contains(&self.n_b) {
            return Err(DataError::BadBitDepth(self.n_b));
        }
        let expected = self.c as usize * self.h as usize * self.w as usize;
        let got = match &self.payload {
            CubePayload::RawU16(v) => v.len(),
            CubePayload::ReflectanceF32(v) => v.len(),
        };
        if got != expected {
            return Err(DataError::SampleCount { expected, got });
        }
        if let CubePayload::RawU16(v) = &self.payload {
            if self.n_b < 16 {
                let limit = (1u16 << self.n_b) - 1;
                for (index, &value) in v.iter().enumerate() {
                    if value > limit {
                        return Err(DataError::SampleRange { index, value, limit });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, DataError> {
        self.validate()?;
        let meta = self.metadata.as_bytes();
        let mut out = Vec::with_capacity(24 + meta.len());
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        out.push(self.n_b);
        out.push(match self.payload {
            CubePayload::RawU16(_) => 0,
            CubePayload::ReflectanceF32(_) => 1,
        });
        for v in [self.c, self.h, self.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        match &self.payload {
            CubePayload::RawU16(v) => {
                for s in v {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
            CubePayload::ReflectanceF32(v) => {
                for s in v {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<CubeFile, DataError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
            if *pos + n > bytes.len() {
                return Err(DataError::Truncated {
                    have: bytes.len(),
                    need: *pos + n,
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CUBE_MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CUBE_VERSION {
            return Err(DataError::Version(version));
        }
        let n_b = take(&mut pos, 1)?[0];
        let kind = take(&mut pos, 1)?[0];
        let mut dims = [0u32; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let metadata = std::str::from_utf8(take(&mut pos, meta_len)?)
            .map_err(DataError::Metadata)?
            .to_string();
        let count = dims[0] as usize * dims[1] as usize * dims[2] as usize;
        let payload = match kind {
            0 => {
                let raw = take(&mut pos, 2 * count)?;
                CubePayload::RawU16(
                    raw.chunks_exact(2)
                        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let raw = take(&mut pos, 4 * count)?;
                CubePayload::ReflectanceF32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(DataError::BadPayloadKind(other)),
        };
        if pos != bytes.len() {
            return Err(DataError::TrailingBytes {
                extra: bytes.len() - pos,
            });
        }
        let file = CubeFile {
            n_b,
            c: dims[0],
            h: dims[1],
            w: dims[2],
            metadata,
            payload,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.encode()?)?)
    }

    pub fn load(path: &Path) -> Result<CubeFile, DataError> {
        CubeFile::decode(&std::fs::read(path)?)
    }

    /// Normalized 1×C×H×W tensor in [0,1].
    pub fn to_tensor(&self) -> Tensor4 {
        let shape = [1, self.c as usize, self.h as usize, self.w as usize];
        let data = match &self.payload {
            CubePayload::RawU16(v) => {
                let denom = ((1u32 << self.n_b) - 1) as f64;
                v.iter().map(|&s| s as f64 / denom).collect()
            }
            CubePayload::ReflectanceF32(v) => {
                v.iter().map(|&s| (s as f64).clamp(0.0, 1.0)).collect()
            }
        };
        Tensor4::from_vec(shape, data).expect("validated sample count")
    }

    /// Quantize a normalized cube (values in [0,1], batch 1) to raw sensor
    /// counts at the given bit depth.
    pub fn from_normalized(t: &Tensor4, n_b: u8, metadata: String) -> Result<CubeFile, DataError> {
        if !(1..=16).contains(&n_b) {
            return Err(DataError::BadBitDepth(n_b));
        }
        let [b, c, h, w] = t.shape();
        if b != 1 {
            return Err(DataError::Shape(ShapeError::Mismatch {
                op: "from_normalized",
                what: "batch",
                expected: "1".into(),
                got: b.to_string(),
            }));
        }
        let limit = ((1u32 << n_b) - 1) as f64;
        let mut raw = Vec::with_capacity(t.len());
        for (index, &value) in t.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DataError::ValueRange { index, value });
            }
            raw.push((value * limit).round() as u16);
        }
        let file = CubeFile {
            n_b,
            c: c as u32,
            h: h as u32,
            w: w as u32,
            metadata,
            payload: CubePayload::RawU16(raw),
        };
        file.validate()?;
        Ok(file)
    }
}

/// Convenience: load and normalize in one step.
pub fn load_cube(path: &Path) -> Result<(Tensor4, u8), DataError> {
    let file = CubeFile::load(path)?;
    Ok((file.to_tensor(), file.n_b))
}

/// Symmetric spatial crop; an odd remainder drops the extra pixel from the
/// high side.
pub fn center_crop(t: &Tensor4, target_h: usize, target_w: usize) -> Result<Tensor4, DataError> {
    let [b, c, h, w] = t.shape();
    if target_h > h {
        return Err(DataError::CropTarget {
            axis: "height",
            target: target_h,
            extent: h,
        });
    }
    if target_w > w {
        return Err(DataError::CropTarget {
            axis: "width",
            target: target_w,
            extent: w,
        });
    }
    let top = (h - target_h) / 2;
    let left = (w - target_w) / 2;
    let mut out = Tensor4::zeros([b, c, target_h, target_w]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..target_h {
                for j in 0..target_w {
                    *out.at_mut(bi, ci, i, j) = t.at(bi, ci, top + i, left + j);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val: 0.20,
            test: 0.10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint, exhaustive, deterministic split. Counts are the ratio floors
/// topped up by largest fractional remainder; ties go to the larger ratio,
/// then to train < val < test declaration order.
pub fn split(count: usize, spec: &SplitSpec) -> Result<SplitIndices, DataError> {
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios));
    }
    if count == 0 {
        return Err(DataError::EmptyDataset);
    }

    let mut counts = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    for (i, r) in ratios.iter().enumerate() {
        let target = r * count as f64;
        counts[i] = target.floor() as usize;
        fracs[i] = (target - target.floor(), i);
    }
    let mut leftover = count - counts.iter().sum::<usize>();
    // Largest fractional part first; break ties toward the larger ratio,
    // then declaration order.
    fracs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(ratios[b.1].total_cmp(&ratios[a.1]))
            .then(a.1.cmp(&b.1))
    });
    let mut cursor = 0;
    while leftover > 0 {
        counts[fracs[cursor % 3].1] += 1;
        leftover -= 1;
        cursor += 1;
    }

    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    // Fisher–Yates so assignment depends only on (count, seed).
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train: Vec<usize> = order[..counts[0]].to_vec();
    let val: Vec<usize> = order[counts[0]..counts[0] + counts[1]].to_vec();
    let test: Vec<usize> = order[counts[0] + counts[1]..].to_vec();
    Ok(SplitIndices { train, val, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Cube file names relative to the dataset directory.
    pub files: Vec<String>,
    pub splits: SplitIndices,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        let tmp = dir.join("manifest.json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(json.as_bytes())?;
            f.sync_all()?;
        }
        Ok(std::fs::rename(tmp, dir.join("manifest.json"))?)
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest, DataError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        let n = m.files.len();
        let all: Vec<usize> = m
            .splits
            .train
            .iter()
            .chain(&m.splits.val)
            .chain(&m.splits.test)
            .copied()
            .collect();
        let mut seen = vec![false; n];
        for &i in &all {
            if i >= n || seen[i] {
                return Err(DataError::Manifest(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if all.len() != n {
            return Err(DataError::Manifest("splits do not cover every cube".into()));
        }
        Ok(m)
    }

    pub fn paths<'a>(&'a self, dir: &'a Path, indices: &'a [usize]) -> impl Iterator<Item = PathBuf> + 'a {
        indices.iter().map(move |&i| dir.join(&self.files[i]))
    }
}

const SIGNATURE_COUNT: usize = 6;
const NOISE_SIGMA: f64 = 0.01;

/// Smooth spectral signatures shared by every cube of a dataset seed:
/// low-order cosine mixtures kept away from the value rails.
fn synth_signatures(c: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..SIGNATURE_COUNT)
        .map(|_| {
            let terms: Vec<(f64, f64, f64)> = (1..=3)
                .map(|j| {
                    (
                        j as f64 / 2.0,
                        rng.gen_range(0.02..0.12),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            (0..c)
                .map(|band| {
                    let t = (band as f64 + 0.5) / c as f64;
                    let mut v = 0.5;
                    for &(freq, amp, phase) in &terms {
                        v += amp * (std::f64::consts::TAU * freq * t + phase).cos();
                    }
                    v.clamp(0.05, 0.95)
                })
                .collect()
        })
        .collect()
}

/// One synthetic cube: 2–8 Gaussian blobs, each tinted by a shared
/// signature, standardized to a mid-range mean and a moderate contrast,
/// plus white noise — spatially and spectrally redundant by construction.
pub fn synth_cube_tensor(c: usize, h: usize, w: usize, seed: u64, index: u64) -> Tensor4 {
    let signatures = synth_signatures(c, seed);
    let mut rng =
        ChaCha20Rng::seed_from_u64(seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));

    struct Blob {
        cy: f64,
        cx: f64,
        sigma: f64,
        amp: f64,
        sig: usize,
    }
    let blob_count = rng.gen_range(2..=8usize);
    let min_extent = h.min(w) as f64;
    let blobs: Vec<Blob> = (0..blob_count)
        .map(|_| Blob {
            cy: rng.gen_range(0.0..1.0) * h as f64,
            cx: rng.gen_range(0.0..1.0) * w as f64,
            sigma: rng.gen_range(0.08..0.25) * min_extent,
            amp: rng.gen_range(0.3..1.0),
            sig: rng.gen_range(0..SIGNATURE_COUNT),
        })
        .collect();

    // Per-signature spatial fields.
    let mut fields = vec![vec![0.0f64; h * w]; SIGNATURE_COUNT];
    for blob in &blobs {
        let field = &mut fields[blob.sig];
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - blob.cy;
                let dx = j as f64 - blob.cx;
                field[i * w + j] +=
                    blob.amp * (-(dy * dy + dx * dx) / (2.0 * blob.sigma * blob.sigma)).exp();
            }
        }
    }

    let mut composite = vec![0.0f64; c * h * w];
    for band in 0..c {
        for p in 0..h * w {
            let mut v = 0.0;
            for (k, field) in fields.iter().enumerate() {
                v += field[p] * signatures[k][band];
            }
            composite[band * h * w + p] = v;
        }
    }

    // Standardize to a mid-range mean and a contrast that keeps a plain
    // band-mean predictor around the low-20s dB — room below a trained
    // model, comfortably above chance.
    let n = composite.len() as f64;
    let mean = composite.iter().sum::<f64>() / n;
    let sd = (composite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
        .sqrt()
        .max(1e-9);
    let base = rng.gen_range(0.45..0.55);
    let contrast = rng.gen_range(0.06..0.08);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let data: Vec<f64> = composite
        .iter()
        .map(|v| (base + (v - mean) / sd * contrast + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Tensor4::from_vec([1, c, h, w], data).unwrap()
}

/// Generate `count` cubes plus a split manifest under `dir`. Deterministic:
/// the same arguments produce bit-identical files.
pub fn synth_dataset(
    dir: &Path,
    count: usize,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let tensor = synth_cube_tensor(c, h, w, seed, i as u64);
        let meta = format!("{{\"generator\":\"synth\",\"seed\":{seed},\"index\":{i}}}");
        let cube = CubeFile::from_normalized(&tensor, 16, meta)?;
        let name = format!("cube_{i:04}.hsic");
        cube.save(&dir.join(&name))?;
        files.push(name);
    }
    let splits = split(count, &SplitSpec { seed, ..SplitSpec::default() })?;
    let manifest = DatasetManifest { files, splits, seed };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cube() -> CubeFile {
        CubeFile {
            n_b: 12,
            c: 3,
            h: 4,
            w: 5,
            metadata: "{\"site\":\"test\"}".into(),
            payload: CubePayload::RawU16((0..60).map(|i| (i * 67) % 4096).collect()),
        }
    }

    #[test]
    fn cube_round_trip_is_bit_exact() {
        let cube = sample_cube();
        let bytes = cube.encode().unwrap();
        let back = CubeFile::decode(&bytes).unwrap();
        assert_eq!(back, cube);
        assert_eq!(back.encode().unwrap(), bytes);

        let refl = CubeFile {
            n_b: 16,
            c: 2,
            h: 2,
            w: 2,
            metadata: String::new(),
            payload: CubePayload::ReflectanceF32(vec![0.0, 0.25, 0.5, 1.0, 0.1, 0.9, 0.3, 0.7]),
        };
        let rb = CubeFile::decode(&refl.encode().unwrap()).unwrap();
        assert_eq!(rb, refl);
    }

    #[test]
    fn cube_file_io_round_trips_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hsic");
        let cube = sample_cube();
        cube.save(&path).unwrap();
        assert_eq!(CubeFile::load(&path).unwrap(), cube);
        let (tensor, n_b) = load_cube(&path).unwrap();
        assert_eq!(n_b, 12);
        assert_eq!(tensor.shape(), [1, 3, 4, 5]);
    }

    #[test]
    fn normalization_hits_the_rails() {
        let cube = CubeFile {
            n_b: 10,
            c: 1,
            h: 1,
            w: 3,
            metadata: String::new(),
            payload: CubePayload::RawU16(vec![0, 511, 1023]),
        };
        let t = cube.to_tensor();
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 511.0 / 1023.0).abs() < 1e-15);
        assert_eq!(t.data()[2], 1.0);

        let refl = CubeFile {
            n_b: 16,
            c: 1,
            h: 1,
            w: 2,
            metadata: String::new(),
            payload: CubePayload::ReflectanceF32(vec![-0.5, 1.5]),
        };
        assert_eq!(refl.to_tensor().data(), &[0.0, 1.0]);
    }

    #[test]
    fn oversized_samples_and_damage_are_rejected() {
        let mut cube = sample_cube();
        if let CubePayload::RawU16(v) = &mut cube.payload {
            v[7] = 4096; // one past the 12-bit limit
        }
        assert!(matches!(
            cube.encode(),
            Err(DataError::SampleRange { index: 7, value: 4096, limit: 4095 })
        ));

        let good = sample_cube().encode().unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(CubeFile::decode(&bad_magic), Err(DataError::BadMagic)));

        let mut bad_version = good.clone();
        bad_version[4] = 7;
        assert!(matches!(CubeFile::decode(&bad_version), Err(DataError::Version(7))));

        for cut in [3, 10, 20, good.len() - 1] {
            assert!(matches!(
                CubeFile::decode(&good[..cut]),
                Err(DataError::Truncated { .. })
            ));
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(CubeFile::decode(&extra), Err(DataError::TrailingBytes { extra: 1 })));
    }

    #[test]
    fn quantize_normalized_round_trip() {
        let t = Tensor4::from_vec([1, 1, 1, 4], vec![0.0, 0.25, 0.75, 1.0]).unwrap();
        let cube = CubeFile::from_normalized(&t, 8, String::new()).unwrap();
        match &cube.payload {
            CubePayload::RawU16(v) => assert_eq!(v, &[0, 64, 191, 255]),
            _ => unreachable!(),
        }
        let bad = Tensor4::from_vec([1, 1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(
            CubeFile::from_normalized(&bad, 8, String::new()),
            Err(DataError::ValueRange { index: 0, .. })
        ));
    }

    #[test]
    fn center_crop_rules() {
        let t = Tensor4::from_vec(
            [1, 1, 5, 5],
            (0..25).map(|v| v as f64).collect(),
        )
        .unwrap();
        // 5 → 4 keeps rows/cols 0..3 (high-side drop).
        let c = center_crop(&t, 4, 4).unwrap();
        assert_eq!(c.shape(), [1, 1, 4, 4]);
        assert_eq!(c.at(0, 0, 0, 0), 0.0);
        assert_eq!(c.at(0, 0, 3, 3), 18.0);

        // Even remainder splits symmetrically.
        let big = Tensor4::from_vec([1, 1, 100, 100], (0..10000).map(|v| v as f64).collect()).unwrap();
        let cropped = center_crop(&big, 96, 96).unwrap();
        assert_eq!(cropped.at(0, 0, 0, 0), big.at(0, 0, 2, 2));
        assert_eq!(cropped.at(0, 0, 95, 95), big.at(0, 0, 97, 97));

        assert_eq!(center_crop(&t, 5, 5).unwrap().data(), t.data());
        assert!(matches!(
            center_crop(&t, 6, 5),
            Err(DataError::CropTarget { axis: "height", .. })
        ));
    }

    #[test]
    fn split_shapes_and_determinism() {
        let spec = SplitSpec { seed: 11, ..SplitSpec::default() };
        let s = split(10, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));

        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        assert_eq!(split(10, &spec).unwrap(), s);
        assert_ne!(split(10, &SplitSpec { seed: 12, ..SplitSpec::default() }).unwrap(), s);

        let one = split(1, &spec).unwrap();
        assert_eq!(one.train, vec![0]);
        assert!(one.val.is_empty() && one.test.is_empty());

        assert!(matches!(split(0, &spec), Err(DataError::EmptyDataset)));
        assert!(matches!(
            split(5, &SplitSpec { train: 0.9, val: 0.9, test: -0.8, seed: 0 }),
            Err(DataError::BadRatios(_))
        ));
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_cube_tensor(6, 12, 12, 42, 3);
        let b = synth_cube_tensor(6, 12, 12, 42, 3);
        assert_eq!(a.data(), b.data());
        let c = synth_cube_tensor(6, 12, 12, 42, 4);
        assert_ne!(a.data(), c.data());

        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_dataset(d1.path(), 3, 4, 8, 8, 7).unwrap();
        let m2 = synth_dataset(d2.path(), 3, 4, 8, 8, 7).unwrap();
        assert_eq!(m1, m2);
        for name in &m1.files {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
        let vb = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn synth_cubes_are_redundant_both_ways() {
        let (c, h, w) = (12usize, 32usize, 32usize);
        let mut band_corrs = Vec::new();
        let mut pixel_corrs = Vec::new();
        for index in 0..4 {
            let t = synth_cube_tensor(c, h, w, 99, index);
            let plane = h * w;
            for band in 0..c - 1 {
                band_corrs.push(correlation(
                    &t.data()[band * plane..(band + 1) * plane],
                    &t.data()[(band + 1) * plane..(band + 2) * plane],
                ));
            }
            for band in 0..c {
                let img = &t.data()[band * plane..(band + 1) * plane];
                let left: Vec<f64> = (0..h).flat_map(|i| (0..w - 1).map(move |j| (i, j)))
                    .map(|(i, j)| img[i * w + j])
                    .collect();
                let right: Vec<f64> = (0..h).flat_map(|i| (1..w).map(move |j| (i, j)))
                    .map(|(i, j)| img[i * w + j])
                    .collect();
                pixel_corrs.push(correlation(&left, &right));
            }
        }
        let band = band_corrs.iter().sum::<f64>() / band_corrs.len() as f64;
        let pixel = pixel_corrs.iter().sum::<f64>() / pixel_corrs.len() as f64;
        assert!(band > 0.9, "adjacent-band correlation {band}");
        assert!(pixel > 0.8, "adjacent-pixel correlation {pixel}");
    }

    #[test]
    fn synth_cubes_leave_headroom_over_the_band_mean() {
        // A band-mean predictor should sit in the low 20s dB: hard enough
        // that compression is non-trivial, easy enough that a desk-scale
        // model can beat the 20 dB floor.
        for index in 0..3 {
            let t = synth_cube_tensor(8, 16, 16, 5, index);
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let psnr_of_mean = -10.0 * var.log10();
            assert!(
                (20.5..26.0).contains(&psnr_of_mean),
                "cube {index}: band-mean predictor at {psnr_of_mean} dB"
            );
        }
    }

    #[test]
    fn dataset_manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(dir.path(), 5, 3, 8, 8, 21).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(
            loaded.splits.train.len() + loaded.splits.val.len() + loaded.splits.test.len(),
            5
        );
        for path in loaded.paths(dir.path(), &loaded.splits.train) {
            let (t, n_b) = load_cube(&path).unwrap();
            assert_eq!(t.shape(), [1, 3, 8, 8]);
            assert_eq!(n_b, 16);
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        // 5 cubes at 0.7/0.2/0.1 → 4/1/0, so val is the split with content.
        assert_eq!(loaded.splits.val.len(), 1);
        let mut broken = manifest.clone();
        broken.splits.val.clear();
        broken.save(dir.path()).unwrap();
        assert!(DatasetManifest::load(dir.path()).is_err(), "gap not caught");

        let mut dupes = manifest.clone();
        dupes.splits.val = manifest.splits.train[..1].to_vec();
        dupes.save(dir.path()).unwrap();
        assert!(DatasetManifest::load(dir.path()).is_err(), "repeat not caught");
    }
}
