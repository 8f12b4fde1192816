//! The subcommand bodies: wiring between the filesystem, the codec
//! library, and the JSON/CSV reports each command emits.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use hyvic_core::codec::{self, Bitstream};
use hyvic_core::data::{self, load_cube, CubeFile, CubePayload, DatasetManifest};
use hyvic_core::entropy::{build_cdf_tables, CodebookSet};
use hyvic_core::metrics::{self, BdDomain, RDCurve};
use hyvic_core::model::{checkpoint_hash, HyvicConfig, ModelParams};
use hyvic_core::train::{self, log_to_csv};
use hyvic_core::Tensor4;
use serde_json::{json, Value};

use crate::config::{self, TrainSpec};
use crate::manifest::{atomic_write, RunManifest};
use crate::Failure;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn print_report(v: &Value) {
    // Reports are the machine-readable surface; everything else stays on
    // stderr.
    println!("{}", serde_json::to_string_pretty(v).expect("report serialization"));
}

fn load_model(path: &Path) -> Result<(ModelParams, Vec<u8>), Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Other(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let model = ModelParams::deserialize(&bytes)
        .map_err(|e| Failure::Other(format!("checkpoint {}: {e}", path.display())))?;
    Ok((model, bytes))
}

/// Every `.hsic` file in a directory, sorted by name so results and
/// reports are ordering-stable across platforms.
fn hsic_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Failure::Other(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "hsic"))
        .collect();
    files.sort();
    Ok(files)
}

/// Training inputs: the manifest's train split when the directory carries
/// one, otherwise every cube in it.
fn train_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    if dir.join("manifest.json").exists() {
        let m = DatasetManifest::load(dir)?;
        Ok(m.paths(dir, &m.splits.train).collect())
    } else {
        hsic_files(dir)
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            std::fs::create_dir_all(p)
                .map_err(|e| Failure::Other(format!("cannot create {}: {e}", p.display())))?;
        }
    }
    Ok(())
}

/// Per-output manifest path: `<output>.manifest.json` next to the file.
fn sibling_manifest(output: &Path) -> Result<PathBuf, Failure> {
    let name = output.file_name().ok_or_else(|| {
        Failure::Other(format!("output path {} has no file name", output.display()))
    })?;
    Ok(output.with_file_name(format!("{}.manifest.json", name.to_string_lossy())))
}

pub fn cmd_train(config_path: &Path) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", config_path.display())))?;
    let spec: TrainSpec = config::parse(&text)?;
    spec.train.validate()?;
    if !spec.dataset.is_dir() {
        return Err(Failure::Config(format!(
            "dataset path {} does not exist or is not a directory",
            spec.dataset.display()
        )));
    }
    let files = train_files(&spec.dataset)?;
    if files.is_empty() {
        return Err(Failure::Config(format!(
            "dataset {} contains no .hsic cubes",
            spec.dataset.display()
        )));
    }
    let mut cubes: Vec<Tensor4> = Vec::with_capacity(files.len());
    for f in &files {
        cubes.push(load_cube(f)?.0);
    }
    let c = cubes[0].shape()[1];
    let cfg = match spec.n {
        Some(n) => HyvicConfig::new(c, n, spec.m, spec.s, spec.k),
        None => HyvicConfig::from_m(c, spec.m, spec.s, spec.k),
    }
    .map_err(|e| Failure::Config(e.to_string()))?;

    std::fs::create_dir_all(&spec.out)
        .map_err(|e| Failure::Other(format!("cannot create {}: {e}", spec.out.display())))?;
    let ckpt_path = spec.out.join("checkpoint.hvwt");
    let log_path = spec.out.join("train_log.csv");
    let manifest = RunManifest::begin(
        "train",
        spec.out.join("run_manifest.json"),
        Some(spec.train.seed),
        spec.snapshot(c, cfg.n),
        &[&ckpt_path, &log_path],
    )?;
    if spec.lambda_defaulted {
        eprintln!("notice: lambda not set in {}; defaulting to 1e-4", config_path.display());
    }

    let t0 = Instant::now();
    let out = match train::train(&cubes, cfg, &spec.train) {
        Ok(o) => o,
        Err(e) => {
            let f = Failure::from(e);
            manifest.failed(&f.to_string());
            return Err(f);
        }
    };
    let bytes = out.model.serialize();
    atomic_write(&ckpt_path, &bytes)?;
    atomic_write(&log_path, log_to_csv(&out.log).as_bytes())?;

    let wall = t0.elapsed().as_millis();
    let last = out.log.last().expect("training ran at least one step");
    let stats = json!({
        "cubes": files.len(),
        "steps": out.log.len(),
        "param_count": cfg.param_count(),
        "final_total": last.total,
        "final_rate_bpppc": last.rate_bpppc,
        "final_mse": last.mse,
        "checkpoint": ckpt_path.display().to_string(),
        "checkpoint_sha256": hex(&checkpoint_hash(&bytes)),
        "log": log_path.display().to_string(),
        "wall_ms": wall,
    });
    print_report(&stats);
    manifest.complete(stats, wall)?;
    Ok(0)
}

pub fn cmd_compress(ckpt: &Path, input: &Path, output: &Path) -> Result<u8, Failure> {
    let (model, ckpt_bytes) = load_model(ckpt)?;
    let (cube, n_b) = load_cube(input)?;
    ensure_parent(output)?;
    let manifest = RunManifest::begin(
        "compress",
        sibling_manifest(output)?,
        None,
        json!({
            "checkpoint": ckpt.display().to_string(),
            "input": input.display().to_string(),
            "output": output.display().to_string(),
        }),
        &[output],
    )?;

    let t0 = Instant::now();
    let out = match codec::compress(&model, &cube, n_b) {
        Ok(o) => o,
        Err(e) => {
            let f = Failure::from(e);
            manifest.failed(&f.to_string());
            return Err(f);
        }
    };
    let bytes = out.bitstream.serialize();
    atomic_write(output, &bytes)?;

    let wall = t0.elapsed().as_millis();
    let stream = &out.bitstream;
    let stats = json!({
        "input": input.display().to_string(),
        "output": output.display().to_string(),
        "stream_bytes": bytes.len(),
        "cr": stream.compression_ratio(),
        "bpppc": stream.total_bits() as f64 / cube.len() as f64,
        "ideal_bits": out.ideal_bits,
        "checkpoint_sha256": hex(&checkpoint_hash(&ckpt_bytes)),
        "wall_ms": wall,
    });
    print_report(&stats);
    manifest.complete(stats, wall)?;
    Ok(0)
}

pub fn cmd_decompress(ckpt: &Path, input: &Path, output: &Path) -> Result<u8, Failure> {
    let (model, _) = load_model(ckpt)?;
    let bytes = std::fs::read(input)
        .map_err(|e| Failure::Other(format!("cannot read bitstream {}: {e}", input.display())))?;
    let stream = Bitstream::deserialize(&bytes)?;
    ensure_parent(output)?;
    let manifest = RunManifest::begin(
        "decompress",
        sibling_manifest(output)?,
        None,
        json!({
            "checkpoint": ckpt.display().to_string(),
            "input": input.display().to_string(),
            "output": output.display().to_string(),
        }),
        &[output],
    )?;

    let t0 = Instant::now();
    // On any mismatch this returns before the output file exists.
    let back = match codec::decompress(&model, &stream) {
        Ok(b) => b,
        Err(e) => {
            let f = Failure::from(e);
            manifest.failed(&f.to_string());
            return Err(f);
        }
    };
    let [_, c, h, w] = back.cube.shape();
    let reflectance: Vec<f32> =
        back.cube.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let file = CubeFile {
        n_b: stream.header.n_b,
        c: c as u32,
        h: h as u32,
        w: w as u32,
        metadata: String::new(),
        payload: CubePayload::ReflectanceF32(reflectance),
    };
    atomic_write(output, &file.encode()?)?;

    let wall = t0.elapsed().as_millis();
    let stats = json!({
        "input": input.display().to_string(),
        "output": output.display().to_string(),
        "bands": c,
        "height": h,
        "width": w,
        "n_b": stream.header.n_b,
        "cr": stream.compression_ratio(),
        "bpppc": stream.total_bits() as f64 / back.cube.len() as f64,
        "wall_ms": wall,
    });
    print_report(&stats);
    manifest.complete(stats, wall)?;
    Ok(0)
}

struct EvalRow {
    file: String,
    cr: f64,
    psnr_db: f64,
    sa: f64,
    ssim: f64,
}

fn score_one(
    model: &ModelParams,
    books: &CodebookSet,
    hash: [u8; 32],
    path: &Path,
) -> Result<EvalRow, String> {
    let run = || -> Result<EvalRow, Failure> {
        let (x, n_b) = load_cube(path)?;
        let out = codec::compress_with(model, books, hash, &x, n_b)?;
        let back = codec::decompress_with(model, books, hash, &out.bitstream)?;
        Ok(EvalRow {
            file: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            cr: out.bitstream.compression_ratio(),
            psnr_db: metrics::psnr(&x, &back.cube, 1.0)?,
            sa: metrics::spectral_angle(&x, &back.cube)?,
            ssim: metrics::ssim(&x, &back.cube, 1.0)?,
        })
    };
    run().map_err(|e| e.to_string())
}

/// Worker count: HYVIC_THREADS when set, else the machine's parallelism,
/// never more than one worker per cube.
fn thread_cap(jobs: usize) -> Result<usize, Failure> {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = match std::env::var("HYVIC_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Failure::Config(format!("HYVIC_THREADS must be a positive integer, got {s:?}"))
            })?,
        Err(std::env::VarError::NotPresent) => avail,
        Err(std::env::VarError::NotUnicode(_)) => {
            return Err(Failure::Config("HYVIC_THREADS is not valid UTF-8".into()))
        }
    };
    Ok(cap.min(jobs).max(1))
}

/// Scores cubes across `threads` workers pulling from a shared index; the
/// result vector stays in input (filename) order regardless of which
/// worker finished when.
fn score_all(
    model: &ModelParams,
    books: &CodebookSet,
    hash: [u8; 32],
    files: &[PathBuf],
    threads: usize,
) -> Vec<Result<EvalRow, String>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EvalRow, String>>>> =
        files.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= files.len() {
                    break;
                }
                let r = score_one(model, books, hash, &files[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every index scored"))
        .collect()
}

fn summarize(vals: &[f64]) -> Value {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    json!({
        "mean": mean,
        "std": var.sqrt(),
        "min": vals.iter().copied().fold(f64::INFINITY, f64::min),
        "max": vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

pub fn cmd_eval(ckpt: &Path, test_dir: &Path, out_dir: &Path) -> Result<u8, Failure> {
    let (model, ckpt_bytes) = load_model(ckpt)?;
    let books = build_cdf_tables(&model.set, &model.prior)
        .map_err(|e| Failure::Other(e.to_string()))?;
    let hash = checkpoint_hash(&ckpt_bytes);
    if !test_dir.is_dir() {
        return Err(Failure::Config(format!(
            "test directory {} does not exist",
            test_dir.display()
        )));
    }
    let files = hsic_files(test_dir)?;
    if files.is_empty() {
        return Err(Failure::Config(format!("no .hsic cubes in {}", test_dir.display())));
    }
    let threads = thread_cap(files.len())?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Other(format!("cannot create {}: {e}", out_dir.display())))?;
    let csv_path = out_dir.join("eval.csv");
    let sum_path = out_dir.join("summary.json");
    let manifest = RunManifest::begin(
        "eval",
        out_dir.join("run_manifest.json"),
        None,
        json!({
            "checkpoint": ckpt.display().to_string(),
            "test_dir": test_dir.display().to_string(),
            "threads": threads,
        }),
        &[&csv_path, &sum_path],
    )?;

    let t0 = Instant::now();
    let results = score_all(&model, &books, hash, &files, threads);

    let mut csv = String::from("file,cr,psnr_db,sa,ssim\n");
    let mut rows: Vec<&EvalRow> = Vec::new();
    let mut failures: Vec<Value> = Vec::new();
    for (file, res) in files.iter().zip(&results) {
        match res {
            Ok(row) => {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.file, row.cr, row.psnr_db, row.sa, row.ssim
                ));
                rows.push(row);
            }
            Err(msg) => {
                let name = file
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| file.display().to_string());
                eprintln!("eval: {name}: {msg}");
                failures.push(json!({ "file": name, "error": msg }));
            }
        }
    }
    let column = |f: fn(&EvalRow) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
    let metrics_summary = if rows.is_empty() {
        Value::Null
    } else {
        json!({
            "cr": summarize(&column(|r| r.cr)),
            "psnr_db": summarize(&column(|r| r.psnr_db)),
            "sa": summarize(&column(|r| r.sa)),
            "ssim": summarize(&column(|r| r.ssim)),
        })
    };
    let wall = t0.elapsed().as_millis();
    let summary = json!({
        "cubes": rows.len(),
        "failed": failures.len(),
        "metrics": metrics_summary,
        "failures": failures,
        "checkpoint_sha256": hex(&hash),
        "wall_ms": wall,
    });

    atomic_write(&csv_path, csv.as_bytes())?;
    let mut sum_text =
        serde_json::to_string_pretty(&summary).map_err(|e| Failure::Other(e.to_string()))?;
    sum_text.push('\n');
    atomic_write(&sum_path, sum_text.as_bytes())?;
    print_report(&summary);
    let any_failed = summary["failed"].as_u64().unwrap_or(0) > 0;
    manifest.complete(summary, wall)?;
    Ok(if any_failed { 1 } else { 0 })
}

fn read_curve(path: &Path) -> Result<RDCurve, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Other(format!("cannot read curve {}: {e}", path.display())))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    RDCurve::from_csv(label, &text)
        .map_err(|e| Failure::Other(format!("curve {}: {e}", path.display())))
}

pub fn cmd_bdpsnr(a: &Path, b: &Path, log_cr: bool, out: Option<&Path>) -> Result<u8, Failure> {
    let t0 = Instant::now();
    let ca = read_curve(a)?;
    let cb = read_curve(b)?;
    let domain = if log_cr { BdDomain::LogCr } else { BdDomain::LinearCr };
    let rep = metrics::bd_psnr(&ca, &cb, domain)?;
    let report = json!({
        "curve_a": rep.label_a,
        "curve_b": rep.label_b,
        "cr_lo": rep.cr_lo,
        "cr_hi": rep.cr_hi,
        "domain": if log_cr { "log_cr" } else { "linear_cr" },
        "bd_psnr_db": rep.delta_db,
    });
    print_report(&report);
    if let Some(out_path) = out {
        ensure_parent(out_path)?;
        let manifest = RunManifest::begin(
            "bdpsnr",
            sibling_manifest(out_path)?,
            None,
            json!({
                "curve_a": a.display().to_string(),
                "curve_b": b.display().to_string(),
                "domain": if log_cr { "log_cr" } else { "linear_cr" },
            }),
            &[out_path],
        )?;
        let mut text =
            serde_json::to_string_pretty(&report).map_err(|e| Failure::Other(e.to_string()))?;
        text.push('\n');
        atomic_write(out_path, text.as_bytes())?;
        manifest.complete(report, t0.elapsed().as_millis())?;
    }
    Ok(0)
}

pub fn cmd_synth(
    dir: &Path,
    count: usize,
    bands: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<u8, Failure> {
    if count == 0 {
        return Err(Failure::Config("--count must be at least 1".into()));
    }
    if bands == 0 || height == 0 || width == 0 {
        return Err(Failure::Config("--bands, --height, and --width must be at least 1".into()));
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Other(format!("cannot create {}: {e}", dir.display())))?;
    let manifest = RunManifest::begin(
        "synth",
        dir.join("run_manifest.json"),
        Some(seed),
        json!({
            "count": count,
            "bands": bands,
            "height": height,
            "width": width,
            "seed": seed,
        }),
        &[&dir.join("manifest.json")],
    )?;

    let t0 = Instant::now();
    let m = match data::synth_dataset(dir, count, bands, height, width, seed) {
        Ok(m) => m,
        Err(e) => {
            let f = Failure::from(e);
            manifest.failed(&f.to_string());
            return Err(f);
        }
    };
    let wall = t0.elapsed().as_millis();
    let stats = json!({
        "dir": dir.display().to_string(),
        "count": count,
        "train": m.splits.train.len(),
        "val": m.splits.val.len(),
        "test": m.splits.test.len(),
        "wall_ms": wall,
    });
    print_report(&stats);
    manifest.complete(stats, wall)?;
    Ok(0)
}
