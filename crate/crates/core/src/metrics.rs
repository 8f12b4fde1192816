//! Evaluation suite: PSNR, mean spectral angle, windowed SSIM, RD curves,
//! and the average PSNR gap between two RD curves over their shared
//! compression-ratio range (Akima-interpolated, Simpson-integrated).

use thiserror::Error;

use crate::tensor::{ShapeError, Tensor4};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("max_value must be positive and finite, got {0}")]
    BadMax(f64),
    #[error("zero-norm spectrum at pixel (batch {b}, row {h}, col {w})")]
    ZeroSpectrum { b: usize, h: usize, w: usize },
    #[error("rate-distortion curve '{label}': {reason}")]
    Curve { label: String, reason: String },
    #[error("query {query} outside interpolation range [{lo}, {hi}]")]
    Extrapolation { query: f64, lo: f64, hi: f64 },
    #[error("curves share no compression-ratio range: [{a_lo}, {a_hi}] vs [{b_lo}, {b_hi}]")]
    NoOverlap {
        a_lo: f64,
        a_hi: f64,
        b_lo: f64,
        b_hi: f64,
    },
    #[error("CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Order-independent mean via pairwise summation, so parallel callers that
/// concatenate per-cube results in any fixed order agree bit-for-bit with
/// the sequential path.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

fn check_pair(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(ShapeError::Mismatch {
            op,
            what: "cube shapes",
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        }));
    }
    Ok(())
}

fn check_max(max_value: f64) -> Result<(), MetricsError> {
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(MetricsError::BadMax(max_value));
    }
    Ok(())
}

/// Mean squared error over every element of the pair.
pub fn mse(x: &Tensor4, x_hat: &Tensor4) -> Result<f64, MetricsError> {
    check_pair("mse", x, x_hat)?;
    let sq: Vec<f64> = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(mean(&sq))
}

/// 10·log10(max² / MSE); +∞ for a perfect reconstruction.
pub fn psnr(x: &Tensor4, x_hat: &Tensor4, max_value: f64) -> Result<f64, MetricsError> {
    check_max(max_value)?;
    let e = mse(x, x_hat)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * ((max_value * max_value) / e).log10())
}

/// Mean over pixels of the angle (degrees) between the two spectra at that
/// pixel. Scale-invariant; errors if any pixel has a zero-norm spectrum.
pub fn spectral_angle(x: &Tensor4, x_hat: &Tensor4) -> Result<f64, MetricsError> {
    check_pair("spectral_angle", x, x_hat)?;
    let [bn, c, h, w] = x.shape();
    let mut angles = Vec::with_capacity(bn * h * w);
    let mut spectrum = vec![0.0; c];
    let mut spectrum_hat = vec![0.0; c];
    for b in 0..bn {
        for i in 0..h {
            for j in 0..w {
                let mut na = 0.0;
                let mut nb = 0.0;
                for ch in 0..c {
                    let a = x.at(b, ch, i, j);
                    let v = x_hat.at(b, ch, i, j);
                    spectrum[ch] = a;
                    spectrum_hat[ch] = v;
                    na += a * a;
                    nb += v * v;
                }
                if na == 0.0 || nb == 0.0 {
                    return Err(MetricsError::ZeroSpectrum { b, h: i, w: j });
                }
                // θ = 2·atan2(‖‖v‖u − ‖u‖v‖, ‖‖v‖u + ‖u‖v‖): stable down
                // to θ = 0 exactly, where the acos form loses ~√ε.
                let (na, nb) = (na.sqrt(), nb.sqrt());
                let mut diff = 0.0;
                let mut sum = 0.0;
                for ch in 0..c {
                    let p = nb * spectrum[ch];
                    let q = na * spectrum_hat[ch];
                    diff += (p - q) * (p - q);
                    sum += (p + q) * (p + q);
                }
                angles.push(2.0 * diff.sqrt().atan2(sum.sqrt()).to_degrees());
            }
        }
    }
    Ok(mean(&angles))
}

/// SSIM for one band image (row-major `h`×`w` samples), averaged over a
/// uniform sliding window of min(7, H) × min(7, W) at every valid offset.
/// Statistics are the biased (÷n) moments.
pub fn ssim_band(
    x: &[f64],
    x_hat: &[f64],
    h: usize,
    w: usize,
    max_value: f64,
) -> Result<f64, MetricsError> {
    check_max(max_value)?;
    if x.len() != h * w || x_hat.len() != h * w {
        return Err(MetricsError::Shape(ShapeError::Mismatch {
            op: "ssim",
            what: "band sample count",
            expected: (h * w).to_string(),
            got: format!("{} and {}", x.len(), x_hat.len()),
        }));
    }
    let c1 = (0.01 * max_value) * (0.01 * max_value);
    let c2 = (0.03 * max_value) * (0.03 * max_value);
    let wh = h.min(7);
    let ww = w.min(7);
    let n = (wh * ww) as f64;
    let mut scores = Vec::with_capacity((h - wh + 1) * (w - ww + 1));
    for top in 0..=h - wh {
        for left in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..wh {
                for dj in 0..ww {
                    let a = x[(top + di) * w + (left + dj)];
                    let b = x_hat[(top + di) * w + (left + dj)];
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            scores.push(
                ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)),
            );
        }
    }
    Ok(mean(&scores))
}

/// Cube-level SSIM: mean of the per-band scores.
pub fn ssim(x: &Tensor4, x_hat: &Tensor4, max_value: f64) -> Result<f64, MetricsError> {
    check_pair("ssim", x, x_hat)?;
    let [bn, c, h, w] = x.shape();
    let mut bands = Vec::with_capacity(bn * c);
    for b in 0..bn {
        for ch in 0..c {
            let plane = h * w;
            let off = (b * c + ch) * plane;
            bands.push(ssim_band(
                &x.data()[off..off + plane],
                &x_hat.data()[off..off + plane],
                h,
                w,
                max_value,
            )?);
        }
    }
    Ok(mean(&bands))
}

/// Piecewise-cubic interpolant with the classical ghost-point endpoint
/// rule; exact at knots, linear on collinear data, and local (a knot edit
/// influences at most a few neighboring spans).
pub struct AkimaInterpolant {
    xs: Vec<f64>,
    ys: Vec<f64>,
    tangents: Vec<f64>,
}

impl AkimaInterpolant {
    pub fn new(points: &[(f64, f64)]) -> Result<Self, MetricsError> {
        let bad = |reason: &str| MetricsError::Curve {
            label: "<akima>".into(),
            reason: reason.into(),
        };
        if points.len() < 3 {
            return Err(bad(&format!("need at least 3 points, got {}", points.len())));
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        if xs.iter().any(|v| !v.is_finite()) || ys.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite coordinate"));
        }
        if xs.windows(2).any(|p| p[0] >= p[1]) {
            return Err(bad("x values must be strictly increasing"));
        }

        let n = xs.len();
        // Interval slopes with two quadratic-extrapolation ghosts per side:
        // ext[j] is the slope of interval j−2 (so real slopes sit at 2..n+1).
        let mut ext = vec![0.0; n + 3];
        for i in 0..n - 1 {
            ext[i + 2] = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        }
        ext[1] = 2.0 * ext[2] - ext[3];
        ext[0] = 2.0 * ext[1] - ext[2];
        ext[n + 1] = 2.0 * ext[n] - ext[n - 1];
        ext[n + 2] = 2.0 * ext[n + 1] - ext[n];

        let mut tangents = vec![0.0; n];
        for i in 0..n {
            let w_right = (ext[i + 3] - ext[i + 2]).abs();
            let w_left = (ext[i + 1] - ext[i]).abs();
            tangents[i] = if w_right + w_left == 0.0 {
                 0.5 * (ext[i + 1] + ext[i + 2])
            } else {
                (w_right * ext[i + 1] + w_left * ext[i + 2]) / (w_right + w_left)
            };
        }
        Ok(Self { xs, ys, tangents })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn eval(&self, q: f64) -> Result<f64, MetricsError> {
        let (lo, hi) = self.range();
        if !(q >= lo && q <= hi) {
            return Err(MetricsError::Extrapolation { query: q, lo, hi });
        }
        // partition_point gives the first knot > q; its left neighbor
        // anchors the span (q == hi falls into the final span).
        let i = self.xs.partition_point(|&x| x <= q).clamp(1, self.xs.len() - 1) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let s = (q - self.xs[i]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        Ok((2.0 * s3 - 3.0 * s2 + 1.0) * self.ys[i]
            + (s3 - 2.0 * s2 + s) * h * self.tangents[i]
            + (-2.0 * s3 + 3.0 * s2) * self.ys[i + 1]
            + (s3 - s2) * h * self.tangents[i + 1])
    }
}

/// Convenience single-query form.
pub fn akima_interpolate(points: &[(f64, f64)], query: f64) -> Result<f64, MetricsError> {
    AkimaInterpolant::new(points)?.eval(query)
}

/// A labeled rate-distortion curve: (CR, PSNR dB) points with strictly
/// increasing CR after sorting.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub label: String,
    points: Vec<(f64, f64)>,
}

impl RDCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<(f64, f64)>) -> Result<Self, MetricsError> {
        let label = label.into();
        let bad = |label: &str, reason: String| MetricsError::Curve {
            label: label.into(),
            reason,
        };
        if points.len() < 3 {
            return Err(bad(&label, format!("need ≥ 3 points, got {}", points.len())));
        }
        for &(cr, p) in &points {
            if !(cr > 0.0 && cr.is_finite()) {
                return Err(bad(&label, format!("compression ratio {cr} must be positive and finite")));
            }
            if !p.is_finite() {
                return Err(bad(&label, format!("PSNR {p} at CR {cr} is not finite")));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|p| p[0].0 == p[1].0) {
            return Err(bad(&label, "duplicate compression ratio".into()));
        }
        Ok(Self { label, points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn cr_range(&self) -> (f64, f64) {
        (self.points[0].0, self.points.last().unwrap().0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cr,psnr_db\n");
        for &(cr, p) in &self.points {
            out.push_str(&format!("{cr},{p}\n"));
        }
        out
    }

    pub fn from_csv(label: impl Into<String>, text: &str) -> Result<Self, MetricsError> {
        let mut points = Vec::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, head)) if head.trim() == "cr,psnr_db" => {}
            other => {
                return Err(MetricsError::Csv {
                    line: 1,
                    reason: format!(
                        "expected header \"cr,psnr_db\", got {:?}",
                        other.map(|(_, l)| l).unwrap_or("")
                    ),
                })
            }
        }
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let parse = |field: Option<&str>, name: &str| -> Result<f64, MetricsError> {
                field
                    .ok_or_else(|| MetricsError::Csv {
                        line: idx + 1,
                        reason: format!("missing {name} column"),
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| MetricsError::Csv {
                        line: idx + 1,
                        reason: format!("bad {name}: {e}"),
                    })
            };
            let cr = parse(cols.next(), "cr")?;
            let p = parse(cols.next(), "psnr_db")?;
            if cols.next().is_some() {
                return Err(MetricsError::Csv {
                    line: idx + 1,
                    reason: "extra columns".into(),
                });
            }
            points.push((cr, p));
        }
        Self::new(label, points)
    }
}

/// Integration domain for the RD-curve gap. The literal definition
/// integrates over linear CR; the log-domain variant is offered because
/// rate axes are conventionally logarithmic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdDomain {
    LinearCr,
    LogCr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BdReport {
    pub label_a: String,
    pub label_b: String,
    /// Integration bounds in CR units (the shared range).
    pub cr_lo: f64,
    pub cr_hi: f64,
    pub domain: BdDomain,
    /// Average PSNR_A − PSNR_B over the shared range, in dB.
    pub delta_db: f64,
}

pub const BD_SIMPSON_INTERVALS: usize = 2048;

/// Average vertical gap (curve A minus curve B, dB) over the intersection
/// of their CR ranges, via Akima interpolants and composite Simpson.
pub fn bd_psnr(a: &RDCurve, b: &RDCurve, domain: BdDomain) -> Result<BdReport, MetricsError> {
    bd_psnr_refined(a, b, domain, BD_SIMPSON_INTERVALS)
}

pub fn bd_psnr_refined(
    a: &RDCurve,
    b: &RDCurve,
    domain: BdDomain,
    intervals: usize,
) -> Result<BdReport, MetricsError> {
    let (a_lo, a_hi) = a.cr_range();
    let (b_lo, b_hi) = b.cr_range();
    let cr_lo = a_lo.max(b_lo);
    let cr_hi = a_hi.min(b_hi);
    if !(cr_hi > cr_lo) {
        return Err(MetricsError::NoOverlap { a_lo, a_hi, b_lo, b_hi });
    }

    let map = |cr: f64| match domain {
        BdDomain::LinearCr => cr,
        BdDomain::LogCr => cr.log10(),
    };
    let curve = |c: &RDCurve| -> Result<AkimaInterpolant, MetricsError> {
        let pts: Vec<(f64, f64)> = c.points().iter().map(|&(cr, p)| (map(cr), p)).collect();
        AkimaInterpolant::new(&pts)
    };
    let fa = curve(a)?;
    let fb = curve(b)?;

    let n = intervals.max(2) & !1; // composite Simpson needs an even count
    let lo = map(cr_lo);
    let hi = map(cr_hi);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        // Clamp fp drift at the ends so the interpolants never see an
        // out-of-range query.
        let q = (lo + i as f64 * h).clamp(lo, hi);
        let diff = fa.eval(q)? - fb.eval(q)?;
        let coeff = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += coeff * diff;
    }
    let integral = acc * h / 3.0;
    Ok(BdReport {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        cr_lo,
        cr_hi,
        domain,
        delta_db: integral / (hi - lo),
    })
}
