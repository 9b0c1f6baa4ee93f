//! Image-quality metrics and paired statistics for comparing two denoisers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::volgrid::{Dims, Volume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("differences have zero variance")]
    DegenerateDifferences,
    #[error("parameter error: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Peak used in the PSNR numerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsnrPeak {
    #[default]
    RefMax,
    Fixed(f64),
}

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!(
            "{} vs {} voxels",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(EvalError::Shape("empty input".into()));
    }
    Ok(())
}

/// `20 log10(peak / rmse)`; identical inputs give `f64::INFINITY`.
pub fn psnr_values(pred: &[f32], reference: &[f32], peak: PsnrPeak) -> Result<f64> {
    same_len(pred, reference)?;
    let peak = match peak {
        PsnrPeak::RefMax => reference.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64,
        PsnrPeak::Fixed(p) => p,
    };
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(EvalError::Metric(format!("peak {peak} must be positive")));
    }
    let sse: f64 = pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| {
            let d = p as f64 - r as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / pred.len() as f64;
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

pub fn psnr(pred: &Volume, reference: &Volume) -> Result<f64> {
    psnr_with_peak(pred, reference, PsnrPeak::RefMax)
}

pub fn psnr_with_peak(pred: &Volume, reference: &Volume, peak: PsnrPeak) -> Result<f64> {
    if pred.dims() != reference.dims() {
        return Err(EvalError::Shape(format!(
            "{:?} vs {:?}",
            pred.dims(),
            reference.dims()
        )));
    }
    psnr_values(pred.values(), reference.values(), peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub sigma: f64,
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range; `None` picks it from the reference.
    pub data_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

/// Normalized 1D Gaussian taps of odd length `window`.
pub fn gaussian_window(sigma: f64, window: usize) -> Vec<f64> {
    let r = (window / 2) as f64;
    let w: Vec<f64> = (0..window)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Range of the reference, falling back to its max and then to 1.
pub fn default_data_range(reference: &[f32]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if hi - lo > 0.0 {
        hi - lo
    } else if hi > 0.0 {
        hi
    } else {
        1.0
    }
}

// valid-mode separable filtering along one axis
fn filter_axis(src: &[f64], dims: Dims, axis: usize, w: &[f64]) -> (Vec<f64>, Dims) {
    let k = w.len();
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - k;
    let [ox, oy, oz] = out_dims;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let base = x + dims[0] * (y + dims[1] * z);
                let mut acc = 0.0;
                for (j, &wj) in w.iter().enumerate() {
                    acc += wj * src[base + j * stride];
                }
                out.push(acc);
            }
        }
    }
    (out, out_dims)
}

fn local_mean(src: Vec<f64>, dims: Dims, w: &[f64]) -> Vec<f64> {
    let (a, d) = filter_axis(&src, dims, 0, w);
    let (b, d) = filter_axis(&a, d, 1, w);
    filter_axis(&b, d, 2, w).0
}

/// Local SSIM map over every position where the window fits entirely.
pub fn ssim_map(pred: &[f32], reference: &[f32], dims: Dims, cfg: &SsimConfig) -> Result<Vec<f64>> {
    same_len(pred, reference)?;
    if pred.len() != dims[0] * dims[1] * dims[2] {
        return Err(EvalError::Shape(format!(
            "length {} does not match {dims:?}",
            pred.len()
        )));
    }
    if cfg.window % 2 == 0 || cfg.window == 0 || !(cfg.sigma > 0.0) {
        return Err(EvalError::Parameter(
            "window must be odd and sigma positive".into(),
        ));
    }
    if dims.iter().any(|&d| d < cfg.window) {
        return Err(EvalError::Metric(format!(
            "volume {dims:?} smaller than the {} window",
            cfg.window
        )));
    }
    let l = cfg
        .data_range
        .unwrap_or_else(|| default_data_range(reference));
    if !(l > 0.0) {
        return Err(EvalError::Parameter(format!(
            "data range {l} must be positive"
        )));
    }
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let w = gaussian_window(cfg.sigma, cfg.window);
    let x: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = local_mean(x, dims, &w);
    let my = local_mean(y, dims, &w);
    let exx = local_mean(xx, dims, &w);
    let eyy = local_mean(yy, dims, &w);
    let exy = local_mean(xy, dims, &w);
    Ok((0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = exx[i] - a * a;
            let vy = eyy[i] - b * b;
            let cxy = exy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .collect())
}

pub fn ssim_values(pred: &[f32], reference: &[f32], dims: Dims, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(pred, reference, dims, cfg)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

pub fn ssim3d(pred: &Volume, reference: &Volume, cfg: &SsimConfig) -> Result<f64> {
    if pred.dims() != reference.dims() {
        return Err(EvalError::Shape(format!(
            "{:?} vs {:?}",
            pred.dims(),
            reference.dims()
        )));
    }
    ssim_values(pred.values(), reference.values(), pred.dims(), cfg)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t_stat: f64,
    pub df: usize,
    pub p_two_sided: f64,
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Paired t-test on `d = b - a`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!(
            "{} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(EvalError::Parameter(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Metric("non-finite paired difference".into()));
    }
    let n = d.len();
    let (mean, sd) = mean_sd(&d);
    if sd == 0.0 {
        return Err(EvalError::DegenerateDifferences);
    }
    let t = mean / (sd / (n as f64).sqrt());
    let df = n - 1;
    Ok(PairedTestResult {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t_stat: t,
        df,
        p_two_sided: t_two_sided_p(t, df as f64),
    })
}

/// Normal-theory interval `mean ± z sd / sqrt(n)`.
pub fn delta_ci(deltas: &[f64], level: f64) -> Result<(f64, f64)> {
    if deltas.len() < 2 {
        return Err(EvalError::Parameter(
            "interval needs at least two values".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::Parameter(format!(
            "level {level} outside (0, 1)"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let (mean, sd) = mean_sd(deltas);
    let half = z * sd / (deltas.len() as f64).sqrt();
    Ok((mean - half, mean + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

// linear interpolation between order statistics
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

pub fn box_summary(values: &[f64]) -> Result<BoxSummary> {
    if values.is_empty() {
        return Err(EvalError::Parameter("box summary of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Parameter("NaN in box summary input".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s
        .iter()
        .copied()
        .filter(|&v| v >= fence_lo && v <= fence_hi)
        .collect();
    Ok(BoxSummary {
        min: s[0],
        q1,
        median: quantile_sorted(&s, 0.5),
        q3,
        max: s[s.len() - 1],
        whisker_lo: inside[0],
        whisker_hi: inside[inside.len() - 1],
        outliers: s
            .iter()
            .copied()
            .filter(|&v| v < fence_lo || v > fence_hi)
            .collect(),
    })
}

/// Writes `+inf` as the string `"inf"` since JSON has no infinity.
mod sentinel {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(de::Error::custom(format!("unexpected metric value {s:?}"))),
        }
    }
}

/// One evaluated image: the input and two methods `a` (baseline) and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image_id: String,
    #[serde(with = "sentinel")]
    pub psnr_input: f64,
    #[serde(with = "sentinel")]
    pub psnr_a: f64,
    #[serde(with = "sentinel")]
    pub psnr_b: f64,
    pub ssim_input: f64,
    pub ssim_a: f64,
    pub ssim_b: f64,
}

pub const CSV_HEADER: [&str; 7] = [
    "image_id",
    "psnr_input",
    "psnr_a",
    "psnr_b",
    "ssim_input",
    "ssim_a",
    "ssim_b",
];

impl MetricsRow {
    pub fn metrics(&self) -> [f64; 6] {
        [
            self.psnr_input,
            self.psnr_a,
            self.psnr_b,
            self.ssim_input,
            self.ssim_a,
            self.ssim_b,
        ]
    }

    fn from_metrics(image_id: String, m: [f64; 6]) -> Self {
        Self {
            image_id,
            psnr_input: m[0],
            psnr_a: m[1],
            psnr_b: m[2],
            ssim_input: m[3],
            ssim_a: m[4],
            ssim_b: m[5],
        }
    }
}

/// Metrics for one (input, a, b) triple against the reference.
pub fn evaluate_triple(
    image_id: &str,
    input: &Volume,
    a: &Volume,
    b: &Volume,
    reference: &Volume,
    peak: PsnrPeak,
    ssim: &SsimConfig,
) -> Result<MetricsRow> {
    Ok(MetricsRow {
        image_id: image_id.to_string(),
        psnr_input: psnr_with_peak(input, reference, peak)?,
        psnr_a: psnr_with_peak(a, reference, peak)?,
        psnr_b: psnr_with_peak(b, reference, peak)?,
        ssim_input: ssim3d(input, reference, ssim)?,
        ssim_a: ssim3d(a, reference, ssim)?,
        ssim_b: ssim3d(b, reference, ssim)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    /// `None` when the test is undefined (fewer than two rows, zero variance).
    pub test: Option<PairedTestResult>,
    pub ci95: Option<(f64, f64)>,
    pub b_minus_a: BoxSummary,
    pub a_minus_input: BoxSummary,
    pub b_minus_input: BoxSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
    pub psnr: Option<DeltaSummary>,
    pub ssim: Option<DeltaSummary>,
}

fn delta_summary(input: &[f64], a: &[f64], b: &[f64]) -> Option<DeltaSummary> {
    let diff = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| q - p).collect() };
    let ba = diff(a, b);
    if ba
        .iter()
        .chain(a)
        .chain(b)
        .chain(input)
        .any(|v| !v.is_finite())
    {
        return None;
    }
    Some(DeltaSummary {
        test: paired_t_test(a, b).ok(),
        ci95: delta_ci(&ba, 0.95).ok(),
        b_minus_a: box_summary(&ba).ok()?,
        a_minus_input: box_summary(&diff(input, a)).ok()?,
        b_minus_input: box_summary(&diff(input, b)).ok()?,
    })
}

/// Column means plus paired statistics of `b` against `a`.
pub fn report(rows: &[MetricsRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(EvalError::Parameter("report needs at least one row".into()));
    }
    let mut sums = [0.0f64; 6];
    for r in rows {
        for (s, v) in sums.iter_mut().zip(r.metrics()) {
            *s += v;
        }
    }
    let mean = MetricsRow::from_metrics("Mean".into(), sums.map(|s| s / rows.len() as f64));
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r.metrics()[i]).collect() };
    Ok(Report {
        rows: rows.to_vec(),
        mean,
        psnr: delta_summary(&col(0), &col(1), &col(2)),
        ssim: delta_summary(&col(3), &col(4), &col(5)),
    })
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl Report {
    /// Rows followed by the mean row.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&r.image_id);
            for v in r.metrics() {
                out.push(',');
                out.push_str(&fmt_metric(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Parses a metric cell; accepts `inf`.
pub fn parse_metric(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    t.parse::<f64>()
        .map_err(|_| EvalError::Parameter(format!("cannot parse metric {s:?}")))
}

pub fn row_from_strings(fields: &[&str]) -> Result<MetricsRow> {
    if fields.len() != 7 {
        return Err(EvalError::Shape(format!(
            "expected 7 columns, found {}",
            fields.len()
        )));
    }
    let mut m = [0.0; 6];
    for (slot, f) in m.iter_mut().zip(&fields[1..]) {
        *slot = parse_metric(f)?;
    }
    Ok(MetricsRow::from_metrics(fields[0].trim().to_string(), m))
}
