//! Heart rate from power spectra, clip-averaged video HR, and the error metrics.

use ndarray::Array2;

use crate::error::{ensure, Error, Result};
use crate::signal::{self, PPGSignal, DEGENERATE_VAR};

/// Default pass band in Hz (40 to 180 bpm).
pub const DEFAULT_BAND: [f64; 2] = [0.66, 3.0];

/// Transform length for HR peak picking; shorter signals are zero-padded so
/// the peak is located on a fine grid before interpolation.
pub const HR_NFFT: usize = 4096;

/// Bin frequencies `k * fps / nfft` inside `band` (inclusive).
pub fn band_bins(fps: f64, nfft: usize, band: [f64; 2]) -> Result<Vec<f64>> {
    ensure!(
        band[0] >= 0.0 && band[0] < band[1],
        Error::Invalid(format!("bad band [{}, {}]", band[0], band[1]))
    );
    ensure!(
        band[1] <= fps / 2.0,
        Error::Invalid(format!(
            "band upper edge {} Hz is above the Nyquist frequency {} Hz",
            band[1],
            fps / 2.0
        ))
    );
    let df = fps / nfft as f64;
    let lo = (band[0] / df - 1e-9).ceil() as usize;
    let hi = (band[1] / df + 1e-9).floor() as usize;
    ensure!(
        hi >= lo,
        Error::Invalid("no frequency bins inside the band".into())
    );
    Ok((lo..=hi).map(|k| k as f64 * df).collect())
}

/// Cosine and sine DFT rows for the given bin frequencies over `t` samples:
/// both `[bins, t]`.
pub fn dft_basis(freqs: &[f64], t: usize, fps: f64) -> (Array2<f64>, Array2<f64>) {
    let mut cos = Array2::zeros((freqs.len(), t));
    let mut sin = Array2::zeros((freqs.len(), t));
    for (k, f) in freqs.iter().enumerate() {
        for n in 0..t {
            let phase = 2.0 * std::f64::consts::PI * f * n as f64 / fps;
            cos[[k, n]] = phase.cos();
            sin[[k, n]] = phase.sin();
        }
    }
    (cos, sin)
}

/// Periodogram power at `freqs` (no window, unnormalized).
pub fn band_power(samples: &[f64], fps: f64, freqs: &[f64]) -> Vec<f64> {
    let (cos, sin) = dft_basis(freqs, samples.len(), fps);
    let x = ndarray::ArrayView1::from(samples);
    let re = cos.dot(&x);
    let im = sin.dot(&x);
    re.iter().zip(&im).map(|(a, b)| a * a + b * b).collect()
}

/// Band-limited periodogram (transform length T) normalized to sum 1.
pub fn psd(s: &PPGSignal, band: [f64; 2]) -> Result<Vec<f64>> {
    let freqs = band_bins(s.fps, s.len(), band)?;
    let centered = centered(&s.samples)?;
    let p = band_power(&centered, s.fps, &freqs);
    let total: f64 = p.iter().sum();
    ensure!(total > 0.0, Error::DegenerateSignal);
    Ok(p.iter().map(|v| v / total).collect())
}

fn centered(x: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        signal::variance(x) > DEGENERATE_VAR,
        Error::DegenerateSignal
    );
    let m = signal::mean(x);
    Ok(x.iter().map(|v| v - m).collect())
}

/// Heart rate in bpm: the in-band periodogram peak (zero-padded to
/// [`HR_NFFT`] points) refined by a parabola through the peak and its two
/// neighbours.
pub fn estimate_hr(s: &PPGSignal, band: [f64; 2]) -> Result<f64> {
    ensure!(
        s.duration() >= 2.0 - 1e-9,
        Error::Invalid(format!(
            "need at least 2 s of signal, got {:.2} s",
            s.duration()
        ))
    );
    let x = centered(&s.samples)?;
    let nfft = HR_NFFT.max(s.len());
    let freqs = band_bins(s.fps, nfft, band)?;
    let p = band_power(&x, s.fps, &freqs);
    let (j, _) = p
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    let mut f = freqs[j];
    if j > 0 && j + 1 < p.len() {
        let (a, b, c) = (p[j - 1], p[j], p[j + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            f += 0.5 * (a - c) / denom * (s.fps / nfft as f64);
        }
    }
    Ok(60.0 * f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HrEstimate {
    pub bpm: f64,
    pub clip_bpms: Vec<f64>,
}

/// Mean of per-window HRs over consecutive non-overlapping windows of
/// `clip_seconds`; a trailing partial window is dropped.
pub fn video_hr(s: &PPGSignal, clip_seconds: f64, band: [f64; 2]) -> Result<HrEstimate> {
    let clip = (clip_seconds * s.fps).round() as usize;
    ensure!(
        clip > 0,
        Error::Invalid("clip length must be positive".into())
    );
    ensure!(
        s.len() >= clip,
        Error::Invalid(format!(
            "signal of {:.2} s is shorter than one {clip_seconds} s clip",
            s.duration()
        ))
    );
    let clip_bpms = (0..s.len() / clip)
        .map(|i| estimate_hr(&s.slice(i * clip, (i + 1) * clip), band))
        .collect::<Result<Vec<_>>>()?;
    Ok(HrEstimate {
        bpm: signal::mean(&clip_bpms),
        clip_bpms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub sd: f64,
    pub pearson_r: f64,
}

fn errors(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        !pred.is_empty() && pred.len() == gt.len(),
        Error::Shape(format!(
            "{} predictions for {} references",
            pred.len(),
            gt.len()
        ))
    );
    Ok(pred.iter().zip(gt).map(|(p, g)| p - g).collect())
}

/// Sample standard deviation (n - 1); zero for a single value.
fn sample_sd(e: &[f64]) -> f64 {
    if e.len() < 2 {
        return 0.0;
    }
    let m = signal::mean(e);
    (e.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (e.len() - 1) as f64).sqrt()
}

/// MAE, RMSE, SD of errors and Pearson r. Errors when `r` is undefined
/// (fewer than two pairs or a constant series).
pub fn compute_metrics(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    let report = summarize(pred, gt)?;
    ensure!(
        pred.len() >= 2,
        Error::Invalid("need at least two pairs".into())
    );
    ensure!(report.pearson_r.is_finite(), Error::DegenerateSignal);
    Ok(report)
}

/// Like [`compute_metrics`] but reports an undefined `r` as NaN.
pub fn summarize(pred: &[f64], gt: &[f64]) -> Result<MetricReport> {
    let e = errors(pred, gt)?;
    let n = e.len() as f64;
    Ok(MetricReport {
        mae: e.iter().map(|v| v.abs()).sum::<f64>() / n,
        rmse: (e.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        sd: sample_sd(&e),
        pearson_r: signal::pearson(pred, gt).unwrap_or(f64::NAN),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlandAltman {
    /// `(mean(pred, gt), pred - gt)` per pair.
    pub rows: Vec<(f64, f64)>,
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn export_bland_altman(pred: &[f64], gt: &[f64]) -> Result<BlandAltman> {
    let e = errors(pred, gt)?;
    let rows = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (0.5 * (p + g), p - g))
        .collect();
    let bias = signal::mean(&e);
    let sd = sample_sd(&e);
    Ok(BlandAltman {
        rows,
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
    })
}
