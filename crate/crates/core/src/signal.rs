//! Sampled blood-volume waveforms and the small statistics kit used around them.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const DEFAULT_FPS: f64 = 30.0;

/// Variance floor below which a clip counts as constant.
pub const DEGENERATE_VAR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PPGSignal {
    pub samples: Vec<f64>,
    pub fps: f64,
}

impl PPGSignal {
    pub fn new(samples: Vec<f64>, fps: f64) -> Result<Self> {
        ensure!(!samples.is_empty(), Error::Invalid("empty signal".into()));
        ensure!(
            fps.is_finite() && fps > 0.0,
            Error::Invalid(format!("fps must be positive, got {fps}"))
        );
        ensure!(
            samples.iter().all(|v| v.is_finite()),
            Error::Invalid("signal contains non-finite samples".into())
        );
        Ok(PPGSignal { samples, fps })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    /// Zero mean, unit (population) variance copy.
    pub fn normalized(&self) -> Result<Self> {
        Ok(PPGSignal {
            samples: standardize(&self.samples)?,
            fps: self.fps,
        })
    }

    /// Checks the codec's length contract (`T > 0`, `T % 4 == 0`).
    pub fn check_codec_length(&self) -> Result<()> {
        ensure!(
            self.len() % 4 == 0,
            Error::Invalid(format!(
                "signal length {} is not divisible by 4",
                self.len()
            ))
        );
        Ok(())
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        PPGSignal {
            samples: self.samples[start..end].to_vec(),
            fps: self.fps,
        }
    }

    /// Linear interpolation onto `n` samples at `fps`, starting at t = 0.
    /// Times past the last input sample hold the final value.
    pub fn resample(&self, fps: f64, n: usize) -> Self {
        let samples = (0..n)
            .map(|i| {
                let pos = i as f64 / fps * self.fps;
                let lo = pos.floor() as usize;
                if lo + 1 >= self.len() {
                    return *self.samples.last().unwrap();
                }
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[lo + 1] * frac
            })
            .collect();
        PPGSignal { samples, fps }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t_seconds,value\n");
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(out, "{},{}", i as f64 / self.fps, v).unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a `t_seconds,value` CSV. The sampling rate is inferred from the
    /// mean time step.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        ensure!(
            lines.next().map(str::trim) == Some("t_seconds,value"),
            Error::file(path, "expected header `t_seconds,value`")
        );
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line.split_once(',').and_then(|(t, v)| {
                Some((t.trim().parse::<f64>().ok()?, v.trim().parse::<f64>().ok()?))
            });
            let (t, v) = parsed.ok_or_else(|| {
                Error::file(path, format!("row {}: expected two numbers", row + 2))
            })?;
            if let Some(&prev) = times.last() {
                ensure!(
                    t > prev,
                    Error::file(path, format!("row {}: time is not increasing", row + 2))
                );
            }
            times.push(t);
            values.push(v);
        }
        ensure!(
            values.len() >= 2,
            Error::file(path, "need at least two samples")
        );
        let span = times[times.len() - 1] - times[0];
        let fps = (times.len() - 1) as f64 / span;
        PPGSignal::new(values, fps).map_err(|e| Error::file(path, e.to_string()))
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

pub fn standardize(x: &[f64]) -> Result<Vec<f64>> {
    let var = variance(x);
    ensure!(var > DEGENERATE_VAR, Error::DegenerateSignal);
    let (m, s) = (mean(x), var.sqrt());
    Ok(x.iter().map(|v| (v - m) / s).collect())
}

/// Pearson correlation; errors when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        Error::Shape(format!("pearson of lengths {} and {}", a.len(), b.len()))
    );
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let n = a.len() as f64;
    ensure!(
        saa / n > DEGENERATE_VAR && sbb / n > DEGENERATE_VAR,
        Error::DegenerateSignal
    );
    Ok(sab / (saa * sbb).sqrt())
}
