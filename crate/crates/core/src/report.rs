//! Evaluation outputs: `metrics.csv`, `ba.csv`, `ba_summary.txt`,
//! `signals/<id>.csv` and optional PNG overlays of signal and PSD.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataset::Sample;
use crate::error::{ensure, Error, Result};
use crate::hr::{self, BlandAltman, MetricReport};
use crate::signal::PPGSignal;
use crate::stage2::Stage2Model;

pub const METRICS_HEADER: &str = "mae,rmse,sd,r";

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub id: String,
    pub s_gt: PPGSignal,
    pub s_pred: PPGSignal,
    pub hr_gt: f64,
    pub hr_pred: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ReportOptions {
    pub plots: bool,
    pub band: Option<[f64; 2]>,
    /// Extra `key=value` lines for `summary.txt`.
    pub summary: Vec<(String, String)>,
}

/// Predicts every sample and extracts both heart rates. With `clip_seconds`
/// the HR is the mean over non-overlapping windows of that length, otherwise
/// one estimate per sample.
pub fn evaluate(
    model: &Stage2Model,
    samples: &[Sample],
    band: [f64; 2],
    clip_seconds: Option<f64>,
) -> Result<Vec<SampleResult>> {
    let hr_of = |s: &PPGSignal| match clip_seconds {
        Some(c) => hr::video_hr(s, c, band).map(|e| e.bpm),
        None => hr::estimate_hr(s, band),
    };
    samples
        .iter()
        .map(|sample| {
            let s_pred = model.predict_long(&sample.video)?;
            let s_gt = sample.signal.normalized()?;
            Ok(SampleResult {
                id: sample.id.clone(),
                hr_gt: hr_of(&s_gt)?,
                hr_pred: hr_of(&s_pred)?,
                s_gt,
                s_pred,
            })
        })
        .collect()
}

/// Shortest round-trip formatting with `nan` for undefined values.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn emit_report(
    results: &[SampleResult],
    out: &Path,
    opts: &ReportOptions,
) -> Result<MetricReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    if results.is_empty() {
        write(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let pred: Vec<f64> = results.iter().map(|r| r.hr_pred).collect();
    let gt: Vec<f64> = results.iter().map(|r| r.hr_gt).collect();
    let m = hr::summarize(&pred, &gt)?;
    write(
        &metrics_path,
        &format!(
            "{METRICS_HEADER}\n{},{},{},{}\n",
            fmt_num(m.mae),
            fmt_num(m.rmse),
            fmt_num(m.sd),
            fmt_num(m.pearson_r)
        ),
    )?;

    let ba = hr::export_bland_altman(&pred, &gt)?;
    write(&out.join("ba.csv"), &ba_csv(&ba))?;
    write(
        &out.join("ba_summary.txt"),
        &format!(
            "bias={}\nsd={}\nlower={}\nupper={}\n",
            fmt_num(ba.bias),
            fmt_num(ba.sd),
            fmt_num(ba.lower),
            fmt_num(ba.upper)
        ),
    )?;

    let mut summary = format!("n={}\n", results.len());
    for (k, v) in &opts.summary {
        writeln!(summary, "{k}={v}").unwrap();
    }
    write(&out.join("summary.txt"), &summary)?;

    let signals = out.join("signals");
    std::fs::create_dir_all(&signals).map_err(|e| Error::io(&signals, e))?;
    let plots = out.join("plots");
    if opts.plots {
        std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    }
    for r in results {
        write(&signals.join(format!("{}.csv", r.id)), &signal_csv(r)?)?;
        if opts.plots {
            let band = opts.band.unwrap_or(hr::DEFAULT_BAND);
            let path = plots.join(format!("{}.png", r.id));
            plot_sample(r, band)?
                .save(&path)
                .map_err(|e| Error::file(&path, e.to_string()))?;
        }
    }
    Ok(m)
}

fn ba_csv(ba: &BlandAltman) -> String {
    let mut s = String::from("mean,diff\n");
    for (mean, diff) in &ba.rows {
        writeln!(s, "{},{}", fmt_num(*mean), fmt_num(*diff)).unwrap();
    }
    s
}

fn signal_csv(r: &SampleResult) -> Result<String> {
    ensure!(
        r.s_gt.len() == r.s_pred.len(),
        Error::Shape(format!(
            "sample {}: {} reference vs {} predicted samples",
            r.id,
            r.s_gt.len(),
            r.s_pred.len()
        ))
    );
    let mut s = String::from("t,s_gt,s_pred\n");
    for (i, (g, p)) in r.s_gt.samples.iter().zip(&r.s_pred.samples).enumerate() {
        writeln!(
            s,
            "{},{},{}",
            fmt_num(i as f64 / r.s_gt.fps),
            fmt_num(*g),
            fmt_num(*p)
        )
        .unwrap();
    }
    Ok(s)
}

fn parse_num(field: &str) -> Option<f64> {
    match field.trim() {
        "nan" => Some(f64::NAN),
        other => other.parse().ok(),
    }
}

pub fn read_metrics(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some(METRICS_HEADER),
        Error::file(path, format!("expected header `{METRICS_HEADER}`"))
    );
    let row = lines
        .next()
        .ok_or_else(|| Error::file(path, "no metrics row"))?;
    let v: Vec<f64> = row
        .split(',')
        .map(parse_num)
        .collect::<Option<_>>()
        .filter(|v: &Vec<f64>| v.len() == 4)
        .ok_or_else(|| Error::file(path, "expected four numbers"))?;
    Ok(MetricReport {
        mae: v[0],
        rmse: v[1],
        sd: v[2],
        pearson_r: v[3],
    })
}

/// Reads `signals/<id>.csv` back as `(s_gt, s_pred)`.
pub fn read_signal_pair(path: &Path) -> Result<(PPGSignal, PPGSignal)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some("t,s_gt,s_pred"),
        Error::file(path, "expected header `t,s_gt,s_pred`")
    );
    let (mut t, mut gt, mut pred) = (Vec::new(), Vec::new(), Vec::new());
    for (row, line) in lines.enumerate() {
        let v: Vec<f64> = line
            .split(',')
            .map(parse_num)
            .collect::<Option<_>>()
            .filter(|v: &Vec<f64>| v.len() == 3)
            .ok_or_else(|| Error::file(path, format!("row {}: expected three numbers", row + 2)))?;
        t.push(v[0]);
        gt.push(v[1]);
        pred.push(v[2]);
    }
    ensure!(t.len() >= 2, Error::file(path, "need at least two rows"));
    let fps = (t.len() - 1) as f64 / (t[t.len() - 1] - t[0]);
    Ok((PPGSignal::new(gt, fps)?, PPGSignal::new(pred, fps)?))
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 160;
const GT_COLOR: Rgb<u8> = Rgb([40, 40, 40]);
const PRED_COLOR: Rgb<u8> = Rgb([200, 40, 40]);

/// Waveforms on top, normalized in-band PSDs below; reference dark, prediction red.
pub fn plot_sample(r: &SampleResult, band: [f64; 2]) -> Result<RgbImage> {
    let mut img = RgbImage::from_pixel(PLOT_W, 2 * PLOT_H, Rgb([255, 255, 255]));
    draw_series(&mut img, 0, &r.s_gt.samples, GT_COLOR);
    draw_series(&mut img, 0, &r.s_pred.samples, PRED_COLOR);
    if let (Ok(pg), Ok(pp)) = (hr::psd(&r.s_gt, band), hr::psd(&r.s_pred, band)) {
        draw_series(&mut img, PLOT_H, &pg, GT_COLOR);
        draw_series(&mut img, PLOT_H, &pp, PRED_COLOR);
    }
    Ok(img)
}

fn draw_series(img: &mut RgbImage, y0: u32, v: &[f64], color: Rgb<u8>) {
    if v.len() < 2 {
        return;
    }
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let margin = 8.0;
    let point = |i: usize| {
        let x = margin + i as f64 / (v.len() - 1) as f64 * (PLOT_W as f64 - 2.0 * margin);
        let y = y0 as f64 + margin + (1.0 - (v[i] - lo) / span) * (PLOT_H as f64 - 2.0 * margin);
        (x, y)
    };
    for i in 1..v.len() {
        let (a, b) = (point(i - 1), point(i));
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
            if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}
