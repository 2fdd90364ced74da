//! On-disk sample layout: `root/<split>/<id>/frames/%06d.png`, `signal.csv`
//! (`t_seconds,value`) and a one-line `meta` file (`fps=30`).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::signal::PPGSignal;
use crate::synth::{gen_ppg, render_video, SynthSpec};
use crate::video::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub video: VideoClip,
    pub signal: PPGSignal,
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Linearly resample signals recorded at a different rate onto the frame grid.
    pub resample: bool,
    /// Largest allowed ratio between the video and signal durations.
    pub max_duration_ratio: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            resample: true,
            max_duration_ratio: 2.0,
        }
    }
}

pub fn read_meta(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for pair in text.split_whitespace() {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::file(path, format!("expected key=value, got `{pair}`")))?;
        if key == "fps" {
            let fps: f64 = value
                .parse()
                .map_err(|_| Error::file(path, format!("bad fps `{value}`")))?;
            ensure!(
                fps > 0.0 && fps.is_finite(),
                Error::file(path, "fps must be positive")
            );
            return Ok(fps);
        }
    }
    Err(Error::file(path, "missing fps"))
}

pub fn write_meta(path: &Path, fps: f64) -> Result<()> {
    std::fs::write(path, format!("fps={fps}\n")).map_err(|e| Error::io(path, e))
}

/// Loads one sample directory and aligns the signal to the frame grid.
pub fn load_sample(dir: &Path, opts: &LoadOptions) -> Result<Sample> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let fps = read_meta(&dir.join("meta"))?;
    let video = VideoClip::read_frames(&dir.join("frames"), fps)?;
    let signal_path = dir.join("signal.csv");
    let raw = PPGSignal::read_csv(&signal_path)?;
    let (dv, ds) = (video.t() as f64 / fps, raw.len() as f64 / raw.fps);
    ensure!(
        dv.max(ds) <= opts.max_duration_ratio * dv.min(ds),
        Error::file(
            dir,
            format!("video lasts {dv:.2} s but the signal {ds:.2} s")
        )
    );
    let same_rate = (raw.fps - fps).abs() <= 1e-6 * fps;
    ensure!(
        same_rate || opts.resample,
        Error::file(
            &signal_path,
            format!("signal at {:.3} Hz but video at {fps} fps", raw.fps)
        )
    );
    let signal = if same_rate {
        PPGSignal::new(raw.samples, fps)?
    } else {
        let n = (ds * fps + 1e-9).floor() as usize;
        raw.resample(fps, n)
    };
    let t = video.t().min(signal.len());
    Ok(Sample {
        id,
        video: video.truncate(t),
        signal: signal.slice(0, t),
    })
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    load_dataset_with(&split_dir(root, split), &LoadOptions::default())
}

/// Loads every sample directory under `dir` in name order.
pub fn load_dataset_with(dir: &Path, opts: &LoadOptions) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("{}: no samples", dir.display());
    }
    dirs.iter().map(|d| load_sample(d, opts)).collect()
}

pub fn write_sample(dir: &Path, video: &VideoClip, signal: &PPGSignal) -> Result<()> {
    video.write_frames(&dir.join("frames"))?;
    signal.write_csv(&dir.join("signal.csv"))?;
    write_meta(&dir.join("meta"), video.fps)
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub n: usize,
    pub size: usize,
    pub t: usize,
    pub hr_range: [f64; 2],
    /// Fraction of samples placed in the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 64,
            size: 32,
            t: 160,
            hr_range: [48.0, 120.0],
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub split: Split,
    pub spec: SynthSpec,
    pub video: VideoClip,
    pub signal: PPGSignal,
}

/// Seeded synthetic clips; the last `test_fraction` of them form the test split.
pub fn synth_dataset(cfg: &GenConfig) -> Result<Vec<SynthSample>> {
    ensure!(
        cfg.hr_range[0] < cfg.hr_range[1],
        Error::Invalid("empty heart-rate range".into())
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_test = (cfg.n as f64 * cfg.test_fraction).round() as usize;
    (0..cfg.n)
        .map(|i| {
            let hr = rng.gen_range(cfg.hr_range[0]..cfg.hr_range[1]);
            let spec = SynthSpec::new(hr, cfg.t, cfg.size, rng.gen());
            let signal = gen_ppg(&spec)?;
            let video = render_video(&signal, &spec)?;
            let split = if i + n_test >= cfg.n {
                Split::Test
            } else {
                Split::Train
            };
            Ok(SynthSample {
                split,
                spec,
                video,
                signal,
            })
        })
        .collect()
}

/// Writes a synthetic dataset under `root`, returning the sample directories.
pub fn generate(root: &Path, cfg: &GenConfig) -> Result<Vec<PathBuf>> {
    let samples = synth_dataset(cfg)?;
    let mut dirs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let dir = split_dir(root, s.split).join(format!("{i:05}"));
        write_sample(&dir, &s.video, &s.signal)?;
        dirs.push(dir);
    }
    for split in [Split::Train, Split::Test] {
        let d = split_dir(root, split);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(dirs)
}

/// Non-overlapping normalized signal windows of `t` samples for Stage I.
pub fn signal_windows(samples: &[Sample], t: usize) -> Result<Vec<PPGSignal>> {
    let mut out = Vec::new();
    for s in samples {
        for i in 0..s.signal.len() / t {
            out.push(s.signal.slice(i * t, (i + 1) * t).normalized()?);
        }
    }
    Ok(out)
}

/// Non-overlapping aligned `(clip, signal)` windows of `t` frames for Stage II.
pub fn clip_windows(samples: &[Sample], t: usize) -> Vec<(VideoClip, PPGSignal)> {
    let mut out = Vec::new();
    for s in samples {
        for i in 0..s.video.t() / t {
            let frames = s
                .video
                .frames
                .slice(ndarray::s![.., i * t..(i + 1) * t, .., ..])
                .to_owned();
            out.push((
                VideoClip {
                    frames,
                    fps: s.video.fps,
                },
                s.signal.slice(i * t, (i + 1) * t),
            ));
        }
    }
    out
}
