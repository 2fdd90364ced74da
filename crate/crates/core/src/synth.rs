//! Synthetic pulse waveforms, the matching toy videos, and the five visual
//! degradations.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::signal::PPGSignal;
use crate::video::{Rect, VideoClip};

/// Phase lag of each overtone relative to the fundamental, which shapes the
/// dicrotic notch on the falling edge.
const NOTCH_PHASE: f64 = 0.9;
/// Amplitude of the first overtone; later ones halve.
const OVERTONE_GAIN: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    pub t: usize,
    pub fps: f64,
    pub harmonics: usize,
    pub noise_std: f64,
    pub height: usize,
    pub width: usize,
    pub skin_region: Rect,
    pub modulation_depth: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// A `size x size` clip whose central half is skin.
    pub fn new(hr_bpm: f64, t: usize, size: usize, seed: u64) -> Self {
        SynthSpec {
            hr_bpm,
            t,
            fps: 30.0,
            harmonics: 2,
            noise_std: 0.0,
            height: size,
            width: size,
            skin_region: Rect::centered(size, size, 0.5),
            modulation_depth: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (40.0..=180.0).contains(&self.hr_bpm),
            Error::Invalid(format!("heart rate {} bpm outside [40, 180]", self.hr_bpm))
        );
        ensure!(
            self.t > 0 && self.fps > 0.0 && self.noise_std >= 0.0,
            Error::Invalid("length, fps and noise must be positive".into())
        );
        ensure!(
            self.modulation_depth >= 0.0 && self.modulation_depth <= 0.2,
            Error::Invalid(format!(
                "modulation depth {} outside [0, 0.2]",
                self.modulation_depth
            ))
        );
        ensure!(
            self.skin_region.fits(self.height, self.width),
            Error::Invalid(format!(
                "skin region {:?} outside the frame",
                self.skin_region
            ))
        );
        Ok(())
    }
}

/// Fundamental plus decaying overtones, optional Gaussian noise, normalized.
pub fn gen_ppg(spec: &SynthSpec) -> Result<PPGSignal> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase0 = rng.gen::<f64>() * std::f64::consts::TAU;
    let f = spec.hr_bpm / 60.0;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let samples: Vec<f64> = (0..spec.t)
        .map(|i| {
            let tau = std::f64::consts::TAU * f * i as f64 / spec.fps + phase0;
            let mut v = tau.sin();
            let mut gain = OVERTONE_GAIN;
            for h in 1..=spec.harmonics {
                v += gain * ((h + 1) as f64 * tau - NOTCH_PHASE * h as f64).sin();
                gain *= 0.5;
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            v
        })
        .collect();
    PPGSignal::new(samples, spec.fps)?.normalized()
}

/// Smooth texture in roughly `[0.25, 0.75]`: a few random low-frequency
/// plane waves per channel.
fn base_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> [Array2<f64>; 3] {
    std::array::from_fn(|_| {
        let level = rng.gen_range(0.4..0.6);
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.02..0.06),
                )
            })
            .collect();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
            level
                + waves
                    .iter()
                    .map(|(ky, kx, p, a)| a * (std::f64::consts::TAU * (ky * u + kx * v) + p).sin())
                    .sum::<f64>()
        })
    })
}

/// Static textured frame whose skin rectangle is scaled by
/// `1 + depth * s[t]` in every frame.
pub fn render_video(s: &PPGSignal, spec: &SynthSpec) -> Result<VideoClip> {
    spec.validate()?;
    ensure!(
        s.len() == spec.t,
        Error::Shape(format!(
            "signal of {} samples for {} frames",
            s.len(),
            spec.t
        ))
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e47_u64.rotate_left(40));
    let base = base_texture(spec.height, spec.width, &mut rng);
    let r = spec.skin_region;
    let frames = Array4::from_shape_fn((3, spec.t, spec.height, spec.width), |(c, t, y, x)| {
        let b = base[c][[y, x]];
        let inside = y >= r.top && y < r.top + r.height && x >= r.left && x < r.left + r.width;
        if inside {
            b * (1.0 + spec.modulation_depth * s.samples[t])
        } else {
            b
        }
    });
    VideoClip::new(frames, spec.fps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeKind {
    None,
    Blur,
    CameraNoise,
    Resolution,
    Occlusion,
    Brightness,
}

impl DegradeKind {
    pub const ALL: [DegradeKind; 5] = [
        DegradeKind::Blur,
        DegradeKind::CameraNoise,
        DegradeKind::Resolution,
        DegradeKind::Occlusion,
        DegradeKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradeKind::None => "none",
            DegradeKind::Blur => "blur",
            DegradeKind::CameraNoise => "noise",
            DegradeKind::Resolution => "resolution",
            DegradeKind::Occlusion => "occlusion",
            DegradeKind::Brightness => "brightness",
        }
    }
}

impl std::str::FromStr for DegradeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DegradeKind::None,
            "blur" => DegradeKind::Blur,
            "noise" | "camera_noise" => DegradeKind::CameraNoise,
            "resolution" => DegradeKind::Resolution,
            "occlusion" => DegradeKind::Occlusion,
            "brightness" => DegradeKind::Brightness,
            other => return Err(Error::Invalid(format!("unknown degradation `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    /// Gaussian blur sigma range (5x5 kernel).
    pub blur_sigma: [f64; 2],
    /// Upper end of the per-frame noise standard deviation, drawn from `[0, max]`.
    pub noise_max: f64,
    /// Downsampled side as a fraction of the frame side.
    pub resolution_frac: [f64; 2],
    /// Gamma exponent range.
    pub gamma: [f64; 2],
    /// Occluder placement area; `None` uses the whole frame.
    pub occlusion_area: Option<Rect>,
    /// Fresh parameters for every frame (otherwise one draw per clip).
    pub per_frame: bool,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn new(kind: DegradeKind, seed: u64) -> Self {
        DegradeSpec {
            kind,
            blur_sigma: [0.5, 1.5],
            noise_max: 0.1,
            resolution_frac: [0.25, 0.5],
            gamma: [0.5, 1.5],
            occlusion_area: None,
            per_frame: true,
            seed,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Applies one interference type frame by frame with seeded parameter draws.
pub fn degrade(v: &VideoClip, d: &DegradeSpec) -> Result<VideoClip> {
    let (t, h, w) = (v.t(), v.h(), v.w());
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut out = v.frames.clone();
    if d.kind == DegradeKind::None {
        return Ok(v.clone());
    }
    if let Some(area) = d.occlusion_area {
        ensure!(
            area.fits(h, w),
            Error::Invalid("occlusion area outside the frame".into())
        );
    }
    let mut clip_draw: Option<(f64, f64, f64, Rect)> = None;
    for ti in 0..t {
        let params = match (d.per_frame, clip_draw) {
            (false, Some(p)) => p,
            _ => {
                let p = (
                    draw(&mut rng, [d.blur_sigma[0], d.blur_sigma[1]]),
                    draw(&mut rng, [0.0, d.noise_max]),
                    match d.kind {
                        DegradeKind::Resolution => draw(&mut rng, d.resolution_frac),
                        _ => draw(&mut rng, d.gamma),
                    },
                    occluder(
                        &mut rng,
                        d.occlusion_area.unwrap_or(Rect {
                            top: 0,
                            left: 0,
                            height: h,
                            width: w,
                        }),
                        h,
                        w,
                    ),
                );
                clip_draw = Some(p);
                p
            }
        };
        let (sigma, noise_std, knob, patch) = params;
        for c in 0..3 {
            let mut frame = out.index_axis_mut(Axis(0), c);
            let mut plane = frame.index_axis_mut(Axis(0), ti);
            match d.kind {
                DegradeKind::None => {}
                DegradeKind::Blur => {
                    let blurred = gaussian_blur(&plane.to_owned(), sigma);
                    plane.assign(&blurred);
                }
                DegradeKind::CameraNoise => {
                    if noise_std > 0.0 {
                        let n = Normal::new(0.0, noise_std).unwrap();
                        plane.mapv_inplace(|p| p + n.sample(&mut rng));
                    }
                }
                DegradeKind::Resolution => {
                    let side_h = ((h as f64 * knob).round() as usize).max(1);
                    let side_w = ((w as f64 * knob).round() as usize).max(1);
                    let small = bilinear_resize(&plane.to_owned(), side_h, side_w);
                    plane.assign(&bilinear_resize(&small, h, w));
                }
                DegradeKind::Occlusion => {
                    plane
                        .slice_mut(ndarray::s![
                            patch.top..patch.top + patch.height,
                            patch.left..patch.left + patch.width
                        ])
                        .fill(0.0);
                }
                DegradeKind::Brightness => plane.mapv_inplace(|p| p.max(0.0).powf(knob)),
            }
        }
    }
    VideoClip::new(out, v.fps)
}

/// A `H/10 x W/10` patch placed uniformly inside `area`.
fn occluder(rng: &mut ChaCha8Rng, area: Rect, h: usize, w: usize) -> Rect {
    let ph = (h / 10).max(1).min(area.height);
    let pw = (w / 10).max(1).min(area.width);
    Rect {
        top: area.top + rng.gen_range(0..=area.height - ph),
        left: area.left + rng.gen_range(0..=area.width - pw),
        height: ph,
        width: pw,
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Normalized 5x5 Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let taps: Vec<f64> = (-2..=2)
        .map(|i: i32| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|v| v / total).collect();
    let (h, w) = img.dim();
    // The 2-D kernel is separable: rows then columns.
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..5)
            .map(|k| taps[k] * img[[y, reflect(x as isize + k as isize - 2, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..5)
            .map(|k| taps[k] * rows[[reflect(y as isize + k as isize - 2, h), x]])
            .sum::<f64>()
    })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear_resize(img: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), p - lo as f64)
    };
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (y0, y1, fy) = coord(y, oh, h);
        let (x0, x1, fx) = coord(x, ow, w);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
