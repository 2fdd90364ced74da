//! RGB clips in `[3, T, H, W]` layout with values in `[0, 1]`, plus the two
//! on-disk forms: PNG frame directories and a raw `f32` array file.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array4, ArrayView3, Axis};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f64>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Array4<f64>, fps: f64) -> Result<Self> {
        ensure!(
            frames.shape()[0] == 3,
            Error::Shape(format!(
                "expected 3 colour channels, got {}",
                frames.shape()[0]
            ))
        );
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            Error::Invalid("clip contains non-finite values".into())
        );
        ensure!(fps > 0.0, Error::Invalid("fps must be positive".into()));
        let frames = frames.mapv(|v| v.clamp(0.0, 1.0));
        Ok(VideoClip { frames, fps })
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.frames.shape()[3]
    }

    /// `[3, H, W]` view of frame `t`.
    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(1), t)
    }

    pub fn truncate(&self, t: usize) -> Self {
        VideoClip {
            frames: self.frames.slice(ndarray::s![.., ..t, .., ..]).to_owned(),
            fps: self.fps,
        }
    }

    /// Mean over channels and the pixel rectangle, per frame.
    pub fn region_trace(&self, region: Rect) -> Vec<f64> {
        (0..self.t())
            .map(|t| {
                let f = self.frame(t);
                let patch = f.slice(ndarray::s![
                    ..,
                    region.top..region.top + region.height,
                    region.left..region.left + region.width
                ]);
                patch.mean().unwrap()
            })
            .collect()
    }

    pub fn write_frames(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in 0..self.t() {
            let f = self.frame(t);
            let img = image::RgbImage::from_fn(self.w() as u32, self.h() as u32, |x, y| {
                let px = |c: usize| (f[[c, y as usize, x as usize]] * 255.0).round() as u8;
                image::Rgb([px(0), px(1), px(2)])
            });
            let path = dir.join(format!("{t:06}.png"));
            img.save(&path)
                .map_err(|e| Error::file(&path, e.to_string()))?;
        }
        Ok(())
    }

    /// Reads `%06d.png` frames starting at 0 until the first missing index.
    pub fn read_frames(dir: &Path, fps: f64) -> Result<Self> {
        let mut images = Vec::new();
        loop {
            let path = dir.join(format!("{:06}.png", images.len()));
            if !path.exists() {
                break;
            }
            let img = image::open(&path)
                .map_err(|e| Error::file(&path, e.to_string()))?
                .to_rgb8();
            images.push((path, img));
        }
        ensure!(
            !images.is_empty(),
            Error::file(dir, "no frames named 000000.png onwards")
        );
        let (w, h) = images[0].1.dimensions();
        let mut frames = Array4::zeros((3, images.len(), h as usize, w as usize));
        for (t, (path, img)) in images.iter().enumerate() {
            ensure!(
                img.dimensions() == (w, h),
                Error::file(path, "frame size differs from frame 0")
            );
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    frames[[c, t, y as usize, x as usize]] = px[c] as f64 / 255.0;
                }
            }
        }
        VideoClip::new(frames, fps)
    }

    pub fn raw_header(&self) -> String {
        let s = self.frames.shape();
        format!(
            "codephys-clip v1 dtype=f32 shape={}x{}x{}x{} fps={}",
            s[0], s[1], s[2], s[3], self.fps
        )
    }

    /// Header line, then every value as little-endian `f32` in `[3, T, H, W]`
    /// order.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.frames.len() * 4 + 64);
        writeln!(out, "{}", self.raw_header()).unwrap();
        for v in self.frames.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::file(path, "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::file(path, "header is not text"))?;
        let mut fields = header.split_whitespace();
        ensure!(
            fields.next() == Some("codephys-clip") && fields.next() == Some("v1"),
            Error::file(path, "not a codephys-clip v1 file")
        );
        let mut shape = None;
        let mut fps = None;
        for kv in fields {
            match kv.split_once('=') {
                Some(("dtype", "f32")) => {}
                Some(("dtype", other)) => {
                    return Err(Error::file(path, format!("unsupported dtype {other}")))
                }
                Some(("shape", s)) => {
                    let dims: Option<Vec<usize>> = s.split('x').map(|d| d.parse().ok()).collect();
                    shape = dims.filter(|d| d.len() == 4);
                }
                Some(("fps", f)) => fps = f.parse::<f64>().ok(),
                _ => return Err(Error::file(path, format!("unknown header field `{kv}`"))),
            }
        }
        let shape = shape.ok_or_else(|| Error::file(path, "bad or missing shape"))?;
        let fps = fps.ok_or_else(|| Error::file(path, "bad or missing fps"))?;
        let body = &bytes[nl + 1..];
        let n: usize = shape.iter().product();
        ensure!(
            body.len() == n * 4,
            Error::file(
                path,
                format!("expected {} data bytes, found {}", n * 4, body.len())
            )
        );
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let frames = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data)
            .map_err(|e| Error::file(path, e.to_string()))?;
        VideoClip::new(frames, fps).map_err(|e| Error::file(path, e.to_string()))
    }
}

/// Pixel rectangle `[top, top + height) x [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.top + self.height <= h
            && self.left + self.width <= w
    }

    /// The central rectangle covering `frac` of each side.
    pub fn centered(h: usize, w: usize, frac: f64) -> Self {
        let height = ((h as f64 * frac).round() as usize).clamp(1, h);
        let width = ((w as f64 * frac).round() as usize).clamp(1, w);
        Rect {
            top: (h - height) / 2,
            left: (w - width) / 2,
            height,
            width,
        }
    }
}
