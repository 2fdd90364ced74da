//! Video feature extractor (stem + four conv/pool blocks) and the spatial
//! attention map that reweights its output.

use codephys_autograd::{concat, Graph, ParamStore, Var};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn;
use crate::video::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Output channels of the 1x5x5 stem.
    pub stem: usize,
    /// Output channels of the four 3x3x3 blocks; the last must equal the
    /// codec's latent width.
    pub blocks: [usize; 4],
    /// How many of the blocks (counted from the last) end in a 1x2x2 max-pool.
    pub pools: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            stem: 64,
            blocks: [128, 192, 256, 64],
            pools: 4,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        ensure!(
            self.stem > 0 && self.blocks.iter().all(|&c| c > 0),
            Error::Invalid("frontend widths must be positive".into())
        );
        ensure!(
            self.blocks[3] == d,
            Error::Invalid(format!(
                "last frontend block has {} channels but the latent width is {d}",
                self.blocks[3]
            ))
        );
        ensure!(
            (1..=4).contains(&self.pools),
            Error::Invalid("between one and four pooling stages".into())
        );
        Ok(())
    }

    /// Spatial downsampling factor.
    pub fn scale(&self) -> usize {
        1 << self.pools
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.scale();
        ensure!(
            h % s == 0 && w % s == 0,
            Error::Invalid(format!("frame size {h}x{w} is not divisible by {s}"))
        );
        Ok(())
    }
}

/// `[D, T, H', W']` video feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub data: Array4<f64>,
}

/// `[H', W']` attention weights in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Array2<f64>,
}

pub fn init_frontend(store: &mut ParamStore, cfg: &FrontendConfig, rng: &mut ChaCha8Rng) {
    nn::init_conv(
        store,
        "frontend.stem",
        &[cfg.stem, 3, 1, 5, 5],
        Some(cfg.stem),
        rng,
    );
    nn::init_layer_norm(store, "frontend.stem.ln", cfg.stem);
    let mut cin = cfg.stem;
    for (i, &cout) in cfg.blocks.iter().enumerate() {
        nn::init_conv(
            store,
            &format!("frontend.block{i}"),
            &[cout, cin, 3, 3, 3],
            Some(cout),
            rng,
        );
        nn::init_layer_norm(store, &format!("frontend.block{i}.ln"), cout);
        cin = cout;
    }
    nn::init_conv(store, "frontend.sam", &[1, 2, 1, 3, 3], Some(1), rng);
}

/// Clip `[3, T, H, W]` to the initial feature `[D, T, H/s, W/s]`.
///
/// Every conv is followed by channel LayerNorm; all but the last block add a
/// ReLU, so the final feature stays signed like the distillation target.
/// Pooling sits on the last blocks: a LayerNorm output has a constant channel
/// mean, and only a max-pool after it keeps the channel-averaged pseudo-signal
/// from being flat.
pub fn extract_features<'g>(g: &'g Graph<'g>, cfg: &FrontendConfig, x: &Var<'g>) -> Var<'g> {
    let h = nn::conv3d(g, "frontend.stem", x, [0, 2, 2]);
    let mut h = nn::layer_norm(g, "frontend.stem.ln", &h).relu();
    for i in 0..4 {
        let y = nn::conv3d(g, &format!("frontend.block{i}"), &h, [1, 1, 1]);
        let mut y = nn::layer_norm(g, &format!("frontend.block{i}.ln"), &y);
        if i < 3 {
            y = y.relu();
        }
        if i >= 4 - cfg.pools {
            y = y.max_pool_hw2();
        }
        h = y;
    }
    h
}

/// Sigmoid of a 3x3 conv over the `[max, mean]` of `f` across channels and time.
pub fn attention_map<'g>(g: &'g Graph<'g>, f: &Var<'g>) -> Var<'g> {
    let s = f.shape().to_vec();
    let (hw, dt) = (s[2] * s[3], s[0] * s[1]);
    let flat = f.reshape(&[dt, hw]);
    let max = flat.max_axis(0).reshape(&[1, 1, s[2], s[3]]);
    let avg = flat.mean_axis(0).reshape(&[1, 1, s[2], s[3]]);
    let pooled = concat(&[&max, &avg], 0);
    nn::conv3d(g, "frontend.sam", &pooled, [0, 1, 1])
        .sigmoid()
        .reshape(&[s[2], s[3]])
}

/// `f * w` broadcast over channels and time.
pub fn apply_attention_var<'g>(f: &Var<'g>, w: &Var<'g>) -> Var<'g> {
    let s = w.shape().to_vec();
    f.mul(&w.reshape(&[1, 1, s[0], s[1]]))
}

/// Standard deviation floor for per-frame input standardization.
pub const FRAME_STD_FLOOR: f64 = 1e-6;

/// Network input: each frame and colour channel standardized to zero mean and
/// unit variance. A global gain or gamma change on a frame scales a small skin
/// modulation and the frame's spread alike, so this cancels frame-to-frame
/// brightness flicker to first order. Flat planes are only centred.
pub fn clip_input(v: &VideoClip) -> ndarray::ArrayD<f64> {
    let mut x = v.frames.clone();
    for mut channel in x.outer_iter_mut() {
        for mut frame in channel.outer_iter_mut() {
            let m = frame.mean().unwrap_or(0.0);
            let sd = frame
                .mapv(|p| (p - m) * (p - m))
                .mean()
                .unwrap_or(0.0)
                .sqrt();
            let scale = if sd > FRAME_STD_FLOOR { 1.0 / sd } else { 1.0 };
            frame.mapv_inplace(|p| (p - m) * scale);
        }
    }
    x.into_dyn()
}

pub fn extract_video_features(
    v: &VideoClip,
    params: &ParamStore,
    cfg: &FrontendConfig,
) -> Result<FeatureVolume> {
    cfg.check_input(v.h(), v.w())?;
    let g = Graph::inference(params);
    let f = extract_features(&g, cfg, &g.constant(clip_input(v)));
    Ok(FeatureVolume {
        data: f.value().clone().into_dimensionality().unwrap(),
    })
}

pub fn spatial_attention_map(f: &FeatureVolume, params: &ParamStore) -> AttentionMap {
    let g = Graph::inference(params);
    let w = attention_map(&g, &g.constant(f.data.clone().into_dyn()));
    AttentionMap {
        weights: w.value().clone().into_dimensionality().unwrap(),
    }
}

pub fn apply_attention(f: &FeatureVolume, w: &AttentionMap) -> Result<FeatureVolume> {
    let s = f.data.shape();
    ensure!(
        w.weights.dim() == (s[2], s[3]),
        Error::Shape(format!(
            "attention {:?} for feature {:?}",
            w.weights.dim(),
            s
        ))
    );
    let wb = w
        .weights
        .view()
        .insert_axis(ndarray::Axis(0))
        .insert_axis(ndarray::Axis(0));
    Ok(FeatureVolume {
        data: &f.data * &wb,
    })
}
