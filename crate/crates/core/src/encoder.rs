//! Video-to-latent encoder: temporal-difference and deformable 3-D convs in
//! three residual stages, the auxiliary prior branch, and AdaIN fusion.

use codephys_autograd::{concat, zeros, Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig};
use crate::error::{ensure, Error, Result};
use crate::nn;
use crate::signal::DEGENERATE_VAR;

/// Standard deviation floor for AdaIN's content input.
pub const LATENT_STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Weight of the temporal-difference term.
    pub theta_tdc: f64,
    /// Kernel length of the temporal conv inside stages 2 and 3.
    pub conv1d_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            theta_tdc: 0.5,
            conv1d_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.theta_tdc),
            Error::Invalid(format!("theta_tdc {} outside [0, 1]", self.theta_tdc))
        );
        ensure!(
            self.conv1d_kernel % 2 == 1,
            Error::Invalid("conv1d_kernel must be odd".into())
        );
        Ok(())
    }
}

/// Temporal central difference `x_t - (x_{t-1} + x_{t+1}) / 2` of a
/// `[C, T, H, W]` value, reflecting at both ends. A single frame gives zero.
pub fn temporal_difference<'g>(x: &Var<'g>) -> Var<'g> {
    let t = x.shape()[1];
    if t == 1 {
        return x.scale(0.0);
    }
    let prev = concat(&[&x.slice_axis(1, 1, 2), &x.slice_axis(1, 0, t - 1)], 1);
    let next = concat(&[&x.slice_axis(1, 1, t), &x.slice_axis(1, t - 2, t - 1)], 1);
    x.sub(&prev.add(&next).scale(0.5))
}

/// Temporal difference convolution: a same-padded 3x3x3 conv minus `theta`
/// times the temporal central difference of `x` mixed by the summed
/// centre-frame kernel slice.
pub fn tdc3d<'g>(x: &Var<'g>, weight: &Var<'g>, bias: Option<&Var<'g>>, theta: f64) -> Var<'g> {
    let out = x.conv3d(weight, bias, [1, 1, 1]);
    if theta == 0.0 {
        return out;
    }
    let s = weight.shape().to_vec();
    let centre = weight
        .slice_axis(2, 1, 2)
        .reshape(&[s[0], s[1], s[3] * s[4]])
        .sum_axis(2)
        .reshape(&[s[0], s[1], 1, 1, 1]);
    let diff = temporal_difference(x).conv3d(&centre, None, [0, 0, 0]);
    out.sub(&diff.scale(theta))
}

/// Deformable 3x3x3 conv whose offsets come from a zero-initialized 3x3x3
/// conv over the same input.
pub fn dconv3d<'g>(g: &'g Graph<'g>, prefix: &str, x: &Var<'g>) -> Var<'g> {
    let offsets = nn::conv3d(g, &format!("{prefix}.offset"), x, [1, 1, 1]);
    let b = g.param(&format!("{prefix}.b"));
    x.deform_conv3d(
        &offsets,
        &g.param(&format!("{prefix}.w")),
        Some(&b),
        [1, 1, 1],
    )
}

fn tdc_layer<'g>(g: &'g Graph<'g>, prefix: &str, x: &Var<'g>, theta: f64) -> Var<'g> {
    let b = g.param(&format!("{prefix}.b"));
    tdc3d(x, &g.param(&format!("{prefix}.w")), Some(&b), theta)
}

pub fn init_evf(
    store: &mut ParamStore,
    codec_cfg: &CodecConfig,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) {
    let d = codec_cfg.d;
    for stage in 0..3 {
        let p = format!("evf.s{stage}");
        nn::init_conv(store, &format!("{p}.dconv"), &[d, d, 3, 3, 3], Some(d), rng);
        store.insert(format!("{p}.dconv.offset.w"), zeros(&[81, d, 3, 3, 3]));
        store.insert(format!("{p}.dconv.offset.b"), zeros(&[81]));
        nn::init_layer_norm(store, &format!("{p}.dconv.ln"), d);
        nn::init_conv(store, &format!("{p}.tdc"), &[d, d, 3, 3, 3], Some(d), rng);
        nn::init_layer_norm(store, &format!("{p}.tdc.ln"), d);
        if stage > 0 {
            let k = cfg.conv1d_kernel;
            nn::init_conv(
                store,
                &format!("{p}.conv1d"),
                &[d, d, k, 1, 1],
                Some(d),
                rng,
            );
            nn::init_layer_norm(store, &format!("{p}.conv1d.ln"), d);
        }
    }
    nn::init_conv(
        store,
        "evf.tail.in",
        &[codec_cfg.k, d, 1],
        Some(codec_cfg.k),
        rng,
    );
    for i in 0..codec_cfg.embed_layers {
        nn::init_embed_layer(store, &format!("evf.tail.el{i}"), codec_cfg.k, rng);
    }
    nn::init_conv(store, "evf.tail.out", &[d, codec_cfg.k, 5], Some(d), rng);
}

/// Residual stages `Z1..Z3` on a `[D, T, H', W']` volume.
pub fn st_stages<'g>(g: &'g Graph<'g>, cfg: &EncoderConfig, f: &Var<'g>) -> Vec<Var<'g>> {
    let theta = cfg.theta_tdc;
    let pad_t = cfg.conv1d_kernel / 2;
    let mut zs: Vec<Var<'g>> = Vec::with_capacity(3);
    for stage in 0..3 {
        let p = format!("evf.s{stage}");
        let x = zs.last().unwrap_or(f);
        let deform = nn::layer_norm(
            g,
            &format!("{p}.dconv.ln"),
            &dconv3d(g, &format!("{p}.dconv"), x),
        );
        let left = if stage == 0 {
            deform
        } else {
            let c = nn::conv3d(g, &format!("{p}.conv1d"), &deform, [pad_t, 0, 0]);
            nn::layer_norm(g, &format!("{p}.conv1d.ln"), &c)
        };
        let right = nn::layer_norm(
            g,
            &format!("{p}.tdc.ln"),
            &tdc_layer(g, &format!("{p}.tdc"), x, theta),
        );
        zs.push(left.add(&right));
    }
    zs
}

/// `[D, T, H', W']` to `[M, D]`: three residual stages, spatial average,
/// then the codec-style tail (1x1 to K, embedding layers, stride-4 conv).
pub fn st_encode<'g>(g: &'g Graph<'g>, cfg: &EncoderConfig, layers: usize, f: &Var<'g>) -> Var<'g> {
    let z3 = st_stages(g, cfg, f).pop().unwrap();
    let s = z3.shape().to_vec();
    let pooled = z3.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2);
    let mut h = nn::conv1d(g, "evf.tail.in", &pooled, 1, 0);
    for i in 0..layers {
        h = nn::embed_layer(g, &format!("evf.tail.el{i}"), &h);
    }
    nn::conv1d(g, "evf.tail.out", &h, 4, 2).permute(&[1, 0])
}

/// Channel-and-space average of a feature volume, standardized per clip:
/// the `[1, T]` pseudo-signal fed to the prior branch.
pub fn pseudo_signal<'g>(f: &Var<'g>) -> Result<Var<'g>> {
    let t = f.shape()[1];
    let p = f
        .permute(&[1, 0, 2, 3])
        .reshape(&[t, f.value().len() / t])
        .mean_axis(1);
    let centred = p.sub(&p.mean());
    let var = centred.square().mean();
    ensure!(var.item() > DEGENERATE_VAR, Error::DegenerateSignal);
    Ok(centred.div(&var.sqrt()).reshape(&[1, t]))
}

/// Auxiliary prior branch: pseudo-signal through the `apb.*` signal encoder.
pub fn apb_forward<'g>(g: &'g Graph<'g>, layers: usize, f: &Var<'g>) -> Result<Var<'g>> {
    Ok(codec::encode_tokens(g, "apb", layers, &pseudo_signal(f)?))
}

/// Re-scales `z_enc` to the global mean and standard deviation of `z_apb`.
pub fn adain<'g>(z_enc: &Var<'g>, z_apb: &Var<'g>) -> Result<Var<'g>> {
    ensure!(
        z_enc.shape() == z_apb.shape(),
        Error::Shape(format!(
            "AdaIN inputs {:?} and {:?}",
            z_enc.shape(),
            z_apb.shape()
        ))
    );
    let (mu_e, sd_e) = moments(z_enc);
    ensure!(sd_e.item() > LATENT_STD_FLOOR, Error::DegenerateLatent);
    let (mu_a, sd_a) = moments(z_apb);
    Ok(z_enc.sub(&mu_e).div(&sd_e).mul(&sd_a).add(&mu_a))
}

fn moments<'g>(z: &Var<'g>) -> (Var<'g>, Var<'g>) {
    let mu = z.mean();
    let sd = z.sub(&mu).square().mean().sqrt();
    (mu, sd)
}

/// `AdaIN(z_enc, z_apb) + z_apb`.
pub fn adain_fuse<'g>(z_enc: &Var<'g>, z_apb: &Var<'g>) -> Result<Var<'g>> {
    Ok(adain(z_enc, z_apb)?.add(z_apb))
}
