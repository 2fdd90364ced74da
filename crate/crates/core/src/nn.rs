//! Named-parameter layers shared by both stages, and the waveform losses.

use codephys_autograd::{conv_weight, ones, uniform, zeros, Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// Registers `{prefix}.w` with PyTorch-style uniform(±1/sqrt(fan_in)) init
/// and, optionally, a bias `{prefix}.b` with the same bound.
pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    shape: &[usize],
    bias: Option<usize>,
    rng: &mut impl Rng,
) {
    let fan_in: usize = shape[1..].iter().product();
    store.insert(format!("{prefix}.w"), conv_weight(shape, rng));
    if let Some(n) = bias {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        store.insert(format!("{prefix}.b"), uniform(&[n], bound, rng));
    }
}

/// Transposed-conv weights are `[C_in, C_out, k]`; the fan-in seen by each
/// output is `C_in * k / stride`, but the common init uses `C_out * k`.
pub fn init_conv_transpose(
    store: &mut ParamStore,
    prefix: &str,
    shape: &[usize],
    rng: &mut impl Rng,
) {
    let fan_in = shape[1] * shape[2];
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform(shape, bound, rng));
    store.insert(format!("{prefix}.b"), uniform(&[shape[1]], bound, rng));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.g"), ones(&[channels]));
    store.insert(format!("{prefix}.b"), zeros(&[channels]));
}

fn bias<'g>(g: &'g Graph<'g>, prefix: &str) -> Option<Var<'g>> {
    let name = format!("{prefix}.b");
    g.has_param(&name).then(|| g.param(&name))
}

pub fn conv1d<'g>(
    g: &'g Graph<'g>,
    prefix: &str,
    x: &Var<'g>,
    stride: usize,
    pad: usize,
) -> Var<'g> {
    let b = bias(g, prefix);
    x.conv1d(&g.param(&format!("{prefix}.w")), b.as_ref(), stride, pad)
}

pub fn conv_transpose1d<'g>(
    g: &'g Graph<'g>,
    prefix: &str,
    x: &Var<'g>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Var<'g> {
    let b = bias(g, prefix);
    x.conv_transpose1d(
        &g.param(&format!("{prefix}.w")),
        b.as_ref(),
        stride,
        pad,
        output_pad,
    )
}

pub fn conv3d<'g>(g: &'g Graph<'g>, prefix: &str, x: &Var<'g>, pad: [usize; 3]) -> Var<'g> {
    let b = bias(g, prefix);
    x.conv3d(&g.param(&format!("{prefix}.w")), b.as_ref(), pad)
}

pub fn layer_norm<'g>(g: &'g Graph<'g>, prefix: &str, x: &Var<'g>) -> Var<'g> {
    x.layer_norm(
        &g.param(&format!("{prefix}.g")),
        &g.param(&format!("{prefix}.b")),
        LN_EPS,
    )
}

/// Embedding layer: k=3 same-padded conv over time, channel LayerNorm, GELU.
pub fn embed_layer<'g>(g: &'g Graph<'g>, prefix: &str, x: &Var<'g>) -> Var<'g> {
    let y = conv1d(g, &format!("{prefix}.conv"), x, 1, 1);
    layer_norm(g, &format!("{prefix}.ln"), &y).gelu()
}

pub fn init_embed_layer(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) {
    init_conv(
        store,
        &format!("{prefix}.conv"),
        &[channels, channels, 3],
        Some(channels),
        rng,
    );
    init_layer_norm(store, &format!("{prefix}.ln"), channels);
}

/// Which negative-Pearson variant the waveform losses use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpForm {
    /// `1 - r`, zero at perfect correlation.
    #[default]
    OneMinusR,
    /// `-r`.
    NegR,
}

impl NpForm {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            NpForm::OneMinusR => 1.0 - r,
            NpForm::NegR => -r,
        }
    }
}

pub fn mse<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    a.sub(b).square().mean()
}

/// Pearson correlation of two equal-shape values, over all entries.
/// Callers must reject constant inputs first.
pub fn pearson<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let da = a.sub(&a.mean());
    let db = b.sub(&b.mean());
    let cov = da.mul(&db).sum();
    let norm = da.square().sum().mul(&db.square().sum()).sqrt();
    cov.div(&norm)
}

pub fn neg_pearson<'g>(a: &Var<'g>, b: &Var<'g>, form: NpForm) -> Var<'g> {
    let r = pearson(a, b);
    match form {
        NpForm::OneMinusR => r.neg().add_scalar(1.0),
        NpForm::NegR => r.neg(),
    }
}
