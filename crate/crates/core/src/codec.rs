//! Stage I: the signal autoencoder, its codebook, and the nearest-item query.

use std::path::Path;

use codephys_autograd::{uniform, Adam, GradAccumulator, Graph, ParamStore, Var};
use log::{info, warn};
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{ensure, Error, Result};
use crate::nn::{self, NpForm};
use crate::signal::{self, PPGSignal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Codebook size.
    pub n: usize,
    /// Latent token width.
    pub d: usize,
    /// Internal channel width.
    pub k: usize,
    /// Training clip length in samples.
    pub t: usize,
    pub embed_layers: usize,
    /// Weight of the commitment term of the quantization loss.
    pub delta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub np_form: NpForm,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            n: 64,
            d: 64,
            k: 128,
            t: 160,
            embed_layers: 2,
            delta: 0.25,
            lr: 5e-3,
            batch: 8,
            epochs: 15,
            np_form: NpForm::OneMinusR,
        }
    }
}

impl CodecConfig {
    /// Narrow latent for CPU-scale experiments on 32x32 clips.
    pub fn toy() -> Self {
        CodecConfig {
            d: 16,
            k: 32,
            ..CodecConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n > 0 && self.d > 0 && self.k > 0 && self.t > 0 && self.batch > 0,
            Error::Invalid("codec sizes and batch must be positive".into())
        );
        ensure!(
            self.t % 4 == 0,
            Error::Invalid(format!("clip length {} is not divisible by 4", self.t))
        );
        ensure!(
            self.delta >= 0.0 && self.lr > 0.0,
            Error::Invalid("delta must be nonnegative and lr positive".into())
        );
        Ok(())
    }

    pub fn header(&self) -> String {
        format!(
            "codephys-ckpt v1 stage=1 N={} D={} K={} T={}",
            self.n, self.d, self.k, self.t
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[N, D]`.
    pub items: Array2<f64>,
}

impl Codebook {
    pub fn new(items: Array2<f64>) -> Result<Self> {
        ensure!(
            items.iter().all(|v| v.is_finite()),
            Error::Invalid("codebook contains non-finite values".into())
        );
        Ok(Codebook { items })
    }

    pub fn n(&self) -> usize {
        self.items.nrows()
    }

    pub fn d(&self) -> usize {
        self.items.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `[M, D]`.
    pub tokens: Array2<f64>,
}

impl LatentSequence {
    pub fn m(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryCoordinates {
    pub assignment: Vec<usize>,
}

impl QueryCoordinates {
    pub fn one_hot(&self, n: usize) -> Array2<f64> {
        let mut q = Array2::zeros((self.assignment.len(), n));
        for (i, &k) in self.assignment.iter().enumerate() {
            q[[i, k]] = 1.0;
        }
        q
    }
}

/// Index of the nearest row of `items` for every row of `tokens`; the lowest
/// index wins a tie.
pub fn nearest_items(tokens: ArrayView2<f64>, items: ArrayView2<f64>) -> Vec<usize> {
    tokens
        .rows()
        .into_iter()
        .map(|z| {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in items.rows().into_iter().enumerate() {
                let d: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

pub fn query_codebook(z: &LatentSequence, c: &Codebook) -> Result<QueryCoordinates> {
    ensure!(
        z.d() == c.d(),
        Error::Shape(format!("token width {} vs codebook width {}", z.d(), c.d()))
    );
    Ok(QueryCoordinates {
        assignment: nearest_items(z.tokens.view(), c.items.view()),
    })
}

pub fn quantize_lookup(q: &QueryCoordinates, c: &Codebook) -> Result<LatentSequence> {
    if let Some(&bad) = q.assignment.iter().find(|&&k| k >= c.n()) {
        return Err(Error::Invalid(format!(
            "codebook index {bad} out of range for {} items",
            c.n()
        )));
    }
    Ok(LatentSequence {
        tokens: c.items.select(Axis(0), &q.assignment),
    })
}

pub fn loss_rec(s_gt: &PPGSignal, s_rec: &PPGSignal, form: NpForm) -> Result<f64> {
    ensure!(
        s_gt.len() == s_rec.len(),
        Error::Shape(format!("signal lengths {} and {}", s_gt.len(), s_rec.len()))
    );
    let r = signal::pearson(&s_gt.samples, &s_rec.samples)?;
    let mse = s_gt
        .samples
        .iter()
        .zip(&s_rec.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / s_gt.len() as f64;
    Ok(mse + form.apply(r))
}

pub fn loss_feat(z: &LatentSequence, zq: &LatentSequence, delta: f64) -> Result<f64> {
    ensure!(
        z.tokens.shape() == zq.tokens.shape(),
        Error::Shape(format!(
            "latents {:?} and {:?}",
            z.tokens.shape(),
            zq.tokens.shape()
        ))
    );
    let sq: f64 = z
        .tokens
        .iter()
        .zip(&zq.tokens)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((1.0 + delta) * sq)
}

/// Quantization loss on the tape: `||sg(z) - zq||^2 + delta * ||z - sg(zq)||^2`.
pub fn loss_feat_var<'g>(z: &Var<'g>, zq: &Var<'g>, delta: f64) -> Var<'g> {
    let codebook_term = z.detach().sub(zq).square().sum();
    let commit_term = z.sub(&zq.detach()).square().sum();
    codebook_term.add(&commit_term.scale(delta))
}

/// Forward value of `zq`, backward identity to `z`.
pub fn straight_through<'g>(z: &Var<'g>, zq: &Var<'g>) -> Var<'g> {
    z.add(&zq.sub(z).detach())
}

/// Encoder up to the last embedding layer: `[1, T]` to `[K, T]`.
pub fn encoder_trunk<'g>(g: &'g Graph<'g>, prefix: &str, layers: usize, x: &Var<'g>) -> Var<'g> {
    let mut h = nn::conv1d(g, &format!("{prefix}.in"), x, 1, 0);
    for i in 0..layers {
        h = nn::embed_layer(g, &format!("{prefix}.el{i}"), &h);
    }
    h
}

/// Full encoder: `[1, T]` to `[M, D]` tokens.
pub fn encode_tokens<'g>(g: &'g Graph<'g>, prefix: &str, layers: usize, x: &Var<'g>) -> Var<'g> {
    let h = encoder_trunk(g, prefix, layers, x);
    nn::conv1d(g, &format!("{prefix}.out"), &h, 4, 2).permute(&[1, 0])
}

/// Decoder: `[M, D]` tokens to a `[1, 4M]` signal.
pub fn decode_tokens<'g>(g: &'g Graph<'g>, prefix: &str, layers: usize, zq: &Var<'g>) -> Var<'g> {
    let x = zq.permute(&[1, 0]);
    let mut h = nn::conv_transpose1d(g, &format!("{prefix}.up"), &x, 4, 2, 3);
    for i in 0..layers {
        h = nn::embed_layer(g, &format!("{prefix}.el{i}"), &h);
    }
    nn::conv1d(g, &format!("{prefix}.out"), &h, 1, 0)
}

pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &CodecConfig, rng: &mut ChaCha8Rng) {
    nn::init_conv(
        store,
        &format!("{prefix}.in"),
        &[cfg.k, 1, 1],
        Some(cfg.k),
        rng,
    );
    for i in 0..cfg.embed_layers {
        nn::init_embed_layer(store, &format!("{prefix}.el{i}"), cfg.k, rng);
    }
    nn::init_conv(
        store,
        &format!("{prefix}.out"),
        &[cfg.d, cfg.k, 5],
        Some(cfg.d),
        rng,
    );
}

pub fn init_decoder(store: &mut ParamStore, prefix: &str, cfg: &CodecConfig, rng: &mut ChaCha8Rng) {
    nn::init_conv_transpose(store, &format!("{prefix}.up"), &[cfg.d, cfg.k, 5], rng);
    for i in 0..cfg.embed_layers {
        nn::init_embed_layer(store, &format!("{prefix}.el{i}"), cfg.k, rng);
    }
    nn::init_conv(
        store,
        &format!("{prefix}.out"),
        &[1, cfg.k, 1],
        Some(1),
        rng,
    );
}

fn signal_input(samples: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[1, samples.len()]), samples.to_vec()).unwrap()
}

fn to_matrix(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality().expect("expected a matrix")
}

/// Trained or initialized Stage I model. Parameters are named `encoder.*`,
/// `decoder.*` and `codebook` (`[N, D]`).
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
}

impl Codec {
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, "encoder", &config, &mut rng);
        init_decoder(&mut params, "decoder", &config, &mut rng);
        let bound = 1.0 / config.n as f64;
        params.insert("codebook", uniform(&[config.n, config.d], bound, &mut rng));
        Ok(Codec { config, params })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            items: to_matrix(self.params.get("codebook").expect("codebook")),
        }
    }

    pub fn encode(&self, s: &PPGSignal) -> Result<LatentSequence> {
        encode_signal(s, &self.params, self.config.embed_layers)
    }

    pub fn decode(&self, zq: &LatentSequence, fps: f64) -> Result<PPGSignal> {
        decode_signal(zq, &self.params, self.config.embed_layers, fps)
    }

    /// Encode, query, look up, decode.
    pub fn reconstruct(&self, s: &PPGSignal) -> Result<PPGSignal> {
        let c = self.codebook();
        let z = self.encode(s)?;
        let zq = quantize_lookup(&query_codebook(&z, &c)?, &c)?;
        self.decode(&zq, s.fps)
    }

    pub fn to_archive(&self) -> Archive {
        Archive {
            header: self.config.header(),
            meta: serde_json::json!({ "config": self.config }),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }

    pub fn from_archive(archive: Archive) -> Result<Self> {
        if archive.header_field("stage") != Some("1") {
            return Err(Error::Checkpoint("not a stage 1 checkpoint".into()));
        }
        let config: CodecConfig = serde_json::from_value(archive.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let fresh = Codec::init(config.clone(), 0)?;
        for (name, a) in fresh.params.iter() {
            match archive.params.get(name) {
                Some(b) if b.shape() == a.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen `{name}`"))),
            }
        }
        Ok(Codec {
            config,
            params: archive.params,
        })
    }
}

/// Encodes one signal with the `encoder.*` parameters of `params`.
pub fn encode_signal(s: &PPGSignal, params: &ParamStore, layers: usize) -> Result<LatentSequence> {
    s.check_codec_length()?;
    let g = Graph::inference(params);
    let z = encode_tokens(&g, "encoder", layers, &g.constant(signal_input(&s.samples)));
    Ok(LatentSequence {
        tokens: to_matrix(z.value()),
    })
}

pub fn decode_signal(
    zq: &LatentSequence,
    params: &ParamStore,
    layers: usize,
    fps: f64,
) -> Result<PPGSignal> {
    ensure!(
        zq.tokens.iter().all(|v| v.is_finite()),
        Error::Invalid("latents contain non-finite values".into())
    );
    let g = Graph::inference(params);
    let s = decode_tokens(
        &g,
        "decoder",
        layers,
        &g.constant(zq.tokens.clone().into_dyn()),
    );
    PPGSignal::new(s.value().iter().copied().collect(), fps)
}

/// Per-epoch mean training losses.
#[derive(Clone, Debug, Default)]
pub struct Stage1Log {
    pub epoch_loss: Vec<f64>,
    pub epoch_rec: Vec<f64>,
    pub epoch_feat: Vec<f64>,
    /// Codebook items never selected in the final epoch.
    pub dead_items: usize,
}

/// One sample's Stage I loss terms on a fresh tape, returning parameter
/// gradients and `(L_rec, L_feat)`.
fn stage1_sample(
    codec_params: &ParamStore,
    cfg: &CodecConfig,
    s: &PPGSignal,
    used: &mut [bool],
) -> (std::collections::BTreeMap<String, ArrayD<f64>>, f64, f64) {
    let g = Graph::with_params(codec_params);
    let x = g.constant(signal_input(&s.samples));
    let z = encode_tokens(&g, "encoder", cfg.embed_layers, &x);
    let codebook = g.param("codebook");
    let idx = nearest_items(
        z.value().view().into_dimensionality().unwrap(),
        codebook.value().view().into_dimensionality().unwrap(),
    );
    for &k in &idx {
        used[k] = true;
    }
    let zq = codebook.gather_rows(&idx);
    let feat = loss_feat_var(&z, &zq, cfg.delta);
    let rec_sig = decode_tokens(&g, "decoder", cfg.embed_layers, &straight_through(&z, &zq));
    let rec = nn::mse(&rec_sig, &x).add(&nn::neg_pearson(&rec_sig, &x, cfg.np_form));
    let total = rec.add(&feat);
    let (r, f) = (rec.item(), feat.item());
    (g.backward(&total).params(), r, f)
}

/// Trains encoder, decoder and codebook jointly on normalized clips of
/// length `config.t`. With `epochs == 0` the initialized model is returned.
pub fn train_stage1(
    dataset: &[PPGSignal],
    config: &CodecConfig,
    seed: u64,
) -> Result<(Codec, Stage1Log)> {
    ensure!(
        !dataset.is_empty(),
        Error::Invalid("empty training set".into())
    );
    for s in dataset {
        ensure!(
            s.len() == config.t,
            Error::Shape(format!(
                "training clip of length {} (expected {})",
                s.len(),
                config.t
            ))
        );
        signal::standardize(&s.samples)?;
    }
    let mut codec = Codec::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut adam = Adam::new(config.lr);
    let mut log = Stage1Log::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; config.n];
        let (mut sum_rec, mut sum_feat) = (0.0, 0.0);
        for batch in order.chunks(config.batch) {
            let mut acc = GradAccumulator::new();
            for &i in batch {
                let (grads, rec, feat) =
                    stage1_sample(&codec.params, config, &dataset[i], &mut used);
                if !(rec + feat).is_finite() {
                    return Err(Error::Diverged(format!(
                        "stage 1 loss is {} at epoch {epoch} (L_rec {rec}, L_feat {feat})",
                        rec + feat
                    )));
                }
                sum_rec += rec;
                sum_feat += feat;
                acc.add(grads);
            }
            adam.step(&mut codec.params, &acc.mean());
        }
        let n = dataset.len() as f64;
        log.epoch_rec.push(sum_rec / n);
        log.epoch_feat.push(sum_feat / n);
        log.epoch_loss.push((sum_rec + sum_feat) / n);
        log.dead_items = used.iter().filter(|u| !**u).count();
        info!(
            "stage1 epoch {epoch}: L_rec {:.5} L_feat {:.5} active items {}",
            sum_rec / n,
            sum_feat / n,
            config.n - log.dead_items
        );
    }
    if config.epochs > 0 && log.dead_items > 0 {
        warn!(
            "{} of {} codebook items unused in the final epoch",
            log.dead_items, config.n
        );
    }
    if !codec.params.all_finite() {
        return Err(Error::Diverged(
            "non-finite parameters after training".into(),
        ));
    }
    Ok((codec, log))
}
