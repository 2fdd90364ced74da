//! Stage II model: video frontend, spatio-temporal encoder, prior branch and
//! the frozen Stage I codebook/decoder, with its trainer and checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use codephys_autograd::{Adam, Array, GradAccumulator, Graph, ParamStore, Var};
use log::info;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::codec::{self, Codec, CodecConfig, LatentSequence, QueryCoordinates};
use crate::distill::{self, LossParts, LossWeights};
use crate::encoder::{self, EncoderConfig};
use crate::error::{ensure, Error, Result};
use crate::frontend::{self, FrontendConfig};
use crate::hr::DEFAULT_BAND;
use crate::nn::NpForm;
use crate::signal::PPGSignal;
use crate::video::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub psd_band: [f64; 2],
    pub np_form: NpForm,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::default(),
            weights: LossWeights::default(),
            lr: 1e-4,
            weight_decay: 5e-5,
            batch: 4,
            epochs: 20,
            psd_band: DEFAULT_BAND,
            np_form: NpForm::OneMinusR,
        }
    }
}

impl Stage2Config {
    /// Small frontend and a faster schedule for 32x32 clips, paired with
    /// [`CodecConfig::toy`] (latent width `d`).
    pub fn toy(d: usize) -> Self {
        Stage2Config {
            frontend: FrontendConfig {
                stem: 4,
                blocks: [8, d.max(16), d, d],
                pools: 4,
            },
            lr: 1e-3,
            epochs: 3,
            ..Stage2Config::default()
        }
    }

    pub fn validate(&self, codec: &CodecConfig) -> Result<()> {
        self.frontend.validate(codec.d)?;
        self.encoder.validate()?;
        self.weights.validate()?;
        ensure!(
            self.lr > 0.0 && self.weight_decay >= 0.0 && self.batch > 0,
            Error::Invalid("lr and batch must be positive, weight_decay nonnegative".into())
        );
        Ok(())
    }
}

/// Parameters never updated in Stage II: the codebook, the decoder, and the
/// Stage I encoder copy that produces the query labels.
pub fn is_frozen(name: &str) -> bool {
    name == "codebook" || name.starts_with("decoder.") || name.starts_with("labeler.")
}

#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub codec: CodecConfig,
    /// SHA-256 of the Stage I checkpoint bytes this model was built from.
    pub stage1_sha256: String,
    pub params: ParamStore,
}

/// Intermediate values of one forward pass.
pub struct Forward<'g> {
    pub f_v: Var<'g>,
    pub attention: Var<'g>,
    pub f_sa: Var<'g>,
    pub z_rppg: Var<'g>,
    pub assignment: Vec<usize>,
    pub s_pred: Var<'g>,
}

/// Latent production shared by the video and PPG branches:
/// `AdaIN(E_vf(f), APB(f)) + APB(f)`.
pub fn fuse_latent<'g>(
    g: &'g Graph<'g>,
    cfg: &Stage2Config,
    layers: usize,
    f: &Var<'g>,
) -> Result<Var<'g>> {
    let z_enc = encoder::st_encode(g, &cfg.encoder, layers, f);
    let z_apb = encoder::apb_forward(g, layers, f)?;
    encoder::adain_fuse(&z_enc, &z_apb)
}

/// Query, look up with a straight-through gradient, decode.
fn quantize_decode<'g>(g: &'g Graph<'g>, layers: usize, z: &Var<'g>) -> (Vec<usize>, Var<'g>) {
    let codebook = g.param("codebook");
    let assignment = codec::nearest_items(
        z.value().view().into_dimensionality().unwrap(),
        codebook.value().view().into_dimensionality().unwrap(),
    );
    let zq = codebook.gather_rows(&assignment);
    let s = codec::decode_tokens(g, "decoder", layers, &codec::straight_through(z, &zq));
    (assignment, s)
}

impl Stage2Model {
    /// Fresh frontend and encoder; prior branch and feature extractor copied
    /// from the Stage I encoder; codebook and decoder embedded read-only.
    pub fn init(
        stage1: &Codec,
        stage1_sha256: String,
        config: Stage2Config,
        seed: u64,
    ) -> Result<Self> {
        config.validate(&stage1.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        frontend::init_frontend(&mut params, &config.frontend, &mut rng);
        encoder::init_evf(&mut params, &stage1.config, &config.encoder, &mut rng);
        params.merge(&stage1.params.extract("encoder.", "apb."));
        params.merge(&stage1.params.extract("encoder.", "labeler."));
        distill::init_eppg(&mut params, &stage1.params, &stage1.config, &mut rng);
        params.merge(&stage1.params.extract("decoder.", "decoder."));
        params.insert("codebook", stage1.params.get("codebook").unwrap().clone());
        Ok(Stage2Model {
            config,
            codec: stage1.config.clone(),
            stage1_sha256,
            params,
        })
    }

    /// Trainable parameters of the inference path (frontend, encoder, prior
    /// branch).
    pub fn inference_param_count(&self) -> usize {
        ["frontend.", "evf.", "apb."]
            .iter()
            .map(|p| self.params.num_scalars_with_prefix(p))
            .sum()
    }

    /// Every parameter Stage II updates, including the PPG feature extractor.
    pub fn trainable_param_count(&self) -> usize {
        self.inference_param_count() + self.params.num_scalars_with_prefix("eppg.")
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, clip: &Var<'g>) -> Result<Forward<'g>> {
        let layers = self.codec.embed_layers;
        let f_v = frontend::extract_features(g, &self.config.frontend, clip);
        let attention = frontend::attention_map(g, &f_v);
        let f_sa = frontend::apply_attention_var(&f_v, &attention);
        let z_rppg = fuse_latent(g, &self.config, layers, &f_sa)?;
        let (assignment, s_pred) = quantize_decode(g, layers, &z_rppg);
        Ok(Forward {
            f_v,
            attention,
            f_sa,
            z_rppg,
            assignment,
            s_pred,
        })
    }

    fn check_clip(&self, v: &VideoClip) -> Result<()> {
        self.config.frontend.check_input(v.h(), v.w())?;
        ensure!(
            v.t() % 4 == 0,
            Error::Invalid(format!("clip length {} is not divisible by 4", v.t()))
        );
        Ok(())
    }

    /// Predicted signal, query coordinates and fused latent for one clip.
    pub fn predict(&self, v: &VideoClip) -> Result<(PPGSignal, QueryCoordinates, LatentSequence)> {
        self.check_clip(v)?;
        let g = Graph::inference(&self.params);
        let out = self.forward(&g, &g.constant(frontend::clip_input(v)))?;
        let s = PPGSignal::new(out.s_pred.value().iter().copied().collect(), v.fps)?;
        Ok((
            s,
            QueryCoordinates {
                assignment: out.assignment,
            },
            LatentSequence {
                tokens: out.z_rppg.value().clone().into_dimensionality().unwrap(),
            },
        ))
    }

    /// Runs a full clip through [`Stage2Model::predict`] in windows of the
    /// training length, concatenating the outputs; a trailing partial window
    /// is predicted from the last full-length window.
    pub fn predict_long(&self, v: &VideoClip) -> Result<PPGSignal> {
        let t = self.codec.t;
        if v.t() <= t {
            return Ok(self.predict(v)?.0);
        }
        let mut out = Vec::with_capacity(v.t());
        let mut start = 0;
        while start < v.t() {
            let s0 = start.min(v.t() - t);
            let window = VideoClip {
                frames: v
                    .frames
                    .slice(ndarray::s![.., s0..s0 + t, .., ..])
                    .to_owned(),
                fps: v.fps,
            };
            let pred = self.predict(&window)?.0;
            out.extend_from_slice(&pred.samples[start - s0..]);
            start = s0 + t;
        }
        PPGSignal::new(out, v.fps)
    }

    pub fn header(&self) -> String {
        format!(
            "codephys-ckpt v1 stage=2 N={} D={} K={} T={}",
            self.codec.n, self.codec.d, self.codec.k, self.codec.t
        )
    }

    pub fn to_archive(&self) -> Archive {
        Archive {
            header: self.header(),
            meta: serde_json::json!({
                "config": self.config,
                "codec": self.codec,
                "stage1_sha256": self.stage1_sha256,
                "sections": ["frontend", "evf", "apb", "eppg", "labeler", "codebook", "decoder"],
            }),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.header_field("stage") != Some("2") {
            return Err(Error::Checkpoint("not a stage 2 checkpoint".into()));
        }
        let parse = |key: &str| a.meta.get(key).cloned().unwrap_or_default();
        let config: Stage2Config = serde_json::from_value(parse("config"))
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let codec: CodecConfig = serde_json::from_value(parse("codec"))
            .map_err(|e| Error::Checkpoint(format!("bad codec config: {e}")))?;
        let stage1_sha256 = parse("stage1_sha256")
            .as_str()
            .unwrap_or_default()
            .to_string();
        Ok(Stage2Model {
            config,
            codec,
            stage1_sha256,
            params: a.params,
        })
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "epoch,step,L_phy,L_code,L_distill,L_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.parts.phy,
            self.parts.code + self.parts.code_ppg,
            self.parts.distill,
            self.total
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Stage2Log {
    pub steps: Vec<StepLog>,
    pub epoch_loss: Vec<f64>,
}

fn signal_var<'g>(g: &'g Graph<'g>, s: &PPGSignal) -> Var<'g> {
    g.constant(ArrayD::from_shape_vec(IxDyn(&[1, s.len()]), s.samples.clone()).unwrap())
}

/// Stage II objective for one `(clip, normalized signal)` pair.
pub fn sample_loss<'g>(
    model: &Stage2Model,
    g: &'g Graph<'g>,
    clip: &VideoClip,
    s_gt: &PPGSignal,
) -> Result<(Var<'g>, LossParts)> {
    let cfg = &model.config;
    let layers = model.codec.embed_layers;
    let x = g.constant(frontend::clip_input(clip));
    let s = signal_var(g, s_gt);

    let z_gt = codec::encode_tokens(g, "labeler", layers, &s);
    let q_gt = codec::nearest_items(
        z_gt.value().view().into_dimensionality().unwrap(),
        g.param("codebook")
            .value()
            .view()
            .into_dimensionality()
            .unwrap(),
    );

    let out = model.forward(g, &x)?;
    let phy = distill::loss_phy_var(
        &out.s_pred,
        &s,
        &cfg.weights,
        cfg.np_form,
        s_gt.fps,
        cfg.psd_band,
    )?;
    let codebook = g.param("codebook");
    let code = distill::code_query_var(&out.z_rppg, &codebook, &q_gt)?;

    let fs = out.f_sa.shape().to_vec();
    let f_ppg = distill::tile(&distill::eppg_forward(g, layers, &s), fs[2], fs[3]);
    let z_ppg = fuse_latent(g, cfg, layers, &f_ppg)?;
    let code_ppg = distill::code_query_var(&z_ppg, &codebook, &q_gt)?;
    let distill_loss = distill::sfd_loss_var(&out.f_sa, &f_ppg);

    let w = &cfg.weights;
    let total = phy
        .scale(w.alpha)
        .add(&code.add(&code_ppg).scale(w.beta))
        .add(&distill_loss);
    let parts = LossParts {
        phy: phy.item(),
        code: code.item(),
        code_ppg: code_ppg.item(),
        distill: distill_loss.item(),
    };
    Ok((total, parts))
}

fn check_pairs(model: &Stage2Model, data: &[(VideoClip, PPGSignal)]) -> Result<()> {
    ensure!(
        !data.is_empty(),
        Error::Invalid("empty training set".into())
    );
    for (v, s) in data {
        model.check_clip(v)?;
        ensure!(
            v.t() == s.len() && v.t() == model.codec.t,
            Error::Shape(format!(
                "clip of {} frames with {} samples (training length {})",
                v.t(),
                s.len(),
                model.codec.t
            ))
        );
    }
    Ok(())
}

/// Optimizes every non-frozen parameter on `(clip, signal)` pairs. Signals
/// are normalized per clip here.
pub fn train_stage2(
    data: &[(VideoClip, PPGSignal)],
    stage1: &Codec,
    stage1_sha256: String,
    config: &Stage2Config,
    seed: u64,
) -> Result<(Stage2Model, Stage2Log)> {
    let mut model = Stage2Model::init(stage1, stage1_sha256, config.clone(), seed)?;
    let log = train_model(&mut model, data, seed, None)?;
    Ok((model, log))
}

/// Continues training `model` in place. `max_steps` stops early after that
/// many optimizer steps.
pub fn train_model(
    model: &mut Stage2Model,
    data: &[(VideoClip, PPGSignal)],
    seed: u64,
    max_steps: Option<usize>,
) -> Result<Stage2Log> {
    check_pairs(model, data)?;
    let targets: Vec<PPGSignal> = data
        .iter()
        .map(|(_, s)| s.normalized())
        .collect::<Result<_>>()?;
    let cfg = model.config.clone();
    let mut adam = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Stage2Log::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch) {
            if max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut acc = GradAccumulator::new();
            let mut mean = LossParts::default();
            let mut total = 0.0;
            for &i in batch {
                let (grads, parts, t) = {
                    let g = Graph::with_frozen(&model.params, is_frozen);
                    let (loss, parts) = sample_loss(model, &g, &data[i].0, &targets[i])?;
                    let t = loss.item();
                    if !t.is_finite() {
                        return Err(Error::Diverged(format!(
                            "stage 2 loss is {t} at epoch {epoch}, step {step}: {parts:?}"
                        )));
                    }
                    (g.backward(&loss).params(), parts, t)
                };
                let k = batch.len() as f64;
                mean.phy += parts.phy / k;
                mean.code += parts.code / k;
                mean.code_ppg += parts.code_ppg / k;
                mean.distill += parts.distill / k;
                total += t / k;
                acc.add(grads);
            }
            let grads: BTreeMap<String, Array> = acc.mean();
            adam.step(&mut model.params, &grads);
            log.steps.push(StepLog {
                epoch,
                step,
                parts: mean,
                total,
            });
            epoch_total += total * batch.len() as f64;
            step += 1;
        }
        let e = epoch_total / data.len() as f64;
        info!("stage2 epoch {epoch}: mean loss {e:.5}");
        log.epoch_loss.push(e);
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged(
            "non-finite parameters after training".into(),
        ));
    }
    Ok(log)
}
