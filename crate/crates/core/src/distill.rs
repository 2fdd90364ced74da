//! PPG feature extractor, soft feature distillation, and the Stage II losses.

use codephys_autograd::{Graph, ParamStore, Var};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Codebook, LatentSequence, QueryCoordinates};
use crate::error::{ensure, Error, Result};
use crate::frontend::FeatureVolume;
use crate::hr;
use crate::nn::{self, NpForm};
use crate::signal::{PPGSignal, DEGENERATE_VAR};

/// Probability floor inside the spectral cross-entropy.
pub const CE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the negative-Pearson term inside the physiological loss.
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.1,
            alpha: 2.0,
            beta: 0.1,
            delta: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.lambda, self.alpha, self.beta, self.delta]
                .iter()
                .all(|v| *v >= 0.0 && v.is_finite()),
            Error::Invalid("loss weights must be nonnegative".into())
        );
        Ok(())
    }
}

/// The PPG branch's distillation target.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTarget {
    /// `[D, T]`.
    pub f_ppg: Array2<f64>,
    /// `[D, T, H', W']`, `f_ppg` copied to every spatial cell.
    pub f_ppg_exp: Array4<f64>,
}

/// `eppg.*` starts as a copy of the Stage I encoder minus its stride-4 conv,
/// plus a fresh 1x1 projection from K to D channels.
pub fn init_eppg(
    store: &mut ParamStore,
    stage1: &ParamStore,
    cfg: &codec::CodecConfig,
    rng: &mut ChaCha8Rng,
) {
    for (name, a) in stage1.iter() {
        if let Some(rest) = name.strip_prefix("encoder.") {
            if !rest.starts_with("out.") {
                store.insert(format!("eppg.{rest}"), a.clone());
            }
        }
    }
    nn::init_conv(store, "eppg.proj", &[cfg.d, cfg.k, 1], Some(cfg.d), rng);
}

/// `[1, T]` signal to `[D, T]` features.
pub fn eppg_forward<'g>(g: &'g Graph<'g>, layers: usize, x: &Var<'g>) -> Var<'g> {
    let h = codec::encoder_trunk(g, "eppg", layers, x);
    nn::conv1d(g, "eppg.proj", &h, 1, 0)
}

/// Tiles `[D, T]` to `[D, T, h, w]`.
pub fn tile<'g>(f: &Var<'g>, h: usize, w: usize) -> Var<'g> {
    let s = f.shape().to_vec();
    f.reshape(&[s[0], s[1], 1, 1])
        .broadcast_to(&[s[0], s[1], h, w])
}

/// The signal is used as given (callers normalize), so an all-zero signal
/// with zero biases yields an all-zero target.
pub fn ppg_feature_target(
    s: &PPGSignal,
    params: &ParamStore,
    layers: usize,
    h: usize,
    w: usize,
) -> DistillTarget {
    let g = Graph::inference(params);
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, s.len()]), s.samples.clone()).unwrap());
    let f = eppg_forward(&g, layers, &x);
    let exp = tile(&f, h, w);
    DistillTarget {
        f_ppg: f.value().clone().into_dimensionality().unwrap(),
        f_ppg_exp: exp.value().clone().into_dimensionality().unwrap(),
    }
}

/// Sum over spatial cells of the per-cell mean smooth-L1 (threshold 1)
/// between `f_sa` and the detached target.
pub fn sfd_loss_var<'g>(f_sa: &Var<'g>, target: &Var<'g>) -> Var<'g> {
    let s = f_sa.shape();
    let per_cell = (s[0] * s[1]) as f64;
    f_sa.sub(&target.detach())
        .smooth_l1(1.0)
        .sum()
        .scale(1.0 / per_cell)
}

pub fn sfd_loss(f_sa: &FeatureVolume, target: &DistillTarget) -> Result<f64> {
    ensure!(
        f_sa.data.shape() == target.f_ppg_exp.shape(),
        Error::Shape(format!(
            "feature {:?} vs target {:?}",
            f_sa.data.shape(),
            target.f_ppg_exp.shape()
        ))
    );
    let g = Graph::new();
    let a = g.constant(f_sa.data.clone().into_dyn());
    let b = g.constant(target.f_ppg_exp.clone().into_dyn());
    Ok(sfd_loss_var(&a, &b).item())
}

/// Differentiable band-limited periodogram (transform length T), normalized
/// to sum 1.
pub fn psd_var<'g>(s: &Var<'g>, fps: f64, band: [f64; 2]) -> Result<Var<'g>> {
    let t = s.value().len();
    let freqs = hr::band_bins(fps, t, band)?;
    let (cos, sin) = hr::dft_basis(&freqs, t, fps);
    let g = s.graph();
    let x = s.reshape(&[t, 1]);
    let x = x.sub(&x.mean());
    ensure!(
        x.square().mean().item() > DEGENERATE_VAR,
        Error::DegenerateSignal
    );
    let re = g.constant(cos.into_dyn()).matmul(&x);
    let im = g.constant(sin.into_dyn()).matmul(&x);
    let power = re.square().add(&im.square()).reshape(&[freqs.len()]);
    Ok(power.div(&power.sum()))
}

/// `-sum p_gt * ln(max(p_pred, 1e-8))`.
pub fn spectral_ce<'g>(p_pred: &Var<'g>, p_gt: &Var<'g>) -> Var<'g> {
    p_gt.mul(&p_pred.clamp_min(CE_FLOOR).ln()).sum().neg()
}

fn check_pair(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    ensure!(
        a.value().len() == b.value().len(),
        Error::Shape(format!(
            "signals of {} and {} samples",
            a.value().len(),
            b.value().len()
        ))
    );
    for v in [a, b] {
        let x = v.value();
        let m = x.mean().unwrap();
        let var = x.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / x.len() as f64;
        ensure!(var > DEGENERATE_VAR, Error::DegenerateSignal);
    }
    Ok(())
}

/// `lambda * NP(s_pred, s_gt) + CE(PSD(s_pred), PSD(s_gt))`.
pub fn loss_phy_var<'g>(
    s_pred: &Var<'g>,
    s_gt: &Var<'g>,
    w: &LossWeights,
    np_form: NpForm,
    fps: f64,
    band: [f64; 2],
) -> Result<Var<'g>> {
    check_pair(s_pred, s_gt)?;
    let np = nn::neg_pearson(s_pred, s_gt, np_form);
    let ce = spectral_ce(
        &psd_var(s_pred, fps, band)?,
        &psd_var(s_gt, fps, band)?.detach(),
    );
    Ok(np.scale(w.lambda).add(&ce))
}

pub fn loss_phy(
    s_pred: &PPGSignal,
    s_gt: &PPGSignal,
    w: &LossWeights,
    band: [f64; 2],
) -> Result<f64> {
    let g = Graph::new();
    let a =
        g.constant(ArrayD::from_shape_vec(IxDyn(&[s_pred.len()]), s_pred.samples.clone()).unwrap());
    let b = g.constant(ArrayD::from_shape_vec(IxDyn(&[s_gt.len()]), s_gt.samples.clone()).unwrap());
    Ok(loss_phy_var(&a, &b, w, NpForm::OneMinusR, s_gt.fps, band)?.item())
}

/// Code-query loss: mean over tokens of the cross-entropy between
/// `softmax(-||z_i - c_k||^2)` and `q_gt`, plus the mean over tokens of
/// `||z_i - sg(c_{q_hat(i)})||^2` where `q_hat` is `z`'s own nearest item.
pub fn code_query_var<'g>(z: &Var<'g>, codebook: &Var<'g>, q_gt: &[usize]) -> Result<Var<'g>> {
    let (m, n) = (z.shape()[0], codebook.shape()[0]);
    ensure!(
        q_gt.len() == m,
        Error::Shape(format!("{} labels for {m} tokens", q_gt.len()))
    );
    ensure!(
        q_gt.iter().all(|&k| k < n),
        Error::Invalid(format!("query label out of range for {n} items"))
    );
    let c = codebook.detach();
    let cross = z.matmul(&c.permute(&[1, 0])).scale(2.0);
    let z_sq = z.square().sum_axis(1).reshape(&[m, 1]);
    let c_sq = c.square().sum_axis(1).reshape(&[1, n]);
    let logits = cross.sub(&z_sq).sub(&c_sq);
    let ce = logits.cross_entropy_rows(q_gt);
    let q_hat = codec::nearest_items(
        z.value().view().into_dimensionality().unwrap(),
        c.value().view().into_dimensionality().unwrap(),
    );
    let commit = z
        .sub(&c.gather_rows(&q_hat))
        .square()
        .sum()
        .scale(1.0 / m as f64);
    Ok(ce.add(&commit))
}

pub fn loss_code_query(z: &LatentSequence, q_gt: &QueryCoordinates, c: &Codebook) -> Result<f64> {
    ensure!(
        z.d() == c.d(),
        Error::Shape(format!("token width {} vs codebook width {}", z.d(), c.d()))
    );
    let g = Graph::new();
    let zv = g.constant(z.tokens.clone().into_dyn());
    let cv = g.constant(c.items.clone().into_dyn());
    Ok(code_query_var(&zv, &cv, &q_gt.assignment)?.item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub phy: f64,
    pub code: f64,
    pub code_ppg: f64,
    pub distill: f64,
}

/// `alpha * L_phy + beta * (L_code + L_code_ppg) + L_distill`.
pub fn overall_loss(p: &LossParts, w: &LossWeights) -> f64 {
    w.alpha * p.phy + w.beta * (p.code + p.code_ppg) + p.distill
}
