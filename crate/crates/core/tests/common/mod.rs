//! Finite-difference gradient checks shared by the loss tests and the
//! acceptance run.
#![allow(dead_code)]

use codephys::codec::{loss_feat_var, nearest_items};
use codephys::distill::{code_query_var, psd_var, sfd_loss_var, spectral_ce};
use codephys::nn::{self, NpForm};
use codephys_autograd::check::{numeric_grad, relative_error};
use codephys_autograd::{uniform, Array, Graph, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Relative error between the tape gradient of `f` at `x` and central
/// differences. `f` receives the input as a leaf (analytic pass) or as a
/// constant (probes).
pub fn check<F>(x: &Array, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<'g>, Var<'g>) -> Var<'g>,
{
    check_against(x, &f, &f)
}

/// Tape gradient of `f` against central differences of `reference`. Losses
/// with a stop-gradient need a reference that holds the stopped side fixed,
/// since finite differences move every occurrence of the input.
pub fn check_against<F, R>(x: &Array, f: F, reference: R) -> f64
where
    F: for<'g> Fn(&'g Graph<'g>, Var<'g>) -> Var<'g>,
    R: for<'g> Fn(&'g Graph<'g>, Var<'g>) -> Var<'g>,
{
    let g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&g, leaf.clone());
    let analytic = g.backward(&out).get_or_zeros(&leaf);
    let numeric = numeric_grad(x, FD_STEP, |probe| {
        let g = Graph::new();
        let c = g.constant(probe.clone());
        reference(&g, c).item()
    });
    relative_error(&analytic, &numeric, 1e-6)
}

fn signal(rng: &mut ChaCha8Rng, t: usize) -> Array {
    uniform(&[t], 1.0, rng)
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    uniform(&[r, c], 1.0, rng).into_dimensionality().unwrap()
}

/// Largest relative error of each loss over `points` random inputs.
pub fn gradient_suite(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("NP", 0.0f64),
        ("MSE", 0.0),
        ("SFD smooth-L1", 0.0),
        ("PSD-CE", 0.0),
        ("code CE", 0.0),
        ("commitment", 0.0),
    ];
    for _ in 0..points {
        let t = 64;
        let (x, y) = (signal(&mut rng, t), signal(&mut rng, t));
        let e = check(&x, |g, v| {
            nn::neg_pearson(&v, &g.constant(y.clone()), NpForm::OneMinusR)
        });
        worst[0].1 = worst[0].1.max(e);
        let e = check(&x, |g, v| nn::mse(&v, &g.constant(y.clone())));
        worst[1].1 = worst[1].1.max(e);

        // Differences of up to 3 cross the smooth-L1 knee at 1.
        let f_sa = uniform(&[3, 4, 2, 2], 1.5, &mut rng);
        let target = uniform(&[3, 4, 2, 2], 1.5, &mut rng);
        let e = check(&f_sa, |g, v| sfd_loss_var(&v, &g.constant(target.clone())));
        worst[2].1 = worst[2].1.max(e);

        let e = check(&x, |g, v| {
            let gt = psd_var(&g.constant(y.clone()), 30.0, [0.66, 3.0]).unwrap();
            spectral_ce(&psd_var(&v, 30.0, [0.66, 3.0]).unwrap(), &gt)
        });
        worst[3].1 = worst[3].1.max(e);

        let (m, n, d) = (6, 8, 4);
        let z = matrix(&mut rng, m, d);
        let c = matrix(&mut rng, n, d);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let e = check(&z.clone().into_dyn(), |g, v| {
            code_query_var(&v, &g.constant(c.clone().into_dyn()), &labels).unwrap()
        });
        worst[4].1 = worst[4].1.max(e);

        // Commitment and codebook terms with the assignment held fixed. In the
        // encoder output only the delta-weighted term moves; in the codebook
        // only the unweighted one does.
        let idx = nearest_items(z.view(), c.view());
        let zq = c.select(ndarray::Axis(0), &idx).into_dyn();
        let e1 = check_against(
            &z.clone().into_dyn(),
            |g, v| loss_feat_var(&v, &g.constant(zq.clone()), 0.25),
            |g, v| v.sub(&g.constant(zq.clone())).square().sum().scale(0.25),
        );
        let zc = z.clone().into_dyn();
        let e2 = check_against(
            &c.clone().into_dyn(),
            |g, v| loss_feat_var(&g.constant(zc.clone()), &v.gather_rows(&idx), 0.25),
            |g, v| {
                g.constant(zc.clone())
                    .sub(&v.gather_rows(&idx))
                    .square()
                    .sum()
            },
        );
        worst[5].1 = worst[5].1.max(e1).max(e2);
    }
    worst
}

/// Gradients reaching the stop-gradient side of each loss; all must be
/// exactly zero.
pub fn stop_gradient_leaks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_abs =
        |a: Option<&Array>| a.map_or(0.0, |a| a.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut out = Vec::new();

    let g = Graph::new();
    let f_sa = g.leaf(uniform(&[2, 4, 2, 2], 1.0, &mut rng));
    let target = g.leaf(uniform(&[2, 4, 2, 2], 1.0, &mut rng));
    let grads = g.backward(&sfd_loss_var(&f_sa, &target));
    out.push(("SFD target", max_abs(grads.get(&target))));

    let g = Graph::new();
    let pred = g.leaf(signal(&mut rng, 64));
    let gt = g.leaf(signal(&mut rng, 64));
    let ce = spectral_ce(
        &psd_var(&pred, 30.0, [0.66, 3.0]).unwrap(),
        &psd_var(&gt, 30.0, [0.66, 3.0]).unwrap().detach(),
    );
    let grads = g.backward(&ce);
    out.push(("PSD-CE reference", max_abs(grads.get(&gt))));

    let g = Graph::new();
    let z = g.leaf(uniform(&[5, 3], 1.0, &mut rng));
    let c = g.leaf(uniform(&[7, 3], 1.0, &mut rng));
    let grads = g.backward(&code_query_var(&z, &c, &[0, 1, 2, 3, 4]).unwrap());
    out.push(("code query codebook", max_abs(grads.get(&c))));

    let g = Graph::new();
    let z = g.leaf(uniform(&[5, 3], 1.0, &mut rng));
    let c = g.leaf(uniform(&[7, 3], 1.0, &mut rng));
    let idx = nearest_items(
        z.value().view().into_dimensionality().unwrap(),
        c.value().view().into_dimensionality().unwrap(),
    );
    let codebook_term = z.detach().sub(&c.gather_rows(&idx)).square().sum();
    out.push((
        "codebook term encoder",
        max_abs(g.backward(&codebook_term).get(&z)),
    ));
    let commit = z.sub(&c.gather_rows(&idx).detach()).square().sum();
    out.push(("commitment codebook", max_abs(g.backward(&commit).get(&c))));
    out
}
