use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, Ix2, IxDyn};

use crate::graph::{Array, Var};

pub(crate) fn as_matrix(a: &Array) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a matrix, got shape {:?}", a.shape()))
}

impl<'g> Var<'g> {
    /// Matrix product of two 2-D values.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let value = as_matrix(&self.value)
            .dot(&as_matrix(&other.value))
            .into_dyn();
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&other.value));
        self.graph.record(value, &[self, other], move |g| {
            let g2 = as_matrix(g);
            vec![
                Some(g2.dot(&as_matrix(&b).t()).into_dyn()),
                Some(as_matrix(&a).t().dot(&g2).into_dyn()),
            ]
        })
    }

    /// Layer normalization over axis 0 (channels) at every position of the
    /// remaining axes, with per-channel affine `gamma`, `beta` of shape `[C]`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
        let shape = self.shape().to_vec();
        let c = shape[0];
        assert_eq!(gamma.shape(), [c], "layer_norm gamma shape");
        assert_eq!(beta.shape(), [c], "layer_norm beta shape");
        let p = self.value.len() / c.max(1);
        let x = self
            .value
            .view()
            .into_shape_with_order((c, p))
            .expect("layer_norm view");
        let mut xhat = Array2::<f64>::zeros((c, p));
        let mut inv_std = vec![0.0; p];
        for j in 0..p {
            let col = x.column(j);
            let mean = col.sum() / c as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[j] = is;
            for i in 0..c {
                xhat[[i, j]] = (x[[i, j]] - mean) * is;
            }
        }
        let gvals = gamma.value().iter().copied().collect::<Vec<_>>();
        let bvals = beta.value().iter().copied().collect::<Vec<_>>();
        let mut y = xhat.clone();
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * gvals[i] + bvals[i]);
        }
        let value = y
            .into_shape_with_order(IxDyn(&shape))
            .expect("layer_norm reshape");
        self.graph.record(value, &[self, gamma, beta], move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((c, p))
                .expect("ln grad view");
            let mut gx = Array2::<f64>::zeros((c, p));
            let mut ggamma = ArrayD::<f64>::zeros(IxDyn(&[c]));
            let mut gbeta = ArrayD::<f64>::zeros(IxDyn(&[c]));
            for j in 0..p {
                let mut mean_gh = 0.0;
                let mut mean_ghx = 0.0;
                for i in 0..c {
                    let gh = g2[[i, j]] * gvals[i];
                    mean_gh += gh;
                    mean_ghx += gh * xhat[[i, j]];
                    ggamma[i] += g2[[i, j]] * xhat[[i, j]];
                    gbeta[i] += g2[[i, j]];
                }
                mean_gh /= c as f64;
                mean_ghx /= c as f64;
                for i in 0..c {
                    let gh = g2[[i, j]] * gvals[i];
                    gx[[i, j]] = inv_std[j] * (gh - mean_gh - xhat[[i, j]] * mean_ghx);
                }
            }
            vec![
                Some(gx.into_shape_with_order(IxDyn(&shape)).expect("ln gx")),
                Some(ggamma),
                Some(gbeta),
            ]
        })
    }

    /// Mean over rows of `-log softmax(row)[label]` for a `[M, N]` logit matrix.
    ///
    /// # Panics
    /// Panics if a label is out of range or the label count differs from M.
    pub fn cross_entropy_rows(&self, labels: &[usize]) -> Var<'g> {
        let l = as_matrix(&self.value);
        let (m, n) = l.dim();
        assert_eq!(labels.len(), m, "one label per row");
        let mut probs = Array2::<f64>::zeros((m, n));
        let mut total = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            assert!(lab < n, "label {lab} out of range for {n} classes");
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[lab];
            for k in 0..n {
                probs[[i, k]] = (row[k] - lse).exp();
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / m as f64);
        let labels = labels.to_vec();
        self.graph.record(value, &[self], move |g| {
            let s = *g.iter().next().unwrap() / m as f64;
            let mut gl = probs.clone();
            for (i, &lab) in labels.iter().enumerate() {
                gl[[i, lab]] -= 1.0;
            }
            vec![Some((gl * s).into_dyn())]
        })
    }
}
