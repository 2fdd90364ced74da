use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::graph::{Array, Var};
use crate::kernels::{
    col2im1d, col2im3d, conv1d_out_len, deform_col2im3d, deform_im2col3d, im2col1d, im2col3d,
    Conv1dGeom, Conv3dGeom,
};

const CHUNK_TARGET: usize = 1 << 20;

fn slice_of(a: &Array) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn mat<'a>(data: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn mat_mut<'a>(data: &'a mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

/// Sums a `[C, P]` buffer over P.
fn row_sums(data: &[f64], rows: usize) -> Array {
    let cols = data.len() / rows.max(1);
    let v: Vec<f64> = (0..rows)
        .map(|r| data[r * cols..(r + 1) * cols].iter().sum())
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[rows]), v).unwrap()
}

impl<'g> Var<'g> {
    /// 1-D convolution. `self` is `[C_in, L]`, `weight` is `[C_out, C_in, k]`,
    /// optional `bias` is `[C_out]`.
    pub fn conv1d(
        &self,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g> {
        let (cin, len) = (self.shape()[0], self.shape()[1]);
        let ws = weight.shape().to_vec();
        assert_eq!(self.shape().len(), 2, "conv1d input must be [C, L]");
        assert_eq!(ws[1], cin, "conv1d channel mismatch");
        let (cout, k) = (ws[0], ws[2]);
        let out_len = conv1d_out_len(len, k, stride, pad);
        let geom = Conv1dGeom {
            channels: cin,
            len,
            k,
            stride,
            pad,
            out_len,
        };
        let mut cols = vec![0.0; cin * k * out_len];
        im2col1d(slice_of(&self.value), geom, &mut cols);
        let mut out = vec![0.0; cout * out_len];
        general_mat_mul(
            1.0,
            &mat(slice_of(&weight.value), cout, cin * k),
            &mat(&cols, cin * k, out_len),
            0.0,
            &mut mat_mut(&mut out, cout, out_len),
        );
        if let Some(b) = bias {
            for (o, bv) in b.value().iter().enumerate() {
                out[o * out_len..(o + 1) * out_len]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, out_len]), out).unwrap();
        let x = Arc::clone(&self.value);
        let w = Arc::clone(&weight.value);
        let backward = move |g: &Array| {
            let gs = slice_of(g);
            let mut cols = vec![0.0; cin * k * out_len];
            im2col1d(slice_of(&x), geom, &mut cols);
            let mut gw = vec![0.0; cout * cin * k];
            general_mat_mul(
                1.0,
                &mat(gs, cout, out_len),
                &mat(&cols, cin * k, out_len).t(),
                0.0,
                &mut mat_mut(&mut gw, cout, cin * k),
            );
            let mut gcols = vec![0.0; cin * k * out_len];
            general_mat_mul(
                1.0,
                &mat(slice_of(&w), cout, cin * k).t(),
                &mat(gs, cout, out_len),
                0.0,
                &mut mat_mut(&mut gcols, cin * k, out_len),
            );
            let mut gx = vec![0.0; cin * len];
            col2im1d(&gcols, geom, &mut gx);
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[cin, len]), gx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[cout, cin, k]), gw).unwrap()),
                Some(row_sums(gs, cout)),
            ]
        };
        match bias {
            Some(b) => self.graph.record(value, &[self, weight, b], backward),
            None => self.graph.record(value, &[self, weight], move |g| {
                let mut v = backward(g);
                v.pop();
                v
            }),
        }
    }

    /// Transposed 1-D convolution (the adjoint of [`Var::conv1d`]). `self` is
    /// `[C_in, L]`, `weight` is `[C_in, C_out, k]`; output length is
    /// `(L - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose1d(
        &self,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var<'g> {
        assert_eq!(
            self.shape().len(),
            2,
            "conv_transpose1d input must be [C, L]"
        );
        let (cin, len) = (self.shape()[0], self.shape()[1]);
        let ws = weight.shape().to_vec();
        assert_eq!(ws[0], cin, "conv_transpose1d channel mismatch");
        assert!(
            output_pad < stride,
            "output padding must be below the stride"
        );
        let (cout, k) = (ws[1], ws[2]);
        let out_len = (len - 1) * stride + k + output_pad - 2 * pad;
        // The forward conv that this op is the adjoint of maps [C_out, out_len]
        // to [C_in, len].
        let geom = Conv1dGeom {
            channels: cout,
            len: out_len,
            k,
            stride,
            pad,
            out_len: len,
        };
        debug_assert!(conv1d_out_len(out_len, k, stride, pad) >= len);
        let mut cols = vec![0.0; cout * k * len];
        general_mat_mul(
            1.0,
            &mat(slice_of(&weight.value), cin, cout * k).t(),
            &mat(slice_of(&self.value), cin, len),
            0.0,
            &mut mat_mut(&mut cols, cout * k, len),
        );
        let mut out = vec![0.0; cout * out_len];
        col2im1d(&cols, geom, &mut out);
        if let Some(b) = bias {
            for (o, bv) in b.value().iter().enumerate() {
                out[o * out_len..(o + 1) * out_len]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, out_len]), out).unwrap();
        let x = Arc::clone(&self.value);
        let w = Arc::clone(&weight.value);
        let backward = move |g: &Array| {
            let gs = slice_of(g);
            let mut gcols = vec![0.0; cout * k * len];
            im2col1d(gs, geom, &mut gcols);
            let mut gx = vec![0.0; cin * len];
            general_mat_mul(
                1.0,
                &mat(slice_of(&w), cin, cout * k),
                &mat(&gcols, cout * k, len),
                0.0,
                &mut mat_mut(&mut gx, cin, len),
            );
            let mut gw = vec![0.0; cin * cout * k];
            general_mat_mul(
                1.0,
                &mat(slice_of(&x), cin, len),
                &mat(&gcols, cout * k, len).t(),
                0.0,
                &mut mat_mut(&mut gw, cin, cout * k),
            );
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[cin, len]), gx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[cin, cout, k]), gw).unwrap()),
                Some(row_sums(gs, cout)),
            ]
        };
        match bias {
            Some(b) => self.graph.record(value, &[self, weight, b], backward),
            None => self.graph.record(value, &[self, weight], move |g| {
                let mut v = backward(g);
                v.pop();
                v
            }),
        }
    }

    /// Stride-1 3-D convolution. `self` is `[C_in, T, H, W]`, `weight` is
    /// `[C_out, C_in, kt, kh, kw]`, `pad` is per-axis zero padding.
    pub fn conv3d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, pad: [usize; 3]) -> Var<'g> {
        let (geom, cout) = conv3d_geom(self.shape(), weight.shape(), pad);
        let out = conv3d_forward(
            slice_of(&self.value),
            slice_of(&weight.value),
            bias.map(|b| slice_of(b.value())),
            &geom,
            cout,
            |xs, t0, t1, cols| im2col3d(xs, &geom, t0, t1, cols),
        );
        let [to, ho, wo] = geom.output;
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, to, ho, wo]), out).unwrap();
        let x = Arc::clone(&self.value);
        let w = Arc::clone(&weight.value);
        let xshape = self.shape().to_vec();
        let wshape = weight.shape().to_vec();
        let backward = move |g: &Array| {
            let gs = slice_of(g);
            let xs = slice_of(&x);
            let mut gx = vec![0.0; xs.len()];
            let gw = conv3d_backward(
                gs,
                slice_of(&w),
                &geom,
                cout,
                |t0, t1, cols| im2col3d(xs, &geom, t0, t1, cols),
                |t0, t1, gcols| col2im3d(gcols, &geom, t0, t1, &mut gx),
            );
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&xshape), gx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&wshape), gw).unwrap()),
                Some(row_sums(gs, cout)),
            ]
        };
        match bias {
            Some(b) => self.graph.record(value, &[self, weight, b], backward),
            None => self.graph.record(value, &[self, weight], move |g| {
                let mut v = backward(g);
                v.pop();
                v
            }),
        }
    }

    /// Deformable stride-1 3-D convolution: every tap samples the input at its
    /// regular grid position plus a learned `(dt, dh, dw)` offset, with
    /// trilinear interpolation and zeros outside the volume. `offsets` is
    /// `[3 * kt * kh * kw, To, Ho, Wo]`.
    pub fn deform_conv3d(
        &self,
        offsets: &Var<'g>,
        weight: &Var<'g>,
        bias: Option<&Var<'g>>,
        pad: [usize; 3],
    ) -> Var<'g> {
        let (geom, cout) = conv3d_geom(self.shape(), weight.shape(), pad);
        let [to, ho, wo] = geom.output;
        assert_eq!(
            offsets.shape(),
            [3 * geom.taps(), to, ho, wo],
            "deform_conv3d offset shape"
        );
        let out = conv3d_forward(
            slice_of(&self.value),
            slice_of(&weight.value),
            bias.map(|b| slice_of(b.value())),
            &geom,
            cout,
            |xs, t0, t1, cols| deform_im2col3d(xs, slice_of(offsets.value()), &geom, t0, t1, cols),
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, to, ho, wo]), out).unwrap();
        let x = Arc::clone(&self.value);
        let off = Arc::clone(&offsets.value);
        let w = Arc::clone(&weight.value);
        let xshape = self.shape().to_vec();
        let oshape = offsets.shape().to_vec();
        let wshape = weight.shape().to_vec();
        let backward = move |g: &Array| {
            let gs = slice_of(g);
            let xs = slice_of(&x);
            let offs = slice_of(&off);
            let mut gx = vec![0.0; xs.len()];
            let mut goff = vec![0.0; offs.len()];
            let gw = conv3d_backward(
                gs,
                slice_of(&w),
                &geom,
                cout,
                |t0, t1, cols| deform_im2col3d(xs, offs, &geom, t0, t1, cols),
                |t0, t1, gcols| deform_col2im3d(gcols, xs, offs, &geom, t0, t1, &mut gx, &mut goff),
            );
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&xshape), gx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&oshape), goff).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&wshape), gw).unwrap()),
                Some(row_sums(gs, cout)),
            ]
        };
        match bias {
            Some(b) => self
                .graph
                .record(value, &[self, offsets, weight, b], backward),
            None => self
                .graph
                .record(value, &[self, offsets, weight], move |g| {
                    let mut v = backward(g);
                    v.pop();
                    v
                }),
        }
    }

    /// 1x2x2 max pooling with stride 2 over the two trailing axes of a
    /// `[C, T, H, W]` value (odd trailing rows are dropped).
    pub fn max_pool_hw2(&self) -> Var<'g> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "max_pool_hw2 needs [C, T, H, W]");
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = slice_of(&self.value);
        let n = c * t * ho * wo;
        let mut out = vec![0.0; n];
        let mut arg = vec![0usize; n];
        for ct in 0..c * t {
            let plane = &xs[ct * h * w..(ct + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (ct * ho + i) * wo + j;
                    out[o] = best;
                    arg[o] = ct * h * w + best_idx;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, t, ho, wo]), out).unwrap();
        self.graph.record(value, &[self], move |g| {
            let mut gx = vec![0.0; c * t * h * w];
            for (o, &gv) in slice_of(g).iter().enumerate() {
                gx[arg[o]] += gv;
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&s), gx).unwrap())]
        })
    }
}

fn conv3d_geom(xshape: &[usize], wshape: &[usize], pad: [usize; 3]) -> (Conv3dGeom, usize) {
    assert_eq!(xshape.len(), 4, "conv3d input must be [C, T, H, W]");
    assert_eq!(wshape.len(), 5, "conv3d weight must be [O, C, kt, kh, kw]");
    assert_eq!(wshape[1], xshape[0], "conv3d channel mismatch");
    let geom = Conv3dGeom::new(
        xshape[0],
        [xshape[1], xshape[2], xshape[3]],
        [wshape[2], wshape[3], wshape[4]],
        pad,
    );
    (geom, wshape[0])
}

fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    geom: &Conv3dGeom,
    cout: usize,
    fill_cols: impl Fn(&[f64], usize, usize, &mut [f64]),
) -> Vec<f64> {
    let [to, ho, wo] = geom.output;
    let plane = ho * wo;
    let rows = geom.rows();
    let chunk = geom.chunk_frames(CHUNK_TARGET);
    let mut out = vec![0.0; cout * to * plane];
    let mut cols = vec![0.0; rows * chunk * plane];
    let mut tmp = vec![0.0; cout * chunk * plane];
    let wm = mat(w, cout, rows);
    let mut t0 = 0;
    while t0 < to {
        let t1 = (t0 + chunk).min(to);
        let ncols = (t1 - t0) * plane;
        fill_cols(x, t0, t1, &mut cols[..rows * ncols]);
        general_mat_mul(
            1.0,
            &wm,
            &mat(&cols[..rows * ncols], rows, ncols),
            0.0,
            &mut mat_mut(&mut tmp[..cout * ncols], cout, ncols),
        );
        for o in 0..cout {
            let b = bias.map_or(0.0, |b| b[o]);
            let dst = &mut out[o * to * plane + t0 * plane..o * to * plane + t1 * plane];
            for (d, s) in dst.iter_mut().zip(&tmp[o * ncols..(o + 1) * ncols]) {
                *d = s + b;
            }
        }
        t0 = t1;
    }
    out
}

/// Returns the weight gradient; hands column gradients to `scatter`.
fn conv3d_backward(
    g: &[f64],
    w: &[f64],
    geom: &Conv3dGeom,
    cout: usize,
    fill_cols: impl Fn(usize, usize, &mut [f64]),
    mut scatter: impl FnMut(usize, usize, &[f64]),
) -> Vec<f64> {
    let [to, ho, wo] = geom.output;
    let plane = ho * wo;
    let rows = geom.rows();
    let chunk = geom.chunk_frames(CHUNK_TARGET);
    let mut gw = vec![0.0; cout * rows];
    let mut cols = vec![0.0; rows * chunk * plane];
    let mut gcols = vec![0.0; rows * chunk * plane];
    let mut gchunk = vec![0.0; cout * chunk * plane];
    let wm = mat(w, cout, rows);
    let mut t0 = 0;
    while t0 < to {
        let t1 = (t0 + chunk).min(to);
        let ncols = (t1 - t0) * plane;
        for o in 0..cout {
            gchunk[o * ncols..(o + 1) * ncols]
                .copy_from_slice(&g[o * to * plane + t0 * plane..o * to * plane + t1 * plane]);
        }
        let gm = mat(&gchunk[..cout * ncols], cout, ncols);
        fill_cols(t0, t1, &mut cols[..rows * ncols]);
        general_mat_mul(
            1.0,
            &gm,
            &mat(&cols[..rows * ncols], rows, ncols).t(),
            1.0,
            &mut mat_mut(&mut gw, cout, rows),
        );
        general_mat_mul(
            1.0,
            &wm.t(),
            &gm,
            0.0,
            &mut mat_mut(&mut gcols[..rows * ncols], rows, ncols),
        );
        scatter(t0, t1, &gcols[..rows * ncols]);
        t0 = t1;
    }
    gw
}
