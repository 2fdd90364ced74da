//! Raw-slice im2col/col2im kernels. Layouts are row-major: 1-D inputs are
//! `[C, L]`, 3-D inputs are `[C, T, H, W]`. Column matrices are
//! `[C * taps, positions]` with the channel-major tap order that matches a
//! weight tensor reshaped to `[C_out, C * taps]`.

/// Output length of a strided 1-D convolution.
pub fn conv1d_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        len + 2 * pad >= k,
        "kernel {k} longer than padded input {len}+2*{pad}"
    );
    (len + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub channels: usize,
    pub len: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

pub fn im2col1d(x: &[f64], g: Conv1dGeom, cols: &mut [f64]) {
    let Conv1dGeom {
        channels,
        len,
        k,
        stride,
        pad,
        out_len,
    } = g;
    debug_assert_eq!(x.len(), channels * len);
    debug_assert_eq!(cols.len(), channels * k * out_len);
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        for j in 0..k {
            let row = &mut cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (o, slot) in row.iter_mut().enumerate() {
                let i = (o * stride + j) as isize - pad as isize;
                *slot = if i >= 0 && (i as usize) < len {
                    xc[i as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`im2col1d`]: accumulates `cols` into `x`.
pub fn col2im1d(cols: &[f64], g: Conv1dGeom, x: &mut [f64]) {
    let Conv1dGeom {
        channels,
        len,
        k,
        stride,
        pad,
        out_len,
    } = g;
    for c in 0..channels {
        for j in 0..k {
            let row = &cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (o, &v) in row.iter().enumerate() {
                let i = (o * stride + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < len {
                    x[c * len + i as usize] += v;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    /// Stride-1 geometry; output size is `input + 2 * pad - kernel + 1`.
    pub fn new(channels: usize, input: [usize; 3], kernel: [usize; 3], pad: [usize; 3]) -> Self {
        let mut output = [0; 3];
        for d in 0..3 {
            assert!(
                input[d] + 2 * pad[d] >= kernel[d],
                "kernel {:?} larger than padded input {:?}",
                kernel,
                input
            );
            output[d] = input[d] + 2 * pad[d] - kernel[d] + 1;
        }
        Conv3dGeom {
            channels,
            input,
            kernel,
            pad,
            output,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.channels * self.taps()
    }

    pub fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output frames per chunk so a column buffer stays near `target` entries.
    pub fn chunk_frames(&self, target: usize) -> usize {
        (target / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0].max(1))
    }
}

/// Columns for output frames `t0..t1` of a stride-1 3-D convolution.
pub fn im2col3d(x: &[f64], g: &Conv3dGeom, t0: usize, t1: usize, cols: &mut [f64]) {
    let [ti, hi, wi] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.pad;
    let [_, ho, wo] = g.output;
    let ncols = (t1 - t0) * ho * wo;
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for a in 0..kt {
            for b in 0..kh {
                for k in 0..kw {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    row += 1;
                    // Valid output columns for this tap along w.
                    let w_lo = pw.saturating_sub(k).min(wo);
                    let w_hi = (wi + pw).saturating_sub(k).min(wo).max(w_lo);
                    for to in t0..t1 {
                        let tin = (to + a) as isize - pt as isize;
                        let base = (to - t0) * ho * wo;
                        if tin < 0 || tin as usize >= ti {
                            dst[base..base + ho * wo].fill(0.0);
                            continue;
                        }
                        let xt = &xc[tin as usize * hi * wi..(tin as usize + 1) * hi * wi];
                        for oh in 0..ho {
                            let hin = (oh + b) as isize - ph as isize;
                            let d = &mut dst[base + oh * wo..base + (oh + 1) * wo];
                            if hin < 0 || hin as usize >= hi {
                                d.fill(0.0);
                                continue;
                            }
                            let xr = &xt[hin as usize * wi..(hin as usize + 1) * wi];
                            d[..w_lo].fill(0.0);
                            d[w_hi..].fill(0.0);
                            let src0 = w_lo + k - pw;
                            d[w_lo..w_hi].copy_from_slice(&xr[src0..src0 + (w_hi - w_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3d`]: accumulates `cols` into `x`.
pub fn col2im3d(cols: &[f64], g: &Conv3dGeom, t0: usize, t1: usize, x: &mut [f64]) {
    let [ti, hi, wi] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.pad;
    let [_, ho, wo] = g.output;
    let ncols = (t1 - t0) * ho * wo;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for a in 0..kt {
            for b in 0..kh {
                for k in 0..kw {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    row += 1;
                    let w_lo = pw.saturating_sub(k).min(wo);
                    let w_hi = (wi + pw).saturating_sub(k).min(wo).max(w_lo);
                    for to in t0..t1 {
                        let tin = (to + a) as isize - pt as isize;
                        if tin < 0 || tin as usize >= ti {
                            continue;
                        }
                        let base = (to - t0) * ho * wo;
                        for oh in 0..ho {
                            let hin = (oh + b) as isize - ph as isize;
                            if hin < 0 || hin as usize >= hi {
                                continue;
                            }
                            let off = tin as usize * hi * wi + hin as usize * wi;
                            let s = &src[base + oh * wo + w_lo..base + oh * wo + w_hi];
                            let src0 = w_lo + k - pw;
                            for (dst, &v) in xc[off + src0..off + src0 + s.len()].iter_mut().zip(s)
                            {
                                *dst += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Trilinear sample of one `[T, H, W]` channel at a fractional position,
/// zero outside the volume. Returns the value and its partial derivatives
/// with respect to the three coordinates.
pub fn trilinear(x: &[f64], dims: [usize; 3], pos: [f64; 3]) -> (f64, [f64; 3]) {
    let [t, h, w] = dims;
    let base = [pos[0].floor(), pos[1].floor(), pos[2].floor()];
    let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
    let (bt, bh, bw) = (base[0] as isize, base[1] as isize, base[2] as isize);
    let mut val = 0.0;
    let mut grad = [0.0; 3];
    for i in 0..2 {
        let ti = bt + i;
        if ti < 0 || ti >= t as isize {
            continue;
        }
        let (wt, dt) = if i == 0 {
            (1.0 - frac[0], -1.0)
        } else {
            (frac[0], 1.0)
        };
        for j in 0..2 {
            let hj = bh + j;
            if hj < 0 || hj >= h as isize {
                continue;
            }
            let (wh, dh) = if j == 0 {
                (1.0 - frac[1], -1.0)
            } else {
                (frac[1], 1.0)
            };
            for k in 0..2 {
                let wk = bw + k;
                if wk < 0 || wk >= w as isize {
                    continue;
                }
                let (ww, dw) = if k == 0 {
                    (1.0 - frac[2], -1.0)
                } else {
                    (frac[2], 1.0)
                };
                let v = x[(ti as usize * h + hj as usize) * w + wk as usize];
                val += wt * wh * ww * v;
                grad[0] += dt * wh * ww * v;
                grad[1] += wt * dh * ww * v;
                grad[2] += wt * wh * dw * v;
            }
        }
    }
    (val, grad)
}

/// Adjoint of [`trilinear`] with respect to the volume: scatters `g` onto the
/// eight corners.
pub fn trilinear_scatter(x: &mut [f64], dims: [usize; 3], pos: [f64; 3], g: f64) {
    let [t, h, w] = dims;
    let base = [pos[0].floor(), pos[1].floor(), pos[2].floor()];
    let frac = [pos[0] - base[0], pos[1] - base[1], pos[2] - base[2]];
    let (bt, bh, bw) = (base[0] as isize, base[1] as isize, base[2] as isize);
    for i in 0..2 {
        let ti = bt + i;
        if ti < 0 || ti >= t as isize {
            continue;
        }
        let wt = if i == 0 { 1.0 - frac[0] } else { frac[0] };
        for j in 0..2 {
            let hj = bh + j;
            if hj < 0 || hj >= h as isize {
                continue;
            }
            let wh = if j == 0 { 1.0 - frac[1] } else { frac[1] };
            for k in 0..2 {
                let wk = bw + k;
                if wk < 0 || wk >= w as isize {
                    continue;
                }
                let ww = if k == 0 { 1.0 - frac[2] } else { frac[2] };
                x[(ti as usize * h + hj as usize) * w + wk as usize] += g * wt * wh * ww;
            }
        }
    }
}

/// Sampling position of tap `(a, b, k)` for output `(to, oh, ow)` shifted by
/// `off`.
#[inline]
fn deform_pos(g: &Conv3dGeom, tap: [usize; 3], out: [usize; 3], off: [f64; 3]) -> [f64; 3] {
    [
        (out[0] + tap[0]) as f64 - g.pad[0] as f64 + off[0],
        (out[1] + tap[1]) as f64 - g.pad[1] as f64 + off[1],
        (out[2] + tap[2]) as f64 - g.pad[2] as f64 + off[2],
    ]
}

/// Deformable columns for output frames `t0..t1`. `offsets` is
/// `[3 * taps, To, Ho, Wo]` holding `(dt, dh, dw)` per tap.
pub fn deform_im2col3d(
    x: &[f64],
    offsets: &[f64],
    g: &Conv3dGeom,
    t0: usize,
    t1: usize,
    cols: &mut [f64],
) {
    let dims = g.input;
    let vol = dims.iter().product::<usize>();
    let [to_n, ho, wo] = g.output;
    let out_vol = to_n * ho * wo;
    let ncols = (t1 - t0) * ho * wo;
    let taps = g.taps();
    for c in 0..g.channels {
        let xc = &x[c * vol..(c + 1) * vol];
        for tap in 0..taps {
            let tap3 = tap_index(g.kernel, tap);
            let row = &mut cols[(c * taps + tap) * ncols..(c * taps + tap + 1) * ncols];
            for to in t0..t1 {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let p = (to * ho + oh) * wo + ow;
                        let off = [
                            offsets[(3 * tap) * out_vol + p],
                            offsets[(3 * tap + 1) * out_vol + p],
                            offsets[(3 * tap + 2) * out_vol + p],
                        ];
                        let pos = deform_pos(g, tap3, [to, oh, ow], off);
                        row[((to - t0) * ho + oh) * wo + ow] = trilinear(xc, dims, pos).0;
                    }
                }
            }
        }
    }
}

/// Backward of [`deform_im2col3d`]: accumulates into `gx` and `goffsets`.
pub fn deform_col2im3d(
    gcols: &[f64],
    x: &[f64],
    offsets: &[f64],
    g: &Conv3dGeom,
    t0: usize,
    t1: usize,
    gx: &mut [f64],
    goffsets: &mut [f64],
) {
    let dims = g.input;
    let vol = dims.iter().product::<usize>();
    let [to_n, ho, wo] = g.output;
    let out_vol = to_n * ho * wo;
    let ncols = (t1 - t0) * ho * wo;
    let taps = g.taps();
    for c in 0..g.channels {
        let xc = &x[c * vol..(c + 1) * vol];
        for tap in 0..taps {
            let tap3 = tap_index(g.kernel, tap);
            let row = &gcols[(c * taps + tap) * ncols..(c * taps + tap + 1) * ncols];
            for to in t0..t1 {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = row[((to - t0) * ho + oh) * wo + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        let p = (to * ho + oh) * wo + ow;
                        let off = [
                            offsets[(3 * tap) * out_vol + p],
                            offsets[(3 * tap + 1) * out_vol + p],
                            offsets[(3 * tap + 2) * out_vol + p],
                        ];
                        let pos = deform_pos(g, tap3, [to, oh, ow], off);
                        let (_, dpos) = trilinear(xc, dims, pos);
                        for d in 0..3 {
                            goffsets[(3 * tap + d) * out_vol + p] += gv * dpos[d];
                        }
                        trilinear_scatter(&mut gx[c * vol..(c + 1) * vol], dims, pos, gv);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn tap_index(kernel: [usize; 3], tap: usize) -> [usize; 3] {
    let [_, kh, kw] = kernel;
    [tap / (kh * kw), (tap / kw) % kh, tap % kw]
}
