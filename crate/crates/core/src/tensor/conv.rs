//! Convolution family: dense 2D/3D cross-correlation, depthwise 2D,
//! transposed 2D/3D, and the occupancy-mask max-pool used to emulate
//! sparse-convolution behavior.
//!
//! 2D ops run through the 3D cores with a singleton depth axis (stride and
//! padding are per-axis internally). Weight layouts: conv `[Co, Ci, k...]`,
//! transposed conv `[Ci, Co, k...]`, depthwise `[C, kh, kw]`. Transposed
//! convs accept `output_padding` so a conv/transpose pair over even sizes
//! can be exact adjoints.

use crate::error::{CoreError, Result};

use super::{Tape, Tensor, TensorId};

pub fn conv_out_size(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(k).map(|v| v / stride + 1)
}

pub fn conv_transpose_out_size(
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input - 1) * stride + k + output_padding).checked_sub(2 * padding)
}

/// Range of output coordinates `o` with `o*stride + k_off - padding` inside
/// `[0, in_size)`, clamped to `[0, out_size)`.
#[inline]
fn valid_range(
    in_size: usize,
    k_off: usize,
    padding: usize,
    stride: usize,
    out_size: usize,
) -> (usize, usize) {
    let lo = if k_off >= padding { 0 } else { (padding - k_off).div_ceil(stride) };
    match (in_size + padding).checked_sub(k_off + 1) {
        Some(h) => (lo.min(out_size), (h / stride + 1).min(out_size)),
        None => (0, 0),
    }
}

#[derive(Clone, Copy)]
struct Geom3 {
    n: usize,
    ci: usize,
    co: usize,
    in_d: [usize; 3],
    out_d: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geom3 {
    fn in_spatial(&self) -> usize {
        self.in_d.iter().product()
    }
    fn out_spatial(&self) -> usize {
        self.out_d.iter().product()
    }
}

/// Forward cross-correlation. `x: [N,Ci,D,H,W]`, `w: [Co,Ci,kd,kh,kw]`.
fn conv3_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geom3) -> Vec<f64> {
    let [di, hi, wi] = g.in_d;
    let [do_, ho, wo] = g.out_d;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut out = vec![0.0; g.n * g.co * g.out_spatial()];
    if let Some(b) = bias {
        for n in 0..g.n {
            for co in 0..g.co {
                let base = (n * g.co + co) * g.out_spatial();
                out[base..base + g.out_spatial()].fill(b[co]);
            }
        }
    }
    for n in 0..g.n {
        for co in 0..g.co {
            for ci in 0..g.ci {
                let x_base = (n * g.ci + ci) * g.in_spatial();
                let o_base = (n * g.co + co) * g.out_spatial();
                for kd in 0..g.k[0] {
                    let (dlo, dhi) = valid_range(di, kd, pd, sd, do_);
                    for kh in 0..g.k[1] {
                        let (hlo, hhi) = valid_range(hi, kh, ph, sh, ho);
                        for kw in 0..g.k[2] {
                            let (wlo, whi) = valid_range(wi, kw, pw, sw, wo);
                            let wv = w[(((co * g.ci + ci) * g.k[0] + kd) * g.k[1] + kh) * g.k[2]
                                + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for od in dlo..dhi {
                                let id = od * sd + kd - pd;
                                for oh in hlo..hhi {
                                    let ih = oh * sh + kh - ph;
                                    let xrow = x_base + (id * hi + ih) * wi + kw;
                                    let orow = o_base + (od * ho + oh) * wo;
                                    for ow in wlo..whi {
                                        out[orow + ow] += wv * x[xrow + (ow * sw) - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the conv input: scatter `grad_out` back through `w`.
fn conv3_dx(grad: &[f64], w: &[f64], g: &Geom3) -> Vec<f64> {
    let [di, hi, wi] = g.in_d;
    let [do_, ho, wo] = g.out_d;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut dx = vec![0.0; g.n * g.ci * g.in_spatial()];
    for n in 0..g.n {
        for co in 0..g.co {
            for ci in 0..g.ci {
                let x_base = (n * g.ci + ci) * g.in_spatial();
                let o_base = (n * g.co + co) * g.out_spatial();
                for kd in 0..g.k[0] {
                    let (dlo, dhi) = valid_range(di, kd, pd, sd, do_);
                    for kh in 0..g.k[1] {
                        let (hlo, hhi) = valid_range(hi, kh, ph, sh, ho);
                        for kw in 0..g.k[2] {
                            let (wlo, whi) = valid_range(wi, kw, pw, sw, wo);
                            let wv = w[(((co * g.ci + ci) * g.k[0] + kd) * g.k[1] + kh) * g.k[2]
                                + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for od in dlo..dhi {
                                let id = od * sd + kd - pd;
                                for oh in hlo..hhi {
                                    let ih = oh * sh + kh - ph;
                                    let xrow = x_base + (id * hi + ih) * wi + kw;
                                    let orow = o_base + (od * ho + oh) * wo;
                                    for ow in wlo..whi {
                                        dx[xrow + (ow * sw) - pw] += wv * grad[orow + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the conv weights.
fn conv3_dw(grad: &[f64], x: &[f64], g: &Geom3) -> Vec<f64> {
    let [di, hi, wi] = g.in_d;
    let [do_, ho, wo] = g.out_d;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut dw = vec![0.0; g.co * g.ci * g.k.iter().product::<usize>()];
    for n in 0..g.n {
        for co in 0..g.co {
            for ci in 0..g.ci {
                let x_base = (n * g.ci + ci) * g.in_spatial();
                let o_base = (n * g.co + co) * g.out_spatial();
                for kd in 0..g.k[0] {
                    let (dlo, dhi) = valid_range(di, kd, pd, sd, do_);
                    for kh in 0..g.k[1] {
                        let (hlo, hhi) = valid_range(hi, kh, ph, sh, ho);
                        for kw in 0..g.k[2] {
                            let (wlo, whi) = valid_range(wi, kw, pw, sw, wo);
                            let mut acc = 0.0;
                            for od in dlo..dhi {
                                let id = od * sd + kd - pd;
                                for oh in hlo..hhi {
                                    let ih = oh * sh + kh - ph;
                                    let xrow = x_base + (id * hi + ih) * wi + kw;
                                    let orow = o_base + (od * ho + oh) * wo;
                                    for ow in wlo..whi {
                                        acc += grad[orow + ow] * x[xrow + (ow * sw) - pw];
                                    }
                                }
                            }
                            dw[(((co * g.ci + ci) * g.k[0] + kd) * g.k[1] + kh) * g.k[2] + kw] +=
                                acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Per-output-channel sum of `grad`.
fn channel_sums(grad: &[f64], n: usize, c: usize, spatial: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            db[ci] += grad[base..base + spatial].iter().sum::<f64>();
        }
    }
    db
}

/// Transposed conv forward: scatter each input site through the kernel.
/// `x: [N,Ci,D,H,W]`, `w: [Ci,Co,kd,kh,kw]`; `g.in_d`/`g.out_d` refer to the
/// transpose's own input/output.
fn convt3_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geom3) -> Vec<f64> {
    let [di, hi, wi] = g.in_d;
    let [do_, ho, wo] = g.out_d;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut out = vec![0.0; g.n * g.co * g.out_spatial()];
    if let Some(b) = bias {
        for n in 0..g.n {
            for co in 0..g.co {
                let base = (n * g.co + co) * g.out_spatial();
                out[base..base + g.out_spatial()].fill(b[co]);
            }
        }
    }
    for n in 0..g.n {
        for ci in 0..g.ci {
            for co in 0..g.co {
                let x_base = (n * g.ci + ci) * g.in_spatial();
                let o_base = (n * g.co + co) * g.out_spatial();
                for kd in 0..g.k[0] {
                    let (dlo, dhi) = valid_range(do_, kd, pd, sd, di);
                    for kh in 0..g.k[1] {
                        let (hlo, hhi) = valid_range(ho, kh, ph, sh, hi);
                        for kw in 0..g.k[2] {
                            let (wlo, whi) = valid_range(wo, kw, pw, sw, wi);
                            let wv = w[(((ci * g.co + co) * g.k[0] + kd) * g.k[1] + kh) * g.k[2]
                                + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for id in dlo..dhi {
                                let od = id * sd + kd - pd;
                                for ih in hlo..hhi {
                                    let oh = ih * sh + kh - ph;
                                    let xrow = x_base + (id * hi + ih) * wi;
                                    let orow = o_base + (od * ho + oh) * wo + kw;
                                    for iw in wlo..whi {
                                        out[orow + (iw * sw) - pw] += wv * x[xrow + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn convt3_dx(grad: &[f64], w: &[f64], g: &Geom3) -> Vec<f64> {
    let [di, hi, wi] = g.in_d;
    let [do_, ho, wo] = g.out_d;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut dx = vec![0.0; g.n * g.ci * g.in_spatial()];
    for n in 0..g.n {
        for ci in 0..g.ci {
            for co in 0..g.co {
                let x_base = (n * g.ci + ci) * g.in_spatial();
                let o_base = (n * g.co + co) * g.out_spatial();
                for kd in 0..g.k[0] {
                    let (dlo, dhi) = valid_range(do_, kd, pd, sd, di);
                    for kh in 0..g.k[1] {
                        let (hlo, hhi) = valid_range(ho, kh, ph, sh, hi);
                        for kw in 0..g.k[2] {
                            let (wlo, whi) = valid_range(wo, kw, pw, sw, wi);
                            let wv = w[(((ci * g.co + co) * g.k[0] + kd) * g.k[1] + kh) * g.k[2]
                                + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for id in dlo..dhi {
                                let od = id * sd + kd - pd;
                                for ih in hlo..hhi {
                                    let oh = ih * sh + kh - ph;
                                    let xrow = x_base + (id * hi + ih) * wi;
                                    let orow = o_base + (od * ho + oh) * wo + kw;
                                    for iw in wlo..whi {
                                        dx[xrow + iw] += wv * grad[orow + (iw * sw) - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn convt3_dw(grad: &[f64], x: &[f64], g: &Geom3) -> Vec<f64> {
    let [di, hi, wi] = g.in_d;
    let [do_, ho, wo] = g.out_d;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let mut dw = vec![0.0; g.ci * g.co * g.k.iter().product::<usize>()];
    for n in 0..g.n {
        for ci in 0..g.ci {
            for co in 0..g.co {
                let x_base = (n * g.ci + ci) * g.in_spatial();
                let o_base = (n * g.co + co) * g.out_spatial();
                for kd in 0..g.k[0] {
                    let (dlo, dhi) = valid_range(do_, kd, pd, sd, di);
                    for kh in 0..g.k[1] {
                        let (hlo, hhi) = valid_range(ho, kh, ph, sh, hi);
                        for kw in 0..g.k[2] {
                            let (wlo, whi) = valid_range(wo, kw, pw, sw, wi);
                            let mut acc = 0.0;
                            for id in dlo..dhi {
                                let od = id * sd + kd - pd;
                                for ih in hlo..hhi {
                                    let oh = ih * sh + kh - ph;
                                    let xrow = x_base + (id * hi + ih) * wi;
                                    let orow = o_base + (od * ho + oh) * wo + kw;
                                    for iw in wlo..whi {
                                        acc += x[xrow + iw] * grad[orow + (iw * sw) - pw];
                                    }
                                }
                            }
                            dw[(((ci * g.co + co) * g.k[0] + kd) * g.k[1] + kh) * g.k[2] + kw] +=
                                acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

fn expect_dims(shape: &[usize], n: usize, what: &str) -> Result<()> {
    if shape.len() != n {
        return Err(CoreError::shape(format!("{what}: expected {n}-d, got {shape:?}")));
    }
    Ok(())
}

impl Tape {
    /// conv3d with per-axis stride and padding. `x: [N,Ci,D,H,W]`,
    /// `w: [Co,Ci,kd,kh,kw]`.
    pub fn conv3d_aniso(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_dims(&xs, 5, "conv3d input")?;
        expect_dims(&ws, 5, "conv3d weight")?;
        if xs[1] != ws[1] {
            return Err(CoreError::shape(format!(
                "conv3d channels: input {xs:?} vs weight {ws:?}"
            )));
        }
        let mut out_d = [0usize; 3];
        for a in 0..3 {
            out_d[a] = conv_out_size(xs[2 + a], ws[2 + a], stride[a], padding[a]).ok_or_else(
                || CoreError::shape(format!("conv3d kernel {ws:?} exceeds padded input {xs:?}")),
            )?;
        }
        if let Some(bid) = b {
            if self.shape(bid) != [ws[0]] {
                return Err(CoreError::shape(format!(
                    "conv3d bias {:?} vs Co={}",
                    self.shape(bid),
                    ws[0]
                )));
            }
        }
        let geom = Geom3 {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            in_d: [xs[2], xs[3], xs[4]],
            out_d,
            k: [ws[2], ws[3], ws[4]],
            stride,
            padding,
        };
        let bias_data = b.map(|bid| self.value(bid).data().to_vec());
        let out = conv3_fwd(self.value(x).data(), self.value(w).data(), bias_data.as_deref(), &geom);
        let out_shape = vec![geom.n, geom.co, out_d[0], out_d[1], out_d[2]];
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        Ok(self.record(
            Tensor::new(out_shape, out),
            &parents,
            Box::new(move |vals, grad| {
                let mut contribs = vec![
                    (x.0, conv3_dx(grad, vals[w.0].data(), &geom)),
                    (w.0, conv3_dw(grad, vals[x.0].data(), &geom)),
                ];
                if let Some(bid) = b {
                    contribs.push((bid.0, channel_sums(grad, geom.n, geom.co, geom.out_spatial())));
                }
                contribs
            }),
        ))
    }

    /// 3D cross-correlation with cubic stride/padding.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.conv3d_aniso(x, w, b, [stride; 3], [padding; 3])
    }

    /// 2D cross-correlation via the 3D core with a singleton depth axis.
    /// `x: [N,Ci,H,W]`, `w: [Co,Ci,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_dims(&xs, 4, "conv2d input")?;
        expect_dims(&ws, 4, "conv2d weight")?;
        let x5 = self.reshape(x, vec![xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, vec![ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y5 = self.conv3d_aniso(x5, w5, b, [1, stride, stride], [0, padding, padding])?;
        let ys = self.shape(y5).to_vec();
        self.reshape(y5, vec![ys[0], ys[1], ys[3], ys[4]])
    }

    /// Transposed 3D conv with per-axis geometry. `x: [N,Ci,D,H,W]`,
    /// `w: [Ci,Co,kd,kh,kw]`.
    pub fn conv_transpose3d_aniso(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_dims(&xs, 5, "conv_transpose3d input")?;
        expect_dims(&ws, 5, "conv_transpose3d weight")?;
        if xs[1] != ws[0] {
            return Err(CoreError::shape(format!(
                "conv_transpose3d channels: input {xs:?} vs weight {ws:?}"
            )));
        }
        let mut out_d = [0usize; 3];
        for a in 0..3 {
            out_d[a] = conv_transpose_out_size(
                xs[2 + a],
                ws[2 + a],
                stride[a],
                padding[a],
                output_padding[a],
            )
            .ok_or_else(|| CoreError::shape("conv_transpose3d size underflow"))?;
        }
        if let Some(bid) = b {
            if self.shape(bid) != [ws[1]] {
                return Err(CoreError::shape("conv_transpose3d bias"));
            }
        }
        let geom = Geom3 {
            n: xs[0],
            ci: xs[1],
            co: ws[1],
            in_d: [xs[2], xs[3], xs[4]],
            out_d,
            k: [ws[2], ws[3], ws[4]],
            stride,
            padding,
        };
        let bias_data = b.map(|bid| self.value(bid).data().to_vec());
        let out =
            convt3_fwd(self.value(x).data(), self.value(w).data(), bias_data.as_deref(), &geom);
        let out_shape = vec![geom.n, geom.co, out_d[0], out_d[1], out_d[2]];
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        Ok(self.record(
            Tensor::new(out_shape, out),
            &parents,
            Box::new(move |vals, grad| {
                let mut contribs = vec![
                    (x.0, convt3_dx(grad, vals[w.0].data(), &geom)),
                    (w.0, convt3_dw(grad, vals[x.0].data(), &geom)),
                ];
                if let Some(bid) = b {
                    contribs.push((bid.0, channel_sums(grad, geom.n, geom.co, geom.out_spatial())));
                }
                contribs
            }),
        ))
    }

    /// Transposed 3D conv, cubic geometry.
    pub fn conv_transpose3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<TensorId> {
        self.conv_transpose3d_aniso(x, w, b, [stride; 3], [padding; 3], [output_padding; 3])
    }

    /// Transposed 2D conv. `x: [N,Ci,H,W]`, `w: [Ci,Co,kh,kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_dims(&xs, 4, "conv_transpose2d input")?;
        expect_dims(&ws, 4, "conv_transpose2d weight")?;
        let x5 = self.reshape(x, vec![xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, vec![ws[0], ws[1], 1, ws[2], ws[3]])?;
        // Depth axis: k=1, stride 1, no padding keeps the singleton size.
        let y5 = self.conv_transpose3d_aniso(
            x5,
            w5,
            b,
            [1, stride, stride],
            [0, padding, padding],
            [0, output_padding, output_padding],
        )?;
        let ys = self.shape(y5).to_vec();
        self.reshape(y5, vec![ys[0], ys[1], ys[3], ys[4]])
    }

    /// Depthwise 2D conv, stride 1. `x: [N,C,H,W]`, `w: [C,kh,kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_dims(&xs, 4, "depthwise input")?;
        expect_dims(&ws, 3, "depthwise weight")?;
        if xs[1] != ws[0] {
            return Err(CoreError::shape(format!(
                "depthwise channels: input {xs:?} vs weight {ws:?}"
            )));
        }
        let (n, c, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[1], ws[2]);
        let ho = conv_out_size(hi, kh, 1, padding)
            .ok_or_else(|| CoreError::shape("depthwise kernel exceeds input"))?;
        let wo = conv_out_size(wi, kw, 1, padding)
            .ok_or_else(|| CoreError::shape("depthwise kernel exceeds input"))?;
        if let Some(bid) = b {
            if self.shape(bid) != [c] {
                return Err(CoreError::shape("depthwise bias"));
            }
        }

        let fwd = |xv: &[f64], wv: &[f64], bv: Option<&[f64]>| -> Vec<f64> {
            let mut out = vec![0.0; n * c * ho * wo];
            for ni in 0..n {
                for ci in 0..c {
                    let ob = (ni * c + ci) * ho * wo;
                    if let Some(bvals) = bv {
                        out[ob..ob + ho * wo].fill(bvals[ci]);
                    }
                    let xb = (ni * c + ci) * hi * wi;
                    for ky in 0..kh {
                        let (hlo, hhi) = valid_range(hi, ky, padding, 1, ho);
                        for kx in 0..kw {
                            let (wlo, whi) = valid_range(wi, kx, padding, 1, wo);
                            let wk = wv[(ci * kh + ky) * kw + kx];
                            for oy in hlo..hhi {
                                let iy = oy + ky - padding;
                                let xrow = xb + iy * wi + kx;
                                let orow = ob + oy * wo;
                                for ox in wlo..whi {
                                    out[orow + ox] += wk * xv[xrow + ox - padding];
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let bias_data = b.map(|bid| self.value(bid).data().to_vec());
        let out = fwd(self.value(x).data(), self.value(w).data(), bias_data.as_deref());
        let mut parents = vec![x, w];
        if let Some(bid) = b {
            parents.push(bid);
        }
        Ok(self.record(
            Tensor::new(vec![n, c, ho, wo], out),
            &parents,
            Box::new(move |vals, grad| {
                let xv = vals[x.0].data();
                let wv = vals[w.0].data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let ob = (ni * c + ci) * ho * wo;
                        let xb = (ni * c + ci) * hi * wi;
                        for ky in 0..kh {
                            let (hlo, hhi) = valid_range(hi, ky, padding, 1, ho);
                            for kx in 0..kw {
                                let (wlo, whi) = valid_range(wi, kx, padding, 1, wo);
                                let wk = wv[(ci * kh + ky) * kw + kx];
                                let mut acc = 0.0;
                                for oy in hlo..hhi {
                                    let iy = oy + ky - padding;
                                    let xrow = xb + iy * wi + kx;
                                    let orow = ob + oy * wo;
                                    for ox in wlo..whi {
                                        dx[xrow + ox - padding] += wk * grad[orow + ox];
                                        acc += grad[orow + ox] * xv[xrow + ox - padding];
                                    }
                                }
                                dw[(ci * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
                let mut contribs = vec![(x.0, dx), (w.0, dw)];
                if let Some(bid) = b {
                    contribs.push((bid.0, channel_sums(grad, n, c, ho * wo)));
                }
                contribs
            }),
        ))
    }
}

/// Occupancy-mask pooling: `mask: [N,1,D,H,W]` of {0,1}; output is 1 where
/// any input voxel in the (k, stride, padding) window is 1. Not recorded on
/// a tape: masks are constants.
pub fn maxpool_mask3d(mask: &Tensor, k: usize, stride: usize, padding: usize) -> Tensor {
    let s = mask.shape();
    assert_eq!(s.len(), 5, "mask must be [N,1,D,H,W]");
    assert_eq!(s[1], 1);
    let (n, di, hi, wi) = (s[0], s[2], s[3], s[4]);
    let do_ = conv_out_size(di, k, stride, padding).expect("pool kernel exceeds input");
    let ho = conv_out_size(hi, k, stride, padding).expect("pool kernel exceeds input");
    let wo = conv_out_size(wi, k, stride, padding).expect("pool kernel exceeds input");
    let src = mask.data();
    let mut out = vec![0.0; n * do_ * ho * wo];
    for ni in 0..n {
        for od in 0..do_ {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut m = 0.0f64;
                    'win: for kd in 0..k {
                        let id = (od * stride + kd).checked_sub(padding);
                        let Some(id) = id.filter(|v| *v < di) else { continue };
                        for ky in 0..k {
                            let iy = (oh * stride + ky).checked_sub(padding);
                            let Some(iy) = iy.filter(|v| *v < hi) else { continue };
                            for kx in 0..k {
                                let ix = (ow * stride + kx).checked_sub(padding);
                                let Some(ix) = ix.filter(|v| *v < wi) else { continue };
                                if src[((ni * di + id) * hi + iy) * wi + ix] > 0.0 {
                                    m = 1.0;
                                    break 'win;
                                }
                            }
                        }
                    }
                    out[((ni * do_ + od) * ho + oh) * wo + ow] = m;
                }
            }
        }
    }
    Tensor::new(vec![n, 1, do_, ho, wo], out)
}

/// BEV occupancy from a 3D mask: max over the depth axis.
/// `[N,1,D,H,W] -> [N,1,H,W]`.
pub fn mask_depth_max(mask: &Tensor) -> Tensor {
    let s = mask.shape();
    assert_eq!(s.len(), 5);
    assert_eq!(s[1], 1);
    let (n, d, h, w) = (s[0], s[2], s[3], s[4]);
    let src = mask.data();
    let mut out = vec![0.0; n * h * w];
    for ni in 0..n {
        for di in 0..d {
            for i in 0..h * w {
                if src[(ni * d + di) * h * w + i] > 0.0 {
                    out[ni * h * w + i] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv2d_1x1_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    /// Six-nested-loop oracle for plain 2D convolution.
    fn conv2d_oracle(
        x: &Tensor,
        w: &Tensor,
        b: Option<&[f64]>,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let (n, ci, hi, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (hi + 2 * padding - kh) / stride + 1;
        let wo = (wi + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for c in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |bv| bv[c]);
                        for ic in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    if iy < padding || ix < padding {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - padding, ix - padding);
                                    if iy >= hi || ix >= wi {
                                        continue;
                                    }
                                    acc += w.data()[((c * ci + ic) * kh + ky) * kw + kx]
                                        * x.data()[((ni * ci + ic) * hi + iy) * wi + ix];
                                }
                            }
                        }
                        out[((ni * co + c) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let x = randn(&mut rng, &[1, 1, 4, 4]);
            let w = randn(&mut rng, &[2, 1, 3, 3]);
            let b = randn(&mut rng, &[2]);
            let want = conv2d_oracle(&x, &w, Some(b.data()), stride, padding);
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let wi = tape.leaf(w);
            let bi = tape.leaf(b);
            let y = tape.conv2d(xi, wi, Some(bi), stride, padding).unwrap();
            for (a, e) in tape.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_stride2_output_size() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        let w = tape.leaf(Tensor::zeros(&[5, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 4, 4]);
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[2, 4, 1, 1]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[1, 2, 5, 5]);
        let mut wdata = vec![0.0; 2 * 9];
        wdata[4] = 1.0; // center of channel 0
        wdata[9 + 4] = 1.0;
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(Tensor::new(vec![2, 3, 3], wdata));
        let y = tape.depthwise_conv2d(xi, wi, None, 1).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn depthwise_single_channel_equals_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[1, 1, 6, 6]);
        let w = randn(&mut rng, &[1, 3, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wd = tape.leaf(w.clone());
        let yd = tape.depthwise_conv2d(xi, wd, None, 1).unwrap();
        let wc = tape.leaf(Tensor::new(vec![1, 1, 3, 3], w.data().to_vec()));
        let yc = tape.conv2d(xi, wc, None, 1, 1).unwrap();
        assert_eq!(tape.value(yd).data(), tape.value(yc).data());
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 2, 5, 4]);
        let w = randn(&mut rng, &[2, 3, 3]);
        // Oracle: run conv2d per channel.
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let y = tape.depthwise_conv2d(xi, wi, None, 1).unwrap();
        for c in 0..2 {
            let xc = tape.slice(xi, 1, c, 1).unwrap();
            let wc = tape.leaf(Tensor::new(vec![1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()));
            let yc = tape.conv2d(xc, wc, None, 1, 1).unwrap();
            let ys = tape.slice(y, 1, c, 1).unwrap();
            for (a, e) in tape.value(ys).data().iter().zip(tape.value(yc).data()) {
                assert!((a - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn conv3d_identity_and_bias_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[1, 1, 2, 3, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]));
        let y = tape.conv3d(xi, wi, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        // Zero input, bias fills every output element.
        let zi = tape.leaf(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let w3 = tape.leaf(Tensor::zeros(&[2, 1, 3, 3, 3]));
        let b3 = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.5]));
        let y3 = tape.conv3d(zi, w3, Some(b3), 1, 1).unwrap();
        let d = tape.value(y3).data();
        assert_eq!(tape.shape(y3), &[1, 2, 2, 2, 2]);
        assert!(d[..8].iter().all(|v| *v == 0.5));
        assert!(d[8..].iter().all(|v| *v == -1.5));
    }

    /// Direct 8-nested-loop oracle for 3D convolution.
    fn conv3d_oracle(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Vec<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (n, ci, di, hi, wi) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (co, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let od = (di + 2 * padding - kd) / stride + 1;
        let oh = (hi + 2 * padding - kh) / stride + 1;
        let ow = (wi + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * co * od * oh * ow];
        for ni in 0..n {
            for c in 0..co {
                for zd in 0..od {
                    for zy in 0..oh {
                        for zx in 0..ow {
                            let mut acc = 0.0;
                            for ic in 0..ci {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for e in 0..kw {
                                            let id = (zd * stride + a).wrapping_sub(padding);
                                            let iy = (zy * stride + b).wrapping_sub(padding);
                                            let ix = (zx * stride + e).wrapping_sub(padding);
                                            if id >= di || iy >= hi || ix >= wi {
                                                continue;
                                            }
                                            acc += w.data()
                                                [(((c * ci + ic) * kd + a) * kh + b) * kw + e]
                                                * x.data()
                                                    [(((ni * ci + ic) * di + id) * hi + iy) * wi + ix];
                                        }
                                    }
                                }
                            }
                            out[(((ni * co + c) * od + zd) * oh + zy) * ow + zx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (stride, padding) in [(1, 1), (2, 1)] {
            let x = randn(&mut rng, &[1, 2, 4, 4, 4]);
            let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
            let want = conv3d_oracle(&x, &w, stride, padding);
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let wi = tape.leaf(w);
            let y = tape.conv3d(xi, wi, None, stride, padding).unwrap();
            for (a, e) in tape.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_identity_and_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[1, 1, 3, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let y = tape.conv_transpose2d(xi, wi, None, 1, 0, 0).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let x2 = tape.leaf(randn(&mut rng, &[1, 2, 4, 4]));
        let w2 = tape.leaf(randn(&mut rng, &[2, 3, 2, 2]));
        let y2 = tape.conv_transpose2d(x2, w2, None, 2, 0, 0).unwrap();
        assert_eq!(tape.shape(y2), &[1, 3, 8, 8]);

        let x3 = tape.leaf(randn(&mut rng, &[1, 2, 2, 3, 3]));
        let w3 = tape.leaf(randn(&mut rng, &[2, 4, 2, 2, 2]));
        let y3 = tape.conv_transpose3d(x3, w3, None, 2, 0, 0).unwrap();
        assert_eq!(tape.shape(y3), &[1, 4, 4, 6, 6]);
    }

    /// Adjointness: <conv(x), y> == <x, conv_transpose(y)> with shared
    /// weights and zero bias.
    #[test]
    fn conv_transpose_adjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // k2 s2 p0: conv 8 -> 4, transpose 4 -> 8.
        for _ in 0..5 {
            let x = randn(&mut rng, &[1, 2, 8, 8]);
            let w = randn(&mut rng, &[3, 2, 2, 2]); // conv layout [Co,Ci,k,k]
            let y = randn(&mut rng, &[1, 3, 4, 4]);
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let cx = tape.conv2d(xi, wi, None, 2, 0).unwrap();
            let lhs: f64 = tape
                .value(cx)
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| a * b)
                .sum();
            // Transpose with the same tensor: its [Ci_T, Co_T] = [Co, Ci].
            let yi = tape.leaf(y.clone());
            let ty = tape.conv_transpose2d(yi, wi, None, 2, 0, 0).unwrap();
            let rhs: f64 = tape
                .value(ty)
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() <= 1e-9, "adjointness violated: {lhs} vs {rhs}");
        }
        // k3 s2 p1 with output_padding 1: conv 8 -> 4, transpose 4 -> 8.
        for _ in 0..5 {
            let x = randn(&mut rng, &[1, 2, 8, 8]);
            let w = randn(&mut rng, &[3, 2, 3, 3]);
            let y = randn(&mut rng, &[1, 3, 4, 4]);
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let cx = tape.conv2d(xi, wi, None, 2, 1).unwrap();
            assert_eq!(tape.shape(cx), &[1, 3, 4, 4]);
            let lhs: f64 =
                tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let yi = tape.leaf(y.clone());
            let ty = tape.conv_transpose2d(yi, wi, None, 2, 1, 1).unwrap();
            assert_eq!(tape.shape(ty), &[1, 2, 8, 8]);
            let rhs: f64 =
                tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-9, "k3s2p1 adjointness: {lhs} vs {rhs}");
        }
        // 3D k2 s2 p0.
        for _ in 0..3 {
            let x = randn(&mut rng, &[1, 2, 4, 4, 4]);
            let w = randn(&mut rng, &[3, 2, 2, 2, 2]);
            let y = randn(&mut rng, &[1, 3, 2, 2, 2]);
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let cx = tape.conv3d(xi, wi, None, 2, 0).unwrap();
            let lhs: f64 =
                tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let yi = tape.leaf(y.clone());
            let ty = tape.conv_transpose3d(yi, wi, None, 2, 0, 0).unwrap();
            let rhs: f64 =
                tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-9);
        }
    }

    /// conv backward-input equals the adjoint for the k3 s2 p1 case the
    /// backbone uses (checked via the tape itself).
    #[test]
    fn conv_backward_is_adjoint_k3s2p1() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[1, 2, 8, 8]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let y = randn(&mut rng, &[1, 3, 4, 4]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.constant(w.clone());
        let cx = tape.conv2d(xi, wi, None, 2, 1).unwrap();
        let yc = tape.constant(y.clone());
        let prod = tape.mul(cx, yc).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        // <conv(x), y> = <x, A^T y>: the gradient of that scalar w.r.t. x IS
        // A^T y, so <x, grad> must equal the forward inner product.
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.grad(xi).unwrap().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-9);
    }

    #[test]
    fn maxpool_mask_propagation() {
        // Single occupied voxel: k3 s2 p1 pooling marks the outputs whose
        // receptive window covers it.
        let mut m = vec![0.0; 8 * 8 * 8];
        m[(3 * 8 + 3) * 8 + 3] = 1.0;
        let mask = Tensor::new(vec![1, 1, 8, 8, 8], m);
        let pooled = maxpool_mask3d(&mask, 3, 2, 1);
        assert_eq!(pooled.shape(), &[1, 1, 4, 4, 4]);
        // Input voxel 3 is seen by outputs o with o*2+k-1 == 3, k in 0..3,
        // i.e. o in {1, 2}.
        let d = pooled.data();
        let mut ones = Vec::new();
        for od in 0..4 {
            for oh in 0..4 {
                for ow in 0..4 {
                    if d[(od * 4 + oh) * 4 + ow] > 0.0 {
                        ones.push([od, oh, ow]);
                    }
                }
            }
        }
        let want: Vec<[usize; 3]> = (1..3)
            .flat_map(|a| (1..3).flat_map(move |b| (1..3).map(move |c| [a, b, c])))
            .collect();
        assert_eq!(ones, want);
    }

    #[test]
    fn mask_depth_max_collapses_depth() {
        let mut m = vec![0.0; 2 * 2 * 2];
        m[0] = 1.0; // depth 0, (0,0)
        m[7] = 1.0; // depth 1, (1,1)
        let mask = Tensor::new(vec![1, 1, 2, 2, 2], m);
        let bev = mask_depth_max(&mask);
        assert_eq!(bev.shape(), &[1, 1, 2, 2]);
        assert_eq!(bev.data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
