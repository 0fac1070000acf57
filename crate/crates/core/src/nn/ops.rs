//! Forward and backward kernels used by the autograd graph.
//!
//! Every kernel assigns each output element to exactly one task and
//! accumulates in a fixed order, so results do not depend on the rayon
//! thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::geometry::BBox;

/// Output positions `o` in `[lo, hi)` for which `o * stride + offset - pad`
/// lands inside `[0, in_len)`.
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + offset - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if limit > offset {
        ((limit - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv input channels {c} vs weight {wc}");
    assert_eq!(k, k2);
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(wd, k, stride, pad);
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let xd = x.data();
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, oi) = (idx / o, idx % o);
            if let Some(b) = b {
                plane.fill(b.data()[oi]);
            }
            for ci in 0..c {
                let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ki in 0..k {
                    let (oy0, oy1) = valid_range(ki, pad, stride, h, ho);
                    for kj in 0..k {
                        let wv = wdata[((oi * c + ci) * k + ki) * k + kj];
                        let (ox0, ox1) = valid_range(kj, pad, stride, wd, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ki - pad;
                            let row = &xin[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        });
    out
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dout: &Tensor,
) -> ConvGrads {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let (_, _, ho, wo) = dout.dims4();
    let xd = x.data();
    let wdata = w.data();
    let gd = dout.data();

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, ci) = (idx / c, idx % c);
            for oi in 0..o {
                let g = &gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                for ki in 0..k {
                    let (oy0, oy1) = valid_range(ki, pad, stride, h, ho);
                    for kj in 0..k {
                        let wv = wdata[((oi * c + ci) * k + ki) * k + kj];
                        let (ox0, ox1) = valid_range(kj, pad, stride, wd, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ki - pad;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let prow = &mut plane[iy * wd..(iy + 1) * wd];
                            for ox in ox0..ox1 {
                                prow[ox * stride + kj - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut()
        .par_chunks_mut(c * k * k)
        .enumerate()
        .for_each(|(oi, wgrad)| {
            for ni in 0..n {
                let g = &gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                for ci in 0..c {
                    let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ki in 0..k {
                        let (oy0, oy1) = valid_range(ki, pad, stride, h, ho);
                        for kj in 0..k {
                            let (ox0, ox1) = valid_range(kj, pad, stride, wd, wo);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ki - pad;
                                let row = &xin[iy * wd..(iy + 1) * wd];
                                let grow = &g[oy * wo..(oy + 1) * wo];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * row[ox * stride + kj - pad];
                                }
                            }
                            wgrad[(ci * k + ki) * k + kj] += acc;
                        }
                    }
                }
            }
        });

    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(&[o]);
        for ni in 0..n {
            for oi in 0..o {
                db.data_mut()[oi] += gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo]
                    .iter()
                    .sum::<f64>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution with kernel 2 and stride 2; weight `[C_in, C_out, 2, 2]`.
pub fn deconv2x2_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (wc, o, _, _) = w.dims4();
    assert_eq!(c, wc);
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let xd = x.data();
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, oi) = (idx / o, idx % o);
            plane.fill(b.data()[oi]);
            for ci in 0..c {
                let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let wk = &wdata[(ci * o + oi) * 4..(ci * o + oi) * 4 + 4];
                for i in 0..h {
                    for j in 0..wd {
                        let v = xin[i * wd + j];
                        plane[(2 * i) * wo + 2 * j] += v * wk[0];
                        plane[(2 * i) * wo + 2 * j + 1] += v * wk[1];
                        plane[(2 * i + 1) * wo + 2 * j] += v * wk[2];
                        plane[(2 * i + 1) * wo + 2 * j + 1] += v * wk[3];
                    }
                }
            }
        });
    out
}

pub fn deconv2x2_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, wd) = x.dims4();
    let (_, o, _, _) = w.dims4();
    let wo = 2 * wd;
    let plane_out = 4 * h * wd;
    let gd = dout.data();
    let xd = x.data();
    let wdata = w.data();

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (ni, ci) = (idx / c, idx % c);
            for oi in 0..o {
                let g = &gd[(ni * o + oi) * plane_out..(ni * o + oi + 1) * plane_out];
                let wk = &wdata[(ci * o + oi) * 4..(ci * o + oi) * 4 + 4];
                for i in 0..h {
                    for j in 0..wd {
                        plane[i * wd + j] += g[(2 * i) * wo + 2 * j] * wk[0]
                            + g[(2 * i) * wo + 2 * j + 1] * wk[1]
                            + g[(2 * i + 1) * wo + 2 * j] * wk[2]
                            + g[(2 * i + 1) * wo + 2 * j + 1] * wk[3];
                    }
                }
            }
        });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut()
        .par_chunks_mut(o * 4)
        .enumerate()
        .for_each(|(ci, wgrad)| {
            for ni in 0..n {
                let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for oi in 0..o {
                    let g = &gd[(ni * o + oi) * plane_out..(ni * o + oi + 1) * plane_out];
                    let mut acc = [0.0; 4];
                    for i in 0..h {
                        for j in 0..wd {
                            let v = xin[i * wd + j];
                            acc[0] += v * g[(2 * i) * wo + 2 * j];
                            acc[1] += v * g[(2 * i) * wo + 2 * j + 1];
                            acc[2] += v * g[(2 * i + 1) * wo + 2 * j];
                            acc[3] += v * g[(2 * i + 1) * wo + 2 * j + 1];
                        }
                    }
                    for (t, a) in acc.iter().enumerate() {
                        wgrad[oi * 4 + t] += a;
                    }
                }
            }
        });

    let mut db = Tensor::zeros(&[o]);
    for ni in 0..n {
        for oi in 0..o {
            db.data_mut()[oi] += gd[(ni * o + oi) * plane_out..(ni * o + oi + 1) * plane_out]
                .iter()
                .sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// `x [R, I] · wᵀ + b` with `w [O, I]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (r, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    assert_eq!(w.shape()[1], i);
    let mut out = Tensor::zeros(&[r, o]);
    out.data_mut()
        .par_chunks_mut(o)
        .enumerate()
        .for_each(|(ri, row)| {
            let xr = &x.data()[ri * i..(ri + 1) * i];
            for (oi, v) in row.iter_mut().enumerate() {
                let wr = &w.data()[oi * i..(oi + 1) * i];
                *v = b.data()[oi] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    out
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (r, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let g = dout.data();
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(i)
        .enumerate()
        .for_each(|(ri, row)| {
            for oi in 0..o {
                let gv = g[ri * o + oi];
                let wr = &w.data()[oi * i..(oi + 1) * i];
                for (d, wv) in row.iter_mut().zip(wr) {
                    *d += gv * wv;
                }
            }
        });
    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut()
        .par_chunks_mut(i)
        .enumerate()
        .for_each(|(oi, row)| {
            for ri in 0..r {
                let gv = g[ri * o + oi];
                let xr = &x.data()[ri * i..(ri + 1) * i];
                for (d, xv) in row.iter_mut().zip(xr) {
                    *d += gv * xv;
                }
            }
        });
    let mut db = Tensor::zeros(&[o]);
    for ri in 0..r {
        for oi in 0..o {
            db.data_mut()[oi] += g[ri * o + oi];
        }
    }
    (dx, dw, db)
}

pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / factor) * w + j / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(x_shape: &[usize], factor: usize, dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let (n, c, h, w) = dx.dims4();
    let (ho, wo) = (h * factor, w * factor);
    for p in 0..n * c {
        let src = &dout.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                dst[(i / factor) * w + j / factor] += src[i * wo + j];
            }
        }
    }
    dx
}

/// Softmax over all spatial positions of each `[1, H, W]` map, scaled by `H·W`
/// so the map averages to 1.
pub fn spatial_softmax_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 1, "spatial softmax expects a single-channel map");
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        let src = &x.data()[ni * hw..(ni + 1) * hw];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.data_mut()[ni * hw..(ni + 1) * hw];
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let scale = hw as f64 / total;
        for d in dst.iter_mut() {
            *d *= scale;
        }
    }
    out
}

pub fn spatial_softmax_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    let (n, _, h, w) = y.dims4();
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for ni in 0..n {
        let ys = &y.data()[ni * hw..(ni + 1) * hw];
        let gs = &dout.data()[ni * hw..(ni + 1) * hw];
        // y = hw * s, so dL/dz = y ⊙ (g − Σ g·s)
        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum::<f64>() / hw as f64;
        for (k, d) in dx.data_mut()[ni * hw..(ni + 1) * hw].iter_mut().enumerate() {
            *d = ys[k] * (gs[k] - dot);
        }
    }
    dx
}

/// Multiplies every channel of `x [N, C, H, W]` by the gate `[N, 1, H, W]`.
pub fn channel_gate_forward(x: &Tensor, gate: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        let g = &gate.data()[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let p = &mut out.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (v, gv) in p.iter_mut().zip(g) {
                *v *= gv;
            }
        }
    }
    out
}

pub fn channel_gate_backward(x: &Tensor, gate: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut dx = dout.clone();
    let mut dg = Tensor::zeros(gate.shape());
    for ni in 0..n {
        let g = &gate.data()[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let xp = &x.data()[off..off + hw];
            let gp = &dout.data()[off..off + hw];
            for k in 0..hw {
                dg.data_mut()[ni * hw + k] += gp[k] * xp[k];
            }
            for (v, gv) in dx.data_mut()[off..off + hw].iter_mut().zip(g) {
                *v *= gv;
            }
        }
    }
    (dx, dg)
}

/// Precomputed bilinear taps for RoIAlign over one feature map.
///
/// `taps[(r * k + i) * k + j]` lists `(pixel index, weight)` pairs whose
/// weighted sum is the pooled value of bin `(i, j)` of RoI `r` for any channel.
/// `mass` is the nominal weight total of each bin (the share of its samples
/// that land on the map), so values are evaluated as
/// `mass·v₀ + Σ w·(v − v₀)`, which reproduces a constant field exactly.
#[derive(Clone, Debug)]
pub struct RoiTaps {
    pub height: usize,
    pub width: usize,
    pub output: usize,
    pub num_rois: usize,
    taps: Vec<Vec<(usize, f64)>>,
    mass: Vec<f64>,
}

/// Bilinear interpolation weights at continuous feature coordinates `(y, x)`
/// (pixel centers at integer coordinates). Points more than one cell outside
/// the map contribute nothing.
/// Returns whether the point landed on the map.
pub fn bilinear_taps(y: f64, x: f64, height: usize, width: usize, out: &mut Vec<(usize, f64)>, weight: f64) -> bool {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return false;
    }
    let mut y = y.max(0.0);
    let mut x = x.max(0.0);
    let mut y_low = y.floor() as usize;
    let y_high;
    if y_low >= height - 1 {
        y_low = height - 1;
        y_high = height - 1;
        y = y_low as f64;
    } else {
        y_high = y_low + 1;
    }
    let mut x_low = x.floor() as usize;
    let x_high;
    if x_low >= width - 1 {
        x_low = width - 1;
        x_high = width - 1;
        x = x_low as f64;
    } else {
        x_high = x_low + 1;
    }
    let ly = y - y_low as f64;
    let lx = x - x_low as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y_low * width + x_low, weight * hy * hx));
    out.push((y_low * width + x_high, weight * hy * lx));
    out.push((y_high * width + x_low, weight * ly * hx));
    out.push((y_high * width + x_high, weight * ly * lx));
    true
}

impl RoiTaps {
    /// RoIs are in input-pixel coordinates; `spatial_scale` maps them onto the
    /// feature grid (1 / stride). Uses the half-pixel aligned convention.
    pub fn new(
        rois: &[BBox],
        spatial_scale: f64,
        height: usize,
        width: usize,
        output: usize,
        samples_per_bin: usize,
    ) -> Self {
        let sr = samples_per_bin.max(1);
        let norm = 1.0 / (sr * sr) as f64;
        let mut taps = Vec::with_capacity(rois.len() * output * output);
        let mut mass = Vec::with_capacity(rois.len() * output * output);
        for roi in rois {
            let start_x = roi.x1 * spatial_scale - 0.5;
            let start_y = roi.y1 * spatial_scale - 0.5;
            let bin_w = roi.width() * spatial_scale / output as f64;
            let bin_h = roi.height() * spatial_scale / output as f64;
            for i in 0..output {
                for j in 0..output {
                    let mut cell = Vec::with_capacity(4 * sr * sr);
                    let mut inside = 0;
                    for sy in 0..sr {
                        let y = start_y + i as f64 * bin_h + (sy as f64 + 0.5) * bin_h / sr as f64;
                        for sx in 0..sr {
                            let x = start_x + j as f64 * bin_w + (sx as f64 + 0.5) * bin_w / sr as f64;
                            inside += bilinear_taps(y, x, height, width, &mut cell, norm) as usize;
                        }
                    }
                    taps.push(cell);
                    mass.push(if inside == sr * sr { 1.0 } else { inside as f64 * norm });
                }
            }
        }
        Self {
            height,
            width,
            output,
            num_rois: rois.len(),
            taps,
            mass,
        }
    }

    /// `x [1, C, H, W]` → `[R, C, k, k]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(n, 1, "RoIAlign operates on a single image");
        assert_eq!((h, w), (self.height, self.width));
        let kk = self.output * self.output;
        let mut out = Tensor::zeros(&[self.num_rois, c, self.output, self.output]);
        out.data_mut()
            .par_chunks_mut(kk)
            .enumerate()
            .for_each(|(idx, plane)| {
                let (r, ci) = (idx / c, idx % c);
                let src = x.plane(0, ci);
                for (b, v) in plane.iter_mut().enumerate() {
                    let cell = &self.taps[r * kk + b];
                    let Some(&(p0, _)) = cell.first() else {
                        continue;
                    };
                    let v0 = src[p0];
                    *v = self.mass[r * kk + b] * v0 + cell.iter().map(|&(p, wt)| wt * (src[p] - v0)).sum::<f64>();
                }
            });
        out
    }

    pub fn backward(&self, channels: usize, dout: &Tensor) -> Tensor {
        let (h, w) = (self.height, self.width);
        let kk = self.output * self.output;
        let mut dx = Tensor::zeros(&[1, channels, h, w]);
        dx.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, plane)| {
                for r in 0..self.num_rois {
                    let g = &dout.data()[(r * channels + ci) * kk..(r * channels + ci + 1) * kk];
                    for (b, gv) in g.iter().enumerate() {
                        for &(p, wt) in &self.taps[r * kk + b] {
                            plane[p] += wt * gv;
                        }
                    }
                }
            });
        dx
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `−[t·ln σ(z) + (1−t)·ln(1−σ(z))]`.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Smooth L1 with transition point 1: `0.5x²` inside, `|x| − 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
