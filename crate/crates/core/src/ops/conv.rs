//! Spatial operators on `B×C×H×W` tensors. All use zero padding of
//! `(k-1)/2`, so stride 1 preserves the resolution and stride 2 gives
//! `ceil(H/2) × ceil(W/2)`.

use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use super::{Backward, Contributions};
use crate::error::{Error, Result};
use crate::tape::{Op, OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    Min,
    Max,
    Avg,
}

/// Geometry shared by the forward and backward conv loops.
#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn ox_range(&self, kx: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let off = kx as isize - self.pad();
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (self.w as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, self.ow as isize);
        (lo.max(0) as usize)..(hi.max(lo.max(0)) as usize)
    }

    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride) as isize + ky as isize - self.pad();
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn ix(&self, ox: usize, kx: usize) -> usize {
        ((ox * self.stride) as isize + kx as isize - self.pad()) as usize
    }

    fn macs(&self) -> usize {
        self.batch * self.cout * (self.cin / self.groups) * self.k * self.k * self.oh * self.ow
    }

    /// Unfold one sample into a `(Cin·k·k) × (oh·ow)` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.oh * self.ow;
        let mut cols = vec![0.0; self.cin * self.k * self.k * p];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * p;
                    let xr = self.ox_range(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = self.iy(oy, ky) else { continue };
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        for ox in xr.clone() {
                            dst[ox] = src[self.ix(ox, kx)];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a patch-matrix gradient back onto one sample.
    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.oh * self.ow;
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * p;
                    let xr = self.ox_range(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = self.iy(oy, ky) else { continue };
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        for ox in xr.clone() {
                            plane[iy * self.w + self.ix(ox, kx)] += src[ox];
                        }
                    }
                }
            }
        }
    }

    /// Visit every (input plane, weight index, output plane) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for b in 0..self.batch {
            for co in 0..self.cout {
                let g = co / cout_g;
                for cig in 0..cin_g {
                    let ci = g * cin_g + cig;
                    let in_plane = (b * self.cin + ci) * self.h * self.w;
                    let out_plane = (b * self.cout + co) * self.oh * self.ow;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let widx = ((co * cin_g + cig) * self.k + ky) * self.k + kx;
                            f(in_plane, out_plane, widx, ky, kx);
                        }
                    }
                }
            }
        }
    }
}

fn check_odd(op: &str, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "{op}: kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

fn check_stride(op: &str, stride: usize) -> Result<()> {
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!(
            "{op}: stride must be 1 or 2, got {stride}"
        )));
    }
    Ok(())
}

impl Tape {
    fn conv_forward(
        &mut self,
        kind: OpKind,
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    ) -> Var {
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; geom.batch * geom.cout * geom.oh * geom.ow];
        for (plane, chunk) in out.chunks_mut(geom.oh * geom.ow).enumerate() {
            chunk.fill(bd[plane % geom.cout]);
        }
        let (in_len, out_len) = (geom.cin * geom.h * geom.w, geom.cout * geom.oh * geom.ow);
        let kk = geom.cin * geom.k * geom.k;
        if geom.groups == 1 {
            for b in 0..geom.batch {
                let cols = geom.im2col(&xd[b * in_len..(b + 1) * in_len]);
                let o = &mut out[b * out_len..(b + 1) * out_len];
                gemm(geom.cout, kk, geom.oh * geom.ow, wd, false, &cols, false, o);
            }
        } else {
            geom.for_each_tap(|in_plane, out_plane, widx, ky, kx| {
                let wv = wd[widx];
                let cols = geom.ox_range(kx);
                for oy in 0..geom.oh {
                    let Some(iy) = geom.iy(oy, ky) else { continue };
                    let orow = out_plane + oy * geom.ow;
                    let irow = in_plane + iy * geom.w;
                    if cols.is_empty() {
                        continue;
                    }
                    let dst = &mut out[orow + cols.start..orow + cols.end];
                    let first = irow + geom.ix(cols.start, kx);
                    if geom.stride == 1 {
                        let src = &xd[first..first + dst.len()];
                        dst.iter_mut().zip(src).for_each(|(o, &v)| *o += wv * v);
                    } else {
                        let src = xd[first..].iter().step_by(geom.stride);
                        dst.iter_mut().zip(src).for_each(|(o, &v)| *o += wv * v);
                    }
                }
            });
        }
        self.add_macs(geom.macs());
        let shape = vec![geom.batch, geom.cout, geom.oh, geom.ow];
        let op = Op::Conv {
            kind,
            x,
            weight,
            bias,
            groups: geom.groups,
            k: geom.k,
            stride: geom.stride,
        };
        self.push(Tensor::from_parts(shape, out), op)
    }

    fn spatial_input(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(op, s, &[0, 0, 0, 0]));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Per-channel `k×k` convolution, stride 1. `kernel` is `C×k×k`.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.conv2d_depthwise_strided(x, kernel, bias, 1)
    }

    pub fn conv2d_depthwise_strided(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let [b, c, h, w] = self.spatial_input("conv2d_depthwise", x)?;
        check_stride("conv2d_depthwise", stride)?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[0] != c || ks[1] != ks[2] {
            return Err(Error::shape("conv2d_depthwise", self.shape(x), &ks));
        }
        check_odd("conv2d_depthwise", ks[1])?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "conv2d_depthwise",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            cin: c,
            cout: c,
            groups: c,
            h,
            w,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            k: ks[1],
            stride,
        };
        Ok(self.conv_forward(OpKind::Conv2dDepthwise, x, kernel, bias, geom))
    }

    /// Dense `k×k` convolution with stride 1 or 2. `weight` is `Cout×Cin×k×k`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let [b, cin, h, w] = self.spatial_input("conv2d", x)?;
        check_stride("conv2d", stride)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", self.shape(x), &ws));
        }
        check_odd("conv2d", ws[2])?;
        if self.shape(bias) != [ws[0]] {
            return Err(Error::shape("conv2d", &ws, self.shape(bias)));
        }
        let geom = ConvGeom {
            batch: b,
            cin,
            cout: ws[0],
            groups: 1,
            h,
            w,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            k: ws[2],
            stride,
        };
        Ok(self.conv_forward(OpKind::Conv2d, x, weight, bias, geom))
    }

    /// 1×1 convolution: a per-pixel linear map. `weight` is `Cout×Cin`.
    pub fn conv2d_pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let [b, cin, h, w] = self.spatial_input("conv2d_pointwise", x)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::shape("conv2d_pointwise", self.shape(x), &ws));
        }
        let cout = ws[0];
        if self.shape(bias) != [cout] {
            return Err(Error::shape("conv2d_pointwise", &ws, self.shape(bias)));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; b * cout * hw];
        for bi in 0..b {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                o.fill(bd[co]);
                for ci in 0..cin {
                    let wv = wd[co * cin + ci];
                    let src = &xd[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                    o.iter_mut().zip(src).for_each(|(a, &v)| *a += wv * v);
                }
            }
        }
        self.add_macs(b * cout * cin * hw);
        let shape = vec![b, cout, h, w];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Pointwise { x, weight, bias },
        ))
    }

    /// Resolution-preserving `k×k` pooling with stride 1. Out-of-bounds
    /// positions are excluded from the window; the average divides by the
    /// number of in-bounds elements.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize) -> Result<Var> {
        let [b, c, h, w] = self.spatial_input("pool2d", x)?;
        check_odd("pool2d", k)?;
        let r = (k / 2) as isize;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * h * w];
        let mut cache = vec![0usize; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..h {
                for ox in 0..w {
                    let y0 = (oy as isize - r).max(0) as usize;
                    let y1 = ((oy as isize + r) as usize).min(h - 1);
                    let x0 = (ox as isize - r).max(0) as usize;
                    let x1 = ((ox as isize + r) as usize).min(w - 1);
                    let o = base + oy * w + ox;
                    match kind {
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for iy in y0..=y1 {
                                s += xd[base + iy * w + x0..=base + iy * w + x1]
                                    .iter()
                                    .sum::<f64>();
                            }
                            let n = (y1 - y0 + 1) * (x1 - x0 + 1);
                            out[o] = s / n as f64;
                            cache[o] = n;
                        }
                        PoolKind::Max | PoolKind::Min => {
                            let mut best = base + y0 * w + x0;
                            for iy in y0..=y1 {
                                for ix in x0..=x1 {
                                    let i = base + iy * w + ix;
                                    let better = match kind {
                                        PoolKind::Max => xd[i] > xd[best],
                                        _ => xd[i] < xd[best],
                                    };
                                    if better {
                                        best = i;
                                    }
                                }
                            }
                            out[o] = xd[best];
                            cache[o] = best;
                        }
                    }
                }
            }
        }
        let shape = vec![b, c, h, w];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Pool { x, kind, k, cache },
        ))
    }
}

impl Backward<'_> {
    pub(super) fn conv(
        &self,
        x: Var,
        weight: Var,
        bias: Var,
        groups: usize,
        k: usize,
        stride: usize,
    ) -> Contributions {
        let xs = self.val(x).shape();
        let os = self.out.shape();
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: os[1],
            groups,
            h: xs[2],
            w: xs[3],
            oh: os[2],
            ow: os[3],
            k,
            stride,
        };
        let xd = self.val(x).data();
        let wd = self.val(weight).data();
        let (need_x, need_w) = (self.needs(x), self.needs(weight));
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        let g = self.gout;
        if geom.groups == 1 {
            let (in_len, out_len) = (geom.cin * geom.h * geom.w, geom.cout * geom.oh * geom.ow);
            let (kk, p) = (geom.cin * geom.k * geom.k, geom.oh * geom.ow);
            for b in 0..geom.batch {
                let gb = &g[b * out_len..(b + 1) * out_len];
                if need_w {
                    let cols = geom.im2col(&xd[b * in_len..(b + 1) * in_len]);
                    gemm(geom.cout, p, kk, gb, false, &cols, true, &mut gw);
                }
                if need_x {
                    let mut gcols = vec![0.0; kk * p];
                    gemm(kk, geom.cout, p, wd, true, gb, false, &mut gcols);
                    geom.col2im(&gcols, &mut gx[b * in_len..(b + 1) * in_len]);
                }
            }
        } else {
            geom.for_each_tap(|in_plane, out_plane, widx, ky, kx| {
                let wv = wd[widx];
                let cols = geom.ox_range(kx);
                let mut acc = 0.0;
                for oy in 0..geom.oh {
                    let Some(iy) = geom.iy(oy, ky) else { continue };
                    let orow = out_plane + oy * geom.ow;
                    let irow = in_plane + iy * geom.w;
                    if cols.is_empty() {
                        continue;
                    }
                    let go = &g[orow + cols.start..orow + cols.end];
                    let first = irow + geom.ix(cols.start, kx);
                    let span = (go.len() - 1) * geom.stride + 1;
                    let xs = &xd[first..first + span];
                    acc += go
                        .iter()
                        .zip(xs.iter().step_by(geom.stride))
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    if need_x {
                        let gxs = gx[first..first + span].iter_mut().step_by(geom.stride);
                        gxs.zip(go).for_each(|(o, &gv)| *o += wv * gv);
                    }
                }
                if need_w {
                    gw[widx] += acc;
                }
            });
        }
        let plane = geom.oh * geom.ow;
        let mut gb = vec![0.0; geom.cout];
        for (i, chunk) in g.chunks(plane).enumerate() {
            gb[i % geom.cout] += chunk.iter().sum::<f64>();
        }
        vec![(x, gx), (weight, gw), (bias, gb)]
    }

    pub(super) fn pointwise(&self, x: Var, weight: Var, bias: Var) -> Contributions {
        let xs = self.val(x).shape();
        let (b, cin, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cout = self.out.shape()[1];
        let xd = self.val(x).data();
        let wd = self.val(weight).data();
        let g = self.gout;
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        let mut gb = vec![0.0; cout];
        for bi in 0..b {
            for co in 0..cout {
                let go = &g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                gb[co] += go.iter().sum::<f64>();
                for ci in 0..cin {
                    let src = (bi * cin + ci) * hw;
                    let wv = wd[co * cin + ci];
                    let mut acc = 0.0;
                    for (p, &gv) in go.iter().enumerate() {
                        acc += gv * xd[src + p];
                        gx[src + p] += wv * gv;
                    }
                    gw[co * cin + ci] += acc;
                }
            }
        }
        vec![(x, gx), (weight, gw), (bias, gb)]
    }

    pub(super) fn pool(&self, x: Var, kind: PoolKind, k: usize, cache: &[usize]) -> Contributions {
        let xs = self.val(x).shape();
        let (h, w) = (xs[2], xs[3]);
        let mut gx = vec![0.0; self.val(x).numel()];
        match kind {
            PoolKind::Max | PoolKind::Min => {
                for (o, &src) in cache.iter().enumerate() {
                    gx[src] += self.gout[o];
                }
            }
            PoolKind::Avg => {
                let r = (k / 2) as isize;
                for plane in 0..xs[0] * xs[1] {
                    let base = plane * h * w;
                    for oy in 0..h {
                        for ox in 0..w {
                            let o = base + oy * w + ox;
                            let share = self.gout[o] / cache[o] as f64;
                            let y0 = (oy as isize - r).max(0) as usize;
                            let y1 = ((oy as isize + r) as usize).min(h - 1);
                            let x0 = (ox as isize - r).max(0) as usize;
                            let x1 = ((ox as isize + r) as usize).min(w - 1);
                            for iy in y0..=y1 {
                                gx[base + iy * w + x0..=base + iy * w + x1]
                                    .iter_mut()
                                    .for_each(|v| *v += share);
                            }
                        }
                    }
                }
            }
        }
        vec![(x, gx)]
    }
}
