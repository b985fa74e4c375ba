//! Raw forward/backward kernels over NCHW buffers.
//!
//! Convolutions are written as row-wise axpy/dot loops so the unit-stride case
//! vectorizes; all cross-sample reductions run in sample order.

use crate::error::{arg_err, dim_err, Result};
use crate::parallel;
use crate::tensor::{Shape, Tensor};

/// Stride, padding, dilation and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
            groups,
        }
    }
}

/// `floor((len + 2p - d(k-1) - 1) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Valid output-column range for a kernel tap with input offset `off`
/// (`ix = ox * stride + off`).
#[inline]
fn col_range(off: isize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
    let last = in_w as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_w as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let aa = &a[i * 8..i * 8 + 8];
        let bb = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Sum with the same lane structure as [`dot`].
#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let aa = &a[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l];
        }
    }
    let mut tail = 0.0;
    for v in &a[chunks * 8..] {
        tail += v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// One input plane → output plane convolution, with the valid output-column
/// range of every horizontal tap precomputed.
struct PlaneConv {
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    /// Per kx: (first output column, end output column, first input column).
    cols: Vec<(usize, usize, usize)>,
}

impl PlaneConv {
    fn new(ih: usize, iw: usize, oh: usize, ow: usize, kh: usize, kw: usize, g: &ConvGeom) -> Self {
        let cols = (0..kw)
            .map(|kx| {
                let off = (kx * g.dilation) as isize - g.padding as isize;
                let (lo, hi) = col_range(off, g.stride, iw, ow);
                let start = if lo < hi {
                    (lo as isize * g.stride as isize + off) as usize
                } else {
                    0
                };
                (lo, hi, start)
            })
            .collect();
        PlaneConv {
            ih,
            iw,
            oh,
            ow,
            kh,
            stride: g.stride,
            padding: g.padding,
            dilation: g.dilation,
            cols,
        }
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.ih).then_some(iy as usize)
    }

    /// out += conv(inp, w), one output row at a time so the row stays in cache.
    fn forward(&self, out: &mut [f64], inp: &[f64], w: &[f64]) {
        let kw = self.cols.len();
        let s = self.stride;
        for oy in 0..self.oh {
            let orow = &mut out[oy * self.ow..(oy + 1) * self.ow];
            for ky in 0..self.kh {
                let Some(iy) = self.input_row(oy, ky) else { continue };
                let irow = &inp[iy * self.iw..(iy + 1) * self.iw];
                for (kx, &(lo, hi, start)) in self.cols.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    let wv = w[ky * kw + kx];
                    let dst = &mut orow[lo..hi];
                    if s == 1 {
                        axpy(dst, wv, &irow[start..start + (hi - lo)]);
                    } else {
                        for (k, o) in dst.iter_mut().enumerate() {
                            *o += wv * irow[start + k * s];
                        }
                    }
                }
            }
        }
    }

    /// gin += convᵀ(gout, w).
    fn backward_input(&self, gin: &mut [f64], gout: &[f64], w: &[f64]) {
        let kw = self.cols.len();
        let s = self.stride;
        for oy in 0..self.oh {
            let grow = &gout[oy * self.ow..(oy + 1) * self.ow];
            for ky in 0..self.kh {
                let Some(iy) = self.input_row(oy, ky) else { continue };
                let irow = &mut gin[iy * self.iw..(iy + 1) * self.iw];
                for (kx, &(lo, hi, start)) in self.cols.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    let wv = w[ky * kw + kx];
                    let src = &grow[lo..hi];
                    if s == 1 {
                        axpy(&mut irow[start..start + (hi - lo)], wv, src);
                    } else {
                        for (k, gv) in src.iter().enumerate() {
                            irow[start + k * s] += wv * gv;
                        }
                    }
                }
            }
        }
    }

    /// dw += Σ gout · shifted(inp) for every tap.
    fn weight_grad(&self, dw: &mut [f64], gout: &[f64], inp: &[f64]) {
        let kw = self.cols.len();
        let s = self.stride;
        for oy in 0..self.oh {
            let grow = &gout[oy * self.ow..(oy + 1) * self.ow];
            for ky in 0..self.kh {
                let Some(iy) = self.input_row(oy, ky) else { continue };
                let irow = &inp[iy * self.iw..(iy + 1) * self.iw];
                for (kx, &(lo, hi, start)) in self.cols.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    let src = &grow[lo..hi];
                    dw[ky * kw + kx] += if s == 1 {
                        dot(src, &irow[start..start + (hi - lo)])
                    } else {
                        src.iter()
                            .enumerate()
                            .map(|(k, gv)| gv * irow[start + k * s])
                            .sum::<f64>()
                    };
                }
            }
        }
    }
}

/// Scratch planes for the flat stride-1 formulation: the zero-padded input and
/// an output-sized accumulator with the padded row pitch.
struct FlatScratch {
    padded: Vec<f64>,
    acc: Vec<f64>,
}

impl PlaneConv {
    /// Stride-1 spatial kernels run as whole-plane shifted axpys over a padded copy.
    fn flat(&self) -> bool {
        self.stride == 1 && (self.kh > 1 || self.cols.len() > 1)
    }

    fn pitch(&self) -> usize {
        self.iw + 2 * self.padding
    }

    /// Padded-pitch span covering every valid output position.
    fn flat_len(&self) -> usize {
        (self.oh - 1) * self.pitch() + self.ow
    }

    fn scratch(&self) -> FlatScratch {
        let wp = self.pitch();
        FlatScratch {
            padded: vec![0.0; (self.ih + 2 * self.padding) * wp],
            acc: vec![0.0; self.oh * wp],
        }
    }

    fn taps(&self) -> impl Iterator<Item = usize> + '_ {
        let wp = self.pitch();
        let (kw, d) = (self.cols.len(), self.dilation);
        (0..self.kh).flat_map(move |ky| (0..kw).map(move |kx| ky * d * wp + kx * d))
    }

    /// Copy a plane into the interior of `dst`; the border is left untouched.
    fn pad_into(&self, dst: &mut [f64], src: &[f64]) {
        let (wp, p) = (self.pitch(), self.padding);
        for (y, row) in src.chunks_exact(self.iw).enumerate() {
            dst[(y + p) * wp + p..(y + p) * wp + p + self.iw].copy_from_slice(row);
        }
    }

    /// Lay an output-shaped plane out at the padded pitch with zero gaps.
    fn spread_output(&self, dst: &mut [f64], src: &[f64]) {
        let wp = self.pitch();
        for (oy, row) in src.chunks_exact(self.ow).enumerate() {
            dst[oy * wp..oy * wp + self.ow].copy_from_slice(row);
            let end = ((oy + 1) * wp).min(dst.len());
            dst[oy * wp + self.ow..end].fill(0.0);
        }
    }

    fn forward_flat(&self, out: &mut [f64], inp: &[f64], w: &[f64], s: &mut FlatScratch) {
        let (wp, len) = (self.pitch(), self.flat_len());
        self.pad_into(&mut s.padded, inp);
        let acc = &mut s.acc[..len];
        acc.fill(0.0);
        for (off, &wv) in self.taps().zip(w) {
            axpy(acc, wv, &s.padded[off..off + len]);
        }
        for (oy, orow) in out.chunks_exact_mut(self.ow).enumerate() {
            for (o, a) in orow.iter_mut().zip(&acc[oy * wp..oy * wp + self.ow]) {
                *o += a;
            }
        }
    }

    fn backward_input_flat(&self, gin: &mut [f64], gout: &[f64], w: &[f64], s: &mut FlatScratch) {
        let (wp, len, p) = (self.pitch(), self.flat_len(), self.padding);
        self.spread_output(&mut s.acc[..len], gout);
        s.padded.fill(0.0);
        for (off, &wv) in self.taps().zip(w) {
            axpy(&mut s.padded[off..off + len], wv, &s.acc[..len]);
        }
        for (y, grow) in gin.chunks_exact_mut(self.iw).enumerate() {
            let src = &s.padded[(y + p) * wp + p..(y + p) * wp + p + self.iw];
            for (g, v) in grow.iter_mut().zip(src) {
                *g += v;
            }
        }
    }

    fn weight_grad_flat(&self, dw: &mut [f64], gout: &[f64], inp: &[f64], s: &mut FlatScratch) {
        let len = self.flat_len();
        self.pad_into(&mut s.padded, inp);
        self.spread_output(&mut s.acc[..len], gout);
        for (off, d) in self.taps().zip(dw.iter_mut()) {
            *d += dot(&s.acc[..len], &s.padded[off..off + len]);
        }
    }
}

/// Pixels per tile in the 1×1 convolution kernels.
const TILE: usize = 256;

fn is_pointwise(k: (usize, usize), g: &ConvGeom) -> bool {
    k == (1, 1) && g.stride == 1 && g.padding == 0
}

/// Validate a convolution and return its output shape.
pub fn conv_out_shape(x: Shape, w: Shape, g: &ConvGeom) -> Result<Shape> {
    let [n, cin, h, wd] = x.dims();
    let [cout, cin_g, kh, kw] = w.dims();
    if g.groups == 0 || g.stride == 0 || g.dilation == 0 {
        return Err(arg_err!("stride, dilation and groups must be positive"));
    }
    if cin % g.groups != 0 || cout % g.groups != 0 {
        return Err(dim_err!(
            "channels {cin}->{cout} not divisible by groups {}",
            g.groups
        ));
    }
    if cin_g != cin / g.groups {
        return Err(dim_err!(
            "weight {w} expects {} input channels per group, input has {cin} over {} groups",
            cin_g,
            g.groups
        ));
    }
    if kh == 0 || kw == 0 {
        return Err(dim_err!("empty kernel {w}"));
    }
    let oh = conv_out_len(h, kh, g.stride, g.padding, g.dilation)
        .ok_or_else(|| dim_err!("kernel {kh}x{kw} does not fit input {x}"))?;
    let ow = conv_out_len(wd, kw, g.stride, g.padding, g.dilation)
        .ok_or_else(|| dim_err!("kernel {kh}x{kw} does not fit input {x}"))?;
    Ok(Shape::new(n, cout, oh, ow))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let os = conv_out_shape(x.shape(), w.shape(), g)?;
    let [_, cin, h, wd] = x.shape().dims();
    let [cout, cin_g, kh, kw] = w.shape().dims();
    let [_, _, oh, ow] = os.dims();
    let cout_g = cout / g.groups;
    let mut out = Tensor::zeros(os);
    let xin = x.data();
    let wt = w.data();
    let (ip, opl) = (h * wd, oh * ow);
    let pc = PlaneConv::new(h, wd, oh, ow, kh, kw, g);
    let pointwise = is_pointwise((kh, kw), g);
    parallel::for_each_chunk(out.data_mut(), cout * opl, |b, obuf| {
        let xb = &xin[b * cin * ip..(b + 1) * cin * ip];
        if pointwise {
            for t0 in (0..ip).step_by(TILE) {
                let t1 = (t0 + TILE).min(ip);
                for co in 0..cout {
                    let grp = co / cout_g;
                    let orow = &mut obuf[co * opl + t0..co * opl + t1];
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        axpy(orow, wt[co * cin_g + cl], &xb[ci * ip + t0..ci * ip + t1]);
                    }
                }
            }
            return;
        }
        let mut scratch = pc.flat().then(|| pc.scratch());
        for co in 0..cout {
            let grp = co / cout_g;
            let oplane = &mut obuf[co * opl..(co + 1) * opl];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let wbase = (co * cin_g + cl) * kh * kw;
                let (xi, wk) = (&xb[ci * ip..(ci + 1) * ip], &wt[wbase..wbase + kh * kw]);
                match scratch.as_mut() {
                    Some(s) => pc.forward_flat(oplane, xi, wk, s),
                    None => pc.forward(oplane, xi, wk),
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input(gout: &Tensor, x_shape: Shape, w: &Tensor, g: &ConvGeom) -> Tensor {
    let [_, cin, h, wd] = x_shape.dims();
    let [cout, cin_g, kh, kw] = w.shape().dims();
    let [_, _, oh, ow] = gout.shape().dims();
    let cout_g = cout / g.groups;
    let mut gin = Tensor::zeros(x_shape);
    let go = gout.data();
    let wt = w.data();
    let (ip, opl) = (h * wd, oh * ow);
    let pc = PlaneConv::new(h, wd, oh, ow, kh, kw, g);
    let pointwise = is_pointwise((kh, kw), g);
    parallel::for_each_chunk(gin.data_mut(), cin * ip, |b, gbuf| {
        let gb = &go[b * cout * opl..(b + 1) * cout * opl];
        if pointwise {
            for t0 in (0..ip).step_by(TILE) {
                let t1 = (t0 + TILE).min(ip);
                for ci in 0..cin {
                    let grp = ci / cin_g;
                    let cl = ci % cin_g;
                    let irow = &mut gbuf[ci * ip + t0..ci * ip + t1];
                    for co in grp * cout_g..(grp + 1) * cout_g {
                        axpy(irow, wt[co * cin_g + cl], &gb[co * opl + t0..co * opl + t1]);
                    }
                }
            }
            return;
        }
        let mut scratch = pc.flat().then(|| pc.scratch());
        for co in 0..cout {
            let grp = co / cout_g;
            let gplane = &gb[co * opl..(co + 1) * opl];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let wbase = (co * cin_g + cl) * kh * kw;
                let (gi, wk) = (&mut gbuf[ci * ip..(ci + 1) * ip], &wt[wbase..wbase + kh * kw]);
                match scratch.as_mut() {
                    Some(s) => pc.backward_input_flat(gi, gplane, wk, s),
                    None => pc.backward_input(gi, gplane, wk),
                }
            }
        }
    });
    gin
}

/// Gradient of a convolution with respect to its weight; per-sample partials
/// are summed in sample order.
pub fn conv2d_backward_weight(gout: &Tensor, x: &Tensor, w_shape: Shape, g: &ConvGeom) -> Tensor {
    let [n, cin, h, wd] = x.shape().dims();
    let [cout, cin_g, kh, kw] = w_shape.dims();
    let [_, _, oh, ow] = gout.shape().dims();
    let cout_g = cout / g.groups;
    let go = gout.data();
    let xin = x.data();
    let (ip, opl) = (h * wd, oh * ow);
    let pc = PlaneConv::new(h, wd, oh, ow, kh, kw, g);
    let pointwise = is_pointwise((kh, kw), g);
    let partials = parallel::map_indices(n, |b| {
        let gb = &go[b * cout * opl..(b + 1) * cout * opl];
        let xb = &xin[b * cin * ip..(b + 1) * cin * ip];
        let mut dw = vec![0.0; w_shape.numel()];
        if pointwise {
            for t0 in (0..ip).step_by(TILE) {
                let t1 = (t0 + TILE).min(ip);
                for co in 0..cout {
                    let grp = co / cout_g;
                    let grow = &gb[co * opl + t0..co * opl + t1];
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        dw[co * cin_g + cl] += dot(grow, &xb[ci * ip + t0..ci * ip + t1]);
                    }
                }
            }
            return dw;
        }
        let mut scratch = pc.flat().then(|| pc.scratch());
        for co in 0..cout {
            let grp = co / cout_g;
            let gplane = &gb[co * opl..(co + 1) * opl];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let wbase = (co * cin_g + cl) * kh * kw;
                let (dwk, xi) = (&mut dw[wbase..wbase + kh * kw], &xb[ci * ip..(ci + 1) * ip]);
                match scratch.as_mut() {
                    Some(s) => pc.weight_grad_flat(dwk, gplane, xi, s),
                    None => pc.weight_grad(dwk, gplane, xi),
                }
            }
        }
        dw
    });
    let mut total = vec![0.0; w_shape.numel()];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Tensor::from_vec(w_shape, total).expect("weight gradient shape")
}

/// Pooling flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

pub const POOL_WINDOW: usize = 3;
pub const POOL_PADDING: usize = 1;

pub fn pool_out_shape(x: Shape, stride: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(arg_err!("pool stride must be positive"));
    }
    let [n, c, h, w] = x.dims();
    let oh = conv_out_len(h, POOL_WINDOW, stride, POOL_PADDING, 1)
        .ok_or_else(|| dim_err!("pool window does not fit {x}"))?;
    let ow = conv_out_len(w, POOL_WINDOW, stride, POOL_PADDING, 1)
        .ok_or_else(|| dim_err!("pool window does not fit {x}"))?;
    Ok(Shape::new(n, c, oh, ow))
}

/// Clipped window bounds `[lo, hi)` along one axis.
#[inline]
fn window(o: usize, stride: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - POOL_PADDING as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + POOL_WINDOW as isize) as usize).min(len);
    (lo, hi)
}

/// Window geometry shared by the pooling kernels. Windows are visited in
/// row-major order, one output row at a time, vectorized across columns.
struct PoolPlane {
    pc: PlaneConv,
    /// Unpadded window width per output column.
    width: Vec<usize>,
    /// First valid input column per output column.
    first_col: Vec<usize>,
}

impl PoolPlane {
    fn new(h: usize, w: usize, oh: usize, ow: usize, stride: usize) -> Self {
        let g = ConvGeom::new(stride, POOL_PADDING, 1, 1);
        let (width, first_col) = (0..ow)
            .map(|ox| {
                let (lo, hi) = window(ox, stride, w);
                (hi - lo, lo)
            })
            .unzip();
        PoolPlane {
            pc: PlaneConv::new(h, w, oh, ow, POOL_WINDOW, POOL_WINDOW, &g),
            width,
            first_col,
        }
    }

    fn forward(&self, out: &mut [f64], inp: &[f64], kind: PoolKind) {
        let pc = &self.pc;
        let s = pc.stride;
        for oy in 0..pc.oh {
            let orow = &mut out[oy * pc.ow..(oy + 1) * pc.ow];
            orow.fill(match kind {
                PoolKind::Max => f64::NEG_INFINITY,
                PoolKind::Avg => 0.0,
            });
            let mut rows = 0;
            for ky in 0..POOL_WINDOW {
                let Some(iy) = pc.input_row(oy, ky) else { continue };
                rows += 1;
                let irow = &inp[iy * pc.iw..(iy + 1) * pc.iw];
                for &(lo, hi, start) in &pc.cols {
                    let dst = &mut orow[lo..hi];
                    match (kind, s) {
                        (PoolKind::Max, 1) => {
                            for (o, &v) in dst.iter_mut().zip(&irow[start..]) {
                                *o = if v > *o { v } else { *o };
                            }
                        }
                        (PoolKind::Avg, 1) => {
                            for (o, &v) in dst.iter_mut().zip(&irow[start..]) {
                                *o += v;
                            }
                        }
                        (PoolKind::Max, _) => {
                            for (k, o) in dst.iter_mut().enumerate() {
                                let v = irow[start + k * s];
                                *o = if v > *o { v } else { *o };
                            }
                        }
                        (PoolKind::Avg, _) => {
                            for (k, o) in dst.iter_mut().enumerate() {
                                *o += irow[start + k * s];
                            }
                        }
                    }
                }
            }
            if kind == PoolKind::Avg {
                for (o, &wd) in orow.iter_mut().zip(&self.width) {
                    *o /= (rows * wd) as f64;
                }
            }
        }
    }

    fn backward(&self, gin: &mut [f64], gout: &[f64], inp: &[f64], kind: PoolKind, scratch: &mut (Vec<f64>, Vec<usize>)) {
        let pc = &self.pc;
        let s = pc.stride;
        let (best, arg) = scratch;
        for oy in 0..pc.oh {
            let grow = &gout[oy * pc.ow..(oy + 1) * pc.ow];
            let mut valid = [0usize; POOL_WINDOW];
            let mut nv = 0;
            for ky in 0..POOL_WINDOW {
                if let Some(iy) = pc.input_row(oy, ky) {
                    valid[nv] = iy;
                    nv += 1;
                }
            }
            let valid = &valid[..nv];
            match kind {
                PoolKind::Max => {
                    best.clear();
                    best.resize(pc.ow, f64::NEG_INFINITY);
                    arg.clear();
                    arg.extend(self.first_col.iter().map(|&c| valid[0] * pc.iw + c));
                    for &iy in valid {
                        let irow = &inp[iy * pc.iw..(iy + 1) * pc.iw];
                        for &(lo, hi, start) in &pc.cols {
                            let base = iy * pc.iw + start;
                            let pairs = best[lo..hi].iter_mut().zip(arg[lo..hi].iter_mut());
                            if s == 1 {
                                for (j, ((b, a), &v)) in pairs.zip(&irow[start..start + (hi - lo)]).enumerate() {
                                    let better = v > *b;
                                    *b = if better { v } else { *b };
                                    *a = if better { base + j } else { *a };
                                }
                            } else {
                                for (j, (b, a)) in pairs.enumerate() {
                                    let v = irow[start + j * s];
                                    let better = v > *b;
                                    *b = if better { v } else { *b };
                                    *a = if better { base + j * s } else { *a };
                                }
                            }
                        }
                    }
                    for (&a, &g) in arg.iter().zip(grow) {
                        gin[a] += g;
                    }
                }
                PoolKind::Avg => {
                    best.clear();
                    best.extend(
                        grow.iter()
                            .zip(&self.width)
                            .map(|(g, &wd)| g / (valid.len() * wd) as f64),
                    );
                    for &iy in valid {
                        let irow = &mut gin[iy * pc.iw..(iy + 1) * pc.iw];
                        for &(lo, hi, start) in &pc.cols {
                            if s == 1 {
                                for (d, &g) in irow[start..start + (hi - lo)].iter_mut().zip(&best[lo..hi]) {
                                    *d += g;
                                }
                            } else {
                                for k in lo..hi {
                                    irow[start + (k - lo) * s] += best[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn pool2d_forward(x: &Tensor, kind: PoolKind, stride: usize) -> Result<Tensor> {
    let os = pool_out_shape(x.shape(), stride)?;
    let [_, c, h, w] = x.shape().dims();
    let [_, _, oh, ow] = os.dims();
    let mut out = Tensor::zeros(os);
    let xin = x.data();
    let pp = PoolPlane::new(h, w, oh, ow, stride);
    parallel::for_each_chunk(out.data_mut(), c * oh * ow, |b, obuf| {
        for ch in 0..c {
            let plane = &xin[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            pp.forward(&mut obuf[ch * oh * ow..(ch + 1) * oh * ow], plane, kind);
        }
    });
    Ok(out)
}

/// Max pooling routes to the first maximum in row-major scan order;
/// average pooling divides by the unpadded window size.
pub fn pool2d_backward(gout: &Tensor, x: &Tensor, kind: PoolKind, stride: usize) -> Tensor {
    let [_, c, h, w] = x.shape().dims();
    let [_, _, oh, ow] = gout.shape().dims();
    let mut gin = Tensor::zeros(x.shape());
    let xin = x.data();
    let go = gout.data();
    let pp = PoolPlane::new(h, w, oh, ow, stride);
    parallel::for_each_chunk(gin.data_mut(), c * h * w, |b, gbuf| {
        let mut scratch = (Vec::new(), Vec::new());
        for ch in 0..c {
            let plane = &xin[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let gplane = &go[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            pp.backward(&mut gbuf[ch * h * w..(ch + 1) * h * w], gplane, plane, kind, &mut scratch);
        }
    });
    gin
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch mean and biased variance, accumulated in (sample, pixel) order.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape().dims();
    let p = h * w;
    let count = (n * p) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += sum(&data[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let plane = &data[(b * c + ch) * p..(b * c + ch + 1) * p];
            let mut acc = [0.0f64; 8];
            let chunks = plane.len() / 8;
            for i in 0..chunks {
                for l in 0..8 {
                    let d = plane[i * 8 + l] - m;
                    acc[l] += d * d;
                }
            }
            let mut tail = 0.0;
            for &v in &plane[chunks * 8..] {
                tail += (v - m) * (v - m);
            }
            q += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// y = (x - mean) * inv_std * scale + shift, per channel.
pub fn bn_apply(x: &Tensor, mean: &[f64], inv_std: &[f64], scale: Option<&[f64]>, shift: Option<&[f64]>) -> Tensor {
    let [_, c, h, w] = x.shape().dims();
    let p = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xin = x.data();
    parallel::for_each_chunk(out.data_mut(), c * p, |b, obuf| {
        for ch in 0..c {
            let a = inv_std[ch] * scale.map_or(1.0, |s| s[ch]);
            let off = shift.map_or(0.0, |s| s[ch]) - mean[ch] * a;
            let src = &xin[(b * c + ch) * p..(b * c + ch + 1) * p];
            for (o, &v) in obuf[ch * p..(ch + 1) * p].iter_mut().zip(src) {
                *o = v * a + off;
            }
        }
    });
    out
}

/// Batch-norm backward. With `batch_stats` the statistics are treated as
/// functions of the input; otherwise they are constants.
/// Returns (grad_input, grad_scale, grad_shift) where the parameter gradients are
/// Σ g·x̂ and Σ g.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    gout: &Tensor,
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    scale: Option<&[f64]>,
    batch_stats: bool,
    need_input: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape().dims();
    let p = h * w;
    let go = gout.data();
    let xin = x.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for b in 0..n {
            let gp = &go[(b * c + ch) * p..(b * c + ch + 1) * p];
            let xp = &xin[(b * c + ch) * p..(b * c + ch + 1) * p];
            sg += sum(gp);
            // Σ g·(x - m)·is = is·(Σ g·x − m·Σ g)
            sgx += dot(gp, xp) - m * sum(gp);
        }
        sum_g[ch] = sg;
        sum_gx[ch] = sgx * is;
    }
    if !need_input {
        return (None, sum_gx, sum_g);
    }
    let count = (n * p) as f64;
    let mut gin = Tensor::zeros(x.shape());
    parallel::for_each_chunk(gin.data_mut(), c * p, |b, gbuf| {
        for ch in 0..c {
            let gamma = scale.map_or(1.0, |s| s[ch]);
            let (m, is) = (mean[ch], inv_std[ch]);
            let gp = &go[(b * c + ch) * p..(b * c + ch + 1) * p];
            let dst = &mut gbuf[ch * p..(ch + 1) * p];
            if batch_stats {
                let mg = sum_g[ch] / count;
                let mgx = sum_gx[ch] / count;
                let xp = &xin[(b * c + ch) * p..(b * c + ch + 1) * p];
                let k = gamma * is;
                for ((d, &g), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                    let xhat = (xv - m) * is;
                    *d = k * (g - mg - xhat * mgx);
                }
            } else {
                let k = gamma * is;
                for (d, &g) in dst.iter_mut().zip(gp) {
                    *d = k * g;
                }
            }
        }
    });
    (Some(gin), sum_gx, sum_g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_range_clips_both_ends() {
        // padding 1, kx 0: ix = ox - 1 → ox >= 1
        assert_eq!(col_range(-1, 1, 5, 5), (1, 5));
        // kx 2 with padding 1: ix = ox + 1 → ox <= 3
        assert_eq!(col_range(1, 1, 5, 5), (0, 4));
        // stride 2, off -1: ix = 2ox - 1 ≥ 0 → ox ≥ 1
        assert_eq!(col_range(-1, 2, 6, 3), (1, 3));
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_out_len(8, 3, 2, 1, 1), Some(4));
        assert_eq!(conv_out_len(257, 3, 2, 1, 1), Some(129));
        assert_eq!(conv_out_len(257, 5, 2, 4, 2), Some(129));
        assert_eq!(conv_out_len(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
