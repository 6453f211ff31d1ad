//! Forward and adjoint kernels on raw NCHW buffers.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let off = 4 - shape.len().min(4);
    for (i, &d) in shape.iter().enumerate().take(4) {
        out[off + i] = d;
    }
    out
}

/// Strides that read `small` while iterating over `full` (0 on broadcast axes).
pub(crate) fn bcast_strides(small: &[usize], full: &[usize]) -> Result<[usize; 4]> {
    if small.len() != full.len() || full.len() > 4 {
        return Err(Error::shape(format!(
            "cannot broadcast {small:?} onto {full:?}"
        )));
    }
    let s = pad4(small);
    let f = pad4(full);
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for ax in (0..4).rev() {
        if s[ax] == f[ax] {
            strides[ax] = if s[ax] == 1 { 0 } else { acc };
        } else if s[ax] == 1 {
            strides[ax] = 0;
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {small:?} onto {full:?}"
            )));
        }
        acc *= s[ax];
    }
    Ok(strides)
}

/// Applies `f(full_value, small_value)` elementwise, broadcasting `small`.
pub(crate) fn bcast_zip<F: Real>(
    full: &Tensor<F>,
    small: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let st = bcast_strides(small.shape(), full.shape())?;
    let d = pad4(full.shape());
    let a = full.data();
    let b = small.data();
    let mut out = Vec::with_capacity(a.len());
    let mut i = 0;
    for n in 0..d[0] {
        for c in 0..d[1] {
            for h in 0..d[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                if st[3] == 0 {
                    let bv = b[base];
                    out.extend(a[i..i + d[3]].iter().map(|&av| f(av, bv)));
                } else {
                    out.extend(
                        a[i..i + d[3]]
                            .iter()
                            .zip(&b[base..base + d[3]])
                            .map(|(&av, &bv)| f(av, bv)),
                    );
                }
                i += d[3];
            }
        }
    }
    Tensor::from_vec(full.shape(), out)
}

/// Sums `full` down to `small_shape` (adjoint of broadcasting).
pub(crate) fn reduce_sum_to<F: Real>(full: &Tensor<F>, small_shape: &[usize]) -> Result<Tensor<F>> {
    let st = bcast_strides(small_shape, full.shape())?;
    let d = pad4(full.shape());
    let mut out = Tensor::zeros(small_shape);
    let o = out.data_mut();
    let a = full.data();
    let mut i = 0;
    for n in 0..d[0] {
        for c in 0..d[1] {
            for h in 0..d[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                if st[3] == 0 {
                    o[base] = o[base] + a[i..i + d[3]].iter().copied().sum::<F>();
                } else {
                    for (dst, &v) in o[base..base + d[3]].iter_mut().zip(&a[i..i + d[3]]) {
                        *dst = *dst + v;
                    }
                }
                i += d[3];
            }
        }
    }
    Ok(out)
}

pub(crate) fn broadcast_to<F: Real>(small: &Tensor<F>, full_shape: &[usize]) -> Result<Tensor<F>> {
    let zeros = Tensor::zeros(full_shape);
    bcast_zip(&zeros, small, |_, b| b)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, groups: usize) -> Result<Self> {
        let (n, ci, h, w) = match *x {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape(format!("conv input must be rank 4, got {x:?}"))),
        };
        let (co, cig, kh, kw) = match *k {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape(format!("conv kernel must be rank 4, got {k:?}"))),
        };
        if groups == 0 || stride == 0 || ci % groups != 0 || co % groups != 0 || cig * groups != ci
        {
            return Err(Error::shape(format!(
                "conv channels: input {ci}, kernel {k:?}, groups {groups}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!(
                "conv kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(Self {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            groups,
            ho: (h - kh) / stride + 1,
            wo: (w - kw) / stride + 1,
        })
    }

    fn cig(&self) -> usize {
        self.ci / self.groups
    }

    fn cog(&self) -> usize {
        self.co / self.groups
    }

    fn krows(&self) -> usize {
        self.cig() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn is_depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1
    }
}

fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cig() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let src = &plane[(oy * g.stride + ky) * g.w + kx..];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[..g.wo]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Real>(g: &ConvGeom, cols: &[F], x: &mut [F]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cig() {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let base = (oy * g.stride + ky) * g.w + kx;
                    for ox in 0..g.wo {
                        let idx = base + ox * g.stride;
                        plane[idx] = plane[idx] + row[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Real>(g: &ConvGeom, x: &[F], k: &[F]) -> Vec<F> {
    let p = g.ho * g.wo;
    let mut out = vec![F::zero(); g.n * g.co * p];
    if g.is_depthwise() {
        depthwise_forward(g, x, k, &mut out);
        return out;
    }
    let kr = g.krows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kr * p] };
    for n in 0..g.n {
        for gi in 0..g.groups {
            let xin = &x[(n * g.ci + gi * g.cig()) * g.h * g.w..][..g.cig() * g.h * g.w];
            let wk = &k[gi * g.cog() * kr..(gi + 1) * g.cog() * kr];
            let dst = &mut out[(n * g.co + gi * g.cog()) * p..][..g.cog() * p];
            let src: &[F] = if g.is_pointwise() {
                xin
            } else {
                im2col(g, xin, &mut cols);
                &cols
            };
            F::gemm(false, false, g.cog(), kr, p, F::one(), wk, src, F::zero(), dst);
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    k: &[F],
    gout: &[F],
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    if g.is_depthwise() {
        return depthwise_backward(g, x, k, gout, need_x, need_k);
    }
    let p = g.ho * g.wo;
    let kr = g.krows();
    let mut gx = need_x.then(|| vec![F::zero(); x.len()]);
    let mut gk = need_k.then(|| vec![F::zero(); k.len()]);
    let mut cols = vec![F::zero(); kr * p];
    for n in 0..g.n {
        for gi in 0..g.groups {
            let xoff = (n * g.ci + gi * g.cig()) * g.h * g.w;
            let xin = &x[xoff..][..g.cig() * g.h * g.w];
            let wk = &k[gi * g.cog() * kr..(gi + 1) * g.cog() * kr];
            let go = &gout[(n * g.co + gi * g.cog()) * p..][..g.cog() * p];
            if let Some(gk) = gk.as_mut() {
                let src: &[F] = if g.is_pointwise() {
                    xin
                } else {
                    im2col(g, xin, &mut cols);
                    &cols
                };
                let dst = &mut gk[gi * g.cog() * kr..(gi + 1) * g.cog() * kr];
                F::gemm(false, true, g.cog(), p, kr, F::one(), go, src, F::one(), dst);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[xoff..][..g.cig() * g.h * g.w];
                if g.is_pointwise() {
                    F::gemm(true, false, kr, g.cog(), p, F::one(), wk, go, F::one(), dst);
                } else {
                    F::gemm(true, false, kr, g.cog(), p, F::one(), wk, go, F::zero(), &mut cols);
                    col2im_add(g, &cols, dst);
                }
            }
        }
    }
    (gx, gk)
}

fn depthwise_forward<F: Real>(g: &ConvGeom, x: &[F], k: &[F], out: &mut [F]) {
    let p = g.ho * g.wo;
    for n in 0..g.n {
        for c in 0..g.ci {
            let plane = &x[(n * g.ci + c) * g.h * g.w..][..g.h * g.w];
            let wk = &k[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(n * g.co + c) * p..][..p];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    for oy in 0..g.ho {
                        let src = &plane[(oy * g.stride + ky) * g.w + kx..];
                        let row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in row.iter_mut().enumerate() {
                            *d = *d + wv * src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<F: Real>(
    g: &ConvGeom,
    x: &[F],
    k: &[F],
    gout: &[F],
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let p = g.ho * g.wo;
    let mut gx = need_x.then(|| vec![F::zero(); x.len()]);
    let mut gk = need_k.then(|| vec![F::zero(); k.len()]);
    for n in 0..g.n {
        for c in 0..g.ci {
            let xoff = (n * g.ci + c) * g.h * g.w;
            let go = &gout[(n * g.co + c) * p..][..p];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = c * g.kh * g.kw + ky * g.kw + kx;
                    let wv = k[widx];
                    let mut acc = F::zero();
                    for oy in 0..g.ho {
                        let base = xoff + (oy * g.stride + ky) * g.w + kx;
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        if need_k {
                            for (ox, &gv) in grow.iter().enumerate() {
                                acc = acc + gv * x[base + ox * g.stride];
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            for (ox, &gv) in grow.iter().enumerate() {
                                let i = base + ox * g.stride;
                                gx[i] = gx[i] + gv * wv;
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[widx] = gk[widx] + acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub(crate) fn pad_forward<F: Real>(x: &Tensor<F>, pad: usize, replicate: bool) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![F::zero(); n * c * hp * wp];
    let src = x.data();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for y in 0..hp {
            let sy = y as isize - pad as isize;
            if !replicate && (sy < 0 || sy >= h as isize) {
                continue;
            }
            let sy = clamp_idx(sy, h);
            for xx in 0..wp {
                let sx = xx as isize - pad as isize;
                if !replicate && (sx < 0 || sx >= w as isize) {
                    continue;
                }
                d[y * wp + xx] = s[sy * w + clamp_idx(sx, w)];
            }
        }
    }
    Tensor::from_vec(&[n, c, hp, wp], out)
}

pub(crate) fn pad_backward<F: Real>(
    g: &Tensor<F>,
    in_shape: &[usize],
    pad: usize,
    replicate: bool,
) -> Result<Tensor<F>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(in_shape);
    let o = out.data_mut();
    let gd = g.data();
    for plane in 0..n * c {
        let s = &gd[plane * hp * wp..(plane + 1) * hp * wp];
        let d = &mut o[plane * h * w..(plane + 1) * h * w];
        for y in 0..hp {
            let sy = y as isize - pad as isize;
            if !replicate && (sy < 0 || sy >= h as isize) {
                continue;
            }
            let sy = clamp_idx(sy, h);
            for xx in 0..wp {
                let sx = xx as isize - pad as isize;
                if !replicate && (sx < 0 || sx >= w as isize) {
                    continue;
                }
                let i = sy * w + clamp_idx(sx, w);
                d[i] = d[i] + s[y * wp + xx];
            }
        }
    }
    Ok(out)
}

/// `[n, 4c, h, w] -> [n, c, 2h, 2w]`; `inverse` maps the other way.
pub(crate) fn pixel_shuffle<F: Real>(x: &Tensor<F>, inverse: bool) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let (lo_c, lo_h, lo_w) = if inverse {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("pixel unshuffle needs even spatial dims"));
        }
        (c * 4, h / 2, w / 2)
    } else {
        if c % 4 != 0 {
            return Err(Error::shape(format!(
                "pixel shuffle needs channels divisible by 4, got {c}"
            )));
        }
        (c, h, w)
    };
    // (lo_c, lo_h, lo_w) describes the packed side
    let oc = lo_c / 4;
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    for b in 0..n {
        for co in 0..oc {
            for i in 0..2 {
                for j in 0..2 {
                    let packed = b * lo_c + co * 4 + i * 2 + j;
                    for y in 0..lo_h {
                        for xx in 0..lo_w {
                            let p_idx = (packed * lo_h + y) * lo_w + xx;
                            let u_idx =
                                ((b * oc + co) * 2 * lo_h + 2 * y + i) * 2 * lo_w + 2 * xx + j;
                            if inverse {
                                out[p_idx] = src[u_idx];
                            } else {
                                out[u_idx] = src[p_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if inverse {
        [n, lo_c, lo_h, lo_w]
    } else {
        [n, oc, 2 * lo_h, 2 * lo_w]
    };
    Tensor::from_vec(&shape, out)
}

pub(crate) fn upsample_nearest2<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len() * 4);
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            let row = &s[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample_nearest2_adjoint<F: Real>(g: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, h2, w2) = g.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let src = g.data();
    let mut out = vec![F::zero(); n * c * h * w];
    for plane in 0..n * c {
        let s = &src[plane * h2 * w2..(plane + 1) * h2 * w2];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let i = (y / 2) * w + x / 2;
                d[i] = d[i] + s[y * w2 + x];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Per-axis bilinear taps, half-pixel centres, no corner alignment.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn resize_bilinear<F: Real>(x: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("resize to an empty size"));
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let src = x.data();
    let mut out = vec![F::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::lit(wy0), F::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::lit(wx0), F::lit(wx1));
                d[oy * ow + ox] = wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                    + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1]);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub(crate) fn resize_bilinear_adjoint<F: Real>(
    g: &Tensor<F>,
    in_shape: &[usize],
) -> Result<Tensor<F>> {
    let (n, c, oh, ow) = g.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let src = g.data();
    let mut out = Tensor::zeros(in_shape);
    let o = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut o[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::lit(wy0), F::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::lit(wx0), F::lit(wx1));
                let gv = s[oy * ow + ox];
                d[y0 * w + x0] = d[y0 * w + x0] + gv * wy0 * wx0;
                d[y0 * w + x1] = d[y0 * w + x1] + gv * wy0 * wx1;
                d[y1 * w + x0] = d[y1 * w + x0] + gv * wy1 * wx0;
                d[y1 * w + x1] = d[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    Ok(out)
}
