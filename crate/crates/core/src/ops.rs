//! Forward kernels and their vector-Jacobian products.
//!
//! Parameter layouts:
//! * linear weight `(C_out, C_in, 1, 1)`, bias `(1, C_out, 1, 1)`
//! * conv kernel `(C_out, C_in, K, K)`, depthwise kernel `(C, 1, K, K)`
//! * norm scale/shift `(1, C, 1, 1)`

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn silu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v * v.sigmoid())
}

pub fn silu_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let mut out = g.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = v.sigmoid();
        *o = *o * s * (S::one() + v * (S::one() - s));
    }
    out
}

pub fn softplus<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(Scalar::softplus)
}

pub fn softplus_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let mut out = g.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = *o * v.sigmoid();
    }
    out
}

/// Per-position statistics kept for the backward pass of [`layer_norm`].
#[derive(Clone, Debug)]
pub struct NormStats<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

fn check_channel_vec<S: Scalar>(v: &Tensor<S>, c: usize, what: &str) -> Result<()> {
    if v.len() != c {
        return Err(Error::dim(format!(
            "{what} has {} entries, expected {c}",
            v.len()
        )));
    }
    Ok(())
}

/// Normalizes over the channel axis at every `(b, y, x)`, then applies a
/// per-channel affine map.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, NormStats<S>)> {
    let [bn, cn, _, _] = x.shape().0;
    check_channel_vec(gamma, cn, "layer_norm gamma")?;
    check_channel_vec(beta, cn, "layer_norm beta")?;
    let hw = x.shape().spatial();
    let inv_c = S::one() / S::of(cn as f64);
    let eps = S::of(eps);
    let mut mean = vec![S::zero(); bn * hw];
    let mut rstd = vec![S::zero(); bn * hw];
    let mut out = Tensor::zeros(x.shape());
    for b in 0..bn {
        let m = &mut mean[b * hw..(b + 1) * hw];
        for c in 0..cn {
            for (acc, &v) in m.iter_mut().zip(x.plane(b, c)) {
                *acc = *acc + v;
            }
        }
        m.iter_mut().for_each(|v| *v = *v * inv_c);
        let r = &mut rstd[b * hw..(b + 1) * hw];
        for c in 0..cn {
            for ((acc, &v), &mu) in r.iter_mut().zip(x.plane(b, c)).zip(m.iter()) {
                let d = v - mu;
                *acc = *acc + d * d;
            }
        }
        r.iter_mut()
            .for_each(|v| *v = S::one() / (*v * inv_c + eps).sqrt());
        for c in 0..cn {
            let (gc, bc) = (gamma.data()[c], beta.data()[c]);
            let xs = x.plane(b, c);
            let os = out.plane_mut(b, c);
            for i in 0..hw {
                os[i] = (xs[i] - m[i]) * r[i] * gc + bc;
            }
        }
    }
    Ok((out, NormStats { mean, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    stats: &NormStats<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [bn, cn, _, _] = x.shape().0;
    let hw = x.shape().spatial();
    let inv_c = S::one() / S::of(cn as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![S::zero(); cn];
    let mut dbeta = vec![S::zero(); cn];
    let mut sum_g = vec![S::zero(); hw];
    let mut sum_gx = vec![S::zero(); hw];
    for b in 0..bn {
        let m = &stats.mean[b * hw..(b + 1) * hw];
        let r = &stats.rstd[b * hw..(b + 1) * hw];
        sum_g.iter_mut().for_each(|v| *v = S::zero());
        sum_gx.iter_mut().for_each(|v| *v = S::zero());
        for c in 0..cn {
            let gc = gamma.data()[c];
            let xs = x.plane(b, c);
            let gs = g.plane(b, c);
            let (mut dg, mut db) = (S::zero(), S::zero());
            for i in 0..hw {
                let xhat = (xs[i] - m[i]) * r[i];
                dg = dg + gs[i] * xhat;
                db = db + gs[i];
                let gh = gs[i] * gc;
                sum_g[i] = sum_g[i] + gh;
                sum_gx[i] = sum_gx[i] + gh * xhat;
            }
            dgamma[c] = dgamma[c] + dg;
            dbeta[c] = dbeta[c] + db;
        }
        for c in 0..cn {
            let gc = gamma.data()[c];
            let xs = x.plane(b, c);
            let gs = g.plane(b, c);
            let ds = dx.plane_mut(b, c);
            for i in 0..hw {
                let xhat = (xs[i] - m[i]) * r[i];
                ds[i] = r[i] * (gs[i] * gc - sum_g[i] * inv_c - xhat * sum_gx[i] * inv_c);
            }
        }
    }
    (
        dx,
        Tensor::channel_vector(&dgamma),
        Tensor::channel_vector(&dbeta),
    )
}

fn linear_dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<(usize, usize)> {
    let ws = w.shape();
    if ws.height() != 1 || ws.width() != 1 {
        return Err(Error::dim(format!("linear weight must be (C_out, C_in, 1, 1), got {ws:?}")));
    }
    let (c_out, c_in) = (ws.batch(), ws.channels());
    if x.shape().channels() != c_in {
        return Err(Error::dim(format!(
            "linear expects {c_in} input channels, got {}",
            x.shape().channels()
        )));
    }
    if let Some(b) = b {
        check_channel_vec(b, c_out, "linear bias")?;
    }
    Ok((c_out, c_in))
}

/// Per-position channel mixing `y[o] = sum_i W[o][i] x[i] + b[o]`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let (c_out, c_in) = linear_dims(x, w, b)?;
    let bn = x.shape().batch();
    let mut out = Tensor::zeros(x.shape().with_channels(c_out));
    let wd = w.data();
    for bi in 0..bn {
        for o in 0..c_out {
            let os = out.plane_mut(bi, o);
            if let Some(b) = b {
                os.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for i in 0..c_in {
                let wv = wd[o * c_in + i];
                if wv == S::zero() {
                    continue;
                }
                for (acc, &xv) in os.iter_mut().zip(x.plane(bi, i)) {
                    *acc = *acc + wv * xv;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (c_out, c_in) = (w.shape().batch(), w.shape().channels());
    let bn = x.shape().batch();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![S::zero(); c_out];
    let wd = w.data();
    for bi in 0..bn {
        for o in 0..c_out {
            let gs = g.plane(bi, o);
            db[o] = db[o] + gs.iter().fold(S::zero(), |a, &v| a + v);
            for i in 0..c_in {
                let xs = x.plane(bi, i);
                let dot = gs.iter().zip(xs).fold(S::zero(), |a, (&gv, &xv)| a + gv * xv);
                dw.data_mut()[o * c_in + i] = dw.data()[o * c_in + i] + dot;
            }
        }
        for i in 0..c_in {
            let ds = dx.plane_mut(bi, i);
            for o in 0..c_out {
                let wv = wd[o * c_in + i];
                for (acc, &gv) in ds.iter_mut().zip(g.plane(bi, o)) {
                    *acc = *acc + wv * gv;
                }
            }
        }
    }
    (dx, dw, Tensor::channel_vector(&db))
}

/// Output extent of a "same-before-stride" convolution: `ceil(n / stride)`.
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

struct ConvGeom {
    k: usize,
    pad: usize,
    stride: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(k: usize, stride: usize, h: usize, w: usize) -> Self {
        ConvGeom {
            k,
            pad: (k - 1) / 2,
            stride,
            h,
            w,
            oh: conv_out_len(h, stride),
            ow: conv_out_len(w, stride),
        }
    }

    /// Calls `f(out_index, in_index)` for every in-bounds tap `(ky, kx)`.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.oh {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..self.ow {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.ow + ox, iy * self.w + ix as usize);
            }
        }
    }
}

/// Per-channel `K x K` convolution with zero "same" padding.
pub fn depthwise_conv2d<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let [bn, cn, h, w] = x.shape().0;
    let ks = k.shape();
    if ks.height() != ks.width() {
        return Err(Error::Config(format!("depthwise kernel must be square, got {ks:?}")));
    }
    if ks.height().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "depthwise kernel size must be odd, got {}",
            ks.height()
        )));
    }
    if ks.batch() != cn || ks.channels() != 1 {
        return Err(Error::dim(format!(
            "depthwise kernel {ks:?} does not match {cn} channels"
        )));
    }
    if let Some(b) = b {
        check_channel_vec(b, cn, "depthwise bias")?;
    }
    let geom = ConvGeom::new(ks.height(), 1, h, w);
    let kk = geom.k * geom.k;
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..bn {
        for c in 0..cn {
            let xs = x.plane(bi, c);
            let os = out.plane_mut(bi, c);
            if let Some(b) = b {
                os.iter_mut().for_each(|v| *v = b.data()[c]);
            }
            for ky in 0..geom.k {
                for kx in 0..geom.k {
                    let wv = k.data()[c * kk + ky * geom.k + kx];
                    geom.for_each_tap(ky, kx, |o, i| os[o] = os[o] + wv * xs[i]);
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dk, db)`.
pub fn depthwise_conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [bn, cn, h, w] = x.shape().0;
    let geom = ConvGeom::new(k.shape().height(), 1, h, w);
    let kk = geom.k * geom.k;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut db = vec![S::zero(); cn];
    for bi in 0..bn {
        for c in 0..cn {
            let xs = x.plane(bi, c);
            let gs = g.plane(bi, c);
            db[c] = db[c] + gs.iter().fold(S::zero(), |a, &v| a + v);
            let ds = dx.plane_mut(bi, c);
            for ky in 0..geom.k {
                for kx in 0..geom.k {
                    let idx = c * kk + ky * geom.k + kx;
                    let wv = k.data()[idx];
                    let mut acc = S::zero();
                    geom.for_each_tap(ky, kx, |o, i| {
                        ds[i] = ds[i] + wv * gs[o];
                        acc = acc + gs[o] * xs[i];
                    });
                    dk.data_mut()[idx] = dk.data()[idx] + acc;
                }
            }
        }
    }
    (dx, dk, Tensor::channel_vector(&db))
}

/// Dense cross-correlation with kernel `(C_out, C_in, K, K)`, zero padding
/// `(K - 1) / 2` and the given stride; spatial extents become `ceil(n / stride)`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
) -> Result<Tensor<S>> {
    let [bn, cn, h, w] = x.shape().0;
    let ks = k.shape();
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if ks.height() != ks.width() {
        return Err(Error::Config(format!("conv kernel must be square, got {ks:?}")));
    }
    if ks.channels() != cn {
        return Err(Error::dim(format!(
            "conv kernel {ks:?} expects {} input channels, got {cn}",
            ks.channels()
        )));
    }
    let c_out = ks.batch();
    if let Some(b) = b {
        check_channel_vec(b, c_out, "conv bias")?;
    }
    let geom = ConvGeom::new(ks.height(), stride, h, w);
    let kk = geom.k * geom.k;
    let mut out = Tensor::zeros(Shape::new(bn, c_out, geom.oh, geom.ow));
    for bi in 0..bn {
        for o in 0..c_out {
            let os = out.plane_mut(bi, o);
            if let Some(b) = b {
                os.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for i in 0..cn {
                let xs = x.plane(bi, i);
                for ky in 0..geom.k {
                    for kx in 0..geom.k {
                        let wv = k.data()[(o * cn + i) * kk + ky * geom.k + kx];
                        geom.for_each_tap(ky, kx, |oi, ii| os[oi] = os[oi] + wv * xs[ii]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dk, db)`.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [bn, cn, h, w] = x.shape().0;
    let c_out = k.shape().batch();
    let geom = ConvGeom::new(k.shape().height(), stride, h, w);
    let kk = geom.k * geom.k;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut db = vec![S::zero(); c_out];
    for bi in 0..bn {
        for o in 0..c_out {
            let gs = g.plane(bi, o);
            db[o] = db[o] + gs.iter().fold(S::zero(), |a, &v| a + v);
            for i in 0..cn {
                let xs = x.plane(bi, i);
                for ky in 0..geom.k {
                    for kx in 0..geom.k {
                        let idx = (o * cn + i) * kk + ky * geom.k + kx;
                        let wv = k.data()[idx];
                        let mut acc = S::zero();
                        let ds = dx.plane_mut(bi, i);
                        geom.for_each_tap(ky, kx, |oi, ii| {
                            ds[ii] = ds[ii] + wv * gs[oi];
                            acc = acc + gs[oi] * xs[ii];
                        });
                        dk.data_mut()[idx] = dk.data()[idx] + acc;
                    }
                }
            }
        }
    }
    (dx, dk, Tensor::channel_vector(&db))
}

/// `out[b, c, p] = x[b, c, index[p]]` where `p` runs over an `out_h x out_w` grid.
pub fn gather_spatial<S: Scalar>(
    x: &Tensor<S>,
    index: &[usize],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<S>> {
    if index.len() != out_h * out_w {
        return Err(Error::dim(format!(
            "gather index has {} entries for a {out_h}x{out_w} grid",
            index.len()
        )));
    }
    let hw = x.shape().spatial();
    if let Some(&bad) = index.iter().find(|&&i| i >= hw) {
        return Err(Error::dim(format!("gather index {bad} out of range {hw}")));
    }
    let [bn, cn, _, _] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(bn, cn, out_h, out_w));
    for b in 0..bn {
        for c in 0..cn {
            let xs = x.plane(b, c);
            for (o, &i) in out.plane_mut(b, c).iter_mut().zip(index) {
                *o = xs[i];
            }
        }
    }
    Ok(out)
}

pub fn gather_spatial_backward<S: Scalar>(in_shape: Shape, index: &[usize], g: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(in_shape);
    let [bn, cn, _, _] = in_shape.0;
    for b in 0..bn {
        for c in 0..cn {
            let gs = g.plane(b, c);
            let ds = dx.plane_mut(b, c);
            for (&gv, &i) in gs.iter().zip(index) {
                ds[i] = ds[i] + gv;
            }
        }
    }
    dx
}

/// Source of one output channel in [`select_channels`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelSource {
    First(usize),
    Second(usize),
}

/// Assembles output channels from two same-shaped tensors.
pub fn select_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, map: &[ChannelSource]) -> Result<Tensor<S>> {
    a.check_same(b, "select_channels")?;
    let cn = a.shape().channels();
    for src in map {
        let (ChannelSource::First(c) | ChannelSource::Second(c)) = *src;
        if c >= cn {
            return Err(Error::dim(format!("channel {c} out of range {cn}")));
        }
    }
    let bn = a.shape().batch();
    let mut out = Tensor::zeros(a.shape().with_channels(map.len()));
    for bi in 0..bn {
        for (o, src) in map.iter().enumerate() {
            let plane = match *src {
                ChannelSource::First(c) => a.plane(bi, c),
                ChannelSource::Second(c) => b.plane(bi, c),
            };
            out.plane_mut(bi, o).copy_from_slice(plane);
        }
    }
    Ok(out)
}

pub fn select_channels_backward<S: Scalar>(
    in_shape: Shape,
    map: &[ChannelSource],
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let mut da = Tensor::zeros(in_shape);
    let mut db = Tensor::zeros(in_shape);
    for bi in 0..in_shape.batch() {
        for (o, src) in map.iter().enumerate() {
            let (dst, c) = match *src {
                ChannelSource::First(c) => (&mut da, c),
                ChannelSource::Second(c) => (&mut db, c),
            };
            for (d, &gv) in dst.plane_mut(bi, c).iter_mut().zip(g.plane(bi, o)) {
                *d = *d + gv;
            }
        }
    }
    (da, db)
}
