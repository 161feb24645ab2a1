//! Forward kernels and their hand-written adjoints.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible:
//! convolution sums each output over (input channel, kernel row, kernel col)
//! and adds the bias last; dense sums over the inner dimension ascending and
//! adds the bias last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// Zero padding that keeps H and W at stride 1. When the total padding is
    /// odd the extra row/column goes on the bottom/right.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// 2x2 window, stride 2.
    Max2x2,
    GlobalAvg,
    GlobalMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (kh, kw) = (w_shape[2], w_shape[3]);
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be positive".into()));
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::dim("conv2d", x_shape, w_shape));
            }
            Ok(ConvGeom {
                oh: (h - kh) / stride + 1,
                ow: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeom {
                oh,
                ow,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad_left`
/// falls inside `[0, width)`.
#[inline]
fn valid_cols(ow: usize, kj: usize, pad_left: usize, stride: usize, width: usize) -> (usize, usize) {
    let off = kj as isize - pad_left as isize;
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = ((width as isize - off) + s - 1) / s;
    (lo.max(0) as usize, (hi.max(0) as usize).min(ow))
}

fn check_conv<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (_, c, _, _) = x.dims4("conv2d")?;
    let (o, ci, _, _) = w.dims4("conv2d")?;
    if ci != c {
        return Err(Error::dim("conv2d", x.shape(), w.shape()));
    }
    if b.shape() != [o] {
        return Err(Error::dim("conv2d", w.shape(), b.shape()));
    }
    Ok(())
}

/// 2-D cross-correlation of an NCHW input with an OIKK kernel plus bias.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_conv(x, w, b)?;
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (o, _, kh, kw) = w.dims4("conv2d")?;
    let g = conv_geom(x.shape(), w.shape(), stride, padding)?;
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); n * o * plane];

    for ni in 0..n {
        for oi in 0..o {
            let op = &mut out[(ni * o + oi) * plane..][..plane];
            for cj in 0..c {
                let xp = &xs[(ni * c + cj) * h * wd..][..h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = ws[((oi * c + cj) * kh + ki) * kw + kj];
                        let (lo, hi) = valid_cols(g.ow, kj, g.pad_left, stride, wd);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let iy = (oy * stride + ki) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xp[iy as usize * wd..][..wd];
                            let orow = &mut op[oy * g.ow..][..g.ow];
                            if stride == 1 {
                                let start = lo + kj - g.pad_left;
                                let src = &xrow[start..start + (hi - lo)];
                                for (dst, &xv) in orow[lo..hi].iter_mut().zip(src) {
                                    *dst += wv * xv;
                                }
                            } else {
                                for (ox, dst) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                                    *dst += wv * xrow[ox * stride + kj - g.pad_left];
                                }
                            }
                        }
                    }
                }
            }
            let bias = bs[oi];
            for v in op.iter_mut() {
                *v += bias;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.oh, g.ow], out))
}

/// `(dx, dw, db)`; `dx` is `None` when it was not requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Adjoint of [`conv2d`]. Returns `(dx, dw, db)`; `dx` is skipped when not needed.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, wd) = x.dims4("conv2d_backward")?;
    let (o, _, kh, kw) = w.dims4("conv2d_backward")?;
    let g = conv_geom(x.shape(), w.shape(), stride, padding)?;
    if dy.shape() != [n, o, g.oh, g.ow] {
        return Err(Error::dim("conv2d_backward", &[n, o, g.oh, g.ow], dy.shape()));
    }
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let plane = g.oh * g.ow;
    let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); o];

    for ni in 0..n {
        for oi in 0..o {
            let dyp = &dys[(ni * o + oi) * plane..][..plane];
            db[oi] += dyp.iter().copied().sum::<T>();
            for cj in 0..c {
                let base = (ni * c + cj) * h * wd;
                let xp = &xs[base..][..h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ((oi * c + cj) * kh + ki) * kw + kj;
                        let wv = ws[widx];
                        let (lo, hi) = valid_cols(g.ow, kj, g.pad_left, stride, wd);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let iy = (oy * stride + ki) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let dyrow = &dyp[oy * g.ow..][..g.ow];
                            let xrow = &xp[iy * wd..][..wd];
                            if stride == 1 {
                                let start = lo + kj - g.pad_left;
                                let len = hi - lo;
                                for (&d, &xv) in dyrow[lo..hi].iter().zip(&xrow[start..start + len]) {
                                    acc += d * xv;
                                }
                                if need_dx {
                                    let dxrow = &mut dx[base + iy * wd..][..wd];
                                    for (dst, &d) in dxrow[start..start + len].iter_mut().zip(&dyrow[lo..hi]) {
                                        *dst += wv * d;
                                    }
                                }
                            } else {
                                for (ox, &d) in dyrow.iter().enumerate().take(hi).skip(lo) {
                                    let ix = ox * stride + kj - g.pad_left;
                                    acc += d * xrow[ix];
                                    if need_dx {
                                        dx[base + iy * wd + ix] += wv * d;
                                    }
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx));
    Ok((
        dx,
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    ))
}

/// `y = x W + b` for `x: B×N`, `W: N×M`, `b: M`.
pub fn dense<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, inner) = x.dims2("dense")?;
    let (wi, m) = w.dims2("dense")?;
    if wi != inner {
        return Err(Error::dim("dense", x.shape(), w.shape()));
    }
    if b.shape() != [m] {
        return Err(Error::dim("dense", w.shape(), b.shape()));
    }
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); rows * m];
    for i in 0..rows {
        let orow = &mut out[i * m..][..m];
        for k in 0..inner {
            let xv = xs[i * inner + k];
            for (dst, &wv) in orow.iter_mut().zip(&ws[k * m..][..m]) {
                *dst += xv * wv;
            }
        }
        for (dst, &bv) in orow.iter_mut().zip(bs) {
            *dst += bv;
        }
    }
    Ok(Tensor::from_parts(vec![rows, m], out))
}

/// Adjoint of [`dense`]: `(dx, dW, db)`.
pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, inner) = x.dims2("dense_backward")?;
    let (_, m) = w.dims2("dense_backward")?;
    if dy.shape() != [rows, m] {
        return Err(Error::dim("dense_backward", &[rows, m], dy.shape()));
    }
    let (xs, ws, dys) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); rows * inner];
    let mut dw = vec![T::zero(); inner * m];
    let mut db = vec![T::zero(); m];
    for i in 0..rows {
        let dyrow = &dys[i * m..][..m];
        for k in 0..inner {
            let wrow = &ws[k * m..][..m];
            dx[i * inner + k] = dyrow.iter().zip(wrow).map(|(&d, &w)| d * w).sum();
            let xv = xs[i * inner + k];
            for (dst, &d) in dw[k * m..][..m].iter_mut().zip(dyrow) {
                *dst += xv * d;
            }
        }
        for (dst, &d) in db.iter_mut().zip(dyrow) {
            *dst += d;
        }
    }
    Ok((
        Tensor::from_parts(vec![rows, inner], dx),
        Tensor::from_parts(vec![inner, m], dw),
        Tensor::from_parts(vec![m], db),
    ))
}

/// Logistic function, split at zero so neither branch overflows.
#[inline]
pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Row-wise softmax of a `B×K` tensor with max subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, k) = x.dims2("softmax")?;
    if !x.all_finite() {
        return Err(Error::Numeric("softmax: non-finite logits".into()));
    }
    let mut out = vec![T::zero(); rows * k];
    for (src, dst) in x.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(Tensor::from_parts(vec![rows, k], out))
}

/// Pooling result plus, for max variants, the flat input index that won each window.
pub(crate) fn pool_with_argmax<T: Element>(x: &Tensor<T>, kind: Pool) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("pool")?;
    let xs = x.data();
    match kind {
        Pool::Max2x2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape("max_pool_2x2", x.shape(), "H and W must be even"));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut arg = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let cands = [
                            base + 2 * i * w + 2 * j,
                            base + 2 * i * w + 2 * j + 1,
                            base + (2 * i + 1) * w + 2 * j,
                            base + (2 * i + 1) * w + 2 * j + 1,
                        ];
                        let mut best = cands[0];
                        for &idx in &cands[1..] {
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                        out.push(xs[best]);
                        arg.push(best);
                    }
                }
            }
            Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
        }
        Pool::GlobalAvg => {
            let hw = h * w;
            let out = xs
                .chunks_exact(hw)
                .map(|p| p.iter().copied().sum::<T>() / T::of(hw as f64))
                .collect();
            Ok((Tensor::from_parts(vec![n, c, 1, 1], out), Vec::new()))
        }
        Pool::GlobalMax => {
            let hw = h * w;
            let mut out = Vec::with_capacity(n * c);
            let mut arg = Vec::with_capacity(n * c);
            for (pi, p) in xs.chunks_exact(hw).enumerate() {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                out.push(p[best]);
                arg.push(pi * hw + best);
            }
            Ok((Tensor::from_parts(vec![n, c, 1, 1], out), arg))
        }
    }
}

pub fn pool<T: Element>(x: &Tensor<T>, kind: Pool) -> Result<Tensor<T>> {
    pool_with_argmax(x, kind).map(|(t, _)| t)
}

/// Cross-channel mean: `N×C×H×W -> N×1×H×W`.
pub(crate) fn channel_mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_mean")?;
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![T::zero(); n * hw];
    for ni in 0..n {
        let dst = &mut out[ni * hw..][..hw];
        for ci in 0..c {
            for (d, &v) in dst.iter_mut().zip(&xs[(ni * c + ci) * hw..][..hw]) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= T::of(c as f64);
        }
    }
    Ok(Tensor::from_parts(vec![n, 1, h, w], out))
}

/// Cross-channel max with the winning flat input index per output pixel.
pub(crate) fn channel_max<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("channel_max")?;
    let hw = h * w;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * hw);
    let mut arg = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = ni * c * hw + p;
            for ci in 1..c {
                let idx = (ni * c + ci) * hw + p;
                if xs[idx] > xs[best] {
                    best = idx;
                }
            }
            out.push(xs[best]);
            arg.push(best);
        }
    }
    Ok((Tensor::from_parts(vec![n, 1, h, w], out), arg))
}

/// Inverted-dropout keep mask: kept entries hold `1/(1-rate)`, dropped hold 0.
pub(crate) fn dropout_mask<T: Element, R: Rng + ?Sized>(len: usize, rate: f32, rng: &mut R) -> Vec<T> {
    let scale = T::of(1.0 / (1.0 - rate) as f64);
    (0..len)
        .map(|_| if rng.random::<f32>() < rate { T::zero() } else { scale })
        .collect()
}

pub(crate) fn check_dropout_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout; the exact identity when not training or when `rate == 0`.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f32,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.numel(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Output shape when broadcasting `a` against `b` (equal ranks; each extent equal or 1).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::dim(op, a, b)),
        })
        .collect()
}

/// Flat source indices into `a` and `b` for each output element, row-major.
pub(crate) fn broadcast_indices(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let rank = out.len();
    let strides = |s: &[usize]| {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(total);
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        res.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}
