//! Forward and backward kernels for the transformer building blocks.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{gemm, softmax_row, Mat};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LnCache<S> {
    pub xhat: Mat<S>,
    pub rstd: Vec<S>,
}

pub(crate) fn layer_norm<S: Scalar>(x: &Mat<S>, gain: &[S], bias: &[S]) -> (Mat<S>, LnCache<S>) {
    let d = x.cols;
    let n = S::from_usize_lossy(d);
    let eps = S::from_f64_lossy(LN_EPS);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rs = S::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            xh[j] = (v - mean) * rs;
        }
        let yr = y.row_mut(r);
        let xh = xhat.row(r);
        for j in 0..d {
            yr[j] = xh[j] * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dgain` and `dbias`.
pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &Mat<S>,
    cache: &LnCache<S>,
    gain: &[S],
    dgain: &mut [S],
    dbias: &mut [S],
) -> Mat<S> {
    let d = dy.cols;
    let n = S::from_usize_lossy(d);
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![S::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_xhat = S::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let rs = cache.rstd[r];
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Which keys a query row may attend to.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnMask<'a> {
    /// `false` marks padded keys.
    pub key_valid: Option<&'a [bool]>,
    /// Query row `i` sees keys `0..=i + offset`.
    pub causal_offset: Option<usize>,
}

impl AttnMask<'_> {
    pub const NONE: AttnMask<'static> = AttnMask { key_valid: None, causal_offset: None };

    #[inline]
    fn allows(&self, i: usize, j: usize) -> bool {
        self.key_valid.is_none_or(|kv| kv[j]) && self.causal_offset.is_none_or(|off| j <= i + off)
    }
}

/// Multi-head scaled dot-product attention on already-projected `q`, `k`, `v`.
/// Returns the concatenated head outputs and the per-head probabilities.
pub(crate) fn attend<S: Scalar>(
    q: &Mat<S>,
    k: &Mat<S>,
    v: &Mat<S>,
    n_heads: usize,
    mask: AttnMask<'_>,
) -> (Mat<S>, Vec<Mat<S>>) {
    let dh = q.cols / n_heads;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let mut ctx = Mat::zeros(q.rows, q.cols);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut p = Mat::zeros(q.rows, k.rows);
        gemm(scale, q.view().cols(h * dh, dh), k.view().cols(h * dh, dh).t(), S::zero(), p.view_mut());
        for i in 0..p.rows {
            softmax_row(p.row_mut(i), |j| mask.allows(i, j));
        }
        gemm(S::one(), p.view(), v.view().cols(h * dh, dh), S::zero(), ctx.view_mut().cols(h * dh, dh));
        probs.push(p);
    }
    (ctx, probs)
}

/// Gradients of [`attend`] with respect to `q`, `k` and `v`.
pub(crate) fn attend_backward<S: Scalar>(
    dctx: &Mat<S>,
    q: &Mat<S>,
    k: &Mat<S>,
    v: &Mat<S>,
    probs: &[Mat<S>],
) -> (Mat<S>, Mat<S>, Mat<S>) {
    let n_heads = probs.len();
    let dh = q.cols / n_heads;
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    let mut dq = Mat::zeros(q.rows, q.cols);
    let mut dk = Mat::zeros(k.rows, k.cols);
    let mut dv = Mat::zeros(v.rows, v.cols);
    for (h, p) in probs.iter().enumerate() {
        let dctx_h = dctx.view().cols(h * dh, dh);
        let mut ds = Mat::zeros(p.rows, p.cols);
        gemm(S::one(), dctx_h, v.view().cols(h * dh, dh).t(), S::zero(), ds.view_mut());
        gemm(S::one(), p.view().t(), dctx_h, S::zero(), dv.view_mut().cols(h * dh, dh));
        for i in 0..p.rows {
            let pr = p.row(i);
            let dr = ds.row_mut(i);
            let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        gemm(scale, ds.view(), k.view().cols(h * dh, dh), S::zero(), dq.view_mut().cols(h * dh, dh));
        gemm(scale, ds.view().t(), q.view().cols(h * dh, dh), S::zero(), dk.view_mut().cols(h * dh, dh));
    }
    (dq, dk, dv)
}

// tanh approximation of GELU
#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(0.797_884_560_802_865_4);
    let a = S::from_f64_lossy(0.044_715);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(0.797_884_560_802_865_4);
    let a = S::from_f64_lossy(0.044_715);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
pub(crate) fn dropout_mask<S: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<S> {
    let keep = S::from_f64_lossy(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect()
}

pub(crate) fn apply_mask<S: Scalar>(m: &mut Mat<S>, mask: &Option<Vec<S>>) {
    if let Some(mask) = mask {
        for (v, &k) in m.data.iter_mut().zip(mask) {
            *v *= k;
        }
    }
}
