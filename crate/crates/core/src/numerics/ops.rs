use crate::error::{Error, Result};
use crate::numerics::{Matrix, Param, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Gradient of the input of [`softmax_rows`] given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - inner);
        }
    }
    Ok(dx)
}

pub fn sigmoid(a: &Matrix) -> Matrix {
    a.map(|x| 1.0 / (1.0 + (-x).exp()))
}

pub fn tanh_m(a: &Matrix) -> Matrix {
    a.map(f64::tanh)
}

/// Intermediates retained by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Per-row standardization (population variance, `LAYER_NORM_EPS`) followed by
/// a per-feature affine map.
pub fn layer_norm(a: &Matrix, gain: &Param, bias: &Param) -> Result<(Matrix, LayerNormCache)> {
    let cols = a.cols();
    for p in [gain, bias] {
        if p.shape() != (1, cols) {
            return Err(Error::dim("layer_norm", a.shape(), p.shape()));
        }
    }
    let mut normalized = a.clone();
    let mut inv_std = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = normalized.row_mut(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * istd;
        }
        inv_std.push(istd);
    }
    let mut out = normalized.clone();
    let (g, b) = (gain.value.data(), bias.value.data());
    for r in 0..out.rows() {
        for ((v, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Accumulates gain/bias gradients and returns the input gradient.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    dy: &Matrix,
    gain: &mut Param,
    bias: &mut Param,
) -> Result<Matrix> {
    let xhat = &cache.normalized;
    if xhat.shape() != dy.shape() {
        return Err(Error::dim("layer_norm_backward", xhat.shape(), dy.shape()));
    }
    bias.accumulate(&dy.col_sums());
    gain.accumulate(&dy.hadamard(xhat)?.col_sums());

    let n = xhat.cols() as f64;
    let g = gain.value.data();
    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
    for r in 0..xhat.rows() {
        let dxhat: Vec<f64> = dy.row(r).iter().zip(g).map(|(d, gv)| d * gv).collect();
        let sum: f64 = dxhat.iter().sum();
        let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
        let istd = cache.inv_std[r];
        for ((out, &dh), &xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
            *out = istd / n * (n * dh - sum - xh * dot);
        }
    }
    Ok(dx)
}

/// Per-entry multipliers applied by [`dropout`]; `None` means identity.
#[derive(Debug, Clone, Default)]
pub struct DropoutMask(Option<Matrix>);

impl DropoutMask {
    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }

    /// Fraction of entries that were zeroed.
    pub fn dropped_fraction(&self) -> f64 {
        match &self.0 {
            None => 0.0,
            Some(m) => m.data().iter().filter(|&&v| v == 0.0).count() as f64 / m.data().len() as f64,
        }
    }
}

/// Inverted dropout. In eval mode, or with `p == 0`, this is the identity and draws nothing from `rng`.
pub fn dropout(a: &Matrix, p: f64, training: bool, rng: &mut Rng) -> Result<(Matrix, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout probability must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((a.clone(), DropoutMask(None)));
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Matrix::zeros(a.rows(), a.cols());
    for v in mask.data_mut() {
        *v = if rng.next_f64() < p { 0.0 } else { keep };
    }
    let out = a.hadamard(&mask)?;
    Ok((out, DropoutMask(Some(mask))))
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Matrix) -> Result<Matrix> {
    match &mask.0 {
        None => Ok(dy.clone()),
        Some(m) => dy.hadamard(m),
    }
}
