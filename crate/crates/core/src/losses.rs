//! Training objectives: self-distillation, hash-proxy cross entropy and the
//! Gaussian-likelihood BCE quantization penalty, each with its analytic
//! gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codes::{dot, norm, NORM_EPS};
use crate::error::{Error, Result};

/// Likelihoods are clamped to `[LIKELIHOOD_EPS, 1 - LIKELIHOOD_EPS]` before logs.
pub const LIKELIHOOD_EPS: f64 = 1e-7;

/// One trainable hash proxy per class, stored row-major (`n_classes × K`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    values: Vec<f64>,
    n_classes: usize,
    code_length: usize,
}

impl ProxyBank {
    /// Draws i.i.d. standard normal entries scaled by `1/√K`.
    pub fn random<R: Rng + ?Sized>(n_classes: usize, code_length: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (code_length as f64).sqrt();
        let values = (0..n_classes * code_length)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (z * scale).clamp(-1.0, 1.0)
            })
            .collect();
        Self {
            values,
            n_classes,
            code_length,
        }
    }

    pub fn from_flat(values: Vec<f64>, n_classes: usize, code_length: usize) -> Result<Self> {
        if values.len() != n_classes * code_length {
            return Err(Error::shape(
                "proxies",
                n_classes * code_length,
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite proxy value".into()));
        }
        Ok(Self {
            values,
            n_classes,
            code_length,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::shape("proxy row", k, r.len()));
        }
        Self::from_flat(rows.concat(), rows.len(), k)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.code_length..(i + 1) * self.code_length]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.code_length.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Bounds every element to [-1, 1]. Applied after each optimizer step.
    pub fn clamp_to_unit(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// Pairwise cosine similarity between proxies, row-major `n × n`.
    pub fn similarity_matrix(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_classes * self.n_classes);
        for i in 0..self.n_classes {
            for j in 0..self.n_classes {
                out.push(crate::codes::cosine(self.row(i), self.row(j))?);
            }
        }
        Ok(out)
    }
}

/// Unnormalized Gaussian `g(h) = exp(-(h - m)² / 2σ²)`, so `g(m) = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianEstimator {
    pub mean: f64,
    pub std: f64,
}

impl GaussianEstimator {
    /// Estimator centred on +1.
    pub fn positive(std: f64) -> Self {
        Self { mean: 1.0, std }
    }

    /// Estimator centred on -1.
    pub fn negative(std: f64) -> Self {
        Self { mean: -1.0, std }
    }
}

pub fn gaussian_likelihood(e: &GaussianEstimator, h: f64) -> f64 {
    let d = h - e.mean;
    (-(d * d) / (2.0 * e.std * e.std)).exp()
}

/// Loss weights and temperatures shared by the whole objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the self-distillation term.
    pub lambda1: f64,
    /// Weight of the quantization term (applied to codes and to proxies).
    pub lambda2: f64,
    /// Softmax temperature of the proxy loss.
    pub tau: f64,
    /// Standard deviation of the two Gaussian estimators.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            tau: 0.2,
            sigma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    name,
                    format!("must be finite and >= 0, got {v}"),
                ));
            }
        }
        for (name, v) in [("tau", self.tau), ("sigma", self.sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    name,
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Batch-averaged loss terms.
///
/// `total = hp + λ1·sdh + λ2·bceq + λ2·proxy_bceq`; `proxy_bceq` is zero when
/// no proxy bank was supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub hp: f64,
    pub sdh: f64,
    pub bceq: f64,
    pub proxy_bceq: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl LossBundle {
    pub(crate) fn assemble(hp: f64, sdh: f64, bceq: f64, proxy_bceq: f64, w: &LossWeights) -> Self {
        Self {
            hp,
            sdh,
            bceq,
            proxy_bceq,
            total: hp + w.lambda1 * sdh + w.lambda2 * bceq + w.lambda2 * proxy_bceq,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            tau: w.tau,
        }
    }
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_with_grads(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "cosine on vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_EPS || nv < NORM_EPS {
        return Err(Error::Degenerate(format!(
            "cosine with near-zero norm (|u| = {nu:e}, |v| = {nv:e})"
        )));
    }
    let inv = 1.0 / (nu * nv);
    let s = dot(u, v) * inv;
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b * inv - s * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a * inv - s * b / (nv * nv))
        .collect();
    Ok((s.clamp(-1.0, 1.0), du, dv))
}

/// Gradient of the self-distillation loss. Only the student slot exists: the
/// teacher code is a constant in this loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SdhGrad {
    pub student: Vec<f64>,
}

/// `1 - cos(h_t, h_s)` with the gradient with respect to `h_s`.
pub fn sdh_loss(h_t: &[f64], h_s: &[f64]) -> Result<(f64, SdhGrad)> {
    let (s, _, d_student) = cosine_with_grads(h_t, h_s)?;
    let student = d_student.into_iter().map(|g| -g).collect();
    Ok((1.0 - s, SdhGrad { student }))
}

/// Cosine similarity of `h` against every proxy.
pub fn proxy_predictions(p: &ProxyBank, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != p.code_length {
        return Err(Error::shape("hash code", p.code_length, h.len()));
    }
    let nh = norm(h);
    if nh < NORM_EPS {
        return Err(Error::Degenerate(format!(
            "hash code has near-zero norm {nh:e}"
        )));
    }
    p.rows()
        .enumerate()
        .map(|(i, row)| {
            let nr = norm(row);
            if nr < NORM_EPS {
                return Err(Error::Degenerate(format!(
                    "proxy row {i} has near-zero norm {nr:e}"
                )));
            }
            Ok((dot(row, h) / (nr * nh)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Back-propagates `grad_pred` (d loss / d predictions) through
/// [`proxy_predictions`], returning `(d/dh, d/dproxies)`; the proxy gradient
/// is flat row-major like the bank.
pub fn proxy_predictions_backward(
    p: &ProxyBank,
    h: &[f64],
    grad_pred: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grad_pred.len() != p.n_classes {
        return Err(Error::shape(
            "prediction gradient",
            p.n_classes,
            grad_pred.len(),
        ));
    }
    let mut dh = vec![0.0; h.len()];
    let mut dp = vec![0.0; p.values.len()];
    for (i, (row, &g)) in p.rows().zip(grad_pred).enumerate() {
        let (_, d_row, d_h) = cosine_with_grads(row, h).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("proxy row {i}: {m}")),
            other => other,
        })?;
        for (acc, d) in dh.iter_mut().zip(&d_h) {
            *acc += g * d;
        }
        for (acc, d) in dp[i * p.code_length..].iter_mut().zip(&d_row) {
            *acc += g * d;
        }
    }
    Ok((dh, dp))
}

/// Numerically stable softmax of `z`.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross entropy between `y` and `softmax(pred / τ)`, with the gradient
/// `(softmax(pred / τ) - y) / τ` with respect to `pred`.
pub fn hp_loss(y: &[f64], pred: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("must be > 0, got {tau}")));
    }
    if y.len() != pred.len() {
        return Err(Error::shape("label", pred.len(), y.len()));
    }
    let z: Vec<f64> = pred.iter().map(|p| p / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = y
        .iter()
        .zip(&z)
        .filter(|(yk, _)| **yk != 0.0)
        .map(|(yk, zk)| -yk * (zk - lse))
        .sum();
    let y_sum: f64 = y.iter().sum();
    let grad = softmax(&z)
        .into_iter()
        .zip(y)
        .map(|(s, yk)| (y_sum * s - yk) / tau)
        .collect();
    Ok((loss, grad))
}

/// BCE quantization loss `(1/K) Σ_k H_b(b⁺_k, g⁺_k) + H_b(b⁻_k, g⁻_k)` with the
/// gradient with respect to `h`. The labels `b⁺ = [h ≥ 0]`, `b⁻ = 1 - b⁺` are
/// constants; clamped likelihoods contribute no gradient.
pub fn bceq_loss(h: &[f64], sigma: f64) -> Result<(f64, Vec<f64>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("sigma", format!("must be > 0, got {sigma}")));
    }
    if h.is_empty() {
        return Err(Error::InvalidInput("empty hash code".into()));
    }
    let k = h.len() as f64;
    let var = sigma * sigma;
    let (pos, neg) = (
        GaussianEstimator::positive(sigma),
        GaussianEstimator::negative(sigma),
    );
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(h.len());
    for &hk in h {
        let (on, off) = if hk >= 0.0 { (pos, neg) } else { (neg, pos) };
        // `on` is the estimator whose label is 1; `off` has label 0.
        let g_on_raw = gaussian_likelihood(&on, hk);
        let g_off_raw = gaussian_likelihood(&off, hk);
        let g_on = g_on_raw.clamp(LIKELIHOOD_EPS, 1.0 - LIKELIHOOD_EPS);
        let g_off = g_off_raw.clamp(LIKELIHOOD_EPS, 1.0 - LIKELIHOOD_EPS);
        loss += -g_on.ln() - (1.0 - g_off).ln();

        // dg/dh = -g (h - m) / σ²
        let mut d = 0.0;
        if g_on == g_on_raw {
            d += (hk - on.mean) / var;
        }
        if g_off == g_off_raw {
            d += -g_off * (hk - off.mean) / var / (1.0 - g_off);
        }
        grad.push(d / k);
    }
    Ok((loss / k, grad))
}

/// Quantization loss averaged over proxy rows, with a flat gradient.
pub fn proxy_bceq_loss(p: &ProxyBank, sigma: f64) -> Result<(f64, Vec<f64>)> {
    let n = p.n_classes as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.values.len());
    for row in p.rows() {
        let (l, g) = bceq_loss(row, sigma)?;
        loss += l / n;
        grad.extend(g.into_iter().map(|v| v / n));
    }
    Ok((loss, grad))
}

/// `y / ‖y‖₁` for a multi-hot label.
pub fn normalize_multilabel(y: &[u8]) -> Result<Vec<f64>> {
    if let Some(v) = y.iter().find(|v| **v > 1) {
        return Err(Error::InvalidInput(format!(
            "label entry {v} is not 0 or 1"
        )));
    }
    let count = y.iter().filter(|v| **v == 1).count();
    if count == 0 {
        return Err(Error::InvalidInput("label has no positive class".into()));
    }
    Ok(y.iter().map(|&v| f64::from(v) / count as f64).collect())
}

/// Per-sample inputs to [`total_loss`]: normalized label, teacher and student
/// codes, and the teacher's proxy predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInput {
    pub y: Vec<f64>,
    pub h_t: Vec<f64>,
    pub h_s: Vec<f64>,
    pub preds: Vec<f64>,
}

/// Single-sample loss terms. The proxy and quantization terms use the teacher code only.
pub fn sample_loss(input: &LossInput, w: &LossWeights) -> Result<LossBundle> {
    let (hp, _) = hp_loss(&input.y, &input.preds, w.tau)?;
    let (sdh, _) = sdh_loss(&input.h_t, &input.h_s)?;
    let (bceq, _) = bceq_loss(&input.h_t, w.sigma)?;
    Ok(LossBundle::assemble(hp, sdh, bceq, 0.0, w))
}

/// Batch mean of the loss terms plus, if `proxies` is given, the proxy
/// quantization term.
pub fn total_loss(
    batch: &[LossInput],
    proxies: Option<&ProxyBank>,
    w: &LossWeights,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    w.validate()?;
    let n = batch.len() as f64;
    let (mut hp, mut sdh, mut bceq) = (0.0, 0.0, 0.0);
    for input in batch {
        let b = sample_loss(input, w)?;
        hp += b.hp;
        sdh += b.sdh;
        bceq += b.bceq;
    }
    let proxy_bceq = match proxies {
        Some(p) => proxy_bceq_loss(p, w.sigma)?.0,
        None => 0.0,
    };
    Ok(LossBundle::assemble(
        hp / n,
        sdh / n,
        bceq / n,
        proxy_bceq,
        w,
    ))
}
