//! Margin softmax losses (CosFace, ArcFace) on cosine logits.
//!
//! Features and class weights are L2-normalized so every logit is a cosine
//! scaled by `s`. The target logit receives the margin:
//!
//! * CosFace: `s·(cosθ − m)`
//! * ArcFace: `s·cos(θ + m)` while `θ + m ≤ π`, and `s·(cosθ − (1 − cos m))`
//!   past that point, which meets `−s` at the boundary and keeps decreasing.
//!
//! Softmax denominators and the class reduction of the feature gradient go
//! through [`ExactSum`], so the result does not depend on how the classes are
//! ordered or partitioned. The sharded classifier relies on this to be
//! bitwise identical to the single-worker path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::matrix::{dot, norm, Matrix};
use crate::scalar::Scalar;

const ZERO_NORM: f64 = 1e-30;
// Floor for sinθ in the ArcFace derivative near θ = 0.
const MIN_SIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(alias = "plain_softmax", alias = "softmax")]
    Plain,
    CosFace,
    ArcFace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::cosface(0.4, 64.0)
    }
}

impl LossConfig {
    pub fn plain(scale: f64) -> Self {
        Self {
            kind: LossKind::Plain,
            margin: 0.0,
            scale,
        }
    }

    pub fn cosface(margin: f64, scale: f64) -> Self {
        Self {
            kind: LossKind::CosFace,
            margin,
            scale,
        }
    }

    pub fn arcface(margin: f64, scale: f64) -> Self {
        Self {
            kind: LossKind::ArcFace,
            margin,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidLossConfig(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        let max_margin = match self.kind {
            LossKind::Plain => f64::INFINITY,
            LossKind::CosFace => 1.0,
            LossKind::ArcFace => std::f64::consts::FRAC_PI_2,
        };
        if !(self.margin >= 0.0 && self.margin <= max_margin) {
            return Err(Error::InvalidLossConfig(format!(
                "margin {} outside [0, {}] for {:?}",
                self.margin, max_margin, self.kind
            )));
        }
        Ok(())
    }

    /// Margin-adjusted, scaled target logit for cosine `c`.
    pub fn target_logit<T: Scalar>(&self, c: T) -> T {
        let c = clamp_unit(c);
        let s = T::from_f64_lossy(self.scale);
        let m = T::from_f64_lossy(self.margin);
        match self.kind {
            LossKind::Plain => s * c,
            LossKind::CosFace => s * (c - m),
            LossKind::ArcFace => {
                let (cos_m, sin_m) = arc_consts::<T>(self.margin);
                if c >= -cos_m {
                    let sin_t = (T::one() - c * c).max(T::zero()).sqrt();
                    s * (c * cos_m - sin_t * sin_m)
                } else {
                    s * (c - (T::one() - cos_m))
                }
            }
        }
    }

    /// Derivative of [`Self::target_logit`] with respect to the cosine.
    pub fn target_logit_grad<T: Scalar>(&self, c: T) -> T {
        let c = clamp_unit(c);
        let s = T::from_f64_lossy(self.scale);
        match self.kind {
            LossKind::Plain | LossKind::CosFace => s,
            LossKind::ArcFace => {
                let (cos_m, sin_m) = arc_consts::<T>(self.margin);
                if c >= -cos_m {
                    let sin_t = (T::one() - c * c)
                        .max(T::zero())
                        .sqrt()
                        .max(T::from_f64_lossy(MIN_SIN));
                    s * (cos_m + sin_m * c / sin_t)
                } else {
                    s
                }
            }
        }
    }
}

fn arc_consts<T: Scalar>(margin: f64) -> (T, T) {
    (
        T::from_f64_lossy(margin.cos()),
        T::from_f64_lossy(margin.sin()),
    )
}

#[inline]
fn clamp_unit<T: Scalar>(c: T) -> T {
    c.max(-T::one()).min(T::one())
}

/// Scales every row to unit L2 norm.
pub fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        normalize_in_place(out.row_mut(i)).ok_or(Error::ZeroRow { row: i })?;
    }
    Ok(out)
}

/// Normalizes `v` and returns its original norm, or `None` for a zero row.
pub(crate) fn normalize_in_place<T: Scalar>(v: &mut [T]) -> Option<T> {
    let n = norm(v);
    if !(n.to_f64_exact() >= ZERO_NORM) {
        return None;
    }
    for x in v.iter_mut() {
        *x = *x / n;
    }
    Some(n)
}

/// Backpropagates `grad` (w.r.t. the unit vector `unit`) through `x ↦ x/‖x‖`.
pub(crate) fn normalize_backward<T: Scalar>(unit: &[T], grad: &[T], norm: T) -> Vec<T> {
    let proj = dot(unit, grad);
    unit.iter()
        .zip(grad)
        .map(|(&u, &g)| (g - u * proj) / norm)
        .collect()
}

/// Pairwise cosines of unit rows, clamped to `[-1, 1]`.
pub fn cosine_logits<T: Scalar>(features: &Matrix<T>, weights: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(features.matmul_t(weights)?.map(clamp_unit))
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimMismatch {
            expected: rows,
            found: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Scales cosine logits by `s` and applies the margin to each row's target.
pub fn apply_margin<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Matrix<T>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let s = T::from_f64_lossy(cfg.scale);
    let mut out = logits.map(|c| s * c);
    for (i, &y) in labels.iter().enumerate() {
        out[(i, y)] = cfg.target_logit(logits[(i, y)]);
    }
    Ok(out)
}

/// Max of a row slice; `-inf` when empty.
pub(crate) fn row_max<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::neg_infinity(), |m, &x| m.max(x))
}

/// Writes `exp(x - shift)` into `out` and accumulates the values into `acc`.
pub(crate) fn shifted_exp<T: Scalar>(row: &[T], shift: T, out: &mut [T], acc: &mut ExactSum) {
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - shift).exp();
        acc.add_scalar(*o);
    }
}

/// Per-sample losses and probabilities of a softmax cross-entropy.
pub(crate) fn softmax_parts<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> (Vec<T>, Matrix<T>) {
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut per_sample = Vec::with_capacity(logits.rows());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row_max(row);
        let mut acc = ExactSum::new();
        let p = probs.row_mut(i);
        shifted_exp(row, max, p, &mut acc);
        let denom: T = acc.to_scalar();
        per_sample.push(sample_loss(denom, max, row[y]));
        for v in p.iter_mut() {
            *v = *v / denom;
        }
    }
    (per_sample, probs)
}

#[inline]
pub(crate) fn sample_loss<T: Scalar>(denom: T, max: T, target: T) -> T {
    denom.ln() + max - target
}

/// Gradient of the batch-mean loss with respect to one logit.
#[inline]
pub(crate) fn logit_grad<T: Scalar>(p: T, is_target: bool, inv_n: T) -> T {
    if is_target {
        (p - T::one()) * inv_n
    } else {
        p * inv_n
    }
}

pub(crate) fn inv_batch<T: Scalar>(n: usize) -> T {
    T::one() / T::from_usize_lossy(n.max(1))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_ce<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let (per_sample, mut grad) = softmax_parts(logits, labels);
    let inv_n = inv_batch::<T>(logits.rows());
    for (i, &y) in labels.iter().enumerate() {
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = logit_grad(*g, j == y, inv_n);
        }
    }
    Ok((mean(&per_sample), grad))
}

pub(crate) fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize_lossy(xs.len())
}

/// Loss and gradients of a cosine classifier whose features are already unit
/// rows. `d_features` is with respect to the unit features, `d_weights` with
/// respect to the raw (unnormalized) weight rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierPass<T> {
    pub loss: T,
    pub target_prob: Vec<T>,
    pub d_features: Matrix<T>,
    pub d_weights: Matrix<T>,
}

pub fn classifier_pass<T: Scalar>(
    unit_features: &Matrix<T>,
    weights: &Matrix<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<ClassifierPass<T>> {
    cfg.validate()?;
    if unit_features.cols() != weights.cols() {
        return Err(Error::DimMismatch {
            expected: weights.cols(),
            found: unit_features.cols(),
        });
    }
    check_labels(labels, unit_features.rows(), weights.rows())?;
    let mut unit_w = weights.clone();
    let mut w_norms = Vec::with_capacity(weights.rows());
    for c in 0..weights.rows() {
        w_norms.push(normalize_in_place(unit_w.row_mut(c)).ok_or(Error::ZeroRow { row: c })?);
    }
    let cos = cosine_logits(unit_features, &unit_w)?;
    let logits = apply_margin(&cos, labels, cfg)?;
    let (per_sample, probs) = softmax_parts(&logits, labels);
    let loss = mean(&per_sample);

    let n = unit_features.rows();
    let d = unit_features.cols();
    let inv_n = inv_batch::<T>(n);
    let mut dcos = Matrix::zeros(n, weights.rows());
    for (i, &y) in labels.iter().enumerate() {
        for (j, g) in dcos.row_mut(i).iter_mut().enumerate() {
            *g = cos_grad(cfg, probs[(i, j)], cos[(i, j)], j == y, inv_n);
        }
    }
    let target_prob = labels.iter().enumerate().map(|(i, &y)| probs[(i, y)]).collect();

    let mut d_features = Matrix::zeros(n, d);
    for i in 0..n {
        let mut accs = vec![ExactSum::new(); d];
        for c in 0..weights.rows() {
            let g = dcos[(i, c)];
            for (acc, &w) in accs.iter_mut().zip(unit_w.row(c)) {
                acc.add_scalar(g * w);
            }
        }
        for (out, acc) in d_features.row_mut(i).iter_mut().zip(&accs) {
            *out = acc.to_scalar();
        }
    }
    let mut d_weights = Matrix::zeros(weights.rows(), d);
    for c in 0..weights.rows() {
        let d_unit = class_grad(&dcos, unit_features, c);
        let dw = normalize_backward(unit_w.row(c), &d_unit, w_norms[c]);
        d_weights.row_mut(c).copy_from_slice(&dw);
    }
    Ok(ClassifierPass {
        loss,
        target_prob,
        d_features,
        d_weights,
    })
}

/// Gradient of the batch-mean loss with respect to one cosine.
#[inline]
pub(crate) fn cos_grad<T: Scalar>(cfg: &LossConfig, p: T, cos: T, is_target: bool, inv_n: T) -> T {
    let g = logit_grad(p, is_target, inv_n);
    if is_target {
        g * cfg.target_logit_grad(cos)
    } else {
        g * T::from_f64_lossy(cfg.scale)
    }
}

/// `Σ_i dcos[i, col] · features_i`, summed in sample order.
pub(crate) fn class_grad<T: Scalar>(
    dcos: &Matrix<T>,
    features: &Matrix<T>,
    col: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); features.cols()];
    for i in 0..features.rows() {
        let g = dcos[(i, col)];
        for (o, &f) in out.iter_mut().zip(features.row(i)) {
            *o = *o + g * f;
        }
    }
    out
}

/// End-to-end loss and gradients with respect to raw features and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub d_features: Matrix<T>,
    pub d_weights: Matrix<T>,
}

pub fn loss_grad<T: Scalar>(
    features: &Matrix<T>,
    weights: &Matrix<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossGrad<T>> {
    let mut unit_f = features.clone();
    let mut f_norms = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        f_norms.push(normalize_in_place(unit_f.row_mut(i)).ok_or(Error::ZeroRow { row: i })?);
    }
    let pass = classifier_pass(&unit_f, weights, labels, cfg)?;
    let mut d_features = Matrix::zeros(features.rows(), features.cols());
    for i in 0..features.rows() {
        let g = normalize_backward(unit_f.row(i), pass.d_features.row(i), f_norms[i]);
        d_features.row_mut(i).copy_from_slice(&g);
    }
    Ok(LossGrad {
        loss: pass.loss,
        d_features,
        d_weights: pass.d_weights,
    })
}
