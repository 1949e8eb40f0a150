//! Per-sample convex losses and their subgradients.
//!
//! Parameters are stored flat, row-major, with one row per feature (plus an
//! optional bias row) and one column per model output. Scalar-output losses
//! have a single column, so their parameter vector is just `w` (then `b`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label {0} is not valid for this loss")]
    BadLabel(String),
    #[error("regularization weight {lambda} is invalid for {kind:?} (must be finite, >= 0, and only hinge_svm/lasso accept a nonzero value)")]
    InvalidLambda { kind: LossKind, lambda: f64 },
    #[error("{kind:?} cannot model {classes} classes")]
    InvalidClasses { kind: LossKind, classes: usize },
    #[error("feature dimension must be positive")]
    ZeroDimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    HingeSvm,
    Lasso,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Label,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Label) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossModel {
    kind: LossKind,
    lambda: f64,
    d: usize,
    classes: usize,
    bias: bool,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax; returns `(probabilities, log-sum-exp)`.
pub fn softmax(scores: &[f64]) -> (Vec<f64>, f64) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / z).collect(), m + z.ln())
}

impl LossModel {
    /// `classes` is the label range: 2 for logistic and hinge, at least 2 for
    /// multinomial, and at least 1 for lasso (class labels regress as reals).
    pub fn new(kind: LossKind, d: usize, classes: usize, lambda: f64) -> Result<Self, LossError> {
        if d == 0 {
            return Err(LossError::ZeroDimension);
        }
        let classes_ok = match kind {
            LossKind::Logistic | LossKind::HingeSvm => classes == 2,
            LossKind::Multinomial => classes >= 2,
            LossKind::Lasso => classes >= 1,
        };
        if !classes_ok {
            return Err(LossError::InvalidClasses { kind, classes });
        }
        let lambda_ok = lambda.is_finite()
            && lambda >= 0.0
            && (lambda == 0.0 || matches!(kind, LossKind::HingeSvm | LossKind::Lasso));
        if !lambda_ok {
            return Err(LossError::InvalidLambda { kind, lambda });
        }
        Ok(Self {
            kind,
            lambda,
            d,
            classes,
            bias: false,
        })
    }

    pub fn multinomial(d: usize, classes: usize) -> Result<Self, LossError> {
        Self::new(LossKind::Multinomial, d, classes, 0.0)
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn features(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            LossKind::Multinomial => self.classes,
            _ => 1,
        }
    }

    fn rows(&self) -> usize {
        self.d + usize::from(self.bias)
    }

    pub fn param_len(&self) -> usize {
        self.rows() * self.outputs()
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != LossKind::Lasso
    }

    /// True when coordinate `idx` is penalized (bias entries are not).
    fn regularized(&self, idx: usize) -> bool {
        idx < self.d * self.outputs()
    }

    fn check(&self, beta: &[f64], x: &[f64]) -> Result<(), LossError> {
        if beta.len() != self.param_len() {
            return Err(LossError::DimensionMismatch {
                expected: self.param_len(),
                got: beta.len(),
            });
        }
        if x.len() != self.d {
            return Err(LossError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn class_index(&self, y: Label) -> Result<usize, LossError> {
        match y {
            Label::Class(c) if c < self.classes => Ok(c),
            Label::Class(c) => Err(LossError::LabelOutOfRange {
                label: c,
                classes: self.classes,
            }),
            Label::Value(v) => Err(LossError::BadLabel(v.to_string())),
        }
    }

    /// Scalar target used by the binary and regression losses.
    fn target(&self, y: Label) -> Result<f64, LossError> {
        match (self.kind, y) {
            (LossKind::Lasso, Label::Value(v)) => Ok(v),
            (LossKind::Lasso, Label::Class(_)) => Ok(self.class_index(y)? as f64),
            (LossKind::HingeSvm, Label::Class(_)) => {
                Ok(if self.class_index(y)? == 1 { 1.0 } else { -1.0 })
            }
            (LossKind::HingeSvm, Label::Value(v)) if v == 1.0 || v == -1.0 => Ok(v),
            (LossKind::Logistic, Label::Class(_)) => Ok(self.class_index(y)? as f64),
            (LossKind::Logistic, Label::Value(v)) if (0.0..=1.0).contains(&v) => Ok(v),
            (_, Label::Value(v)) => Err(LossError::BadLabel(v.to_string())),
            (LossKind::Multinomial, Label::Class(c)) => Err(LossError::BadLabel(c.to_string())),
        }
    }

    /// Linear scores, one per output.
    pub fn scores(&self, beta: &[f64], x: &[f64]) -> Vec<f64> {
        let out = self.outputs();
        let mut s = if self.bias {
            beta[self.d * out..].to_vec()
        } else {
            vec![0.0; out]
        };
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let row = &beta[j * out..(j + 1) * out];
            for (so, &b) in s.iter_mut().zip(row) {
                *so += xj * b;
            }
        }
        s
    }

    fn penalty(&self, beta: &[f64]) -> f64 {
        let w = &beta[..self.d * self.outputs()];
        match self.kind {
            LossKind::HingeSvm => self.lambda * w.iter().map(|b| b * b).sum::<f64>(),
            LossKind::Lasso => self.lambda * w.iter().map(|b| b.abs()).sum::<f64>(),
            _ => 0.0,
        }
    }

    /// Data term without any regularizer.
    fn data_loss(&self, beta: &[f64], v: &Sample) -> Result<f64, LossError> {
        self.check(beta, &v.x)?;
        let s = self.scores(beta, &v.x);
        Ok(match self.kind {
            LossKind::Logistic => softplus(s[0]) - self.target(v.y)? * s[0],
            LossKind::HingeSvm => (1.0 - self.target(v.y)? * s[0]).max(0.0),
            LossKind::Lasso => 0.5 * (self.target(v.y)? - s[0]).powi(2),
            LossKind::Multinomial => {
                let c = self.class_index(v.y)?;
                let (_, lse) = softmax(&s);
                lse - s[c]
            }
        })
    }

    pub fn loss(&self, beta: &[f64], v: &Sample) -> Result<f64, LossError> {
        Ok(self.data_loss(beta, v)? + self.penalty(beta))
    }

    /// Gradient (or the chosen subgradient) of the data term w.r.t. the scores.
    fn score_gradient(&self, beta: &[f64], v: &Sample) -> Result<Vec<f64>, LossError> {
        self.check(beta, &v.x)?;
        let s = self.scores(beta, &v.x);
        Ok(match self.kind {
            LossKind::Logistic => vec![sigmoid(s[0]) - self.target(v.y)?],
            LossKind::HingeSvm => {
                let y = self.target(v.y)?;
                // margin exactly 1 counts as active
                vec![if y * s[0] <= 1.0 { -y } else { 0.0 }]
            }
            LossKind::Lasso => vec![s[0] - self.target(v.y)?],
            LossKind::Multinomial => {
                let c = self.class_index(v.y)?;
                let (mut p, _) = softmax(&s);
                p[c] -= 1.0;
                p
            }
        })
    }

    fn accumulate_data_gradient(&self, gs: &[f64], x: &[f64], weight: f64, out: &mut [f64]) {
        let o = self.outputs();
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (k, &g) in gs.iter().enumerate() {
                out[j * o + k] += weight * xj * g;
            }
        }
        if self.bias {
            for (k, &g) in gs.iter().enumerate() {
                out[self.d * o + k] += weight * g;
            }
        }
    }

    /// Writes a subgradient of `loss(·, v)` at `beta` into `out`.
    pub fn subgradient_into(
        &self,
        beta: &[f64],
        v: &Sample,
        out: &mut [f64],
    ) -> Result<(), LossError> {
        let gs = self.score_gradient(beta, v)?;
        out.fill(0.0);
        self.accumulate_data_gradient(&gs, &v.x, 1.0, out);
        let nw = self.d * self.outputs();
        match self.kind {
            LossKind::HingeSvm => {
                for (o, b) in out[..nw].iter_mut().zip(beta) {
                    *o += 2.0 * self.lambda * b;
                }
            }
            LossKind::Lasso => {
                // sign(0) = 0 is the zero-magnitude choice at the kink
                for (o, b) in out[..nw].iter_mut().zip(beta) {
                    if *b != 0.0 {
                        *o += self.lambda * b.signum();
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn subgradient(&self, beta: &[f64], v: &Sample) -> Result<Vec<f64>, LossError> {
        let mut out = vec![0.0; self.param_len()];
        self.subgradient_into(beta, v, &mut out)?;
        Ok(out)
    }

    /// Class probabilities under the multinomial model; `None` for other kinds.
    pub fn probabilities(&self, beta: &[f64], x: &[f64]) -> Option<Vec<f64>> {
        (self.kind == LossKind::Multinomial).then(|| softmax(&self.scores(beta, x)).0)
    }

    /// Predicted class for classifiers; `None` for lasso.
    pub fn predict(&self, beta: &[f64], x: &[f64]) -> Option<usize> {
        let s = self.scores(beta, x);
        match self.kind {
            LossKind::Lasso => None,
            LossKind::Logistic | LossKind::HingeSvm => Some(usize::from(s[0] > 0.0)),
            LossKind::Multinomial => s
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i),
        }
    }

    /// True label as a class index, if the loss is a classifier.
    pub fn true_class(&self, y: Label) -> Option<usize> {
        match (self.kind, y) {
            (LossKind::Lasso, _) => None,
            (LossKind::HingeSvm, Label::Value(v)) => Some(usize::from(v > 0.0)),
            (LossKind::Logistic, Label::Value(v)) => Some(usize::from(v > 0.5)),
            (_, Label::Class(c)) => Some(c),
            (LossKind::Multinomial, Label::Value(_)) => None,
        }
    }

    /// Weighted sum of smooth data terms and their gradient, plus the smooth
    /// part of the regularizer. The L1 weight is reported separately by
    /// [`LossModel::l1_weight`]. Returns `None` for the hinge loss, which has
    /// no smooth split.
    pub(crate) fn smooth_objective(
        &self,
        beta: &[f64],
        samples: &[(&Sample, f64)],
        grad: Option<&mut [f64]>,
    ) -> Option<Result<f64, LossError>> {
        if self.kind == LossKind::HingeSvm {
            return None;
        }
        let mut total = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        for &(v, w) in samples {
            match self.data_loss(beta, v) {
                Ok(l) => total += w * l,
                Err(e) => return Some(Err(e)),
            }
            if let Some(g) = grad.as_deref_mut() {
                match self.score_gradient(beta, v) {
                    Ok(gs) => self.accumulate_data_gradient(&gs, &v.x, w, g),
                    Err(e) => return Some(Err(e)),
                }
            }
        }
        Some(Ok(total))
    }

    /// Weight of the `λ‖w‖₁` term handled by a proximal step (lasso only).
    pub(crate) fn l1_weight(&self) -> f64 {
        if self.kind == LossKind::Lasso {
            self.lambda
        } else {
            0.0
        }
    }

    pub(crate) fn l1_penalty(&self, beta: &[f64]) -> f64 {
        self.l1_weight()
            * beta[..self.d * self.outputs()]
                .iter()
                .map(|b| b.abs())
                .sum::<f64>()
    }

    /// Soft-thresholds the penalized coordinates in place.
    pub(crate) fn l1_prox(&self, beta: &mut [f64], step: f64) {
        let t = self.l1_weight() * step;
        if t == 0.0 {
            return;
        }
        let nw = self.d * self.outputs();
        for b in &mut beta[..nw] {
            *b = b.signum() * (b.abs() - t).max(0.0);
        }
    }

    /// True when moving coordinate `idx` by `±eps` may cross a kink.
    fn near_kink(&self, beta: &[f64], v: &Sample, idx: usize, eps: f64) -> bool {
        match self.kind {
            LossKind::Lasso => self.lambda > 0.0 && self.regularized(idx) && beta[idx].abs() <= eps,
            LossKind::HingeSvm => {
                let Ok(y) = self.target(v.y) else {
                    return false;
                };
                let mut b = beta.to_vec();
                b[idx] = beta[idx] + eps;
                let hi = y * self.scores(&b, &v.x)[0] - 1.0;
                b[idx] = beta[idx] - eps;
                let lo = y * self.scores(&b, &v.x)[0] - 1.0;
                hi * lo <= 0.0
            }
            _ => false,
        }
    }
}

/// Largest `|central difference - analytic| / (1 + |analytic|)` over all
/// coordinates, skipping those within `epsilon` of a kink.
pub fn finite_difference_check(
    model: &LossModel,
    beta: &[f64],
    v: &Sample,
    epsilon: f64,
) -> Result<f64, LossError> {
    let analytic = model.subgradient(beta, v)?;
    let mut probe = beta.to_vec();
    let mut worst = 0.0f64;
    for idx in 0..beta.len() {
        if model.near_kink(beta, v, idx, epsilon) {
            continue;
        }
        probe[idx] = beta[idx] + epsilon;
        let up = model.loss(&probe, v)?;
        probe[idx] = beta[idx] - epsilon;
        let down = model.loss(&probe, v)?;
        probe[idx] = beta[idx];
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max((numeric - analytic[idx]).abs() / (1.0 + analytic[idx].abs()));
    }
    Ok(worst)
}
