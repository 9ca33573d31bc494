//! Per-datum losses with analytic first and second derivatives in the
//! prediction, and the empirical (sample-average) loss functional.
//!
//! All three losses act on raw model outputs:
//!
//! * `Mse`: `½‖ŷ − y‖²`
//! * `Bce`: `log(1 + e^ŷ) − yŷ` on a scalar logit, `y ∈ {0, 1}`
//! * `Mce`: `log Σⱼ e^{ŷⱼ} − ŷ_y` on a logit vector, `y` a class index
//!
//! Each is convex in `ŷ` with a Hessian bounded by [`hessian_bound`].

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTag {
    Mse,
    Bce,
    Mce,
}

impl std::fmt::Display for LossTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossTag::Mse => "mse",
            LossTag::Bce => "bce",
            LossTag::Mce => "mce",
        })
    }
}

/// A loss together with its output dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossKind {
    pub tag: LossTag,
    pub n_target: usize,
}

impl LossKind {
    pub fn new(tag: LossTag, n_target: usize) -> Result<Self> {
        let kind = LossKind { tag, n_target };
        kind.validate()?;
        Ok(kind)
    }

    pub fn mse(n_target: usize) -> Result<Self> {
        Self::new(LossTag::Mse, n_target)
    }

    pub fn bce() -> Self {
        LossKind { tag: LossTag::Bce, n_target: 1 }
    }

    pub fn mce(n_classes: usize) -> Result<Self> {
        Self::new(LossTag::Mce, n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.tag, self.n_target) {
            (_, 0) => Err(Error::input("n_target must be positive")),
            (LossTag::Bce, n) if n != 1 => {
                Err(Error::input(format!("bce requires n_target = 1, got {n}")))
            }
            (LossTag::Mce, 1) => Err(Error::input("mce requires n_target >= 2")),
            _ => Ok(()),
        }
    }
}

/// One datum's target, borrowed from a [`Targets`] table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetRef<'a> {
    Real(&'a [f64]),
    Label(usize),
}

/// Targets for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// N×n_target real responses.
    Real(DMatrix<f64>),
    /// Class indices in `0..n_classes`; binary tasks use `n_classes = 2`.
    Labels { labels: Vec<usize>, n_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.nrows(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads datum `i` into `buf` when needed and returns a reference to it.
    pub fn row<'a>(&'a self, i: usize, buf: &'a mut Vec<f64>) -> TargetRef<'a> {
        match self {
            Targets::Real(y) => {
                buf.clear();
                buf.extend(y.row(i).iter().copied());
                TargetRef::Real(buf.as_slice())
            }
            Targets::Labels { labels, .. } => TargetRef::Label(labels[i]),
        }
    }

    /// Keeps the rows listed in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(y) => Targets::Real(y.select_rows(idx.iter())),
            Targets::Labels { labels, n_classes } => Targets::Labels {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        }
    }
}

/// Value, gradient and Hessian of a per-datum loss with respect to `ŷ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of derivative evaluations ([`loss_eval`] calls) made on this thread.
#[doc(hidden)]
pub fn evaluation_count() -> u64 {
    EVALUATIONS.with(Cell::get)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_target(kind: &LossKind, yhat: &[f64], y: TargetRef<'_>) -> Result<()> {
    if yhat.len() != kind.n_target {
        return Err(Error::input(format!(
            "prediction has length {}, loss expects {}",
            yhat.len(),
            kind.n_target
        )));
    }
    match (kind.tag, y) {
        (LossTag::Mse, TargetRef::Real(t)) if t.len() == kind.n_target => Ok(()),
        (LossTag::Mse, TargetRef::Real(t)) => Err(Error::input(format!(
            "target has length {}, loss expects {}",
            t.len(),
            kind.n_target
        ))),
        (LossTag::Mse, TargetRef::Label(_)) => {
            Err(Error::input("mse requires real-valued targets"))
        }
        (LossTag::Bce, TargetRef::Label(l)) if l <= 1 => Ok(()),
        (LossTag::Mce, TargetRef::Label(l)) if l < kind.n_target => Ok(()),
        (_, TargetRef::Label(l)) => Err(Error::input(format!(
            "label {l} out of range for {} with {} outputs",
            kind.tag, kind.n_target
        ))),
        (_, TargetRef::Real(_)) => Err(Error::input(format!(
            "{} requires class-label targets",
            kind.tag
        ))),
    }
}

/// Loss value only; cheaper than [`loss_eval`] and not counted.
pub fn loss_value(kind: &LossKind, yhat: &[f64], y: TargetRef<'_>) -> Result<f64> {
    check_target(kind, yhat, y)?;
    Ok(match (kind.tag, y) {
        (LossTag::Mse, TargetRef::Real(t)) => {
            0.5 * yhat.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
        (LossTag::Bce, TargetRef::Label(l)) => softplus(yhat[0]) - l as f64 * yhat[0],
        (LossTag::Mce, TargetRef::Label(l)) => log_sum_exp(yhat) - yhat[l],
        _ => unreachable!("checked above"),
    })
}

pub fn loss_eval(kind: &LossKind, yhat: &[f64], y: TargetRef<'_>) -> Result<LossEval> {
    check_target(kind, yhat, y)?;
    EVALUATIONS.with(|c| c.set(c.get() + 1));
    let n = kind.n_target;
    let eval = match (kind.tag, y) {
        (LossTag::Mse, TargetRef::Real(t)) => {
            let grad = DVector::from_iterator(n, yhat.iter().zip(t).map(|(a, b)| a - b));
            LossEval {
                value: 0.5 * grad.norm_squared(),
                grad,
                hess: DMatrix::identity(n, n),
            }
        }
        (LossTag::Bce, TargetRef::Label(l)) => {
            let z = yhat[0];
            let s = sigmoid(z);
            LossEval {
                value: softplus(z) - l as f64 * z,
                grad: DVector::from_element(1, s - l as f64),
                hess: DMatrix::from_element(1, 1, s * (1.0 - s)),
            }
        }
        (LossTag::Mce, TargetRef::Label(l)) => {
            let p = DVector::from_vec(softmax(yhat));
            let mut grad = p.clone();
            grad[l] -= 1.0;
            let hess = DMatrix::from_diagonal(&p) - &p * p.transpose();
            LossEval { value: log_sum_exp(yhat) - yhat[l], grad, hess }
        }
        _ => unreachable!("checked above"),
    };
    Ok(eval)
}

fn check_rows(predictions: &DMatrix<f64>, targets: &Targets) -> Result<()> {
    if predictions.nrows() != targets.len() {
        return Err(Error::input(format!(
            "{} prediction rows but {} targets",
            predictions.nrows(),
            targets.len()
        )));
    }
    if predictions.nrows() == 0 {
        return Err(Error::input("empirical loss of an empty sample"));
    }
    Ok(())
}

/// `(1/N) Σᵢ ℓ(predictionᵢ, targetᵢ)`.
pub fn empirical_loss(kind: &LossKind, predictions: &DMatrix<f64>, targets: &Targets) -> Result<f64> {
    check_rows(predictions, targets)?;
    let mut row = Vec::with_capacity(kind.n_target);
    let mut buf = Vec::new();
    let mut total = 0.0;
    for i in 0..predictions.nrows() {
        row.clear();
        row.extend(predictions.row(i).iter().copied());
        total += loss_value(kind, &row, targets.row(i, &mut buf))?;
    }
    Ok(total / predictions.nrows() as f64)
}

/// Per-datum derivatives at every prediction row.
pub fn evaluate_all(kind: &LossKind, predictions: &DMatrix<f64>, targets: &Targets) -> Result<Vec<LossEval>> {
    check_rows(predictions, targets)?;
    let mut row = Vec::with_capacity(kind.n_target);
    let mut buf = Vec::new();
    (0..predictions.nrows())
        .map(|i| {
            row.clear();
            row.extend(predictions.row(i).iter().copied());
            loss_eval(kind, &row, targets.row(i, &mut buf))
        })
        .collect()
}

/// Uniform bound β on the spectral norm of the loss Hessian.
pub fn hessian_bound(kind: &LossKind) -> f64 {
    match kind.tag {
        LossTag::Mse => 1.0,
        LossTag::Bce => 0.25,
        LossTag::Mce => 0.5,
    }
}
