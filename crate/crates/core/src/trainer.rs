//! Training of a single separable weak learner against the frozen quadratic
//! model of the current ensemble.
//!
//! Loss derivatives are evaluated once at the ensemble's predictions; every
//! inner step then only re-featurizes. The nonlinear parameters always move
//! with Adam on the θ-gradient of the quadratic model at the current linear
//! weights, while the linear weights follow one of five strategies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{init_theta, FeaturizerSpec, ForwardPass, ThetaVector};
use crate::losses::{evaluate_all, LossEval, LossKind, Targets};
use crate::varpro::{
    assemble_reduced, grad_from_pass, regularized_quadratic, solve_optimal_weights, LinearWeights,
    ReducedDerivatives,
};

/// How the linear weights are updated during inner training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// Closed-form optimal weights at every step.
    Vp,
    /// Plain gradient descent on the weights, starting from zero.
    Gd,
    VpStart,
    VpEnd,
    VpStartEnd,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 5] = [
        TrainVariant::Vp,
        TrainVariant::Gd,
        TrainVariant::VpStart,
        TrainVariant::VpEnd,
        TrainVariant::VpStartEnd,
    ];

    fn solves_at_start(self) -> bool {
        matches!(self, TrainVariant::VpStart | TrainVariant::VpStartEnd)
    }

    fn solves_at_end(self) -> bool {
        matches!(self, TrainVariant::VpEnd | TrainVariant::VpStartEnd)
    }
}

impl std::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainVariant::Vp => "vp",
            TrainVariant::Gd => "gd",
            TrainVariant::VpStart => "vp_start",
            TrainVariant::VpEnd => "vp_end",
            TrainVariant::VpStartEnd => "vp_start_end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub steps: usize,
    pub lr: f64,
    pub lambda_w: f64,
    pub lambda_theta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: TrainVariant::Vp,
            steps: 100,
            lr: 1e-2,
            lambda_w: 1e-3,
            lambda_theta: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::input(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda_w > 0.0 && self.lambda_w.is_finite()) {
            return Err(Error::input(format!("lambda_w must be positive, got {}", self.lambda_w)));
        }
        if !(self.lambda_theta >= 0.0 && self.lambda_theta.is_finite()) {
            return Err(Error::input(format!(
                "lambda_theta must be non-negative, got {}",
                self.lambda_theta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(mut state: AdamState, theta: &ThetaVector, grad: &DVector<f64>, lr: f64) -> (AdamState, ThetaVector) {
    assert_eq!(grad.len(), theta.len(), "gradient and parameters differ in length");
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    state.m = &state.m * b1 + grad * (1.0 - b1);
    state.v = &state.v * b2 + grad.component_mul(grad) * (1.0 - b2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let eps = state.eps;
    let step = state.m.zip_map(&state.v, |m, v| (m / c1) / ((v / c2).sqrt() + eps));
    let next = ThetaVector::new(&theta.values - step * lr);
    (state, next)
}

/// Regularized reduced objective per inner step,
/// `Q(w_k, θ_k) + ½λ_w‖w_k‖² + ½λ_θ‖θ_k‖²`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedLearner {
    pub theta: ThetaVector,
    pub weights: LinearWeights,
    pub trace: TrainTrace,
}

/// Trains one weak learner from scratch at the given ensemble predictions.
pub fn train_weak_learner(
    x: &DMatrix<f64>,
    targets: &Targets,
    ensemble_predictions: &DMatrix<f64>,
    kind: &LossKind,
    spec: &FeaturizerSpec,
    cfg: &TrainConfig,
) -> Result<TrainedLearner> {
    let per_datum = evaluate_all(kind, ensemble_predictions, targets)?;
    train_on_derivatives(x, &per_datum, spec, cfg)
}

/// As [`train_weak_learner`], with loss derivatives supplied by the caller.
pub fn train_on_derivatives(
    x: &DMatrix<f64>,
    per_datum: &[LossEval],
    spec: &FeaturizerSpec,
    cfg: &TrainConfig,
) -> Result<TrainedLearner> {
    cfg.validate()?;
    spec.validate()?;
    let theta0 = init_theta(spec, cfg.seed);
    train_from(x, per_datum, spec, cfg, theta0)
}

pub(crate) fn train_from(
    x: &DMatrix<f64>,
    per_datum: &[LossEval],
    spec: &FeaturizerSpec,
    cfg: &TrainConfig,
    theta0: ThetaVector,
) -> Result<TrainedLearner> {
    let n_target = per_datum
        .first()
        .map(|e| e.grad.len())
        .ok_or_else(|| Error::input("cannot train on an empty sample"))?;
    let penalty = |th: &ThetaVector| 0.5 * cfg.lambda_theta * th.values.norm_squared();
    let reduced = |pass: &ForwardPass<'_>| -> Result<ReducedDerivatives> {
        assemble_reduced(&crate::featurizer::FeatureBatch::new(pass.features().clone()), per_datum)
    };

    let mut theta = theta0;
    let mut adam = AdamState::new(theta.len());
    let mut trace = TrainTrace::default();
    let mut w = LinearWeights::zeros(n_target, spec.n_feat);
    let mut first = true;

    for _ in 0..cfg.steps {
        let pass = ForwardPass::run(spec, &theta, x)?;
        let rd = reduced(&pass)?;
        match cfg.variant {
            TrainVariant::Vp => w = solve_optimal_weights(&rd, cfg.lambda_w)?,
            _ if first && cfg.variant.solves_at_start() => {
                w = solve_optimal_weights(&rd, cfg.lambda_w)?
            }
            _ => {}
        }
        first = false;
        trace
            .objective
            .push(regularized_quadratic(&rd, &w, cfg.lambda_w) + penalty(&theta));
        let grad = grad_from_pass(&pass, &theta, &w, per_datum, cfg.lambda_theta)?;
        if cfg.variant != TrainVariant::Vp {
            let v = w.to_vec();
            let residual = &rd.g + &rd.h * &v;
            let next = &v - (residual + &v * cfg.lambda_w) * cfg.lr;
            w = LinearWeights::from_vec(&next, n_target);
        }
        let (state, next) = adam_step(adam, &theta, &grad, cfg.lr);
        adam = state;
        theta = next;
    }

    let needs_final_solve = cfg.variant == TrainVariant::Vp
        || cfg.variant.solves_at_end()
        || (cfg.steps == 0 && cfg.variant.solves_at_start());
    if needs_final_solve {
        let pass = ForwardPass::run(spec, &theta, x)?;
        w = solve_optimal_weights(&reduced(&pass)?, cfg.lambda_w)?;
    }
    Ok(TrainedLearner { theta, weights: w, trace })
}
