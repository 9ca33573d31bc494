//! Trust-region boosting: each stage fits a separable weak learner to the
//! quadratic model of the loss around the current ensemble, compares actual
//! with predicted reduction, and accepts or rejects the learner while
//! escalating the Tikhonov parameter on poor agreement.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Standardizer};
use crate::diagnostics::{reduction_lower_bound, regularity_report, RegularityBounds};
use crate::error::{Error, Result};
use crate::featurizer::{feature_batch, FeaturizerSpec, ThetaVector};
use crate::losses::{empirical_loss, evaluate_all, hessian_bound, LossKind, LossTag, Targets};
use crate::trainer::{train_on_derivatives, TrainConfig};
use crate::varpro::{assemble_reduced, model_reduction, solve_optimal_weights, LinearWeights};

/// Predicted reductions at or below this are treated as null steps.
pub const NULL_STEP_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    /// Number of stages, accepted or not.
    pub m: usize,
    pub rho_accept: f64,
    pub rho_small: f64,
    pub gamma_up: f64,
    pub lambda_w0: f64,
    pub lambda_low: f64,
    /// Inner-training settings; `lambda_w` and `seed` are overwritten per stage.
    pub trainer: TrainConfig,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            m: 10,
            rho_accept: 0.0,
            rho_small: 1e-4,
            gamma_up: 10.0,
            lambda_w0: 1e-3,
            lambda_low: 1e-3,
            trainer: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.rho_accept && self.rho_accept < self.rho_small && self.rho_small < 1.0) {
            return Err(Error::input(format!(
                "need 0 <= rho_accept < rho_small < 1, got {} and {}",
                self.rho_accept, self.rho_small
            )));
        }
        if !(self.gamma_up > 1.0 && self.gamma_up.is_finite()) {
            return Err(Error::input(format!("gamma_up must exceed 1, got {}", self.gamma_up)));
        }
        if !(self.lambda_low > 0.0 && self.lambda_w0 >= self.lambda_low && self.lambda_w0.is_finite()) {
            return Err(Error::input(format!(
                "need lambda_w0 >= lambda_low > 0, got {} and {}",
                self.lambda_w0, self.lambda_low
            )));
        }
        TrainConfig { lambda_w: self.lambda_w0, ..self.trainer.clone() }.validate()
    }
}

/// One accepted weak learner `x ↦ W z_θ(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub spec: FeaturizerSpec,
    pub theta: ThetaVector,
    pub weights: LinearWeights,
    /// Stage at which the learner was accepted (1-based).
    pub stage: usize,
    pub lambda_w: f64,
}

impl Learner {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.spec.n_in {
            return Err(Error::input(format!(
                "learner expects {} inputs, got {}",
                self.spec.n_in,
                x.ncols()
            )));
        }
        Ok(self.weights.apply(&feature_batch(&self.spec, &self.theta, x)?.z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub kind: LossKind,
    pub c0: DVector<f64>,
    pub learners: Vec<Learner>,
}

impl Ensemble {
    pub fn constant(kind: LossKind, c0: DVector<f64>) -> Self {
        Ensemble { kind, c0, learners: Vec::new() }
    }

    /// Keeps only learners accepted at or before `stage`.
    pub fn truncated(&self, stage: usize) -> Ensemble {
        Ensemble {
            kind: self.kind,
            c0: self.c0.clone(),
            learners: self.learners.iter().filter(|l| l.stage <= stage).cloned().collect(),
        }
    }
}

/// Loss-minimizing constant prediction.
pub fn optimal_constant(kind: &LossKind, targets: &Targets) -> Result<DVector<f64>> {
    kind.validate()?;
    let n = targets.len();
    if n == 0 {
        return Err(Error::input("optimal constant of an empty sample"));
    }
    match (kind.tag, targets) {
        (LossTag::Mse, Targets::Real(y)) if y.ncols() == kind.n_target => {
            Ok(y.row_mean().transpose())
        }
        (LossTag::Bce, Targets::Labels { labels, .. }) => {
            let ybar = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
            if ybar <= 0.0 || ybar >= 1.0 {
                return Err(Error::DegenerateClass(format!("mean label is {ybar}")));
            }
            Ok(DVector::from_element(1, (ybar / (1.0 - ybar)).ln()))
        }
        (LossTag::Mce, Targets::Labels { labels, n_classes }) if *n_classes == kind.n_target => {
            let mut counts = vec![0usize; *n_classes];
            for &l in labels {
                counts[l] += 1;
            }
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                return Err(Error::DegenerateClass(format!("class {empty} has no samples")));
            }
            Ok(DVector::from_iterator(
                *n_classes,
                counts.iter().map(|&c| (c as f64 / n as f64).ln()),
            ))
        }
        _ => Err(Error::input(format!("targets do not match loss {}", kind.tag))),
    }
}

pub fn ensemble_predict(ens: &Ensemble, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::from_fn(x.nrows(), ens.c0.len(), |_, j| ens.c0[j]);
    for learner in &ens.learners {
        out += learner.predict(x)?;
    }
    Ok(out)
}

/// `(before − after) / predicted`, or `None` for a null step.
pub fn reduction_ratio(loss_before: f64, loss_after: f64, predicted: f64) -> Option<f64> {
    (predicted > NULL_STEP_TOLERANCE).then(|| (loss_before - loss_after) / predicted)
}

/// Everything measured at one boosting stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// 1-based stage index.
    pub stage: usize,
    /// Tikhonov parameter the trial learner was trained with.
    pub lambda_w: f64,
    /// `None` on a null step.
    pub rho: Option<f64>,
    pub accepted: bool,
    /// Whether `λ_w` was raised for the next stage.
    pub escalated: bool,
    pub actual_reduction: f64,
    pub predicted_reduction: f64,
    /// Losses of the ensemble after the accept/reject decision.
    pub train_loss: f64,
    pub val_loss: f64,
    pub kappa_align: Option<f64>,
    pub curvature_ratio: Option<f64>,
    pub operator_norm: f64,
    pub radius: f64,
    pub descent_ip: f64,
    /// `‖h*‖_N` of the trial learner.
    pub learner_norm: f64,
    pub reduced_grad_norm: f64,
    pub grad_norm: f64,
    pub r_star: f64,
    pub r_cauchy: f64,
    pub lower_bound: Option<f64>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BoostRun {
    pub ensemble: Ensemble,
    pub records: Vec<StageRecord>,
    /// Losses of the constant model.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
}

fn check_split(ds: &Dataset, kind: &LossKind, spec: &FeaturizerSpec, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::input(format!("{what} set is empty")));
    }
    if ds.n_in() != spec.n_in {
        return Err(Error::input(format!(
            "{what} set has {} inputs, featurizer expects {}",
            ds.n_in(),
            spec.n_in
        )));
    }
    let ok = match (&ds.targets, kind.tag) {
        (Targets::Real(y), LossTag::Mse) => y.ncols() == kind.n_target,
        (Targets::Labels { n_classes, .. }, LossTag::Bce) => *n_classes == 2,
        (Targets::Labels { n_classes, .. }, LossTag::Mce) => *n_classes == kind.n_target,
        _ => false,
    };
    if !ok {
        return Err(Error::input(format!("{what} targets do not match loss {}", kind.tag)));
    }
    Ok(())
}

pub fn boost(
    train: &Dataset,
    val: &Dataset,
    kind: &LossKind,
    spec: &FeaturizerSpec,
    cfg: &BoostConfig,
) -> Result<BoostRun> {
    kind.validate()?;
    spec.validate()?;
    cfg.validate()?;
    check_split(train, kind, spec, "training")?;
    check_split(val, kind, spec, "validation")?;

    let c0 = optimal_constant(kind, &train.targets)?;
    let mut ensemble = Ensemble::constant(*kind, c0);
    let mut pred_train = ensemble_predict(&ensemble, &train.x)?;
    let mut pred_val = ensemble_predict(&ensemble, &val.x)?;
    let mut train_loss = empirical_loss(kind, &pred_train, &train.targets)?;
    let mut val_loss = empirical_loss(kind, &pred_val, &val.targets)?;
    let initial_train_loss = train_loss;
    let initial_val_loss = val_loss;
    let beta = hessian_bound(kind);

    let mut lambda = cfg.lambda_w0;
    let mut records = Vec::with_capacity(cfg.m);
    for m in 0..cfg.m {
        let stage = m + 1;
        let started = Instant::now();
        let in_stage = |e: Error| Error::Stage { stage, source: Box::new(e) };

        let per_datum = evaluate_all(kind, &pred_train, &train.targets).map_err(in_stage)?;
        let tcfg = TrainConfig {
            lambda_w: lambda,
            seed: cfg.seed.wrapping_add(m as u64),
            ..cfg.trainer.clone()
        };
        let trial = train_on_derivatives(&train.x, &per_datum, spec, &tcfg).map_err(in_stage)?;

        // the ensemble update always uses the optimal weights for the final θ
        let z = feature_batch(spec, &trial.theta, &train.x).map_err(in_stage)?;
        let rd = assemble_reduced(&z, &per_datum).map_err(in_stage)?;
        let w = solve_optimal_weights(&rd, lambda).map_err(in_stage)?;
        let report = regularity_report(&z, &rd, lambda, &per_datum).map_err(in_stage)?;
        let predicted = model_reduction(&rd, lambda, &w);

        let h = w.apply(&z.z);
        let learner_norm = (h.norm_squared() / h.nrows() as f64).sqrt();
        let candidate = &pred_train + &h;
        let loss_after = empirical_loss(kind, &candidate, &train.targets).map_err(in_stage)?;
        let actual = rd.l0 - loss_after;
        let rho = reduction_ratio(rd.l0, loss_after, predicted);
        let accepted = rho.is_some_and(|r| r > cfg.rho_accept);
        let escalated = rho.is_none_or(|r| r < cfg.rho_small);

        if accepted {
            let learner = Learner {
                spec: spec.clone(),
                theta: trial.theta,
                weights: w,
                stage,
                lambda_w: lambda,
            };
            pred_val += learner.predict(&val.x).map_err(in_stage)?;
            pred_train = candidate;
            train_loss = loss_after;
            val_loss = empirical_loss(kind, &pred_val, &val.targets).map_err(in_stage)?;
            ensemble.learners.push(learner);
        }

        let bounds = RegularityBounds::from_stage(&report, beta);
        records.push(StageRecord {
            stage,
            lambda_w: lambda,
            rho,
            accepted,
            escalated,
            actual_reduction: actual,
            predicted_reduction: predicted,
            train_loss,
            val_loss,
            kappa_align: report.kappa_align,
            curvature_ratio: report.curvature_ratio,
            operator_norm: report.operator_norm,
            radius: report.radius,
            descent_ip: report.descent_ip,
            learner_norm,
            reduced_grad_norm: report.reduced_grad_norm,
            grad_norm: report.grad_norm,
            r_star: report.r_star,
            r_cauchy: report.r_cauchy,
            lower_bound: reduction_lower_bound(&report, &bounds),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        });
        if escalated {
            lambda *= cfg.gamma_up;
        }
    }
    Ok(BoostRun { ensemble, records, initial_train_loss, initial_val_loss })
}

const DOCUMENT_FORMAT: &str = "vpboost-ensemble";
const DOCUMENT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LearnerDoc {
    stage: usize,
    lambda_w: f64,
    spec: FeaturizerSpec,
    theta: Vec<f64>,
    /// `n_target × n_feat`, row-major.
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    format: String,
    version: u32,
    kind: LossKind,
    c0: Vec<f64>,
    #[serde(default)]
    standardizer: Option<Standardizer>,
    learners: Vec<LearnerDoc>,
}

/// Serializes an ensemble, plus the input standardizer it was trained
/// behind, as a JSON document. Floats round-trip exactly.
pub fn ensemble_to_json(ens: &Ensemble, standardizer: Option<&Standardizer>) -> Result<String> {
    let doc = EnsembleDoc {
        format: DOCUMENT_FORMAT.into(),
        version: DOCUMENT_VERSION,
        kind: ens.kind,
        c0: ens.c0.iter().copied().collect(),
        standardizer: standardizer.cloned(),
        learners: ens
            .learners
            .iter()
            .map(|l| LearnerDoc {
                stage: l.stage,
                lambda_w: l.lambda_w,
                spec: l.spec.clone(),
                theta: l.theta.values.iter().copied().collect(),
                weights: l.weights.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Document(e.to_string()))
}

pub fn ensemble_from_json(text: &str) -> Result<(Ensemble, Option<Standardizer>)> {
    let doc: EnsembleDoc = serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
    if doc.format != DOCUMENT_FORMAT || doc.version != DOCUMENT_VERSION {
        return Err(Error::Document(format!(
            "unsupported document {} v{}",
            doc.format, doc.version
        )));
    }
    doc.kind.validate()?;
    if doc.c0.len() != doc.kind.n_target {
        return Err(Error::Document(format!(
            "c0 has {} entries for {} targets",
            doc.c0.len(),
            doc.kind.n_target
        )));
    }
    let mut learners = Vec::with_capacity(doc.learners.len());
    for (j, l) in doc.learners.into_iter().enumerate() {
        l.spec.validate()?;
        if l.theta.len() != l.spec.n_theta() {
            return Err(Error::Document(format!(
                "learner {j}: {} parameters, spec needs {}",
                l.theta.len(),
                l.spec.n_theta()
            )));
        }
        let rows = l.weights.len();
        if rows != doc.kind.n_target || l.weights.iter().any(|r| r.len() != l.spec.n_feat) {
            return Err(Error::Document(format!("learner {j}: weight matrix has the wrong shape")));
        }
        let flat: Vec<f64> = l.weights.into_iter().flatten().collect();
        learners.push(Learner {
            theta: ThetaVector::new(DVector::from_vec(l.theta)),
            weights: LinearWeights { w: DMatrix::from_row_slice(rows, l.spec.n_feat, &flat) },
            spec: l.spec,
            stage: l.stage,
            lambda_w: l.lambda_w,
        });
    }
    Ok((
        Ensemble { kind: doc.kind, c0: DVector::from_vec(doc.c0), learners },
        doc.standardizer,
    ))
}

pub fn save_ensemble(path: impl AsRef<Path>, ens: &Ensemble, standardizer: Option<&Standardizer>) -> Result<()> {
    std::fs::write(path, ensemble_to_json(ens, standardizer)?)?;
    Ok(())
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<(Ensemble, Option<Standardizer>)> {
    ensemble_from_json(&std::fs::read_to_string(path)?)
}
