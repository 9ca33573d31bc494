//! Reduced derivatives of the second-order model and the closed-form linear
//! weights of a separable weak learner.
//!
//! With per-datum loss derivatives frozen at the current ensemble, the
//! quadratic model in the linear weights `w = vec(W)` is
//!
//! ```text
//! Q(w) = L0 + gᵀw + ½ wᵀHw
//! g    = (1/N) Σᵢ zᵢ ⊗ ∇ℓᵢ
//! H    = (1/N) Σᵢ (zᵢzᵢᵀ) ⊗ ∇²ℓᵢ
//! ```
//!
//! and the Tikhonov-regularized minimizer is `w* = −(H + λI)⁻¹ g`.
//! `vec` is column-major: entry `(a, b)` of the `n_target × n_feat` matrix
//! `W` sits at index `b·n_target + a`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::featurizer::{FeatureBatch, FeaturizerSpec, ForwardPass, ThetaVector};
use crate::losses::LossEval;

/// Coefficients of the quadratic model for one featurizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDerivatives {
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Loss of the current ensemble, `Q(0)`.
    pub l0: f64,
    pub n_target: usize,
}

impl ReducedDerivatives {
    pub fn n_w(&self) -> usize {
        self.g.len()
    }
}

/// Linear head `W` (`n_target × n_feat`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub w: DMatrix<f64>,
}

impl LinearWeights {
    pub fn zeros(n_target: usize, n_feat: usize) -> Self {
        LinearWeights { w: DMatrix::zeros(n_target, n_feat) }
    }

    pub fn from_vec(v: &DVector<f64>, n_target: usize) -> Self {
        let n_feat = v.len() / n_target;
        LinearWeights { w: DMatrix::from_column_slice(n_target, n_feat, v.as_slice()) }
    }

    pub fn to_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(self.w.as_slice())
    }

    pub fn n_target(&self) -> usize {
        self.w.nrows()
    }

    /// Learner outputs `Z Wᵀ`, one row per sample.
    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        features * self.w.transpose()
    }
}

fn check_per_datum(n: usize, per_datum: &[LossEval]) -> Result<usize> {
    if per_datum.len() != n {
        return Err(Error::input(format!(
            "{} loss evaluations for {n} feature rows",
            per_datum.len()
        )));
    }
    if n == 0 {
        return Err(Error::input("reduced derivatives of an empty sample"));
    }
    Ok(per_datum[0].grad.len())
}

pub fn assemble_reduced(features: &FeatureBatch, per_datum: &[LossEval]) -> Result<ReducedDerivatives> {
    let z = &features.z;
    let n = z.nrows();
    let t = check_per_datum(n, per_datum)?;
    let f = z.ncols();
    let n_w = f * t;
    let inv_n = 1.0 / n as f64;

    let mut grads = DMatrix::zeros(n, t);
    let mut hess = DMatrix::zeros(n, t * t);
    let mut l0 = 0.0;
    for (i, e) in per_datum.iter().enumerate() {
        l0 += e.value;
        for a in 0..t {
            grads[(i, a)] = e.grad[a];
        }
        for (k, v) in e.hess.iter().enumerate() {
            hess[(i, k)] = *v;
        }
    }
    let mut outer = DMatrix::zeros(n, f * f);
    for b in 0..f {
        for d in 0..f {
            outer.set_column(b * f + d, &z.column(b).component_mul(&z.column(d)));
        }
    }
    // g[b·t + a] = Σᵢ z_ib ∇ℓᵢ[a];  H[(b,a),(d,c)] = Σᵢ z_ib z_id ∇²ℓᵢ[a,c]
    let gm = z.tr_mul(&grads);
    let hm = outer.tr_mul(&hess);
    let g = DVector::from_fn(n_w, |k, _| gm[(k / t, k % t)] * inv_n);
    let mut h = DMatrix::from_fn(n_w, n_w, |r, c| {
        let (b, a) = (r / t, r % t);
        let (d, cc) = (c / t, c % t);
        hm[(b * f + d, cc * t + a)] * inv_n
    });
    // round-off asymmetry in per-datum hessians
    h = (&h + h.transpose()) * 0.5;
    Ok(ReducedDerivatives { g, h, l0: l0 * inv_n, n_target: t })
}

/// Solves `(H + λI) x = rhs`, retrying with a tenfold larger shift up to
/// three times when the factorization fails.
pub(crate) fn solve_shifted(h: &DMatrix<f64>, lambda: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::input(format!("regularization must be positive, got {lambda}")));
    }
    let n = rhs.len();
    let mut shift = lambda;
    for _ in 0..4 {
        let mut m = h.clone();
        for i in 0..n {
            m[(i, i)] += shift;
        }
        if let Some(chol) = Cholesky::new(m.clone()) {
            let mut x = chol.solve(rhs);
            // one step of iterative refinement
            let r = rhs - &m * &x;
            x += chol.solve(&r);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        shift *= 10.0;
    }
    Err(Error::Numerical(format!(
        "H + λI not positive definite after jitter escalation (λ = {lambda})"
    )))
}

/// `w* = −(H + λI)⁻¹ g`.
pub fn solve_optimal_weights(rd: &ReducedDerivatives, lambda_w: f64) -> Result<LinearWeights> {
    let w = -solve_shifted(&rd.h, lambda_w, &rd.g)?;
    Ok(LinearWeights::from_vec(&w, rd.n_target))
}

/// `Q(w) = L0 + gᵀw + ½wᵀHw`.
pub fn eval_quadratic(rd: &ReducedDerivatives, w: &LinearWeights) -> f64 {
    let v = w.to_vec();
    rd.l0 + rd.g.dot(&v) + 0.5 * v.dot(&(&rd.h * &v))
}

/// `Q(w) + ½λ‖w‖²`.
pub fn regularized_quadratic(rd: &ReducedDerivatives, w: &LinearWeights, lambda_w: f64) -> f64 {
    eval_quadratic(rd, w) + 0.5 * lambda_w * w.w.norm_squared()
}

/// Predicted reduction `Q(0) − Q(w*) = w*ᵀ(½H + λI)w*` at the regularized optimum.
pub fn model_reduction(rd: &ReducedDerivatives, lambda_w: f64, w_star: &LinearWeights) -> f64 {
    let v = w_star.to_vec();
    0.5 * v.dot(&(&rd.h * &v)) + lambda_w * v.norm_squared()
}

/// Per-row cotangents `z̄ᵢ = Wᵀ(∇ℓᵢ + ∇²ℓᵢ W zᵢ)/N`.
fn quadratic_cotangents(z: &DMatrix<f64>, w: &LinearWeights, per_datum: &[LossEval]) -> DMatrix<f64> {
    let n = z.nrows();
    let t = w.n_target();
    let outputs = w.apply(z);
    let mut r = DMatrix::zeros(n, t);
    for (i, e) in per_datum.iter().enumerate() {
        for a in 0..t {
            let mut acc = e.grad[a];
            for c in 0..t {
                acc += e.hess[(a, c)] * outputs[(i, c)];
            }
            r[(i, a)] = acc;
        }
    }
    r * &w.w / n as f64
}

/// θ-gradient of `Q(W, θ) + λ_θ·½‖θ‖²` with `W` held fixed.
pub fn quadratic_grad_theta(
    spec: &FeaturizerSpec,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    w: &LinearWeights,
    per_datum: &[LossEval],
    lambda_theta: f64,
) -> Result<DVector<f64>> {
    let pass = ForwardPass::run(spec, theta, x)?;
    grad_from_pass(&pass, theta, w, per_datum, lambda_theta)
}

pub(crate) fn grad_from_pass(
    pass: &ForwardPass<'_>,
    theta: &ThetaVector,
    w: &LinearWeights,
    per_datum: &[LossEval],
    lambda_theta: f64,
) -> Result<DVector<f64>> {
    let z = pass.features();
    let t = check_per_datum(z.nrows(), per_datum)?;
    if w.w.shape() != (t, z.ncols()) {
        return Err(Error::input(format!(
            "linear weights {:?} do not match ({t}, {})",
            w.w.shape(),
            z.ncols()
        )));
    }
    let cot = quadratic_cotangents(z, w, per_datum);
    Ok(pass.vjp(&cot)? + &theta.values * lambda_theta)
}
