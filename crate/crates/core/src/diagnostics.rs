//! Per-stage checks of the convergence machinery: descent certificates,
//! subspace-regularity ratios, the implied trust-region radius, and the
//! Cauchy-point comparison.
//!
//! Every norm and inner product here is the empirical one over the training
//! sample, e.g. `‖∇L‖_N = sqrt((1/N) Σᵢ ‖∇ℓᵢ‖²)`. Ratios whose denominator
//! vanishes are reported as `None` instead of NaN, so diagnostics never abort
//! training.

use crate::error::Result;
use crate::featurizer::{operator_norm, FeatureBatch};
use crate::losses::LossEval;
use crate::varpro::{model_reduction, solve_optimal_weights, solve_shifted, ReducedDerivatives};

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    /// `‖g‖ / (‖A‖_N ‖∇L‖_N)`.
    pub kappa_align: Option<f64>,
    /// `w*ᵀHw* / ⟨∇L, ∇²L ∇L⟩_N`.
    pub curvature_ratio: Option<f64>,
    /// `‖A‖_N`.
    pub operator_norm: f64,
    pub lambda_w: f64,
    /// `Δ(λ) = ‖A‖_N ‖w*‖`.
    pub radius: f64,
    /// `Q(0) − Q(w*)`.
    pub r_star: f64,
    pub gamma_cauchy: f64,
    pub r_cauchy: f64,
    /// `⟨∇L, h*⟩_N = −gᵀ(H + λI)⁻¹g`.
    pub descent_ip: f64,
    pub grad_norm: f64,
    /// `⟨∇L, ∇²L ∇L⟩_N`.
    pub gradient_curvature: f64,
    pub reduced_grad_norm: f64,
}

/// `−gᵀ(H + λI)⁻¹g`.
pub fn descent_inner_product(rd: &ReducedDerivatives, lambda_w: f64) -> Result<f64> {
    let x = solve_shifted(&rd.h, lambda_w, &rd.g)?;
    Ok(-rd.g.dot(&x))
}

/// Step length and model reduction of the Cauchy point.
pub fn cauchy_reduction(grad_norm: f64, curvature: f64, radius: f64) -> (f64, f64) {
    if grad_norm <= 0.0 {
        return (0.0, 0.0);
    }
    let to_boundary = radius / grad_norm;
    let gamma = if curvature > 0.0 {
        to_boundary.min(grad_norm * grad_norm / curvature)
    } else {
        to_boundary
    };
    let r = gamma * grad_norm * grad_norm - 0.5 * gamma * gamma * curvature;
    (gamma, r)
}

/// Guaranteed Cauchy reduction `½‖∇L‖·min(Δ, ‖∇L‖³/curvature)`; the second
/// term is dropped when the curvature is not positive.
pub fn cauchy_lower_bound(grad_norm: f64, curvature: f64, radius: f64) -> f64 {
    let interior = if curvature > 0.0 { grad_norm.powi(3) / curvature } else { f64::INFINITY };
    0.5 * grad_norm * radius.min(interior)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && den.is_finite()).then(|| num / den)
}

pub fn regularity_report(
    features: &FeatureBatch,
    rd: &ReducedDerivatives,
    lambda_w: f64,
    per_datum: &[LossEval],
) -> Result<RegularityReport> {
    let n = per_datum.len() as f64;
    let op = operator_norm(features)?;
    let grad_norm = (per_datum.iter().map(|e| e.grad.norm_squared()).sum::<f64>() / n).sqrt();
    let gradient_curvature = per_datum
        .iter()
        .map(|e| e.grad.dot(&(&e.hess * &e.grad)))
        .sum::<f64>()
        / n;

    let w = solve_optimal_weights(rd, lambda_w)?;
    let v = w.to_vec();
    let g_norm = rd.g.norm();
    let kappa_align = ratio(g_norm, op * grad_norm);
    let curvature_ratio = ratio(v.dot(&(&rd.h * &v)), gradient_curvature);
    let radius = op * v.norm();
    let (gamma_cauchy, r_cauchy) = cauchy_reduction(grad_norm, gradient_curvature, radius);

    Ok(RegularityReport {
        kappa_align,
        curvature_ratio,
        operator_norm: op,
        lambda_w,
        radius,
        r_star: model_reduction(rd, lambda_w, &w),
        gamma_cauchy,
        r_cauchy,
        descent_ip: rd.g.dot(&v),
        grad_norm,
        gradient_curvature,
        reduced_grad_norm: g_norm,
    })
}

/// Constants entering the sufficient-reduction bound; by default each stage
/// supplies its own `‖A‖_N` and `λ_w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityBounds {
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub lambda_low: f64,
    /// Uniform bound on the loss Hessian.
    pub beta: f64,
}

impl RegularityBounds {
    pub fn from_stage(report: &RegularityReport, beta: f64) -> Self {
        RegularityBounds {
            alpha_low: report.operator_norm,
            alpha_high: report.operator_norm,
            lambda_low: report.lambda_w,
            beta,
        }
    }
}

/// Guaranteed fraction `c₂ ∈ (0, 1]` of the Cauchy reduction achieved by the
/// VarPro learner.
pub fn cauchy_fraction(report: &RegularityReport, bounds: &RegularityBounds) -> Option<f64> {
    let kappa = report.kappa_align?;
    let a2 = bounds.alpha_high * bounds.alpha_high;
    if a2 <= 0.0 {
        return None;
    }
    let first = bounds.lambda_low / (a2 * bounds.beta + bounds.lambda_low) * kappa;
    let c2 = match report.curvature_ratio {
        Some(curve) => first.min(bounds.lambda_low * bounds.lambda_low / (a2 * a2) * curve),
        // no curvature along ∇L: the Cauchy step always reaches the boundary
        None => first,
    };
    Some(c2)
}

/// Lower bound `c₁ ‖∇L‖² κ_align / (β + λ/α_low²)` on `r_star`, with
/// `c₁ = c₂/2`.
pub fn reduction_lower_bound(report: &RegularityReport, bounds: &RegularityBounds) -> Option<f64> {
    let c1 = cauchy_fraction(report, bounds)? / 2.0;
    let kappa = report.kappa_align?;
    let a_low2 = bounds.alpha_low * bounds.alpha_low;
    let lambda = report.lambda_w;
    Some(c1 * report.grad_norm * report.grad_norm * kappa / (bounds.beta + lambda / a_low2))
}
