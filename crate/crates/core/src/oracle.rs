//! Ground truth for the influence machinery on the convex model.
//!
//! The lower objective is `F(θ) = Σ_s ℓ_s/N + Σ_k w_k ℓ_k + (λ/2)‖θ‖²` with
//! `w_k = γ_k/M`. Influence values are derivatives of the mean strong loss
//! with respect to a unit upweighting of `ℓ_k`, i.e. `w_k → w_k + ε`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::json;

use crate::dii::{estimate_dii_gradients, estimate_strong_gradient, objective_items, HessianMode};
use crate::metrics::rank_correlation;
use crate::model::{
    hessian, instance_loss, weighted_objective, Architecture, HybridDataset, Instance, ModelLayout, ModelParams,
    SpdFactor,
};
use crate::{Error, Result};

pub const NEWTON_TOLERANCE: f64 = 1e-10;
pub const NEWTON_MAX_ITERATIONS: usize = 200;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn convex_layout(dataset: &HybridDataset) -> Result<ModelLayout> {
    let first = dataset
        .iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    ModelLayout::new(
        Architecture::ConvexLinear,
        first.image.channels(),
        first.mask.classes(),
    )
}

/// Damped Newton on `F` with backtracking, from `start`.
pub fn minimize(items: &[(&Instance, f64)], l2: f64, start: ModelParams) -> Result<ModelParams> {
    if start.layout().architecture != Architecture::ConvexLinear {
        return Err(Error::UnsupportedArchitecture("retraining needs the convex model".into()));
    }
    if !(l2 > 0.0) {
        return Err(Error::InvalidArgument(format!("l2 must be positive, got {l2}")));
    }
    let mut theta = start;
    let (mut f, mut g) = weighted_objective(&theta, items, l2)?;
    for _ in 0..NEWTON_MAX_ITERATIONS {
        if norm(&g) <= NEWTON_TOLERANCE {
            return Ok(theta);
        }
        let factor = SpdFactor::new(hessian(&theta, items, l2)?)?;
        let step = factor.solve(&g);
        let slope: f64 = -step.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let g_norm = norm(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = theta.clone();
            for (v, s) in trial.values.iter_mut().zip(&step) {
                *v -= t * s;
            }
            let (ft, gt) = weighted_objective(&trial, items, l2)?;
            let armijo = ft <= f + 1e-4 * t * slope;
            // Near the optimum F stalls at rounding level; a shrinking
            // gradient is then the only usable signal.
            let stalled = ft <= f + 1e-14 * f.abs().max(1.0) && norm(&gt) < g_norm;
            if armijo || stalled {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((next, ft, gt)) => {
                theta = next;
                f = ft;
                g = gt;
            }
            None => {
                return Err(Error::NoConvergence {
                    iterations: NEWTON_MAX_ITERATIONS,
                    residual: g_norm,
                })
            }
        }
    }
    if norm(&g) <= NEWTON_TOLERANCE {
        Ok(theta)
    } else {
        Err(Error::NoConvergence {
            iterations: NEWTON_MAX_ITERATIONS,
            residual: norm(&g),
        })
    }
}

/// `θ*(Γ)`, started from zero.
pub fn retrain_to_convergence(dataset: &HybridDataset, gammas: &[f64], l2: f64) -> Result<ModelParams> {
    check_gammas(dataset, gammas)?;
    let start = ModelParams::zeros(convex_layout(dataset)?);
    minimize(&objective_items(dataset, gammas), l2, start)
}

fn check_gammas(dataset: &HybridDataset, gammas: &[f64]) -> Result<()> {
    if dataset.strong.is_empty() {
        return Err(Error::InvalidArgument("no strong instances".into()));
    }
    if gammas.len() != dataset.weak.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} weak instances",
            gammas.len(),
            dataset.weak.len()
        )));
    }
    Ok(())
}

/// Mean loss over `D_S`.
pub fn strong_loss(params: &ModelParams, dataset: &HybridDataset) -> Result<f64> {
    let losses: Vec<f64> = dataset
        .strong
        .par_iter()
        .map(|i| instance_loss(params, i))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn fd_at(
    dataset: &HybridDataset,
    gammas: &[f64],
    k: usize,
    eps: f64,
    l2: f64,
    theta_star: &ModelParams,
) -> Result<f64> {
    let base = objective_items(dataset, gammas);
    let offset = dataset.strong.len() + k;
    let solve = |delta: f64| -> Result<f64> {
        let mut items = base.clone();
        items[offset].1 += delta;
        let theta = minimize(&items, l2, theta_star.clone())?;
        strong_loss(&theta, dataset)
    };
    let plus = solve(eps)?;
    let minus = solve(-eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Central difference `[L_S(θ*(w_k+ε)) − L_S(θ*(w_k−ε))] / 2ε`.
pub fn finite_difference_influence(
    dataset: &HybridDataset,
    gammas: &[f64],
    k: usize,
    eps: f64,
    l2: f64,
) -> Result<f64> {
    check_gammas(dataset, gammas)?;
    if k >= dataset.weak.len() {
        return Err(Error::InvalidArgument(format!("weak index {k} out of range")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let theta_star = retrain_to_convergence(dataset, gammas, l2)?;
    fd_at(dataset, gammas, k, eps, l2, &theta_star)
}

/// Influence estimates of every weak instance at a fixed `θ*`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceEstimates {
    pub exact: Vec<f64>,
    pub identity: Vec<f64>,
}

/// `−g_Sᵀ H⁻¹ g_k` and `−g_Sᵀ g_k` for every `k`, using the same code path as
/// DII learning.
pub fn influence_at(dataset: &HybridDataset, gammas: &[f64], l2: f64, theta_star: &ModelParams) -> Result<InfluenceEstimates> {
    let strong: Vec<&Instance> = dataset.strong.iter().collect();
    let g_s = estimate_strong_gradient(theta_star, &strong)?;
    let factor = SpdFactor::new(hessian(theta_star, &objective_items(dataset, gammas), l2)?)?;
    Ok(InfluenceEstimates {
        exact: estimate_dii_gradients(theta_star, &g_s, &dataset.weak, HessianMode::Exact(&factor))?,
        identity: estimate_dii_gradients(theta_star, &g_s, &dataset.weak, HessianMode::Identity)?,
    })
}

pub fn exact_influence(dataset: &HybridDataset, gammas: &[f64], k: usize, l2: f64) -> Result<f64> {
    check_gammas(dataset, gammas)?;
    if k >= dataset.weak.len() {
        return Err(Error::InvalidArgument(format!("weak index {k} out of range")));
    }
    let theta_star = retrain_to_convergence(dataset, gammas, l2)?;
    Ok(influence_at(dataset, gammas, l2, &theta_star)?.exact[k])
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRow {
    pub k: usize,
    pub instance_id: usize,
    pub fd: f64,
    pub exact: f64,
    pub identity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub rows: Vec<InfluenceRow>,
    pub epsilon: f64,
    pub l2: f64,
    /// Largest `|exact − fd| / |fd|`.
    pub max_rel_error: f64,
    /// Largest `|exact − fd|`.
    pub max_abs_error: f64,
    /// Rows with `|exact − fd| ≤ max(1e-2·|fd|, 1e-4)`.
    pub within_tolerance: usize,
    pub sign_agreement: f64,
    pub rank_correlation: Option<f64>,
}

/// The agreement rule used for exact-vs-FD checks.
pub fn agrees(fd: f64, exact: f64) -> bool {
    (exact - fd).abs() <= (1e-2 * fd.abs()).max(1e-4)
}

pub fn compare_influence_report(dataset: &HybridDataset, gammas: &[f64], eps: f64, l2: f64) -> Result<InfluenceReport> {
    check_gammas(dataset, gammas)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let theta_star = retrain_to_convergence(dataset, gammas, l2)?;
    let est = influence_at(dataset, gammas, l2, &theta_star)?;
    let fd: Vec<f64> = (0..dataset.weak.len())
        .into_par_iter()
        .map(|k| fd_at(dataset, gammas, k, eps, l2, &theta_star))
        .collect::<Result<_>>()?;
    let rows: Vec<InfluenceRow> = (0..fd.len())
        .map(|k| InfluenceRow {
            k,
            instance_id: dataset.weak[k].id,
            fd: fd[k],
            exact: est.exact[k],
            identity: est.identity[k],
        })
        .collect();
    if rows.iter().any(|r| !(r.fd.is_finite() && r.exact.is_finite() && r.identity.is_finite())) {
        return Err(Error::NonFinite {
            context: "influence estimates".into(),
        });
    }
    let max_abs_error = rows.iter().map(|r| (r.exact - r.fd).abs()).fold(0.0, f64::max);
    let max_rel_error = rows
        .iter()
        .map(|r| match (r.exact - r.fd).abs() {
            0.0 => 0.0,
            d => d / r.fd.abs(),
        })
        .fold(0.0, f64::max);
    let within_tolerance = rows.iter().filter(|r| agrees(r.fd, r.exact)).count();
    let sign_agreement = rows
        .iter()
        .filter(|r| r.identity.signum() == r.exact.signum())
        .count() as f64
        / rows.len().max(1) as f64;
    Ok(InfluenceReport {
        rank_correlation: rank_correlation(&est.identity, &est.exact),
        rows,
        epsilon: eps,
        l2,
        max_rel_error,
        max_abs_error,
        within_tolerance,
        sign_agreement,
    })
}

impl InfluenceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,instance_id,fd,exact,identity\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.k, r.instance_id, r.fd, r.exact, r.identity).unwrap();
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "instances": self.rows.len(),
            "epsilon": self.epsilon,
            "l2": self.l2,
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "within_tolerance": self.within_tolerance,
            "sign_agreement": self.sign_agreement,
            "rank_correlation": self.rank_correlation,
        })
    }
}
