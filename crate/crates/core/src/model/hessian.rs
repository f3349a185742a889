use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::net::{features_loss_grad, LOG_PROB_FLOOR};
use super::{Architecture, FeatureMap, Instance, ModelParams};
use crate::{Error, Result};

/// `F(θ) = Σ w_i ℓ_i(θ) + (λ/2)‖θ‖²` and its gradient, for arbitrary
/// non-negative weights.
pub fn weighted_objective(params: &ModelParams, items: &[(&Instance, f64)], l2: f64) -> Result<(f64, Vec<f64>)> {
    for (inst, _) in items {
        inst.validate()?;
    }
    let parts: Vec<(f64, Vec<f64>)> = items
        .par_iter()
        .map(|(inst, w)| {
            let features = FeatureMap::from_image(&inst.image);
            let mut g = vec![0.0; params.len()];
            let l = features_loss_grad(params, &features, inst.mask.labels(), Some((&mut g, *w, false)));
            (w * l, g)
        })
        .collect();
    let mut value = 0.5 * l2 * params.values.iter().map(|v| v * v).sum::<f64>();
    let mut grad: Vec<f64> = params.values.iter().map(|v| l2 * v).collect();
    for (l, g) in parts {
        value += l;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    Ok((value, grad))
}

/// Exact Hessian of [`weighted_objective`] for the convex model:
/// `Σ w_i ∇²ℓ_i + λ·I`, a dense `(d·C)×(d·C)` matrix.
pub fn hessian(params: &ModelParams, items: &[(&Instance, f64)], l2: f64) -> Result<DMatrix<f64>> {
    let layout = params.layout();
    if layout.architecture != Architecture::ConvexLinear {
        return Err(Error::UnsupportedArchitecture(
            "exact Hessian is only available for the convex model".into(),
        ));
    }
    if !(l2 > 0.0) {
        return Err(Error::InvalidArgument(format!("l2 must be positive, got {l2}")));
    }
    let n = params.len();
    let d = layout.feature_dim();
    let classes = layout.classes;

    let parts: Vec<Vec<f64>> = items
        .par_iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|(inst, w)| {
            let features = FeatureMap::from_image(&inst.image);
            let mut h = vec![0.0; n * n];
            let mut outer = vec![0.0; d * d];
            let mut z = vec![0.0; classes];
            let mut p = vec![0.0; classes];
            let scale = w / features.pixels as f64;
            for (px, &label) in inst.mask.labels().iter().enumerate() {
                let phi = features.pixel(px);
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = params.values[c * d..(c + 1) * d]
                        .iter()
                        .zip(phi)
                        .map(|(a, b)| a * b)
                        .sum();
                }
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                if z[label as usize] - lse < LOG_PROB_FLOOR {
                    continue;
                }
                for (pc, zc) in p.iter_mut().zip(&z) {
                    *pc = (zc - lse).exp();
                }
                for a in 0..d {
                    for b in 0..d {
                        outer[a * d + b] = phi[a] * phi[b];
                    }
                }
                for c in 0..classes {
                    for c2 in 0..classes {
                        let coeff = scale * (if c == c2 { p[c] } else { 0.0 } - p[c] * p[c2]);
                        if coeff == 0.0 {
                            continue;
                        }
                        for a in 0..d {
                            let row = (c * d + a) * n + c2 * d;
                            let orow = &outer[a * d..(a + 1) * d];
                            for (slot, o) in h[row..row + d].iter_mut().zip(orow) {
                                *slot += coeff * o;
                            }
                        }
                    }
                }
            }
            h
        })
        .collect();

    let mut total = DMatrix::<f64>::identity(n, n) * l2;
    for h in parts {
        for (slot, v) in total.as_mut_slice().iter_mut().zip(&h) {
            *slot += v;
        }
    }
    // The accumulation is symmetric term by term; enforce exact symmetry
    // against rounding differences between mirrored entries.
    let sym = (&total + total.transpose()) * 0.5;
    Ok(sym)
}

/// Cholesky factorization of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidArgument("matrix must be square".into()));
        }
        Cholesky::new(matrix)
            .map(|chol| Self { chol })
            .ok_or(Error::NotPositiveDefinite)
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `H⁻¹·b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = DVector::from_column_slice(b);
        self.chol.solve(&rhs).as_slice().to_vec()
    }
}
