use super::ModelParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 5e-5,
        }
    }
}

/// Momentum SGD with the weight-decay term kept out of the velocity buffer:
///
/// `v ← μ·v + g`, `θ ← θ − α·(v + λ_wd·θ)`.
///
/// The caller owns `velocity`. A non-finite gradient leaves both `params` and
/// `velocity` untouched.
pub fn sgd_step(params: &mut ModelParams, velocity: &mut [f64], grad: &[f64], cfg: &SgdConfig) -> Result<()> {
    if grad.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient/velocity length {}/{} does not match {} parameters",
            grad.len(),
            velocity.len(),
            params.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "parameter gradient".into(),
        });
    }
    for ((theta, v), g) in params.values.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v + g;
        *theta -= cfg.lr * (*v + cfg.weight_decay * *theta);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelLayout};

    fn params(values: Vec<f64>) -> ModelParams {
        let layout = ModelLayout::new(Architecture::ConvexLinear, 1, 2).unwrap();
        let mut v = values;
        v.resize(layout.num_params(), 0.0);
        ModelParams::from_values(layout, v).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = params(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut vel = vec![0.0; p.len()];
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &mut vel, &vec![0.0; before.len()], &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn vanilla_step_is_exact() {
        let mut p = params(vec![1.0, 2.0]);
        let mut g = vec![0.0; p.len()];
        g[0] = 0.5;
        g[1] = -0.25;
        let mut vel = vec![0.0; p.len()];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &mut vel, &g, &cfg).unwrap();
        assert_eq!(p.values[0], 1.0 - 0.1 * 0.5);
        assert_eq!(p.values[1], 2.0 - 0.1 * -0.25);
    }

    #[test]
    fn momentum_recurrence_on_constant_gradient() {
        let mut p = params(vec![]);
        let mut g = vec![0.0; p.len()];
        g[3] = 2.0;
        let mut vel = vec![0.0; p.len()];
        let cfg = SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &mut vel, &g, &cfg).unwrap();
        let first = -p.values[3];
        sgd_step(&mut p, &mut vel, &g, &cfg).unwrap();
        let second = -p.values[3] - first;
        assert!((first - 0.01 * 2.0).abs() < 1e-15);
        assert!((second - 0.01 * 1.9 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = params(vec![1.0]);
        let before = p.clone();
        let mut g = vec![0.0; p.len()];
        g[2] = f64::NAN;
        let mut vel = vec![0.0; p.len()];
        let err = sgd_step(&mut p, &mut vel, &g, &SgdConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p, before);
        assert!(vel.iter().all(|&v| v == 0.0));
    }
}
