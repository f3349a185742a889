use rayon::prelude::*;

use super::{FeatureMap, ImageGrid, Instance, LayerSpan, Mask, ModelParams, Probabilities, Supervision};
use crate::{Error, Result};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// `ln(PROB_FLOOR)`.
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547;

fn check_image(params: &ModelParams, image: &ImageGrid) -> Result<()> {
    let layout = params.layout();
    if image.channels() != layout.channels {
        return Err(Error::Config(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            layout.channels
        )));
    }
    Ok(())
}

fn check_target(params: &ModelParams, image: &ImageGrid, target: &Mask) -> Result<()> {
    check_image(params, image)?;
    if target.height() != image.height() || target.width() != image.width() {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} does not match image {}x{}",
            target.height(),
            target.width(),
            image.height(),
            image.width()
        )));
    }
    if target.classes() != params.layout().classes {
        return Err(Error::InvalidArgument(format!(
            "mask has {} classes, model predicts {}",
            target.classes(),
            params.layout().classes
        )));
    }
    Ok(())
}

/// Scratch buffers for one pixel's forward and backward pass.
struct Workspace {
    spans: Vec<LayerSpan>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(params: &ModelParams) -> Self {
        let spans = params.layout().layers();
        let acts = spans.iter().map(|s| vec![0.0; s.outputs]).collect();
        let deltas = spans.iter().map(|s| vec![0.0; s.outputs]).collect();
        Self {
            spans,
            acts,
            deltas,
        }
    }

    /// Runs the layers on `phi`; the logits end up in the last activation.
    fn forward(&mut self, values: &[f64], phi: &[f64]) {
        let last = self.spans.len() - 1;
        for l in 0..self.spans.len() {
            let span = self.spans[l];
            let (prev, rest) = self.acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { phi } else { &prev[l - 1] };
            let out = &mut rest[0];
            for (o, slot) in out.iter_mut().enumerate() {
                let row = &values[span.weights + o * span.inputs..span.weights + (o + 1) * span.inputs];
                let mut s = span.bias.map_or(0.0, |b| values[b + o]);
                s += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
                *slot = if l == last { s } else { s.tanh() };
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    /// Accumulates `∂/∂θ` given the logit deltas already stored in the last
    /// delta buffer. With `head_only`, stops after the final layer.
    fn backward(&mut self, values: &[f64], phi: &[f64], grad: &mut [f64], head_only: bool) {
        for l in (0..self.spans.len()).rev() {
            let span = self.spans[l];
            let input: &[f64] = if l == 0 { phi } else { &self.acts[l - 1] };
            let delta = &self.deltas[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[span.weights + o * span.inputs..span.weights + (o + 1) * span.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                if let Some(b) = span.bias {
                    grad[b + o] += d;
                }
            }
            if l == 0 || head_only {
                break;
            }
            let (lower, upper) = self.deltas.split_at_mut(l);
            let delta = &upper[0];
            let below = &mut lower[l - 1];
            let act = &self.acts[l - 1];
            for i in 0..span.inputs {
                let mut s = 0.0;
                for (o, &d) in delta.iter().enumerate() {
                    s += values[span.weights + o * span.inputs + i] * d;
                }
                below[i] = s * (1.0 - act[i] * act[i]);
            }
        }
    }
}

/// Log-softmax of `z` evaluated at `class`, with the probability floor.
/// Returns `(log_p, floored)`.
#[inline]
fn floored_log_prob(z: &[f64], class: usize) -> (f64, f64, bool) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let lp = z[class] - lse;
    if lp < LOG_PROB_FLOOR {
        (LOG_PROB_FLOOR, lse, true)
    } else {
        (lp, lse, false)
    }
}

/// Mean cross-entropy of the model on precomputed features. When `grad` is
/// given, adds `weight · ∂ℓ/∂θ` into it (full-length buffer).
pub(crate) fn features_loss_grad(
    params: &ModelParams,
    features: &FeatureMap,
    labels: &[u8],
    grad: Option<(&mut [f64], f64, bool)>,
) -> f64 {
    let mut ws = Workspace::new(params);
    let values = &params.values;
    let n = features.pixels as f64;
    let mut loss = 0.0;
    match grad {
        None => {
            for p in 0..features.pixels {
                ws.forward(values, features.pixel(p));
                loss -= floored_log_prob(ws.logits(), labels[p] as usize).0;
            }
        }
        Some((grad, weight, head_only)) => {
            let scale = weight / n;
            for p in 0..features.pixels {
                let phi = features.pixel(p);
                ws.forward(values, phi);
                let y = labels[p] as usize;
                let (lp, lse, floored) = floored_log_prob(ws.logits(), y);
                loss -= lp;
                if floored || scale == 0.0 {
                    continue;
                }
                let last = ws.spans.len() - 1;
                for c in 0..ws.deltas[last].len() {
                    let prob = (ws.acts[last][c] - lse).exp();
                    ws.deltas[last][c] = scale * (prob - if c == y { 1.0 } else { 0.0 });
                }
                ws.backward(values, phi, grad, head_only);
            }
        }
    }
    loss / n
}

/// Per-pixel class probabilities.
pub fn forward(params: &ModelParams, image: &ImageGrid) -> Result<Probabilities> {
    check_image(params, image)?;
    let features = FeatureMap::from_image(image);
    let classes = params.layout().classes;
    let mut ws = Workspace::new(params);
    let mut data = Vec::with_capacity(features.pixels * classes);
    for p in 0..features.pixels {
        ws.forward(&params.values, features.pixel(p));
        let z = ws.logits();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    Ok(Probabilities {
        height: image.height(),
        width: image.width(),
        classes,
        data,
    })
}

/// Pixel-mean cross-entropy of the model on `image` against `target`.
pub fn target_loss(params: &ModelParams, image: &ImageGrid, target: &Mask) -> Result<f64> {
    check_target(params, image, target)?;
    let features = FeatureMap::from_image(image);
    Ok(features_loss_grad(params, &features, target.labels(), None))
}

/// Loss and gradient against an arbitrary target mask. The gradient covers
/// θ′ only when `restrict_to_subset` is set.
pub fn target_loss_grad(
    params: &ModelParams,
    image: &ImageGrid,
    target: &Mask,
    restrict_to_subset: bool,
) -> Result<(f64, Vec<f64>)> {
    check_target(params, image, target)?;
    let features = FeatureMap::from_image(image);
    let mut grad = vec![0.0; params.len()];
    let loss = features_loss_grad(
        params,
        &features,
        target.labels(),
        Some((&mut grad, 1.0, restrict_to_subset)),
    );
    if restrict_to_subset {
        let range = params.subset();
        grad = grad[range].to_vec();
    }
    Ok((loss, grad))
}

fn instance_error(inst: &Instance, err: Error) -> Error {
    match err {
        Error::InvalidArgument(reason) => Error::InvalidInstance {
            id: inst.id,
            reason,
        },
        other => other,
    }
}

/// `ℓ(x, y, θ)`: pixel-mean cross-entropy with probabilities floored at
/// [`PROB_FLOOR`].
pub fn instance_loss(params: &ModelParams, inst: &Instance) -> Result<f64> {
    target_loss(params, &inst.image, &inst.mask).map_err(|e| instance_error(inst, e))
}

/// `∇ℓ` over θ, or over θ′ when `restrict_to_subset` is set.
pub fn instance_grad(params: &ModelParams, inst: &Instance, restrict_to_subset: bool) -> Result<Vec<f64>> {
    target_loss_grad(params, &inst.image, &inst.mask, restrict_to_subset)
        .map(|(_, g)| g)
        .map_err(|e| instance_error(inst, e))
}

/// Weighted batch objective `Σ γ_k ℓ_k / |batch|` and its full gradient.
///
/// Strong instances must carry weight exactly 1 and weak ones a weight in
/// `[0, 1]`.
pub fn batch_loss_grad(params: &ModelParams, batch: &[(&Instance, f64)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for (inst, w) in batch {
        let ok = match inst.supervision {
            Supervision::Strong => *w == 1.0,
            Supervision::Weak => (0.0..=1.0).contains(w),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "weight {w} not allowed for {:?} instance {}",
                inst.supervision, inst.id
            )));
        }
    }
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(inst, _)| {
            target_loss_grad(params, &inst.image, &inst.mask, false).map_err(|e| instance_error(inst, e))
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for ((_, w), (l, g)) in batch.iter().zip(&parts) {
        loss += w * l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += w * gi;
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn convex(classes: usize) -> ModelLayout {
        ModelLayout::new(Architecture::ConvexLinear, 1, classes).unwrap()
    }

    fn mlp() -> ModelLayout {
        ModelLayout::new(Architecture::TinyMlp { hidden: vec![5, 4] }, 1, 3).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize, id: usize) -> Instance {
        let image = ImageGrid::new(h, w, 1, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels = (0..h * w).map(|_| rng.random_range(0..classes) as u8).collect();
        Instance {
            id,
            image,
            mask: Mask::new(h, w, classes, labels).unwrap(),
            supervision: Supervision::Weak,
            corrupted: false,
            clean_mask: None,
        }
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let params = ModelParams::zeros(convex(4));
        let img = ImageGrid::filled(3, 3, 1, 0.7);
        let probs = forward(&params, &img).unwrap();
        assert!(probs.data.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::random(mlp(), &mut rng);
        let inst = random_instance(&mut rng, 4, 5, 3, 0);
        let probs = forward(&params, &inst.image).unwrap();
        for p in 0..20 {
            let s: f64 = probs.pixel(p).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert!(probs.pixel(p).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn logit_margin_of_ten_is_confident() {
        // Only the bias feature is active in the class-1 row.
        let mut params = ModelParams::zeros(convex(2));
        params.values[6 + 5] = 10.0;
        let probs = forward(&params, &ImageGrid::filled(1, 1, 1, 0.3)).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((probs.pixel(0)[1] - expected).abs() < 1e-15);
        assert!(probs.pixel(0)[1] >= 0.9999);
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let params = ModelParams::zeros(convex(2));
        let img = ImageGrid::filled(2, 2, 3, 0.1);
        assert!(matches!(forward(&params, &img), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_prediction_costs_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::zeros(convex(2));
        let inst = random_instance(&mut rng, 3, 4, 2, 0);
        let l = instance_loss(&params, &inst).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_pixel_loss() {
        // Pixel 0: logit margin ln 9 → p = 0.9; pixel 1: margin 0 → p = 0.5.
        // The x-coordinate feature is -1 at pixel 0 and +1 at pixel 1.
        let mut params = ModelParams::zeros(convex(2));
        let a = 9f64.ln() / 2.0;
        params.values[6 + 5] = a; // bias
        params.values[6 + 1] = -a; // x coordinate
        let img = ImageGrid::new(1, 2, 1, vec![0.2, 0.8]).unwrap();
        let inst = Instance {
            id: 0,
            image: img,
            mask: Mask::new(1, 2, 2, vec![1, 1]).unwrap(),
            supervision: Supervision::Weak,
            corrupted: false,
            clean_mask: None,
        };
        let expected = -(0.9f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((instance_loss(&params, &inst).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut params = ModelParams::zeros(convex(2));
        params.values[6 + 5] = 40.0;
        let inst = Instance {
            id: 0,
            image: ImageGrid::filled(2, 2, 1, 0.5),
            mask: Mask::filled(2, 2, 2, 1),
            supervision: Supervision::Strong,
            corrupted: false,
            clean_mask: None,
        };
        assert!(instance_loss(&params, &inst).unwrap() < 1e-15);
        // And the floor caps the opposite case.
        let wrong = Instance {
            mask: Mask::filled(2, 2, 2, 0),
            ..inst
        };
        assert!((instance_loss(&params, &wrong).unwrap() + LOG_PROB_FLOOR).abs() < 1e-12);
    }

    #[test]
    fn restricted_gradient_on_convex_is_full_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::random(convex(3), &mut rng);
        let inst = random_instance(&mut rng, 4, 4, 3, 0);
        assert_eq!(
            instance_grad(&params, &inst, true).unwrap(),
            instance_grad(&params, &inst, false).unwrap()
        );
    }

    #[test]
    fn restricted_gradient_on_mlp_is_head_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::random(mlp(), &mut rng);
        let inst = random_instance(&mut rng, 4, 4, 3, 0);
        let full = instance_grad(&params, &inst, false).unwrap();
        let head = instance_grad(&params, &inst, true).unwrap();
        assert_eq!(head.len(), params.subset().len());
        for (a, b) in head.iter().zip(&full[params.subset()]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_rejects_empty_and_bad_weights() {
        let params = ModelParams::zeros(convex(2));
        assert!(batch_loss_grad(&params, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut strong = random_instance(&mut rng, 2, 2, 2, 0);
        strong.supervision = Supervision::Strong;
        assert!(batch_loss_grad(&params, &[(&strong, 0.5)]).is_err());
        let weak = random_instance(&mut rng, 2, 2, 2, 1);
        assert!(batch_loss_grad(&params, &[(&weak, 1.5)]).is_err());
    }

    #[test]
    fn batch_zero_weights_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::random(mlp(), &mut rng);
        let a = random_instance(&mut rng, 3, 3, 3, 0);
        let b = random_instance(&mut rng, 3, 3, 3, 1);
        let (loss, grad) = batch_loss_grad(&params, &[(&a, 0.0), (&b, 0.0)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_singleton_matches_instance_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::random(mlp(), &mut rng);
        let a = random_instance(&mut rng, 3, 3, 3, 0);
        let (loss, grad) = batch_loss_grad(&params, &[(&a, 1.0)]).unwrap();
        assert_eq!(loss, instance_loss(&params, &a).unwrap());
        assert_eq!(grad, instance_grad(&params, &a, false).unwrap());
    }

    #[test]
    fn batch_two_instance_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = ModelParams::random(mlp(), &mut rng);
        let a = random_instance(&mut rng, 3, 3, 3, 0);
        let b = random_instance(&mut rng, 3, 3, 3, 1);
        let (loss, grad) = batch_loss_grad(&params, &[(&a, 1.0), (&b, 0.5)]).unwrap();
        let (la, lb) = (instance_loss(&params, &a).unwrap(), instance_loss(&params, &b).unwrap());
        assert!((loss - (la + 0.5 * lb) / 2.0).abs() < 1e-14);
        let (ga, gb) = (
            instance_grad(&params, &a, false).unwrap(),
            instance_grad(&params, &b, false).unwrap(),
        );
        for i in 0..grad.len() {
            assert!((grad[i] - (ga[i] + 0.5 * gb[i]) / 2.0).abs() < 1e-14);
        }
    }
}
