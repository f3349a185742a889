//! Dual-network co-regularized training.
//!
//! The primary network θ₁ learns from instances drawn in proportion to their
//! weights, the auxiliary network θ₂ from uniformly drawn ones. Each pair
//! `(i, j)` is also mixed by pasting one foreground class of `x_i` onto
//! `x_j`; each network is then supervised on the mixed image by the other
//! network's hardened, equally mixed predictions.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::dii::{train_bilevel, DiiHistory, DiiState, LowerLevel, Schedule, StepStats};
use crate::model::{
    batch_loss_grad, forward, instance_loss, sgd_step, target_loss, target_loss_grad, HybridDataset, ImageGrid,
    Instance, Mask, ModelLayout, ModelParams, Probabilities, SgdConfig,
};
use crate::rng::{substream, Rng as StreamRng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Draw in proportion to the instance weights (strong 1, weak γ).
    DiiMultinomial,
    Uniform,
}

/// Primary-tutorial draw: an index into `D_S ∪ D_W` and whether the
/// all-zero-weight uniform fallback was used.
pub fn sample_primary<R: Rng + ?Sized>(
    dataset: &HybridDataset,
    gammas: Option<&[f64]>,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<(usize, bool)> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if mode == SamplingMode::Uniform {
        return Ok((rng.random_range(0..n), false));
    }
    let weights: Vec<f64> = (0..n).map(|i| dataset.weight(i, gammas)).collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => Ok((dist.sample(rng), false)),
        Err(rand::distr::weighted::Error::InsufficientNonZero) => {
            log::warn!("all sampling weights are zero; falling back to uniform sampling");
            Ok((rng.random_range(0..n), true))
        }
        Err(e) => Err(Error::InvalidArgument(format!("sampling weights: {e}"))),
    }
}

/// Auxiliary-tutorial draw: uniform over `D_S ∪ D_W`.
pub fn sample_auxiliary<R: Rng + ?Sized>(dataset: &HybridDataset, rng: &mut R) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    Ok(rng.random_range(0..dataset.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixRecord {
    pub i: usize,
    pub j: usize,
    /// Pasted class, `None` when `y_i` has no foreground.
    pub class: Option<u8>,
    /// Paste mask: 1 where `y_i` has class `c`, row-major.
    pub paste: Vec<u8>,
    pub mixed: ImageGrid,
}

/// `x_m = B⊙x_i + (1−B)⊙x_j` with `B` the indicator of a foreground class
/// drawn uniformly among those present in `y_i`.
pub fn foreground_paste<R: Rng + ?Sized>(inst_i: &Instance, inst_j: &Instance, rng: &mut R) -> Result<MixRecord> {
    let (xi, xj) = (&inst_i.image, &inst_j.image);
    if xi.height() != xj.height() || xi.width() != xj.width() || xi.channels() != xj.channels() {
        return Err(Error::InvalidArgument("images to mix differ in shape".into()));
    }
    let present: Vec<u8> = (1..inst_i.mask.classes() as u8)
        .filter(|&c| inst_i.mask.count(c) > 0)
        .collect();
    let class = present.choose(rng).copied();
    let paste: Vec<u8> = match class {
        Some(c) => inst_i.mask.labels().iter().map(|&l| (l == c) as u8).collect(),
        None => vec![0; inst_i.mask.labels().len()],
    };
    let ch = xi.channels();
    let data = xi
        .data()
        .iter()
        .zip(xj.data())
        .enumerate()
        .map(|(k, (a, b))| if paste[k / ch] == 1 { *a } else { *b })
        .collect();
    Ok(MixRecord {
        i: inst_i.id,
        j: inst_j.id,
        class,
        paste,
        mixed: ImageGrid::new(xi.height(), xi.width(), ch, data)?,
    })
}

/// Pseudo mask `argmax(B⊙p_i + (1−B)⊙p_j)`, ties to the lowest class.
pub fn mix_predictions(paste: &[u8], pred_i: &Probabilities, pred_j: &Probabilities) -> Result<Mask> {
    if pred_i.height != pred_j.height || pred_i.width != pred_j.width || pred_i.classes != pred_j.classes {
        return Err(Error::InvalidArgument("prediction shapes differ".into()));
    }
    if paste.len() != pred_i.height * pred_i.width {
        return Err(Error::InvalidArgument("paste mask size differs from predictions".into()));
    }
    let c = pred_i.classes;
    let data = (0..paste.len())
        .flat_map(|p| {
            let b = paste[p] as f64;
            let (pi, pj) = (pred_i.pixel(p), pred_j.pixel(p));
            (0..c).map(move |k| b * pi[k] + (1.0 - b) * pj[k])
        })
        .collect();
    Ok(Probabilities {
        height: pred_i.height,
        width: pred_i.width,
        classes: c,
        data,
    }
    .argmax_mask())
}

/// Pseudo masks of both networks for a mix: `(ỹ_1m, ỹ_2m)`.
pub fn pseudo_masks(
    theta1: &ModelParams,
    theta2: &ModelParams,
    mix: &MixRecord,
    x_i: &ImageGrid,
    x_j: &ImageGrid,
) -> Result<(Mask, Mask)> {
    let y1 = mix_predictions(&mix.paste, &forward(theta1, x_i)?, &forward(theta1, x_j)?)?;
    let y2 = mix_predictions(&mix.paste, &forward(theta2, x_i)?, &forward(theta2, x_j)?)?;
    Ok((y1, y2))
}

/// `r = ℓ(x_m, ỹ_2m, θ₁) + ℓ(x_m, ỹ_1m, θ₂)`.
pub fn regularization_loss(
    theta1: &ModelParams,
    theta2: &ModelParams,
    x_m: &ImageGrid,
    y1m: &Mask,
    y2m: &Mask,
) -> Result<f64> {
    Ok(target_loss(theta1, x_m, y2m)? + target_loss(theta2, x_m, y1m)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub sup_primary: f64,
    pub sup_auxiliary: f64,
    pub reg: f64,
    pub total: f64,
    pub grad1: Vec<f64>,
    pub grad2: Vec<f64>,
}

/// Regularizer value and its gradients for θ₁ and θ₂ with the pseudo masks
/// held constant.
fn reg_loss_grad(
    theta1: &ModelParams,
    theta2: &ModelParams,
    mix: &MixRecord,
    x_i: &ImageGrid,
    x_j: &ImageGrid,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (y1m, y2m) = pseudo_masks(theta1, theta2, mix, x_i, x_j)?;
    let (l1, g1) = target_loss_grad(theta1, &mix.mixed, &y2m, false)?;
    let (l2, g2) = target_loss_grad(theta2, &mix.mixed, &y1m, false)?;
    Ok((l1 + l2, g1, g2))
}

/// `γ_i ℓ(x_i, y_i, θ₁) + γ_j ℓ(x_j, y_j, θ₂) + λ·(γ_i+γ_j)/2·r` and its
/// gradients, with the mix drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn dcr_pair_loss<R: Rng + ?Sized>(
    theta1: &ModelParams,
    theta2: &ModelParams,
    lambda: f64,
    inst_i: &Instance,
    gamma_i: f64,
    inst_j: &Instance,
    gamma_j: f64,
    rng: &mut R,
) -> Result<PairLoss> {
    let mix = foreground_paste(inst_i, inst_j, rng)?;
    let (li, gi) = target_loss_grad(theta1, &inst_i.image, &inst_i.mask, false)?;
    let (lj, gj) = target_loss_grad(theta2, &inst_j.image, &inst_j.mask, false)?;
    let (reg, r1, r2) = reg_loss_grad(theta1, theta2, &mix, &inst_i.image, &inst_j.image)?;
    let coeff = lambda * (gamma_i + gamma_j) / 2.0;
    let grad1 = gi.iter().zip(&r1).map(|(a, b)| gamma_i * a + coeff * b).collect();
    let grad2 = gj.iter().zip(&r2).map(|(a, b)| gamma_j * a + coeff * b).collect();
    Ok(PairLoss {
        sup_primary: gamma_i * li,
        sup_auxiliary: gamma_j * lj,
        reg,
        total: gamma_i * li + gamma_j * lj + coeff * reg,
        grad1,
        grad2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcrConfig {
    pub lambda: f64,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
}

impl Default for DcrConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            sgd: SgdConfig::default(),
            batch_size: 8,
            sampling: SamplingMode::DiiMultinomial,
            seed: 0,
        }
    }
}

/// Both networks with their optimiser buffers and sampling streams.
#[derive(Debug, Clone)]
pub struct DcrState {
    pub theta1: ModelParams,
    pub theta2: ModelParams,
    vel1: Vec<f64>,
    vel2: Vec<f64>,
    pub config: DcrConfig,
    primary_rng: StreamRng,
    auxiliary_rng: StreamRng,
    mixing_rng: StreamRng,
    /// Primary draws that hit the all-zero-weight fallback.
    pub fallback_draws: usize,
}

/// Initial primary parameters for `seed`; θ₂ uses `seed + 1`.
pub fn init_params(layout: &ModelLayout, seed: u64) -> ModelParams {
    ModelParams::random(layout.clone(), &mut substream(seed, Stream::InitPrimary, 0))
}

impl DcrState {
    pub fn new(layout: &ModelLayout, config: DcrConfig) -> Result<Self> {
        Self::from_params(
            init_params(layout, config.seed),
            init_params(layout, config.seed.wrapping_add(1)),
            config,
        )
    }

    pub fn from_params(theta1: ModelParams, theta2: ModelParams, config: DcrConfig) -> Result<Self> {
        if theta1.layout() != theta2.layout() {
            return Err(Error::InvalidArgument("networks differ in architecture".into()));
        }
        if !(config.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be non-negative", config.lambda)));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self {
            vel1: vec![0.0; theta1.len()],
            vel2: vec![0.0; theta2.len()],
            theta1,
            theta2,
            primary_rng: substream(config.seed, Stream::PrimarySampling, 0),
            auxiliary_rng: substream(config.seed, Stream::AuxiliarySampling, 0),
            mixing_rng: substream(config.seed, Stream::Mixing, 0),
            config,
            fallback_draws: 0,
        })
    }
}

impl LowerLevel for DcrState {
    fn step(&mut self, dataset: &HybridDataset, gammas: Option<&[f64]>) -> Result<StepStats> {
        let b = self.config.batch_size;
        let mut primary = Vec::with_capacity(b);
        let mut auxiliary = Vec::with_capacity(b);
        for _ in 0..b {
            let (i, fallback) = sample_primary(dataset, gammas, self.config.sampling, &mut self.primary_rng)?;
            self.fallback_draws += fallback as usize;
            primary.push(i);
        }
        for _ in 0..b {
            auxiliary.push(sample_auxiliary(dataset, &mut self.auxiliary_rng)?);
        }
        let mixes: Vec<MixRecord> = primary
            .iter()
            .zip(&auxiliary)
            .map(|(&i, &j)| foreground_paste(dataset.combined(i), dataset.combined(j), &mut self.mixing_rng))
            .collect::<Result<_>>()?;

        let items1: Vec<(&Instance, f64)> = primary
            .iter()
            .map(|&i| (dataset.combined(i), dataset.weight(i, gammas)))
            .collect();
        let items2: Vec<(&Instance, f64)> = auxiliary
            .iter()
            .map(|&j| (dataset.combined(j), dataset.weight(j, gammas)))
            .collect();
        let (sup1, mut grad1) = batch_loss_grad(&self.theta1, &items1)?;
        let (sup2, mut grad2) = batch_loss_grad(&self.theta2, &items2)?;

        let mut reg_mean = 0.0;
        let mut reg_term = 0.0;
        if self.config.lambda > 0.0 {
            let (t1, t2) = (&self.theta1, &self.theta2);
            let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = mixes
                .par_iter()
                .zip(items1.par_iter().zip(&items2))
                .map(|(mix, ((xi, _), (xj, _)))| reg_loss_grad(t1, t2, mix, &xi.image, &xj.image))
                .collect::<Result<_>>()?;
            let n = b as f64;
            let mut acc1 = vec![0.0; grad1.len()];
            let mut acc2 = vec![0.0; grad2.len()];
            for ((r, g1, g2), ((_, wi), (_, wj))) in parts.iter().zip(items1.iter().zip(&items2)) {
                let coeff = self.config.lambda * (wi + wj) / 2.0;
                reg_mean += r / n;
                reg_term += coeff * r / n;
                for (a, g) in acc1.iter_mut().zip(g1) {
                    *a += coeff * g;
                }
                for (a, g) in acc2.iter_mut().zip(g2) {
                    *a += coeff * g;
                }
            }
            for (g, a) in grad1.iter_mut().zip(&acc1) {
                *g += a / n;
            }
            for (g, a) in grad2.iter_mut().zip(&acc2) {
                *g += a / n;
            }
        }
        sgd_step(&mut self.theta1, &mut self.vel1, &grad1, &self.config.sgd)?;
        sgd_step(&mut self.theta2, &mut self.vel2, &grad2, &self.config.sgd)?;
        Ok(StepStats {
            sup_primary: sup1,
            sup_auxiliary: Some(sup2),
            reg: Some(reg_mean),
            total: sup1 + sup2 + reg_term,
        })
    }

    fn primary(&self) -> &ModelParams {
        &self.theta1
    }
}

/// Runs DCR as the lower level, with DII on top when `dii` is given.
pub fn dcr_train<F>(
    dataset: &HybridDataset,
    mut state: DcrState,
    dii: Option<&mut DiiState>,
    schedule: &Schedule,
    observer: F,
) -> Result<(DcrState, DiiHistory)>
where
    F: FnMut(usize, &StepStats, &ModelParams) -> Result<()>,
{
    let batch = state.config.batch_size;
    let history = train_bilevel(dataset, &mut state, dii, schedule, batch, observer)?;
    Ok((state, history))
}

/// Unweighted mean loss of both networks on `instances`, for diagnostics.
pub fn mean_losses(state: &DcrState, instances: &[Instance]) -> Result<(f64, f64)> {
    let n = instances.len().max(1) as f64;
    let mut a = 0.0;
    let mut b = 0.0;
    for inst in instances {
        a += instance_loss(&state.theta1, inst)?;
        b += instance_loss(&state.theta2, inst)?;
    }
    Ok((a / n, b / n))
}
