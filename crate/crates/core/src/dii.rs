//! Dynamic instance importance (DII) learning.
//!
//! Each weak instance `k` carries a weight `γ_k ∈ [0, 1]`. Lower-level
//! training runs on batches weighted by the live Γ; every `τ` steps the
//! current parameters are treated as the lower-level optimum `θ*` and Γ
//! takes one Adam step along
//!
//! `∂L(D_S, θ*)/∂γ_k ≈ −g_Sᵀ H⁻¹ g_k`,
//!
//! with `g_S` the mean strong gradient and `g_k` the weak-instance gradient,
//! both over the head parameters θ′.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::dcr::{sample_primary, SamplingMode};
use crate::model::{
    batch_loss_grad, hessian, instance_grad, instance_loss, sgd_step, Architecture, HybridDataset, Instance,
    ModelParams, SgdConfig, SpdFactor, Supervision,
};
use crate::rng::{substream, Rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    /// Upper-level learning rate β.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiiState {
    pub gammas: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
    pub adam: AdamConfig,
}

impl DiiState {
    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    /// Number of Adam steps applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

pub fn init_dii(m: usize, init: f64, adam: AdamConfig) -> Result<DiiState> {
    if m == 0 {
        return Err(Error::InvalidArgument("no weak instances to weight".into()));
    }
    if !(0.0..=1.0).contains(&init) {
        return Err(Error::InvalidArgument(format!("initial weight {init} outside [0, 1]")));
    }
    Ok(DiiState {
        gammas: vec![init; m],
        m: vec![0.0; m],
        v: vec![0.0; m],
        steps: 0,
        adam,
    })
}

/// Mean θ′ gradient over a batch of strong instances.
pub fn estimate_strong_gradient(params: &ModelParams, batch: &[&Instance]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty strong batch".into()));
    }
    if let Some(inst) = batch.iter().find(|i| i.supervision != Supervision::Strong) {
        return Err(Error::Contract(format!("instance {} in strong batch is weak", inst.id)));
    }
    let grads: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|inst| instance_grad(params, inst, true))
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; grads[0].len()];
    for g in &grads {
        for (a, b) in mean.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    Ok(mean)
}

#[derive(Debug, Clone, Copy)]
pub enum HessianMode<'a> {
    Identity,
    /// Factorized lower-level Hessian; convex model only.
    Exact(&'a SpdFactor),
}

/// `−g_Sᵀ H⁻¹ g_k` for every weak instance, in order.
pub fn estimate_dii_gradients(
    params: &ModelParams,
    g_s: &[f64],
    weak: &[Instance],
    mode: HessianMode<'_>,
) -> Result<Vec<f64>> {
    if g_s.len() != params.subset().len() {
        return Err(Error::InvalidArgument(format!(
            "strong gradient has length {}, expected {}",
            g_s.len(),
            params.subset().len()
        )));
    }
    let direction = match mode {
        HessianMode::Identity => g_s.to_vec(),
        HessianMode::Exact(factor) => {
            if params.layout().architecture != Architecture::ConvexLinear {
                return Err(Error::UnsupportedArchitecture(
                    "exact Hessian mode needs the convex model".into(),
                ));
            }
            if factor.dim() != g_s.len() {
                return Err(Error::InvalidArgument("Hessian dimension mismatch".into()));
            }
            factor.solve(g_s)
        }
    };
    weak.par_iter()
        .map(|inst| {
            let g_k = instance_grad(params, inst, true)?;
            Ok(-direction.iter().zip(&g_k).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect()
}

/// One bias-corrected Adam step on the whole Γ vector, followed by clipping
/// to `[0, 1]`.
pub fn adam_step_dii(state: &mut DiiState, grads: &[f64]) -> Result<()> {
    if grads.len() != state.len() {
        return Err(Error::InvalidArgument(format!(
            "{} DII gradients for {} weights",
            grads.len(),
            state.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "DII gradients".into(),
        });
    }
    let a = state.adam;
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - a.beta1.powi(t);
    let bc2 = 1.0 - a.beta2.powi(t);
    for k in 0..grads.len() {
        let g = grads[k];
        state.m[k] = a.beta1 * state.m[k] + (1.0 - a.beta1) * g;
        state.v[k] = a.beta2 * state.v[k] + (1.0 - a.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        state.gammas[k] = (state.gammas[k] - a.lr * m_hat / (v_hat.sqrt() + a.eps)).clamp(0.0, 1.0);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub sup_primary: f64,
    pub sup_auxiliary: Option<f64>,
    pub reg: Option<f64>,
    pub total: f64,
}

/// One lower-level optimisation step on `D_S ∪ D_W`.
pub trait LowerLevel {
    /// `gammas` holds the current weak weights, or `None` for unit weights.
    fn step(&mut self, dataset: &HybridDataset, gammas: Option<&[f64]>) -> Result<StepStats>;

    /// Parameters used for DII estimation and evaluation.
    fn primary(&self) -> &ModelParams;
}

/// Single network trained on weighted batches.
#[derive(Debug, Clone)]
pub struct SingleNetTrainer {
    pub params: ModelParams,
    velocity: Vec<f64>,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub sampling: SamplingMode,
    rng: Rng,
}

impl SingleNetTrainer {
    pub fn new(params: ModelParams, sgd: SgdConfig, batch_size: usize, sampling: SamplingMode, seed: u64) -> Self {
        let velocity = vec![0.0; params.len()];
        Self {
            params,
            velocity,
            sgd,
            batch_size,
            sampling,
            rng: substream(seed, Stream::PrimarySampling, 0),
        }
    }
}

impl LowerLevel for SingleNetTrainer {
    fn step(&mut self, dataset: &HybridDataset, gammas: Option<&[f64]>) -> Result<StepStats> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let (idx, _) = sample_primary(dataset, gammas, self.sampling, &mut self.rng)?;
            batch.push((dataset.combined(idx), dataset.weight(idx, gammas)));
        }
        let (loss, grad) = batch_loss_grad(&self.params, &batch)?;
        sgd_step(&mut self.params, &mut self.velocity, &grad, &self.sgd)?;
        Ok(StepStats {
            sup_primary: loss,
            sup_auxiliary: None,
            reg: None,
            total: loss,
        })
    }

    fn primary(&self) -> &ModelParams {
        &self.params
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiiHessian {
    Identity,
    /// Exact Hessian of the mean-normalized lower objective with this L2.
    Exact { l2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub tau: usize,
    /// Strong batch size for `g_S`; `None` means `min(N, batch_size)`.
    pub strong_batch_size: Option<usize>,
    pub hessian: DiiHessian,
    /// Keep the full Γ vector in every history row.
    pub record_gammas: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub strong_loss: f64,
    pub gamma_mean: f64,
    pub gamma_median: f64,
    pub frac_low: f64,
    pub frac_high: f64,
    pub gammas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiiHistory {
    pub rows: Vec<HistoryRow>,
}

impl DiiHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,strong_loss,gamma_mean,gamma_median,frac_below_0.1,frac_above_0.9\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step, r.strong_loss, r.gamma_mean, r.gamma_median, r.frac_low, r.frac_high
            )
            .unwrap();
        }
        s
    }
}

/// `instance_id,gamma,corrupted` for every weak instance.
pub fn gamma_csv(state: &DiiState, dataset: &HybridDataset) -> String {
    let mut s = String::from("instance_id,gamma,corrupted\n");
    for (g, inst) in state.gammas.iter().zip(&dataset.weak) {
        writeln!(s, "{},{},{}", inst.id, g, inst.corrupted as u8).unwrap();
    }
    s
}

fn history_row(step: usize, params: &ModelParams, dataset: &HybridDataset, gammas: &[f64], keep: bool) -> Result<HistoryRow> {
    let losses: Vec<f64> = dataset
        .strong
        .par_iter()
        .map(|i| instance_loss(params, i))
        .collect::<Result<_>>()?;
    let strong_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let m = gammas.len() as f64;
    let mut sorted = gammas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(HistoryRow {
        step,
        strong_loss,
        gamma_mean: gammas.iter().sum::<f64>() / m,
        gamma_median: median,
        frac_low: gammas.iter().filter(|&&g| g < 0.1).count() as f64 / m,
        frac_high: gammas.iter().filter(|&&g| g > 0.9).count() as f64 / m,
        gammas: keep.then(|| gammas.to_vec()),
    })
}

/// Lower-level objective weights: `1/N` strong, `γ_k/M` weak.
pub fn objective_items<'a>(dataset: &'a HybridDataset, gammas: &[f64]) -> Vec<(&'a Instance, f64)> {
    let n = dataset.strong.len() as f64;
    let m = dataset.weak.len() as f64;
    dataset
        .strong
        .iter()
        .map(|i| (i, 1.0 / n))
        .chain(dataset.weak.iter().zip(gammas).map(|(i, g)| (i, g / m)))
        .collect()
}

fn dii_update(
    dataset: &HybridDataset,
    params: &ModelParams,
    state: &mut DiiState,
    schedule: &Schedule,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    let n = dataset.strong.len();
    let size = schedule.strong_batch_size.unwrap_or(batch_size).clamp(1, n);
    let batch: Vec<&Instance> = sample(rng, n, size).iter().map(|i| &dataset.strong[i]).collect();
    let g_s = estimate_strong_gradient(params, &batch)?;
    let grads = match schedule.hessian {
        DiiHessian::Identity => estimate_dii_gradients(params, &g_s, &dataset.weak, HessianMode::Identity)?,
        DiiHessian::Exact { l2 } => {
            let h = hessian(params, &objective_items(dataset, &state.gammas), l2)?;
            let factor = SpdFactor::new(h)?;
            estimate_dii_gradients(params, &g_s, &dataset.weak, HessianMode::Exact(&factor))?
        }
    };
    adam_step_dii(state, &grads)
}

/// Runs `schedule.steps` lower-level steps. When `dii` is given, Γ weights
/// every batch and takes one Adam step after every `τ`-th lower step.
/// `observer` sees each completed step (1-based) and the primary parameters.
pub fn train_bilevel<L, F>(
    dataset: &HybridDataset,
    lower: &mut L,
    mut dii: Option<&mut DiiState>,
    schedule: &Schedule,
    batch_size: usize,
    mut observer: F,
) -> Result<DiiHistory>
where
    L: LowerLevel,
    F: FnMut(usize, &StepStats, &ModelParams) -> Result<()>,
{
    if dataset.strong.is_empty() {
        return Err(Error::InvalidArgument("no strong instances".into()));
    }
    if schedule.tau == 0 {
        return Err(Error::InvalidArgument("tau must be at least 1".into()));
    }
    if let Some(state) = dii.as_deref() {
        if state.len() != dataset.weak.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} weak instances",
                state.len(),
                dataset.weak.len()
            )));
        }
    }
    let mut rng = substream(schedule.seed, Stream::DiiBatches, 0);
    let mut history = DiiHistory::default();
    if let Some(state) = dii.as_deref() {
        history
            .rows
            .push(history_row(0, lower.primary(), dataset, &state.gammas, schedule.record_gammas)?);
    }
    for t in 1..=schedule.steps {
        let gammas = dii.as_deref().map(|s| s.gammas.as_slice());
        let stats = lower.step(dataset, gammas).map_err(|e| e.at_iteration(t))?;
        if !stats.total.is_finite() {
            return Err(Error::NonFinite {
                context: "lower-level loss".into(),
            }
            .at_iteration(t));
        }
        if let Some(state) = dii.as_deref_mut() {
            if t % schedule.tau == 0 {
                dii_update(dataset, lower.primary(), state, schedule, batch_size, &mut rng)
                    .map_err(|e| e.at_iteration(t))?;
                history
                    .rows
                    .push(history_row(t, lower.primary(), dataset, &state.gammas, schedule.record_gammas)?);
            }
        }
        observer(t, &stats, lower.primary())?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiiConfig {
    pub steps: usize,
    pub tau: usize,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub gamma_init: f64,
    pub batch_size: usize,
    pub strong_batch_size: Option<usize>,
    pub hessian: DiiHessian,
    pub seed: u64,
}

impl Default for DiiConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            tau: 400,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            gamma_init: 0.5,
            batch_size: 8,
            strong_batch_size: None,
            hessian: DiiHessian::Identity,
            seed: 0,
        }
    }
}

/// DII learning with a single network on Γ-weighted, uniformly sampled
/// batches.
pub fn run_dii_learning(
    dataset: &HybridDataset,
    model_init: ModelParams,
    config: &DiiConfig,
) -> Result<(ModelParams, DiiState, DiiHistory)> {
    if dataset.weak.is_empty() {
        return Err(Error::InvalidArgument("no weak instances".into()));
    }
    let mut state = init_dii(dataset.weak.len(), config.gamma_init, config.adam)?;
    let mut lower = SingleNetTrainer::new(
        model_init,
        config.sgd,
        config.batch_size,
        SamplingMode::Uniform,
        config.seed,
    );
    let schedule = Schedule {
        steps: config.steps,
        tau: config.tau,
        strong_batch_size: config.strong_batch_size,
        hessian: config.hessian,
        record_gammas: false,
        seed: config.seed,
    };
    let history = train_bilevel(dataset, &mut lower, Some(&mut state), &schedule, config.batch_size, |_, _, _| {
        Ok(())
    })?;
    Ok((lower.params, state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageGrid, Mask, ModelLayout};
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inst(rng: &mut ChaCha8Rng, id: usize, supervision: Supervision) -> Instance {
        let image = ImageGrid::new(6, 6, 1, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels = (0..36).map(|_| rng.random_range(0..2) as u8).collect();
        Instance {
            id,
            image,
            mask: Mask::new(6, 6, 2, labels).unwrap(),
            supervision,
            corrupted: false,
            clean_mask: None,
        }
    }

    fn toy(n: usize, m: usize, seed: u64) -> HybridDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HybridDataset {
            strong: (0..n).map(|i| inst(&mut rng, i, Supervision::Strong)).collect(),
            weak: (0..m).map(|k| inst(&mut rng, n + k, Supervision::Weak)).collect(),
        }
    }

    fn params(seed: u64) -> ModelParams {
        let layout = ModelLayout::new(Architecture::TinyMlp { hidden: vec![4] }, 1, 2).unwrap();
        ModelParams::random(layout, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn init_bounds() {
        let s = init_dii(5, 1.0, AdamConfig::default()).unwrap();
        assert_eq!(s.gammas, vec![1.0; 5]);
        assert_eq!(s.steps(), 0);
        assert!(init_dii(3, 1.5, AdamConfig::default()).is_err());
        assert!(init_dii(0, 0.5, AdamConfig::default()).is_err());
    }

    #[test]
    fn strong_gradient_means() {
        let ds = toy(4, 1, 1);
        let p = params(2);
        let single = estimate_strong_gradient(&p, &[&ds.strong[0]]).unwrap();
        assert_eq!(single, instance_grad(&p, &ds.strong[0], true).unwrap());
        let twice = estimate_strong_gradient(&p, &[&ds.strong[0], &ds.strong[0]]).unwrap();
        for (a, b) in twice.iter().zip(&single) {
            assert!((a - b).abs() <= 1e-15);
        }
        let all: Vec<&Instance> = ds.strong.iter().collect();
        let mean = estimate_strong_gradient(&p, &all).unwrap();
        let separate: Vec<Vec<f64>> = all.iter().map(|i| instance_grad(&p, i, true).unwrap()).collect();
        for (j, v) in mean.iter().enumerate() {
            let expect = separate.iter().map(|g| g[j]).sum::<f64>() / 4.0;
            assert!((v - expect).abs() <= 1e-12);
        }
        assert!(matches!(
            estimate_strong_gradient(&p, &[&ds.weak[0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dii_gradient_identities() {
        let ds = toy(2, 3, 3);
        let p = params(4);
        let zero = vec![0.0; p.subset().len()];
        let g = estimate_dii_gradients(&p, &zero, &ds.weak, HessianMode::Identity).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g_k = instance_grad(&p, &ds.weak[1], true).unwrap();
        let g = estimate_dii_gradients(&p, &g_k, &ds.weak, HessianMode::Identity).unwrap();
        let norm2: f64 = g_k.iter().map(|v| v * v).sum();
        assert!((g[1] + norm2).abs() <= 1e-14 * norm2.max(1.0));
    }

    #[test]
    fn exact_mode_rejects_mlp() {
        let ds = toy(1, 1, 5);
        let p = params(6);
        let factor = SpdFactor::new(nalgebra::DMatrix::identity(p.subset().len(), p.subset().len())).unwrap();
        let g_s = vec![0.0; p.subset().len()];
        let err = estimate_dii_gradients(&p, &g_s, &ds.weak, HessianMode::Exact(&factor)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedArchitecture(_)));
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let mut s = init_dii(3, 0.5, AdamConfig::default()).unwrap();
        adam_step_dii(&mut s, &[0.0; 3]).unwrap();
        assert_eq!(s.gammas, vec![0.5; 3]);
        assert!(s.first_moment().iter().all(|&m| m == 0.0));
        assert_eq!(s.steps(), 1);

        let mut s = init_dii(2, 0.5, AdamConfig::default()).unwrap();
        adam_step_dii(&mut s, &[0.3, -2.0]).unwrap();
        // First bias-corrected step is lr·g/(|g| + eps).
        assert!((s.gammas[0] - (0.5 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((s.gammas[1] - (0.5 + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!(adam_step_dii(&mut s, &[1.0]).is_err());
    }

    #[test]
    fn large_positive_gradient_saturates_at_zero() {
        let mut s = init_dii(1, 0.5, AdamConfig::default()).unwrap();
        for _ in 0..50 {
            adam_step_dii(&mut s, &[100.0]).unwrap();
        }
        assert_eq!(s.gammas[0], 0.0);
    }

    fn quick_config(steps: usize, tau: usize) -> DiiConfig {
        DiiConfig {
            steps,
            tau,
            batch_size: 3,
            seed: 9,
            ..DiiConfig::default()
        }
    }

    #[test]
    fn schedule_boundaries() {
        let ds = toy(3, 4, 7);
        let (_, s, h) = run_dii_learning(&ds, params(8), &quick_config(5, 6)).unwrap();
        assert_eq!(s.gammas, vec![0.5; 4]);
        assert_eq!(s.steps(), 0);
        assert_eq!(h.rows.len(), 1);
        let (_, s, _) = run_dii_learning(&ds, params(8), &quick_config(6, 6)).unwrap();
        assert_eq!(s.steps(), 1);
        let (_, s, h) = run_dii_learning(&ds, params(8), &quick_config(23, 5)).unwrap();
        assert_eq!(s.steps(), 4);
        assert_eq!(h.rows.last().unwrap().step, 20);
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = toy(3, 4, 10);
        let a = run_dii_learning(&ds, params(11), &quick_config(12, 3)).unwrap();
        let b = run_dii_learning(&ds, params(11), &quick_config(12, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.2.to_csv(), b.2.to_csv());
    }

    #[test]
    fn exact_hessian_schedule_runs_on_convex_model() {
        let ds = toy(3, 4, 12);
        let layout = ModelLayout::new(Architecture::ConvexLinear, 1, 2).unwrap();
        let init = ModelParams::random(layout, &mut ChaCha8Rng::seed_from_u64(13));
        let cfg = DiiConfig {
            hessian: DiiHessian::Exact { l2: 1.0 },
            ..quick_config(4, 2)
        };
        let (_, s, _) = run_dii_learning(&ds, init, &cfg).unwrap();
        assert_eq!(s.steps(), 2);
        assert!(s.gammas.iter().all(|g| (0.0..=1.0).contains(g)));
    }
}
