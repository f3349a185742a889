//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `mode` is the only
//! required key; everything else has a default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dii::{AdamConfig, DiiHessian};
use crate::model::{Architecture, SgdConfig};
use crate::synth::{DistortionKnobs, ShapeFamily, SynthConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    BaselineUniform,
    DiiOnly,
    DcrOnly,
    DiiDcr,
    VerifyInfluence,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::BaselineUniform,
        Mode::DiiOnly,
        Mode::DcrOnly,
        Mode::DiiDcr,
        Mode::VerifyInfluence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::BaselineUniform => "baseline-uniform",
            Mode::DiiOnly => "dii-only",
            Mode::DcrOnly => "dcr-only",
            Mode::DiiDcr => "dii-dcr",
            Mode::VerifyInfluence => "verify-influence",
        }
    }

    pub fn uses_dii(&self) -> bool {
        matches!(self, Mode::DiiOnly | Mode::DiiDcr)
    }

    pub fn uses_dcr(&self) -> bool {
        matches!(self, Mode::DcrOnly | Mode::DiiDcr)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
    pub architecture: Architecture,
    pub steps: usize,
    pub tau: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gamma_init: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub strong_batch_size: Option<usize>,
    pub dii_hessian: DiiHessian,
    pub eval_every: Option<usize>,
    pub l2: f64,
    pub epsilon: f64,
    pub histogram_bins: usize,
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            output_dir: PathBuf::from("runs/latest"),
            synth: SynthConfig::default(),
            architecture: Architecture::TinyMlp { hidden: vec![8] },
            steps: 2000,
            tau: 400,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 5e-5,
            beta: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gamma_init: 0.5,
            lambda: 4.0,
            batch_size: 8,
            strong_batch_size: None,
            dii_hessian: DiiHessian::Identity,
            eval_every: None,
            l2: 1.0,
            epsilon: 1e-3,
            histogram_bins: 10,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.beta,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Synthetic data config carrying the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or((self.steps / 50).max(1))
    }

    /// Informational remarks about the configuration.
    pub fn notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.mode.uses_dii() && self.steps < 10 * self.tau {
            notes.push(format!(
                "steps ({}) < 10·tau ({}): only {} DII updates will run; consider scaling tau down",
                self.steps,
                10 * self.tau,
                self.steps / self.tau
            ));
        }
        notes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.tau == 0 {
            return bad("tau must be at least 1");
        }
        if self.mode != Mode::VerifyInfluence && self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.beta > 0.0) {
            return bad("lr and beta must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma_init) {
            return bad("gamma_init must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.batch_size == 0 || self.strong_batch_size == Some(0) {
            return bad("batch sizes must be positive");
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be positive");
        }
        if !(self.l2 > 0.0) || !(self.epsilon > 0.0) {
            return bad("l2 and epsilon must be positive");
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive");
        }
        if let Architecture::TinyMlp { hidden } = &self.architecture {
            if hidden.contains(&0) {
                return bad("hidden layer widths must be positive");
            }
        }
        self.synth.validate()
    }

    /// Text form accepted by [`parse_config_str`].
    pub fn to_text(&self) -> String {
        let (arch, hidden) = match &self.architecture {
            Architecture::ConvexLinear => ("convex", String::new()),
            Architecture::TinyMlp { hidden } => (
                "mlp",
                hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            ),
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        pairs.extend(
            self.synth
                .to_pairs()
                .into_iter()
                .map(|(k, v)| if k == "seed" { (k, self.seed.to_string()) } else { (k, v) }),
        );
        pairs.push(("architecture", arch.to_string()));
        if !hidden.is_empty() {
            pairs.push(("hidden", hidden));
        }
        pairs.extend([
            ("steps", self.steps.to_string()),
            ("tau", self.tau.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta", self.beta.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("gamma_init", self.gamma_init.to_string()),
            ("lambda", self.lambda.to_string()),
            ("batch_size", self.batch_size.to_string()),
        ]);
        if let Some(s) = self.strong_batch_size {
            pairs.push(("strong_batch_size", s.to_string()));
        }
        match self.dii_hessian {
            DiiHessian::Identity => pairs.push(("dii_hessian", "identity".into())),
            DiiHessian::Exact { .. } => pairs.push(("dii_hessian", "exact".into())),
        }
        if let Some(e) = self.eval_every {
            pairs.push(("eval_every", e.to_string()));
        }
        pairs.extend([
            ("l2", self.l2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("histogram_bins", self.histogram_bins.to_string()),
        ]);
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        key: key.to_string(),
        reason: format!("expected {what}, got {value:?}"),
    })
}

/// Parses configuration text. `default_mode` fills in a missing `mode` key.
pub fn parse_config_with_mode(text: &str, default_mode: Option<Mode>) -> Result<RunConfig> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(Error::Parse {
                line,
                key: trimmed.to_string(),
                reason: "expected `key = value`".into(),
            });
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if entries.iter().any(|(_, seen, _)| *seen == k) {
            return Err(Error::Parse {
                line,
                key: k,
                reason: "duplicate key".into(),
            });
        }
        entries.push((line, k, v));
    }

    let mode = match entries.iter().find(|(_, k, _)| k == "mode") {
        Some((line, _, v)) => v.parse::<Mode>().map_err(|_| Error::Parse {
            line: *line,
            key: "mode".into(),
            reason: format!(
                "unknown mode {v:?}; expected one of {}",
                Mode::ALL.map(|m| m.as_str()).join(", ")
            ),
        })?,
        None => default_mode.ok_or_else(|| Error::Parse {
            line: 0,
            key: "mode".into(),
            reason: "required key missing".into(),
        })?,
    };
    let mut cfg = RunConfig::new(mode);
    let mut arch_line = None;
    let mut arch = "mlp".to_string();
    let mut hidden: Option<Vec<usize>> = None;
    let mut hessian = "identity".to_string();

    for (line, key, value) in &entries {
        let (line, k, v) = (*line, key.as_str(), value.as_str());
        let u = || parse_value::<usize>(line, k, v, "a non-negative integer");
        let f = || parse_value::<f64>(line, k, v, "a number");
        let s = &mut cfg.synth;
        let knobs: &mut DistortionKnobs = &mut s.knobs;
        match k {
            "mode" => {}
            "seed" => cfg.seed = parse_value(line, k, v, "a non-negative integer")?,
            "output_dir" => cfg.output_dir = PathBuf::from(v),
            "height" => s.height = u()?,
            "width" => s.width = u()?,
            "channels" => s.channels = u()?,
            "classes" => s.classes = u()?,
            "n_strong" => s.n_strong = u()?,
            "n_weak" => s.n_weak = u()?,
            "shape" => {
                s.shape = ShapeFamily::parse(v).ok_or_else(|| Error::Parse {
                    line,
                    key: k.into(),
                    reason: "expected ellipse or blob".into(),
                })?
            }
            "radius_min" => s.radius_min = f()?,
            "radius_max" => s.radius_max = f()?,
            "contrast" => s.contrast = f()?,
            "noise_sigma" => s.noise_sigma = f()?,
            "scale_jitter" => knobs.scale_jitter = f()?,
            "offset_jitter" => knobs.offset_jitter = f()?,
            "rotation_jitter" => knobs.rotation_jitter = f()?,
            "p_drop" => knobs.p_drop = f()?,
            "p_blur" => knobs.p_blur = f()?,
            "p_flip" => knobs.p_flip = f()?,
            "corruption_tolerance" => s.corruption_tolerance = f()?,
            "architecture" => {
                arch = v.to_string();
                arch_line = Some(line);
            }
            "hidden" => {
                hidden = Some(
                    v.split(',')
                        .map(|p| parse_value::<usize>(line, k, p.trim(), "comma-separated integers"))
                        .collect::<Result<_>>()?,
                )
            }
            "steps" => cfg.steps = u()?,
            "tau" => cfg.tau = u()?,
            "lr" => cfg.lr = f()?,
            "momentum" => cfg.momentum = f()?,
            "weight_decay" => cfg.weight_decay = f()?,
            "beta" => cfg.beta = f()?,
            "adam_beta1" => cfg.adam_beta1 = f()?,
            "adam_beta2" => cfg.adam_beta2 = f()?,
            "adam_eps" => cfg.adam_eps = f()?,
            "gamma_init" => cfg.gamma_init = f()?,
            "lambda" => cfg.lambda = f()?,
            "batch_size" => cfg.batch_size = u()?,
            "strong_batch_size" => cfg.strong_batch_size = Some(u()?),
            "dii_hessian" => hessian = v.to_string(),
            "eval_every" => cfg.eval_every = Some(u()?),
            "l2" => cfg.l2 = f()?,
            "epsilon" => cfg.epsilon = f()?,
            "histogram_bins" => cfg.histogram_bins = u()?,
            _ => {
                return Err(Error::Parse {
                    line,
                    key: k.into(),
                    reason: "unknown key".into(),
                })
            }
        }
    }

    cfg.architecture = match arch.as_str() {
        "convex" => Architecture::ConvexLinear,
        "mlp" => Architecture::TinyMlp {
            hidden: hidden.unwrap_or_else(|| vec![8]),
        },
        other => {
            return Err(Error::Parse {
                line: arch_line.unwrap_or(0),
                key: "architecture".into(),
                reason: format!("expected convex or mlp, got {other:?}"),
            })
        }
    };
    cfg.dii_hessian = match hessian.as_str() {
        "identity" => DiiHessian::Identity,
        "exact" => DiiHessian::Exact { l2: cfg.l2 },
        other => return Err(Error::Config(format!("dii_hessian must be identity or exact, got {other:?}"))),
    };
    if cfg.mode == Mode::VerifyInfluence {
        cfg.architecture = Architecture::ConvexLinear;
    }
    if matches!(cfg.dii_hessian, DiiHessian::Exact { .. }) && cfg.architecture != Architecture::ConvexLinear {
        return Err(Error::Config("dii_hessian = exact requires architecture = convex".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    parse_config_with_mode(text, None)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}
