//! Per-pixel segmentation models.
//!
//! Two fixed architectures share one flat parameter vector representation:
//! a convex softmax regression over hand features ([`Architecture::ConvexLinear`])
//! and a small tanh MLP over the same features ([`Architecture::TinyMlp`]).
//! The final linear layer is the designated parameter subset used for
//! per-instance influence gradients.

mod features;
mod hessian;
mod net;
mod optim;

pub use features::{FeatureMap, FEATURES_PER_EXTRA};
pub use hessian::{hessian, weighted_objective, SpdFactor};
pub use net::{
    batch_loss_grad, forward, instance_grad, instance_loss, target_loss, target_loss_grad,
    LOG_PROB_FLOOR, PROB_FLOOR,
};
pub use optim::{sgd_step, SgdConfig};

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Row-major image with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "image data".into(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Channel-mean intensity at a pixel.
    pub fn intensity(&self, y: usize, x: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        self.data[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }
}

/// Per-pixel class labels. One-hot by construction: each pixel stores the
/// index of its single active class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if classes < 2 || classes > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "class count {classes} outside [2, 255]"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask length {} does not match {height}x{width}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, label: u8) -> Self {
        assert!((label as usize) < classes);
        Self {
            height,
            width,
            classes,
            labels: vec![label; height * width],
        }
    }

    /// Builds a mask from dense `H×W×C` indicators; every pixel must have
    /// exactly one entry equal to 1 and all others 0.
    pub fn from_one_hot(height: usize, width: usize, classes: usize, data: &[f64]) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(Error::InvalidArgument("one-hot data has wrong length".into()));
        }
        let mut labels = Vec::with_capacity(height * width);
        for (p, px) in data.chunks_exact(classes).enumerate() {
            let mut active = None;
            for (c, &v) in px.iter().enumerate() {
                if v == 1.0 {
                    if active.is_some() {
                        return Err(Error::InvalidArgument(format!(
                            "pixel {p} has more than one active class"
                        )));
                    }
                    active = Some(c);
                } else if v != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "pixel {p} has non-binary indicator {v}"
                    )));
                }
            }
            let c = active.ok_or_else(|| {
                Error::InvalidArgument(format!("pixel {p} has no active class"))
            })?;
            labels.push(c as u8);
        }
        Self::new(height, width, classes, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.labels.len() * self.classes];
        for (p, &l) in self.labels.iter().enumerate() {
            out[p * self.classes + l as usize] = 1.0;
        }
        out
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Supervision {
    Strong,
    Weak,
}

/// One training pair.
///
/// `corrupted` and `clean_mask` describe how a synthetic instance was built;
/// they exist for diagnostics and evaluation and no training routine reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub image: ImageGrid,
    pub mask: Mask,
    pub supervision: Supervision,
    pub corrupted: bool,
    pub clean_mask: Option<Mask>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        if self.image.height() != self.mask.height() || self.image.width() != self.mask.width() {
            return Err(Error::InvalidInstance {
                id: self.id,
                reason: "image and mask shapes differ".into(),
            });
        }
        Ok(())
    }

    /// The mask used for evaluation: the clean mask when known.
    pub fn reference_mask(&self) -> &Mask {
        self.clean_mask.as_ref().unwrap_or(&self.mask)
    }
}

/// Strongly-annotated subset `D_S` followed by the weakly-annotated subset
/// `D_W`. Weak index `k` is the index into the DII weight vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HybridDataset {
    pub strong: Vec<Instance>,
    pub weak: Vec<Instance>,
}

impl HybridDataset {
    pub fn len(&self) -> usize {
        self.strong.len() + self.weak.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Instance at `index` of the concatenation `D_S ∪ D_W`.
    pub fn combined(&self, index: usize) -> &Instance {
        if index < self.strong.len() {
            &self.strong[index]
        } else {
            &self.weak[index - self.strong.len()]
        }
    }

    /// Weight of the combined index: 1 for strong instances, `γ_k` for weak.
    pub fn weight(&self, index: usize, gammas: Option<&[f64]>) -> f64 {
        match gammas {
            Some(g) if index >= self.strong.len() => g[index - self.strong.len()],
            _ => 1.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.strong.iter().chain(self.weak.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Softmax regression on the fixed feature map; no hidden layers.
    ConvexLinear,
    /// Tanh hidden layers followed by a linear softmax head.
    TinyMlp { hidden: Vec<usize> },
}

/// Shape information needed to interpret a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelLayout {
    pub architecture: Architecture,
    pub channels: usize,
    pub classes: usize,
}

/// One dense layer's position inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSpan {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: usize,
    /// Offset of the bias block; `None` for the convex head.
    pub bias: Option<usize>,
}

impl ModelLayout {
    pub fn new(architecture: Architecture, channels: usize, classes: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if let Architecture::TinyMlp { hidden } = &architecture {
            if hidden.contains(&0) {
                return Err(Error::Config("hidden layer widths must be positive".into()));
            }
        }
        Ok(Self {
            architecture,
            channels,
            classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.channels + FEATURES_PER_EXTRA
    }

    pub(crate) fn layers(&self) -> Vec<LayerSpan> {
        let d = self.feature_dim();
        match &self.architecture {
            Architecture::ConvexLinear => vec![LayerSpan {
                inputs: d,
                outputs: self.classes,
                weights: 0,
                bias: None,
            }],
            Architecture::TinyMlp { hidden } => {
                let mut spans = Vec::with_capacity(hidden.len() + 1);
                let mut offset = 0;
                let mut inputs = d;
                for &outputs in hidden.iter().chain(std::iter::once(&self.classes)) {
                    spans.push(LayerSpan {
                        inputs,
                        outputs,
                        weights: offset,
                        bias: Some(offset + inputs * outputs),
                    });
                    offset += inputs * outputs + outputs;
                    inputs = outputs;
                }
                spans
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.inputs * l.outputs + if l.bias.is_some() { l.outputs } else { 0 })
            .sum()
    }

    /// Index range of θ′, the final linear layer (weights and bias).
    pub fn subset(&self) -> Range<usize> {
        let last = *self.layers().last().expect("at least one layer");
        last.weights..self.num_params()
    }
}

/// Flat parameter vector θ with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ModelLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: ModelLayout) -> Self {
        let n = layout.num_params();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                layout.num_params(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Random initialization: `N(0, 1/fan_in)` weights and zero biases for
    /// the MLP, `N(0, 0.1²)` for the convex head.
    pub fn random<R: Rng + ?Sized>(layout: ModelLayout, rng: &mut R) -> Self {
        let mut params = Self::zeros(layout);
        let spans = params.layout.layers();
        for span in spans {
            let std = match params.layout.architecture {
                Architecture::ConvexLinear => 0.1,
                Architecture::TinyMlp { .. } => (1.0 / span.inputs as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = span.inputs * span.outputs;
            for v in &mut params.values[span.weights..span.weights + n] {
                *v = normal.sample(rng);
            }
        }
        params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn subset(&self) -> Range<usize> {
        self.layout.subset()
    }

    pub fn subset_values(&self) -> &[f64] {
        &self.values[self.layout.subset()]
    }
}

/// Softmax output of a forward pass, `H×W×C` with classes innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Probabilities {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax_mask(&self) -> Mask {
        let labels = self
            .data
            .chunks_exact(self.classes)
            .map(|px| {
                let mut best = 0;
                for c in 1..px.len() {
                    if px[c] > px[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Mask::new(self.height, self.width, self.classes, labels).expect("valid argmax labels")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_layout_puts_head_last() {
        let layout = ModelLayout::new(Architecture::TinyMlp { hidden: vec![4, 3] }, 1, 2).unwrap();
        let d = layout.feature_dim();
        assert_eq!(layout.num_params(), d * 4 + 4 + 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(layout.subset(), layout.num_params() - 8..layout.num_params());
    }

    #[test]
    fn convex_subset_is_everything() {
        let layout = ModelLayout::new(Architecture::ConvexLinear, 1, 3).unwrap();
        assert_eq!(layout.subset(), 0..layout.num_params());
        assert_eq!(layout.num_params(), 6 * 3);
    }

    #[test]
    fn one_hot_round_trip_and_rejection() {
        let mask = Mask::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let dense = mask.one_hot();
        assert_eq!(Mask::from_one_hot(2, 2, 3, &dense).unwrap(), mask);

        let mut two_hot = dense.clone();
        two_hot[0] = 1.0;
        two_hot[1] = 1.0;
        assert!(Mask::from_one_hot(2, 2, 3, &two_hot).is_err());
        let mut none_hot = dense;
        none_hot[0] = 0.0;
        assert!(Mask::from_one_hot(2, 2, 3, &none_hot).is_err());
    }

    #[test]
    fn image_rejects_bad_shapes_and_nan() {
        assert!(ImageGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn random_init_is_seeded() {
        let layout = ModelLayout::new(Architecture::TinyMlp { hidden: vec![5] }, 1, 2).unwrap();
        let a = ModelParams::random(layout.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let b = ModelParams::random(layout, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
