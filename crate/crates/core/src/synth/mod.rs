//! Seeded synthetic hybrid-supervised segmentation data.
//!
//! Each image holds one bright shape per foreground class on a noisy
//! background. Strong instances keep the exact mask. Weak instances get a
//! moment-fitted ellipse (optionally jittered) as annotation and may then be
//! corrupted by dropping the foreground, blurring the image or flipping
//! labels. The exact mask is always kept in `clean_mask`.

mod io;

pub use io::{load_dataset, save_dataset, LoadedDataset};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::dice;
use crate::model::{HybridDataset, ImageGrid, Instance, Mask, Supervision};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    BlobPolygon,
}

impl ShapeFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::BlobPolygon => "blob",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ellipse" => Some(ShapeFamily::Ellipse),
            "blob" | "blob-polygon" => Some(ShapeFamily::BlobPolygon),
            _ => None,
        }
    }
}

/// Ranges for the weak-annotation distortions and corruption probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionKnobs {
    /// Ellipse axes are scaled by `1 + scale_jitter·u`, `u ~ U[-1, 1]`.
    pub scale_jitter: f64,
    /// Centre offset per axis in pixels, `offset_jitter·u`.
    pub offset_jitter: f64,
    /// Rotation in radians, `rotation_jitter·u`.
    pub rotation_jitter: f64,
    pub p_drop: f64,
    pub p_blur: f64,
    pub p_flip: f64,
}

impl DistortionKnobs {
    pub const NONE: DistortionKnobs = DistortionKnobs {
        scale_jitter: 0.0,
        offset_jitter: 0.0,
        rotation_jitter: 0.0,
        p_drop: 0.0,
        p_blur: 0.0,
        p_flip: 0.0,
    };

    fn has_jitter(&self) -> bool {
        self.scale_jitter != 0.0 || self.offset_jitter != 0.0 || self.rotation_jitter != 0.0
    }
}

impl Default for DistortionKnobs {
    fn default() -> Self {
        Self {
            scale_jitter: 0.15,
            offset_jitter: 1.5,
            rotation_jitter: 0.3,
            p_drop: 0.4,
            p_blur: 0.0,
            p_flip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub n_strong: usize,
    pub n_weak: usize,
    pub shape: ShapeFamily,
    /// Shape radius range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Foreground brightness above the background level.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub knobs: DistortionKnobs,
    /// A jittered weak mask whose Dice against the undistorted ellipse fit
    /// falls below this value marks the instance as corrupted.
    pub corruption_tolerance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            classes: 2,
            n_strong: 10,
            n_weak: 60,
            shape: ShapeFamily::Ellipse,
            radius_min: 4.0,
            radius_max: 9.0,
            contrast: 0.3,
            noise_sigma: 0.1,
            knobs: DistortionKnobs::default(),
            corruption_tolerance: 0.7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image size {}x{} below 8x8", self.height, self.width));
        }
        if self.n_strong == 0 || self.n_weak == 0 {
            return bad("need at least one strong and one weak instance".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes {} outside [2, 255]", self.classes));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must satisfy 0 < radius_min <= radius_max".into());
        }
        if 2.0 * self.radius_max > self.height.min(self.width) as f64 {
            return bad(format!(
                "foreground diameter {} larger than image {}x{}",
                2.0 * self.radius_max,
                self.height,
                self.width
            ));
        }
        if !self.contrast.is_finite() || !(self.noise_sigma >= 0.0) {
            return bad("contrast must be finite and noise_sigma non-negative".into());
        }
        let k = &self.knobs;
        for (name, p) in [("p_drop", k.p_drop), ("p_blur", k.p_blur), ("p_flip", k.p_flip)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("scale_jitter", k.scale_jitter),
            ("offset_jitter", k.offset_jitter),
            ("rotation_jitter", k.rotation_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.corruption_tolerance) {
            return bad("corruption_tolerance outside [0, 1]".into());
        }
        Ok(())
    }

    /// Number of held-out instances: a fifth of everything generated.
    pub fn test_count(&self) -> usize {
        ((self.n_strong + self.n_weak) / 4).max(1)
    }
}

/// Ellipse from second-order moments; angle of the major axis in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
}

/// A concrete, already-sampled ellipse distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseDistortion {
    pub scale: f64,
    pub offset: (f64, f64),
    pub rotation: f64,
}

impl EllipseDistortion {
    pub const IDENTITY: EllipseDistortion = EllipseDistortion {
        scale: 1.0,
        offset: (0.0, 0.0),
        rotation: 0.0,
    };

    /// Always consumes four uniforms so the stream stays aligned across knob
    /// settings.
    pub fn sample<R: Rng + ?Sized>(knobs: &DistortionKnobs, rng: &mut R) -> Self {
        let mut u = || rng.random_range(-1.0..=1.0);
        let (us, ux, uy, ur) = (u(), u(), u(), u());
        Self {
            scale: (1.0 + knobs.scale_jitter * us).max(0.0),
            offset: (knobs.offset_jitter * ux, knobs.offset_jitter * uy),
            rotation: knobs.rotation_jitter * ur,
        }
    }

    pub fn apply(&self, fit: &EllipseFit) -> EllipseFit {
        EllipseFit {
            cx: fit.cx + self.offset.0,
            cy: fit.cy + self.offset.1,
            semi_major: fit.semi_major * self.scale,
            semi_minor: fit.semi_minor * self.scale,
            angle: fit.angle + self.rotation,
        }
    }
}

/// Moment fit of the pixels of `class`; `None` when the class is absent.
pub fn fit_ellipse(mask: &Mask, class: u8) -> Option<EllipseFit> {
    let pts: Vec<(f64, f64)> = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.label(y, x) == class)
        .map(|(y, x)| (x as f64, y as f64))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - cx) * (x - cx);
        syy += (y - cy) * (y - cy);
        sxy += (x - cx) * (y - cy);
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    let mid = 0.5 * (sxx + syy);
    let rad = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    let (l1, l2) = (mid + rad, (mid - rad).max(0.0));
    // A filled ellipse with semi-axis a has variance a²/4 along that axis.
    Some(EllipseFit {
        cx,
        cy,
        semi_major: (2.0 * l1.sqrt()).max(0.5),
        semi_minor: (2.0 * l2.sqrt()).max(0.5),
        angle: 0.5 * (2.0 * sxy).atan2(sxx - syy),
    })
}

pub fn rasterize_ellipse(fit: &EllipseFit, height: usize, width: usize) -> Vec<bool> {
    let (s, c) = fit.angle.sin_cos();
    let mut out = vec![false; height * width];
    if !(fit.semi_major > 0.0 && fit.semi_minor > 0.0) {
        return out;
    }
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - fit.cx;
            let dy = y as f64 - fit.cy;
            let u = (dx * c + dy * s) / fit.semi_major;
            let v = (-dx * s + dy * c) / fit.semi_minor;
            out[y * width + x] = u * u + v * v <= 1.0;
        }
    }
    out
}

/// Ellipse-style weak annotation of `clean` with a fixed distortion applied
/// to every foreground class's fit. Classes are painted in index order.
pub fn weak_annotation_with(clean: &Mask, distortion: &EllipseDistortion) -> Mask {
    let (h, w) = (clean.height(), clean.width());
    let mut labels = vec![0u8; h * w];
    for class in 1..clean.classes() as u8 {
        if let Some(fit) = fit_ellipse(clean, class) {
            let inside = rasterize_ellipse(&distortion.apply(&fit), h, w);
            for (l, inside) in labels.iter_mut().zip(inside) {
                if inside {
                    *l = class;
                }
            }
        }
    }
    Mask::new(h, w, clean.classes(), labels).expect("labels within class range")
}

/// Fits ellipses to the clean foreground and applies a jitter sampled from
/// `knobs`. An empty foreground yields an all-background mask.
pub fn fit_ellipse_weak_annotation<R: Rng + ?Sized>(clean: &Mask, knobs: &DistortionKnobs, rng: &mut R) -> Mask {
    weak_annotation_with(clean, &EllipseDistortion::sample(knobs, rng))
}

/// 3×3 box blur over in-bounds neighbours.
pub fn box_blur(image: &ImageGrid) -> ImageGrid {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let (mut sum, mut n) = (0.0, 0usize);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += image.get(yy, xx, c);
                        n += 1;
                    }
                }
                out.set(y, x, c, sum / n as f64);
            }
        }
    }
    out
}

fn flip_labels(mask: &mut Mask) {
    for l in mask.labels_mut() {
        *l = if *l == 0 { 1 } else { 0 };
    }
}

/// Applies foreground drop, double box blur and label flip, each with its
/// own probability, and sets `corrupted` if any of them fired. Always draws
/// three uniforms.
pub fn corrupt_instance<R: Rng + ?Sized>(inst: &Instance, knobs: &DistortionKnobs, rng: &mut R) -> Instance {
    let (u_drop, u_blur, u_flip): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let mut out = inst.clone();
    let mut fired = false;
    if u_drop < knobs.p_drop {
        out.mask.labels_mut().iter_mut().for_each(|l| *l = 0);
        fired = true;
    }
    if u_blur < knobs.p_blur {
        out.image = box_blur(&box_blur(&out.image));
        fired = true;
    }
    if u_flip < knobs.p_flip {
        flip_labels(&mut out.mask);
        fired = true;
    }
    out.corrupted |= fired;
    out
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn clean_instance<R: Rng + ?Sized>(cfg: &SynthConfig, id: usize, rng: &mut R) -> (ImageGrid, Mask) {
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u8; h * w];
    let centre_range = |n: usize| {
        let lo = cfg.radius_max.min((n - 1) as f64 / 2.0);
        let hi = (n - 1) as f64 - lo;
        (lo, hi.max(lo))
    };
    let (ylo, yhi) = centre_range(h);
    let (xlo, xhi) = centre_range(w);

    for class in 1..cfg.classes as u8 {
        let cx = rng.random_range(xlo..=xhi);
        let cy = rng.random_range(ylo..=yhi);
        let inside: Vec<bool> = match cfg.shape {
            ShapeFamily::Ellipse => {
                let a = rng.random_range(cfg.radius_min..=cfg.radius_max);
                let b = rng.random_range(cfg.radius_min..=cfg.radius_max);
                let angle = rng.random_range(0.0..PI);
                let fit = EllipseFit {
                    cx,
                    cy,
                    semi_major: a,
                    semi_minor: b,
                    angle,
                };
                rasterize_ellipse(&fit, h, w)
            }
            ShapeFamily::BlobPolygon => {
                let k = 9;
                let phase = rng.random_range(0.0..2.0 * PI);
                let poly: Vec<(f64, f64)> = (0..k)
                    .map(|i| {
                        let t = phase + 2.0 * PI * i as f64 / k as f64;
                        let r = rng.random_range(cfg.radius_min..=cfg.radius_max);
                        (cx + r * t.cos(), cy + r * t.sin())
                    })
                    .collect();
                (0..h * w)
                    .map(|p| point_in_polygon((p % w) as f64, (p / w) as f64, &poly))
                    .collect()
            }
        };
        let mut any = false;
        for (l, inside) in labels.iter_mut().zip(&inside) {
            if *inside {
                *l = class;
                any = true;
            }
        }
        if !any {
            labels[cy.round() as usize * w + cx.round() as usize] = class;
        }
    }

    let background = rng.random_range(0.15..0.35);
    let normal = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid sigma");
    let mut data = Vec::with_capacity(h * w * cfg.channels);
    for &l in &labels {
        let level = background + cfg.contrast * l as f64 / (cfg.classes - 1) as f64;
        for _ in 0..cfg.channels {
            let noise = if cfg.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push((level + noise).clamp(0.0, 1.0));
        }
    }
    let _ = id;
    (
        ImageGrid::new(h, w, cfg.channels, data).expect("generated image is valid"),
        Mask::new(h, w, cfg.classes, labels).expect("generated labels are valid"),
    )
}

fn strong_instance(cfg: &SynthConfig, id: usize, stream: Stream) -> Instance {
    let mut rng = substream(cfg.seed, stream, id as u64);
    let (image, mask) = clean_instance(cfg, id, &mut rng);
    Instance {
        id,
        image,
        clean_mask: Some(mask.clone()),
        mask,
        supervision: Supervision::Strong,
        corrupted: false,
    }
}

fn weak_instance(cfg: &SynthConfig, id: usize) -> Instance {
    let mut rng = substream(cfg.seed, Stream::Dataset, id as u64);
    let (image, clean) = clean_instance(cfg, id, &mut rng);
    let distortion = EllipseDistortion::sample(&cfg.knobs, &mut rng);
    let weak = weak_annotation_with(&clean, &distortion);
    let mut corrupted = false;
    if cfg.knobs.has_jitter() {
        let reference = weak_annotation_with(&clean, &EllipseDistortion::IDENTITY);
        let agreement = (1..cfg.classes as u8)
            .map(|c| dice(&weak, &reference, c).expect("same shape"))
            .fold(f64::INFINITY, f64::min);
        corrupted = agreement < cfg.corruption_tolerance;
    }
    let inst = Instance {
        id,
        image,
        mask: weak,
        supervision: Supervision::Weak,
        corrupted,
        clean_mask: Some(clean),
    };
    corrupt_instance(&inst, &cfg.knobs, &mut rng)
}

/// Deterministic hybrid dataset. Strong ids are `0..N`, weak ids `N..N+M`;
/// weak instance `k` has id `N + k`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<HybridDataset> {
    cfg.validate()?;
    let strong = (0..cfg.n_strong)
        .map(|id| strong_instance(cfg, id, Stream::Dataset))
        .collect();
    let weak = (0..cfg.n_weak)
        .map(|k| weak_instance(cfg, cfg.n_strong + k))
        .collect();
    Ok(HybridDataset { strong, weak })
}

/// Held-out clean instances drawn from a separate stream, ids following the
/// training ids.
pub fn generate_test_split(cfg: &SynthConfig, count: usize) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let base = cfg.n_strong + cfg.n_weak;
    Ok((0..count)
        .map(|i| strong_instance(cfg, base + i, Stream::TestSplit))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(n: usize, cx: f64, cy: f64, r: f64) -> Mask {
        let labels = (0..n * n)
            .map(|p| {
                let (x, y) = ((p % n) as f64, (p / n) as f64);
                ((x - cx).powi(2) + (y - cy).powi(2) <= r * r) as u8
            })
            .collect();
        Mask::new(n, n, 2, labels).unwrap()
    }

    fn bbox(mask: &Mask) -> (usize, usize) {
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.label(y, x) == 1 {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        (x1 - x0 + 1, y1 - y0 + 1)
    }

    #[test]
    fn disc_fit_without_jitter_is_close() {
        let clean = disc(32, 15.0, 16.0, 7.0);
        let weak = weak_annotation_with(&clean, &EllipseDistortion::IDENTITY);
        assert!(dice(&weak, &clean, 1).unwrap() >= 0.9);
    }

    #[test]
    fn far_offset_leaves_only_background() {
        let clean = disc(16, 8.0, 8.0, 4.0);
        let d = EllipseDistortion {
            offset: (16.0, 16.0),
            ..EllipseDistortion::IDENTITY
        };
        assert!(!weak_annotation_with(&clean, &d).has_foreground());
    }

    #[test]
    fn quarter_turn_transposes_bounding_box() {
        let fit = EllipseFit {
            cx: 16.0,
            cy: 16.0,
            semi_major: 10.0,
            semi_minor: 5.0,
            angle: 0.0,
        };
        let labels = rasterize_ellipse(&fit, 33, 33).iter().map(|&b| b as u8).collect();
        let clean = Mask::new(33, 33, 2, labels).unwrap();
        let flat = weak_annotation_with(&clean, &EllipseDistortion::IDENTITY);
        let turned = weak_annotation_with(
            &clean,
            &EllipseDistortion {
                rotation: PI / 2.0,
                ..EllipseDistortion::IDENTITY
            },
        );
        let (w0, h0) = bbox(&flat);
        let (w1, h1) = bbox(&turned);
        assert!(w0 > h0);
        assert_eq!((w1, h1), (h0, w0));
    }

    #[test]
    fn empty_foreground_gives_background() {
        let clean = Mask::filled(10, 10, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let weak = fit_ellipse_weak_annotation(&clean, &DistortionKnobs::default(), &mut rng);
        assert!(!weak.has_foreground());
    }

    fn sample_instance() -> Instance {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (image, mask) = clean_instance(&cfg, 0, &mut rng);
        Instance {
            id: 0,
            image,
            clean_mask: Some(mask.clone()),
            mask,
            supervision: Supervision::Weak,
            corrupted: false,
        }
    }

    #[test]
    fn corruption_with_zero_probabilities_is_identity() {
        let inst = sample_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(corrupt_instance(&inst, &DistortionKnobs::NONE, &mut rng), inst);
    }

    #[test]
    fn certain_drop_clears_foreground() {
        let inst = sample_instance();
        let knobs = DistortionKnobs {
            p_drop: 1.0,
            ..DistortionKnobs::NONE
        };
        let out = corrupt_instance(&inst, &knobs, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(!out.mask.has_foreground());
        assert!(out.corrupted);
        assert_eq!(out.clean_mask, inst.clean_mask);
    }

    #[test]
    fn blur_keeps_constant_image() {
        let mut inst = sample_instance();
        inst.image = ImageGrid::filled(12, 12, 3, 0.37);
        let knobs = DistortionKnobs {
            p_blur: 1.0,
            ..DistortionKnobs::NONE
        };
        let out = corrupt_instance(&inst, &knobs, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(out.corrupted);
        for (a, b) in out.image.data().iter().zip(inst.image.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn certain_flip_swaps_binary_labels() {
        let inst = sample_instance();
        let knobs = DistortionKnobs {
            p_flip: 1.0,
            ..DistortionKnobs::NONE
        };
        let out = corrupt_instance(&inst, &knobs, &mut ChaCha8Rng::seed_from_u64(5));
        for (a, b) in out.mask.labels().iter().zip(inst.mask.labels()) {
            assert_eq!(*a, 1 - *b);
        }
    }

    #[test]
    fn oversized_foreground_is_rejected() {
        let cfg = SynthConfig {
            radius_max: 20.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn no_distortion_gives_plain_ellipse_fits() {
        let cfg = SynthConfig {
            knobs: DistortionKnobs::NONE,
            n_weak: 20,
            shape: ShapeFamily::BlobPolygon,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for inst in &ds.weak {
            let clean = inst.clean_mask.as_ref().unwrap();
            assert_eq!(inst.mask, weak_annotation_with(clean, &EllipseDistortion::IDENTITY));
            assert!(!inst.corrupted);
        }
    }

    #[test]
    fn certain_drop_empties_every_weak_mask() {
        let cfg = SynthConfig {
            knobs: DistortionKnobs {
                p_drop: 1.0,
                ..DistortionKnobs::default()
            },
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.weak.iter().all(|i| !i.mask.has_foreground() && i.corrupted));
        assert!(ds.strong.iter().all(|i| i.mask.has_foreground()));
    }

    #[test]
    fn ids_and_counts_line_up() {
        let cfg = SynthConfig {
            n_strong: 3,
            n_weak: 5,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.strong.len(), 3);
        assert_eq!(ds.weak.len(), 5);
        for (k, inst) in ds.weak.iter().enumerate() {
            assert_eq!(inst.id, 3 + k);
        }
        let test = generate_test_split(&cfg, 2).unwrap();
        assert_eq!(test[0].id, 8);
        assert_ne!(test[0].image, ds.strong[0].image);
    }

    #[test]
    fn three_class_generation() {
        let cfg = SynthConfig {
            classes: 3,
            channels: 3,
            radius_max: 6.0,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let inst = &ds.strong[0];
        assert_eq!(inst.image.channels(), 3);
        assert!(inst.mask.count(2) > 0);
    }
}
