use super::ImageGrid;

/// Features appended after the raw channel intensities: normalized x and y,
/// 3×3 local mean and variance of the channel-mean intensity, and a constant
/// bias term.
pub const FEATURES_PER_EXTRA: usize = 5;

/// Fixed per-pixel features, `pixels × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub pixels: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_image(image: &ImageGrid) -> Self {
        let (h, w, ch) = (image.height(), image.width(), image.channels());
        let dim = ch + FEATURES_PER_EXTRA;
        let mut data = Vec::with_capacity(h * w * dim);

        let intensity: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| image.intensity(y, x))
            .collect();

        let norm = |i: usize, n: usize| {
            if n > 1 {
                2.0 * i as f64 / (n - 1) as f64 - 1.0
            } else {
                0.0
            }
        };

        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    data.push(image.get(y, x, c));
                }
                data.push(norm(x, w));
                data.push(norm(y, h));

                let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let v = intensity[yy * w + xx];
                        sum += v;
                        sq += v * v;
                        n += 1;
                    }
                }
                let mean = sum / n as f64;
                let var = (sq / n as f64 - mean * mean).max(0.0);
                data.push(mean);
                data.push(var);
                data.push(1.0);
            }
        }

        Self {
            pixels: h * w,
            dim,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}
