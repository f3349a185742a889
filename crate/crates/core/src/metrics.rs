//! Segmentation metrics and weight diagnostics.

use serde_json::{json, Map, Value};

use crate::model::{forward, Instance, Mask, ModelParams};
use crate::{Error, Result};

fn check_pair(pred: &Mask, gt: &Mask, class: u8) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::InvalidArgument("prediction and ground truth shapes differ".into()));
    }
    if class as usize >= gt.classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            gt.classes()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for one class; 1.0 when both sets are empty.
pub fn dice(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    check_pair(pred, gt, class)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Pixels of `class` that touch the image border or have a 4-neighbour of a
/// different class, in row-major order.
pub fn boundary(mask: &Mask, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.label(y, x) != class {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || mask.label(y - 1, x) != class
                || mask.label(y + 1, x) != class
                || mask.label(y, x - 1) != class
                || mask.label(y, x + 1) != class;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform. Entries equal
/// to `None` are not sites.
fn sq_distance_1d(f: &[Option<f64>], out: &mut [Option<f64>]) {
    let sites: Vec<(f64, f64)> = f
        .iter()
        .enumerate()
        .filter_map(|(q, v)| v.map(|v| (q as f64, v)))
        .collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    // Parabola vertices and the boundaries between consecutive ones.
    let mut v: Vec<(f64, f64)> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    z.push(f64::NEG_INFINITY);
    for &(q, fq) in &sites {
        loop {
            match v.last() {
                None => break,
                Some(&(r, fr)) => {
                    let s = ((fq + q * q) - (fr + r * r)) / (2.0 * q - 2.0 * r);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        z.push(s);
                        break;
                    }
                }
            }
        }
        if v.is_empty() {
            z.truncate(1);
        }
        v.push((q, fq));
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let q = q as f64;
        while z[k + 1] < q {
            k += 1;
        }
        let (r, fr) = v[k];
        *slot = Some((q - r) * (q - r) + fr);
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_map(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid: Vec<Option<f64>> = vec![None; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = Some(0.0);
    }
    let mut col_in = vec![None; h];
    let mut col_out = vec![None; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = grid[y * w + x];
        }
        sq_distance_1d(&col_in, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![None; w];
    let mut result = vec![0.0; h * w];
    for y in 0..h {
        sq_distance_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        for x in 0..w {
            result[y * w + x] = row_out[x].expect("at least one site");
        }
    }
    result
}

/// Average symmetric surface distance in pixel units; `None` when either
/// boundary set is empty.
pub fn assd(pred: &Mask, gt: &Mask, class: u8) -> Result<Option<f64>> {
    check_pair(pred, gt, class)?;
    let bp = boundary(pred, class);
    let bg = boundary(gt, class);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (gt.height(), gt.width());
    let to_gt = squared_distance_map(h, w, &bg);
    let to_pred = squared_distance_map(h, w, &bp);
    let forward: f64 = bp.iter().map(|&(y, x)| to_gt[y * w + x].sqrt()).sum();
    let backward: f64 = bg.iter().map(|&(y, x)| to_pred[y * w + x].sqrt()).sum();
    Ok(Some((forward + backward) / (bp.len() + bg.len()) as f64))
}

/// Probability that a clean instance has a strictly higher weight than a
/// corrupted one, ties counting one half. `None` unless both groups exist.
pub fn dii_separation_auc(gammas: &[f64], corrupted: &[bool]) -> Option<f64> {
    if gammas.len() != corrupted.len() {
        return None;
    }
    let clean: Vec<f64> = gammas.iter().zip(corrupted).filter(|(_, &c)| !c).map(|(g, _)| *g).collect();
    let bad: Vec<f64> = gammas.iter().zip(corrupted).filter(|(_, &c)| c).map(|(g, _)| *g).collect();
    if clean.is_empty() || bad.is_empty() {
        return None;
    }
    let mut score = 0.0;
    for &a in &clean {
        for &b in &bad {
            if a > b {
                score += 1.0;
            } else if a == b {
                score += 0.5;
            }
        }
    }
    Some(score / (clean.len() * bad.len()) as f64)
}

/// Equal-width bins over `[0, 1]`; the last bin is closed on the right.
pub fn histogram(gammas: &[f64], bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    for &g in gammas {
        let idx = ((g.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Segmentation quality over a set of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: usize,
    /// Mean Dice per class index over instances.
    pub dice: Vec<f64>,
    /// Mean ASSD per class over the instances where it is defined.
    pub assd: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    /// Number of (instance, foreground class) pairs with undefined ASSD.
    pub assd_undefined_count: usize,
    pub instances: usize,
}

impl EvalReport {
    pub fn from_masks(pairs: &[(Mask, &Mask)]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to evaluate".into()))?;
        let classes = first.1.classes();
        let mut dice_sum = vec![0.0; classes];
        let mut assd_sum = vec![0.0; classes];
        let mut assd_n = vec![0usize; classes];
        let mut undefined = 0;
        let (mut correct, mut total) = (0usize, 0usize);
        for (pred, gt) in pairs {
            for c in 0..classes {
                dice_sum[c] += dice(pred, gt, c as u8)?;
                match assd(pred, gt, c as u8)? {
                    Some(v) => {
                        assd_sum[c] += v;
                        assd_n[c] += 1;
                    }
                    None if c > 0 => undefined += 1,
                    None => {}
                }
            }
            correct += pred.labels().iter().zip(gt.labels()).filter(|(a, b)| a == b).count();
            total += gt.labels().len();
        }
        let n = pairs.len() as f64;
        Ok(Self {
            classes,
            dice: dice_sum.iter().map(|s| s / n).collect(),
            assd: assd_sum
                .iter()
                .zip(&assd_n)
                .map(|(s, &k)| (k > 0).then(|| s / k as f64))
                .collect(),
            pixel_accuracy: correct as f64 / total as f64,
            assd_undefined_count: undefined,
            instances: pairs.len(),
        })
    }

    /// Mean Dice over foreground classes.
    pub fn mean_dice(&self) -> f64 {
        self.dice[1..].iter().sum::<f64>() / (self.classes - 1) as f64
    }

    /// Mean ASSD over foreground classes with a defined value.
    pub fn mean_assd(&self) -> Option<f64> {
        let defined: Vec<f64> = self.assd[1..].iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for c in 0..self.classes {
            map.insert(format!("dice.class_{c}"), json!(self.dice[c]));
            map.insert(format!("assd.class_{c}"), json!(self.assd[c]));
        }
        map.insert("dice.mean".into(), json!(self.mean_dice()));
        map.insert("assd.mean".into(), json!(self.mean_assd()));
        map.insert("pixel_accuracy".into(), json!(self.pixel_accuracy));
        map.insert("assd_undefined_count".into(), json!(self.assd_undefined_count));
        map.insert("instances".into(), json!(self.instances));
        Value::Object(map)
    }
}

/// Scores argmax predictions of `params` against each instance's clean mask
/// (falling back to its annotation when no clean mask is recorded).
pub fn evaluate(params: &ModelParams, instances: &[Instance]) -> Result<EvalReport> {
    let pairs: Vec<(Mask, &Mask)> = instances
        .iter()
        .map(|inst| Ok((forward(params, &inst.image)?.argmax_mask(), inst.reference_mask())))
        .collect::<Result<_>>()?;
    EvalReport::from_masks(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b - b'0'))
            .collect();
        Mask::new(h, w, 2, labels).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask_from(&["1100", "1100"]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = mask_from(&["0011", "0011"]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // |P| = 4, |G| = 6, overlap 3.
        let p = mask_from(&["1111", "0000", "0000"]);
        let g = mask_from(&["1110", "1110", "0000"]);
        assert_eq!(dice(&p, &g, 1).unwrap(), 0.6);
        let empty = mask_from(&["00", "00"]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        let one = mask_from(&["01", "00"]);
        assert_eq!(dice(&empty, &one, 1).unwrap(), 0.0);
        assert!(dice(&a, &a, 2).is_err());
    }

    #[test]
    fn boundary_cases() {
        let full = Mask::filled(4, 5, 2, 1);
        assert_eq!(boundary(&full, 1).len(), 2 * 5 + 2 * 2);
        let single = mask_from(&["000", "010", "000"]);
        assert_eq!(boundary(&single, 1), vec![(1, 1)]);
        let square = mask_from(&[
            "0000000", "0000000", "0011100", "0011100", "0011100", "0000000", "0000000",
        ]);
        let b = boundary(&square, 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(3, 3)));
    }

    #[test]
    fn assd_cases() {
        let a = mask_from(&["00000", "01110", "01110", "00000"]);
        assert_eq!(assd(&a, &a, 1).unwrap(), Some(0.0));
        let p = mask_from(&["1000", "0000"]);
        let g = mask_from(&["0001", "0000"]);
        assert_eq!(assd(&p, &g, 1).unwrap(), Some(3.0));
        let empty = mask_from(&["0000", "0000"]);
        assert_eq!(assd(&empty, &g, 1).unwrap(), None);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(dii_separation_auc(&[1.0, 1.0, 0.0, 0.0], &[false, false, true, true]), Some(1.0));
        assert_eq!(dii_separation_auc(&[0.4; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(dii_separation_auc(&[0.9, 0.2, 0.7], &[false, true, true]), Some(1.0));
        assert_eq!(dii_separation_auc(&[0.9, 0.2], &[false, false]), None);
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&[0.5; 7], 10);
        assert_eq!(h[5], 7);
        assert_eq!(h.iter().sum::<usize>(), 7);
        assert_eq!(histogram(&[1.0], 3), vec![0, 0, 1]);
        assert_eq!(histogram(&[0.0, 0.25, 0.5, 0.75, 1.0], 4), vec![1, 1, 1, 2]);
    }

    #[test]
    fn rank_correlation_cases() {
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(rank_correlation(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn report_aggregates_foreground() {
        let gt = mask_from(&["0110", "0110"]);
        let pred = mask_from(&["0100", "0100"]);
        let report = EvalReport::from_masks(&[(pred, &gt), (gt.clone(), &gt)]).unwrap();
        assert!((report.dice[1] - (2.0 * 2.0 / 6.0 + 1.0) / 2.0).abs() < 1e-15);
        assert_eq!(report.mean_dice(), report.dice[1]);
        assert_eq!(report.assd_undefined_count, 0);
        let j = report.to_json();
        assert!(j.get("dice.class_1").is_some());
        assert!(j.get("assd.class_1").is_some());
        assert!(j.get("pixel_accuracy").is_some());
        assert!(j.get("assd_undefined_count").is_some());
    }
}
