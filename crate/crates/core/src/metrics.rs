//! Saliency evaluation: PR curve over 256 thresholds, F-measure
//! (beta^2 = 0.3), S-measure (gamma = 0.5) and mean absolute error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const S_GAMMA: f64 = 0.5;
/// Ratio denominators in precision, recall and F-measure.
pub const EPS: f64 = 1e-8;

/// Per-image true/false positive counts at each threshold `k / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub positives: u64,
}

impl PrCounts {
    /// A pixel is predicted salient at threshold `k / 255` iff `pred >= k / 255`.
    /// Ground truth is foreground iff `gt > 0.5`.
    pub fn new(pred: &[f64], gt: &[f64]) -> Result<Self> {
        check_len("pr_curve", pred, gt)?;
        let mut hist_fg = vec![0u64; THRESHOLDS];
        let mut hist_bg = vec![0u64; THRESHOLDS];
        let mut positives = 0;
        for (&p, &g) in pred.iter().zip(gt) {
            let fg = g > 0.5;
            positives += u64::from(fg);
            let Some(k) = highest_threshold(p) else { continue };
            if fg {
                hist_fg[k] += 1;
            } else {
                hist_bg[k] += 1;
            }
        }
        // Suffix sums: positives at threshold k are all pixels whose highest
        // passed threshold is >= k.
        let suffix = |h: Vec<u64>| {
            let mut acc = 0;
            let mut out = vec![0; THRESHOLDS];
            for k in (0..THRESHOLDS).rev() {
                acc += h[k];
                out[k] = acc;
            }
            out
        };
        Ok(PrCounts {
            tp: suffix(hist_fg),
            fp: suffix(hist_bg),
            positives,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.positives == 0
    }

    pub fn curve(&self) -> PrCurve {
        let p = self.positives as f64;
        PrCurve {
            precision: (0..THRESHOLDS)
                .map(|k| self.tp[k] as f64 / (self.tp[k] as f64 + self.fp[k] as f64 + EPS))
                .collect(),
            recall: self.tp.iter().map(|&tp| tp as f64 / (p + EPS)).collect(),
        }
    }

    fn absorb(&mut self, other: &PrCounts) {
        self.tp.iter_mut().zip(&other.tp).for_each(|(a, b)| *a += b);
        self.fp.iter_mut().zip(&other.fp).for_each(|(a, b)| *a += b);
        self.positives += other.positives;
    }
}

/// Largest `k` with `k / 255 <= p`, or `None` when `p < 0`.
fn highest_threshold(p: f64) -> Option<usize> {
    if p.is_nan() || p < 0.0 {
        return None;
    }
    let mut k = ((p * 255.0).floor() as i64).clamp(0, THRESHOLDS as i64 - 1);
    while k + 1 < THRESHOLDS as i64 && (k + 1) as f64 / 255.0 <= p {
        k += 1;
    }
    while k >= 0 && k as f64 / 255.0 > p {
        k -= 1;
    }
    (k >= 0).then_some(k as usize)
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(
            op,
            format!("prediction has {} pixels, ground truth {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Precision/recall of a single image.
pub fn pr_curve(pred: &[f64], gt: &[f64]) -> Result<PrCurve> {
    Ok(PrCounts::new(pred, gt)?.curve())
}

/// Weighted harmonic mean of precision and recall.
pub fn f_beta(precision: f64, recall: f64) -> f64 {
    (1.0 + BETA2) * precision * recall / (BETA2 * precision + recall + EPS)
}

/// `(max, mean)` of the F-measure over the 256 thresholds of a curve.
pub fn f_measure_of(curve: &PrCurve) -> (f64, f64) {
    let f: Vec<f64> = curve
        .precision
        .iter()
        .zip(&curve.recall)
        .map(|(&p, &r)| f_beta(p, r))
        .collect();
    let max = f.iter().copied().fold(0.0, f64::max);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    (max, mean)
}

/// Single-image F-measure.
pub fn f_measure(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    Ok(f_measure_of(&pr_curve(pred, gt)?))
}

/// `(1 / (W H)) sum |P - G|`.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len("mae", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Structure measure `gamma * S_object + (1 - gamma) * S_region`.
///
/// `pred` holds `h x w` values in `[0, 1]`; `gt` is binarized at 0.5. All
/// background ground truth scores `1 - mean(pred)`, all foreground scores
/// `mean(pred)`.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check_len("s_measure", pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::dim(
            "s_measure",
            format!("{} pixels for a {h}x{w} map", pred.len()),
        ));
    }
    let mask: Vec<bool> = gt.iter().map(|&g| g > 0.5).collect();
    let fg_frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    let score = if fg_frac == 0.0 {
        1.0 - mean_pred
    } else if fg_frac == 1.0 {
        mean_pred
    } else {
        S_GAMMA * object_similarity(pred, &mask, fg_frac)
            + (1.0 - S_GAMMA) * region_similarity(pred, &mask, h, w)
    };
    Ok(score.clamp(0.0, 1.0))
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + f64::EPSILON)
}

fn object_similarity(pred: &[f64], mask: &[bool], fg_frac: f64) -> f64 {
    let fg = pred.iter().zip(mask).filter(|(_, &m)| m).map(|(&p, _)| p);
    let bg = pred.iter().zip(mask).filter(|(_, &m)| !m).map(|(&p, _)| 1.0 - p);
    fg_frac * object_score(fg) + (1.0 - fg_frac) * object_score(bg)
}

/// Splits at the rounded foreground centroid (1-based column/row counts of
/// the left/top blocks) and combines block SSIMs weighted by block area.
fn region_similarity(pred: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
                count += 1.0;
            }
        }
    }
    let cx = ((sx / count).round() as usize).min(w);
    let cy = ((sy / count).round() as usize).min(h);
    let area = (h * w) as f64;
    let blocks = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    blocks
        .into_iter()
        .map(|(rows, cols)| {
            let n = rows.len() * cols.len();
            if n == 0 {
                return 0.0;
            }
            let mut p = Vec::with_capacity(n);
            let mut g = Vec::with_capacity(n);
            for y in rows {
                for x in cols.clone() {
                    p.push(pred[y * w + x]);
                    g.push(if mask[y * w + x] { 1.0 } else { 0.0 });
                }
            }
            n as f64 / area * block_ssim(&p, &g)
        })
        .sum()
}

fn block_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mx = p.iter().sum::<f64>() / n;
    let my = g.iter().sum::<f64>() / n;
    let denom = n - 1.0 + f64::EPSILON;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    let (vx, vy, cxy) = (vx / denom, vy / denom, cxy / denom);
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// How per-image precision/recall combine over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-image precision and recall at each threshold.
    #[default]
    PerImage,
    /// Precision and recall of dataset-wide pooled counts.
    Pooled,
}

/// Everything computed for one image.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub counts: PrCounts,
    pub s_alpha: f64,
    pub mae: f64,
}

impl ImageEval {
    pub fn new(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<Self> {
        Ok(ImageEval {
            counts: PrCounts::new(pred, gt)?,
            s_alpha: s_measure(pred, gt, h, w)?,
            mae: mae(pred, gt)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f_beta_max: f64,
    pub f_beta_mean: f64,
    pub s_alpha: f64,
    pub mae: f64,
    pub pr_curve: Vec<PrPoint>,
    pub images: usize,
    /// Images without foreground, left out of the PR and F-measure averages.
    pub degenerate: usize,
    pub aggregation: Aggregation,
}

/// Reduces per-image results in the given order.
pub fn summarize(images: &[ImageEval], aggregation: Aggregation) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let valid: Vec<&ImageEval> = images.iter().filter(|e| !e.counts.is_degenerate()).collect();
    let degenerate = images.len() - valid.len();
    let curve = if valid.is_empty() {
        PrCurve {
            precision: vec![0.0; THRESHOLDS],
            recall: vec![0.0; THRESHOLDS],
        }
    } else {
        match aggregation {
            Aggregation::PerImage => {
                let mut precision = vec![0.0; THRESHOLDS];
                let mut recall = vec![0.0; THRESHOLDS];
                for e in &valid {
                    let c = e.counts.curve();
                    precision.iter_mut().zip(&c.precision).for_each(|(a, b)| *a += b);
                    recall.iter_mut().zip(&c.recall).for_each(|(a, b)| *a += b);
                }
                let n = valid.len() as f64;
                precision.iter_mut().for_each(|v| *v /= n);
                recall.iter_mut().for_each(|v| *v /= n);
                PrCurve { precision, recall }
            }
            Aggregation::Pooled => {
                let mut pooled = PrCounts {
                    tp: vec![0; THRESHOLDS],
                    fp: vec![0; THRESHOLDS],
                    positives: 0,
                };
                valid.iter().for_each(|e| pooled.absorb(&e.counts));
                pooled.curve()
            }
        }
    };
    if degenerate > 0 {
        log::info!("{degenerate} of {} images have no foreground", images.len());
    }
    let (f_beta_max, f_beta_mean) = f_measure_of(&curve);
    let n = images.len() as f64;
    Ok(MetricsReport {
        f_beta_max,
        f_beta_mean,
        s_alpha: images.iter().map(|e| e.s_alpha).sum::<f64>() / n,
        mae: images.iter().map(|e| e.mae).sum::<f64>() / n,
        pr_curve: (0..THRESHOLDS)
            .map(|k| PrPoint {
                threshold: k as f64 / 255.0,
                precision: curve.precision[k],
                recall: curve.recall[k],
            })
            .collect(),
        images: images.len(),
        degenerate,
        aggregation,
    })
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `threshold,precision,recall` rows.
    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.pr_curve {
            out.push_str(&format!("{:.6},{:.8},{:.8}\n", p.threshold, p.precision, p.recall));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_boundaries() {
        assert_eq!(highest_threshold(0.0), Some(0));
        assert_eq!(highest_threshold(1.0), Some(255));
        assert_eq!(highest_threshold(128.0 / 255.0), Some(128));
        assert_eq!(highest_threshold(-0.1), None);
    }

    #[test]
    fn identical_binary_maps() {
        let gt = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let c = pr_curve(&gt, &gt).unwrap();
        for k in 1..THRESHOLDS {
            assert!((c.precision[k] - 1.0).abs() < 1e-6);
            assert!((c.recall[k] - 1.0).abs() < 1e-6);
        }
        let (fmax, _) = f_measure(&gt, &gt).unwrap();
        assert!((fmax - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverted_prediction_has_no_precision() {
        let gt = [0.0, 1.0, 1.0, 0.0];
        let pred: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        let c = pr_curve(&pred, &gt).unwrap();
        for k in 1..THRESHOLDS {
            assert!(c.precision[k] < 1e-6);
        }
    }

    #[test]
    fn hand_counted_case() {
        // 4x4: 3 TP, 1 FP, 1 FN at t = 0.5, rest TN.
        let mut gt = [0.0; 16];
        let mut pred = [0.1; 16];
        for i in [0, 1, 2] {
            gt[i] = 1.0;
            pred[i] = 0.9;
        }
        pred[5] = 0.8; // FP
        gt[9] = 1.0; // FN
        let c = pr_curve(&pred, &gt).unwrap();
        let k = 128; // 128/255 ~ 0.502
        assert!((c.precision[k] - 0.75).abs() < 1e-6);
        assert!((c.recall[k] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn f_beta_plugins() {
        assert!((f_beta(1.0, 1.0) - 1.0).abs() < 1e-7);
        assert!((f_beta(0.5, 0.5) - 0.5).abs() < 1e-7);
        assert!((f_beta(1.0, 0.5) - 0.8125).abs() < 1e-7);
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(mae(&[0.5, 0.5, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.25);
        assert!(mae(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn s_measure_degenerate_rules() {
        let bg = [0.0; 16];
        assert_eq!(s_measure(&[0.0; 16], &bg, 4, 4).unwrap(), 1.0);
        assert_eq!(s_measure(&[1.0; 16], &bg, 4, 4).unwrap(), 0.0);
        assert_eq!(s_measure(&[0.25; 16], &[1.0; 16], 4, 4).unwrap(), 0.25);
    }

    #[test]
    fn s_measure_self_and_inverse() {
        let (h, w) = (8, 8);
        let gt: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if (2..6).contains(&y) && (2..6).contains(&x) { 1.0 } else { 0.0 }
            })
            .collect();
        assert!((s_measure(&gt, &gt, h, w).unwrap() - 1.0).abs() < 1e-9);
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        assert!(s_measure(&inv, &gt, h, w).unwrap() < 0.5);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(summarize(&[], Aggregation::PerImage).is_err());
    }

    #[test]
    fn degenerate_images_are_counted_and_excluded() {
        let good = ImageEval::new(&[1.0, 0.0], &[1.0, 0.0], 1, 2).unwrap();
        let empty = ImageEval::new(&[0.0, 0.0], &[0.0, 0.0], 1, 2).unwrap();
        let r = summarize(&[good.clone(), empty], Aggregation::PerImage).unwrap();
        assert_eq!(r.degenerate, 1);
        let alone = summarize(&[good], Aggregation::PerImage).unwrap();
        assert_eq!(r.f_beta_max, alone.f_beta_max);
        assert_eq!(r.pr_curve, alone.pr_curve);
    }
}
