//! Pixel-level segmentation metrics (IoU, nIoU, F1) and the
//! threshold-sweep ROC with component-level detection probability.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    ShapeMismatch { pred: usize, gt: usize },
    NonBinary { index: usize },
    EmptySampleList,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch { pred, gt } => {
                write!(f, "pred has {pred} pixels, gt has {gt}")
            }
            MetricsError::NonBinary { index } => write!(f, "mask value at {index} is not 0/1"),
            MetricsError::EmptySampleList => write!(f, "empty sample list"),
        }
    }
}

/// Pixel tallies. `t()` and `p()` are the ground-truth and predicted
/// positive counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn t(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn p(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(pred: &[f32], gt: &[f32]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch { pred: pred.len(), gt: gt.len() });
    }
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        let (p, g) = (pred[i], gt[i]);
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(MetricsError::NonBinary { index: i });
        }
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `TP / (T + P - TP)`; 1.0 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.t() + c.p() - c.tp;
    if den == 0 {
        return 1.0;
    }
    c.tp as f64 / den as f64
}

/// Mean of per-sample IoU.
pub fn niou(samples: &[ConfusionCounts]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySampleList);
    }
    Ok(samples.iter().map(iou).sum::<f64>() / samples.len() as f64)
}

/// `2TP / (2TP + FP + FN)`; 1.0 when both masks are empty.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return 1.0;
    }
    2.0 * c.tp as f64 / den as f64
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub n: usize,
    pub iou: f64,
    pub niou: f64,
    pub f1: f64,
    pub per_sample_iou: Vec<f64>,
}

/// Aggregate IoU/F1 over summed counts plus nIoU over per-sample counts.
pub fn report(samples: &[ConfusionCounts]) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySampleList);
    }
    let mut total = ConfusionCounts::default();
    for s in samples {
        total.merge(s);
    }
    Ok(MetricsReport {
        n: samples.len(),
        iou: iou(&total),
        niou: niou(samples)?,
        f1: f1(&total),
        per_sample_iou: samples.iter().map(iou).collect(),
    })
}

/// One point of a threshold sweep: component-level detection fraction and
/// pixel-level false-alarm rate.
#[derive(Clone, Copy, Debug)]
pub struct RocPoint {
    pub threshold: f32,
    pub pd: f64,
    pub fa: f64,
}

/// 8-connected component labels for a binary mask. Returns the number of
/// components and a per-pixel label (0 = background, 1..=n otherwise).
pub fn label_components(mask: &[f32], h: usize, w: usize) -> (usize, Vec<u32>) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0.0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if mask[nidx] != 0.0 && labels[nidx] == 0 {
                        labels[nidx] = next;
                        stack.push(nidx);
                    }
                }
            }
        }
    }
    (next as usize, labels)
}

/// Sweeps thresholds over per-sample probability maps. A ground-truth
/// component counts as detected when at least one predicted-positive pixel
/// overlaps it. Pd is 1.0 when there are no ground-truth components.
pub fn roc_sweep(
    samples: &[(&[f32], &[f32])],
    h: usize,
    w: usize,
    thresholds: &[f32],
) -> Vec<RocPoint> {
    // component labels are threshold-independent
    let labeled: Vec<(usize, Vec<u32>)> = samples
        .iter()
        .map(|(_, gt)| label_components(gt, h, w))
        .collect();
    let total_pixels: u64 = (samples.len() * h * w) as u64;
    thresholds
        .iter()
        .map(|&thr| {
            let mut total_components = 0u64;
            let mut detected = 0u64;
            let mut fp_pixels = 0u64;
            for ((prob, gt), (ncomp, labels)) in samples.iter().zip(&labeled) {
                total_components += *ncomp as u64;
                let mut hit = vec![false; *ncomp];
                for i in 0..h * w {
                    if prob[i] >= thr {
                        if gt[i] != 0.0 {
                            hit[labels[i] as usize - 1] = true;
                        } else {
                            fp_pixels += 1;
                        }
                    }
                }
                detected += hit.iter().filter(|&&x| x).count() as u64;
            }
            let pd = if total_components == 0 {
                1.0
            } else {
                detected as f64 / total_components as f64
            };
            RocPoint { threshold: thr, pd, fa: fp_pixels as f64 / total_pixels as f64 }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_ }
    }

    #[test]
    fn iou_and_f1_worked_examples() {
        // |T| = 5, |P| = 4, |T ∩ P| = 3
        let c = counts(3, 1, 2);
        assert!((iou(&c) - 0.5).abs() < 1e-12);
        assert!((f1(&c) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_cases() {
        assert_eq!(iou(&counts(10, 0, 0)), 1.0);
        assert_eq!(f1(&counts(10, 0, 0)), 1.0);
        assert_eq!(iou(&counts(0, 0, 0)), 1.0);
        assert_eq!(f1(&counts(0, 0, 0)), 1.0);
        assert_eq!(iou(&counts(0, 3, 0)), 0.0);
        assert_eq!(iou(&counts(0, 0, 3)), 0.0);
    }

    #[test]
    fn f1_dominates_iou() {
        for tp in 0..6u64 {
            for fp in 0..6u64 {
                for fn_ in 0..6u64 {
                    let c = counts(tp, fp, fn_);
                    assert!(f1(&c) >= iou(&c) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn confusion_validates_and_counts() {
        let pred = [1.0f32, 0.0, 1.0, 1.0];
        let gt = [1.0f32, 1.0, 0.0, 1.0];
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        assert!(confusion(&[0.5], &[1.0]).is_err());
        assert!(confusion(&[1.0], &[0.25]).is_err());
        assert!(confusion(&[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn aggregate_iou_differs_from_mean_per_sample() {
        // sample A: 1/2, sample B: 9/10; aggregate pools the counts
        let a_pred = [1.0f32, 1.0, 0.0, 0.0];
        let a_gt = [1.0f32, 0.0, 0.0, 0.0];
        let b_pred = vec![1.0f32; 9];
        let b_gt = {
            let mut g = vec![1.0f32; 9];
            g[8] = 0.0;
            g
        };
        let samples = [
            confusion(&a_pred, &a_gt).unwrap(),
            confusion(&b_pred, &b_gt).unwrap(),
        ];
        let rep = report(&samples).unwrap();
        let pooled = counts(1 + 8, 1 + 1, 0);
        assert!((rep.iou - iou(&pooled)).abs() < 1e-12);
        let mean = (0.5 + 8.0 / 9.0) / 2.0;
        assert!((rep.niou - mean).abs() < 1e-12);
        assert!(rep.niou != rep.iou);
        assert_eq!(rep.n, 2);
        assert_eq!(rep.per_sample_iou.len(), 2);
    }

    #[test]
    fn component_labeling_uses_eight_connectivity() {
        // two blobs joined only diagonally form one component
        let mask = [
            1.0f32, 0.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let (n, labels) = label_components(&mask, 4, 4);
        assert_eq!(n, 2);
        assert_eq!(labels[0], labels[5]);
        assert_eq!(labels[5], labels[6]);
        assert_ne!(labels[0], labels[15]);
    }

    #[test]
    fn roc_counts_detections_and_false_pixels() {
        // 16x16 scene, two single-pixel targets; the score map hits one
        // target and fires on three background pixels
        let (h, w) = (16usize, 16usize);
        let mut gt = vec![0.0f32; h * w];
        gt[2 * w + 2] = 1.0;
        gt[10 * w + 12] = 1.0;
        let mut score = vec![0.0f32; h * w];
        score[2 * w + 2] = 0.9;
        score[5 * w + 5] = 0.9;
        score[6 * w + 6] = 0.9;
        score[7 * w + 7] = 0.9;
        let samples: Vec<(&[f32], &[f32])> = vec![(&score, &gt)];
        let pts = roc_sweep(&samples, h, w, &[0.5]);
        assert_eq!(pts.len(), 1);
        assert!((pts[0].pd - 0.5).abs() < 1e-12);
        assert!((pts[0].fa - 3.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn roc_sweep_is_monotone_in_threshold() {
        // raising the threshold can only drop detections and false alarms
        let (h, w) = (8usize, 8usize);
        let mut gt = vec![0.0f32; 64];
        gt[9] = 1.0;
        gt[54] = 1.0;
        let score: Vec<f32> = (0..64).map(|i| libm::sinf(i as f32 * 2.3).abs()).collect();
        let thresholds: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let samples: Vec<(&[f32], &[f32])> = vec![(&score, &gt)];
        let pts = roc_sweep(&samples, h, w, &thresholds);
        for pair in pts.windows(2) {
            assert!(pair[1].pd <= pair[0].pd + 1e-12);
            assert!(pair[1].fa <= pair[0].fa + 1e-12);
        }
    }

    #[test]
    fn roc_with_no_targets_reports_full_pd() {
        let gt = vec![0.0f32; 64];
        let score = vec![0.2f32; 64];
        let samples: Vec<(&[f32], &[f32])> = vec![(&score, &gt)];
        let pts = roc_sweep(&samples, 8, 8, &[0.5]);
        assert_eq!(pts[0].pd, 1.0);
        assert_eq!(pts[0].fa, 0.0);
    }

    #[test]
    fn empty_sample_list_is_error() {
        assert!(report(&[]).is_err());
        assert!(niou(&[]).is_err());
    }
}
