//! Segmentation evaluation metrics: Dice, mean IoU, precision, and the
//! 95th-percentile Hausdorff distance.
//!
//! All four are computed from a thresholded prediction and a binary
//! target. The Hausdorff variant used here pools the directed
//! boundary-to-boundary Euclidean distances in *both* directions and
//! takes the 95th percentile by the nearest-rank rule; boundary pixels
//! are foreground pixels with at least one 4-neighbor outside the
//! foreground (or outside the image). Degenerate masks follow explicit
//! conventions rather than crashing: two empty masks agree perfectly
//! (dice = m_iou = precision = 1, hd95 = 0), while one empty mask
//! against a nonempty one scores dice 0 and an hd95 equal to the image
//! diagonal.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// The four evaluation metrics for one mask pair.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub dice: f64,
    pub m_iou: f64,
    pub precision: f64,
    /// 95th-percentile symmetric boundary distance, in pixels.
    pub hd95: f64,
}

/// Interpret a tensor as a single `[h, w]` plane.
fn plane_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w, 1] => Ok((*h, *w)),
        other => Err(Error::shape(op, format!("expected a single plane, got {other:?}"))),
    }
}

/// Confusion counts `(tp, fp, fn, tn)` between two binary slices.
pub fn confusion(pred: &[bool], target: &[bool]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(target) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Boundary pixels of a binary mask under 4-connectivity erosion: the
/// foreground pixels with some 4-neighbor outside the foreground.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let interior = y > 0
                && mask[(y - 1) * w + x]
                && y + 1 < h
                && mask[(y + 1) * w + x]
                && x > 0
                && mask[y * w + x - 1]
                && x + 1 < w
                && mask[y * w + x + 1];
            if !interior {
                out.push((y, x));
            }
        }
    }
    out
}

/// Minimum Euclidean distance from each point of `from` to the set `to`.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile: the `⌈q·n⌉`-th smallest value (1-based).
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Compute all four metrics between a soft prediction and a mask, both
/// binarized at `threshold`.
pub fn compute_metrics(pred: &Tensor, target: &Tensor, threshold: f64) -> Result<MetricsRecord> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "compute_metrics",
            format!("shapes {:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let (h, w) = plane_dims(pred, "compute_metrics")?;
    let pb: Vec<bool> = pred.data().iter().map(|&v| v >= threshold).collect();
    let tb: Vec<bool> = target.data().iter().map(|&v| v >= threshold).collect();

    let (tp, fp, fn_, tn) = confusion(&pb, &tb);
    let pred_empty = tp + fp == 0;
    let target_empty = tp + fn_ == 0;

    if pred_empty && target_empty {
        return Ok(MetricsRecord { dice: 1.0, m_iou: 1.0, precision: 1.0, hd95: 0.0 });
    }

    let dice = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
    let iou_fg = tp as f64 / (tp + fp + fn_) as f64;
    let iou_bg = if tn + fn_ + fp == 0 {
        // The union of background pixels is empty only when both masks
        // are all foreground; they then agree perfectly on background.
        1.0
    } else {
        tn as f64 / (tn + fn_ + fp) as f64
    };
    let m_iou = 0.5 * (iou_fg + iou_bg);
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };

    let hd95 = if pred_empty || target_empty {
        let dh = (h - 1) as f64;
        let dw = (w - 1) as f64;
        (dh * dh + dw * dw).sqrt()
    } else {
        let bp = boundary_pixels(&pb, h, w);
        let bt = boundary_pixels(&tb, h, w);
        let mut pooled = directed_distances(&bp, &bt);
        pooled.extend(directed_distances(&bt, &bp));
        pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        nearest_rank(&pooled, 0.95)
    };

    Ok(MetricsRecord { dice, m_iou, precision, hd95 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, Rng64};

    fn plane(h: usize, w: usize, vals: &[f64]) -> Tensor {
        Tensor::from_vec(&[h, w], vals.to_vec())
    }

    fn random_mask(rng: &mut Rng64, h: usize, w: usize, density: f64) -> Tensor {
        Tensor::from_vec(
            &[h, w],
            (0..h * w)
                .map(|_| if rng.uniform(0.0, 1.0) < density { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    #[test]
    fn identical_masks_are_perfect() {
        let mut rng = Rng64::new(90);
        let y = random_mask(&mut rng, 8, 8, 0.4);
        let m = compute_metrics(&y, &y, 0.5).unwrap();
        assert_eq!(m.dice, 1.0);
        assert_eq!(m.m_iou, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.hd95, 0.0);
    }

    #[test]
    fn hand_confusion_case() {
        // TP = 2, FP = 1, FN = 1 on a 4×4 grid.
        let mut y = vec![0.0; 16];
        let mut p = vec![0.0; 16];
        y[0] = 1.0;
        p[0] = 1.0; // TP
        y[5] = 1.0;
        p[5] = 1.0; // TP
        y[9] = 1.0; // FN
        p[10] = 1.0; // FP
        let m = compute_metrics(&plane(4, 4, &p), &plane(4, 4, &y), 0.5).unwrap();
        assert_close(m.dice, 4.0 / 6.0, 1e-12);
        assert_close(m.precision, 2.0 / 3.0, 1e-12);
        // Foreground IoU 2/4, background IoU 12/14.
        assert_close(m.m_iou, 0.5 * (0.5 + 12.0 / 14.0), 1e-12);
    }

    #[test]
    fn single_pixels_three_apart() {
        let mut p = vec![0.0; 36];
        let mut y = vec![0.0; 36];
        p[1 * 6 + 1] = 1.0;
        y[1 * 6 + 4] = 1.0;
        let m = compute_metrics(&plane(6, 6, &p), &plane(6, 6, &y), 0.5).unwrap();
        assert_eq!(m.hd95, 3.0);
    }

    #[test]
    fn empty_mask_conventions() {
        let zero = plane(5, 7, &vec![0.0; 35]);
        let m = compute_metrics(&zero, &zero, 0.5).unwrap();
        assert_eq!((m.dice, m.m_iou, m.precision, m.hd95), (1.0, 1.0, 1.0, 0.0));

        let mut y = vec![0.0; 35];
        y[10] = 1.0;
        let target = plane(5, 7, &y);
        let m = compute_metrics(&zero, &target, 0.5).unwrap();
        assert_eq!(m.dice, 0.0);
        let diag = (16.0f64 + 36.0).sqrt();
        assert_close(m.hd95, diag, 1e-12);
        // The sentinel applies in the mirrored case too, keeping hd95
        // symmetric.
        let m2 = compute_metrics(&target, &zero, 0.5).unwrap();
        assert_close(m2.hd95, diag, 1e-12);
        assert_eq!(m2.precision, 0.0);
    }

    #[test]
    fn symmetry_and_ranges_on_random_masks() {
        let mut rng = Rng64::new(91);
        for _ in 0..50 {
            let a = random_mask(&mut rng, 8, 8, 0.35);
            let b = random_mask(&mut rng, 8, 8, 0.35);
            let ab = compute_metrics(&a, &b, 0.5).unwrap();
            let ba = compute_metrics(&b, &a, 0.5).unwrap();
            assert_eq!(ab.hd95, ba.hd95, "hd95 must be symmetric");
            assert_eq!(ab.dice, ba.dice, "dice must be symmetric");
            for v in [ab.dice, ab.m_iou, ab.precision] {
                assert!((0.0..=1.0).contains(&v), "metric {v} out of range");
            }
            assert!(ab.hd95 >= 0.0);
        }
    }

    #[test]
    fn m_iou_matches_brute_force_set_computation() {
        let mut rng = Rng64::new(92);
        for _ in 0..30 {
            let a = random_mask(&mut rng, 8, 8, 0.4);
            let b = random_mask(&mut rng, 8, 8, 0.4);
            let m = compute_metrics(&a, &b, 0.5).unwrap();
            // Brute force: enumerate pixel sets.
            let fg_a: Vec<usize> =
                (0..64).filter(|&i| a.data()[i] >= 0.5).collect();
            let fg_b: Vec<usize> =
                (0..64).filter(|&i| b.data()[i] >= 0.5).collect();
            let inter = fg_a.iter().filter(|i| fg_b.contains(i)).count();
            let union = fg_a.len() + fg_b.len() - inter;
            let bg_inter = 64 - union;
            let bg_union = 64 - inter;
            if fg_a.is_empty() && fg_b.is_empty() {
                continue;
            }
            let iou_fg = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let iou_bg =
                if bg_union == 0 { 1.0 } else { bg_inter as f64 / bg_union as f64 };
            assert_close(m.m_iou, 0.5 * (iou_fg + iou_bg), 1e-12);
        }
    }

    #[test]
    fn hd95_matches_allpairs_oracle() {
        let mut rng = Rng64::new(93);
        for _ in 0..20 {
            let a = random_mask(&mut rng, 8, 8, 0.3);
            let b = random_mask(&mut rng, 8, 8, 0.3);
            let fg_a: Vec<bool> = a.data().iter().map(|&v| v >= 0.5).collect();
            let fg_b: Vec<bool> = b.data().iter().map(|&v| v >= 0.5).collect();
            if !fg_a.iter().any(|&v| v) || !fg_b.iter().any(|&v| v) {
                continue;
            }
            let m = compute_metrics(&a, &b, 0.5).unwrap();

            // Independent oracle: explicit neighbor checks and a full
            // distance table.
            let boundary = |m: &[bool]| -> Vec<(i64, i64)> {
                let mut out = Vec::new();
                for y in 0..8i64 {
                    for x in 0..8i64 {
                        if !m[(y * 8 + x) as usize] {
                            continue;
                        }
                        let mut edge = false;
                        for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                            let (ny, nx) = (y + dy, x + dx);
                            if !(0..8).contains(&ny)
                                || !(0..8).contains(&nx)
                                || !m[(ny * 8 + nx) as usize]
                            {
                                edge = true;
                            }
                        }
                        if edge {
                            out.push((y, x));
                        }
                    }
                }
                out
            };
            let ba = boundary(&fg_a);
            let bb = boundary(&fg_b);
            let mut all = Vec::new();
            for &(y, x) in &ba {
                let mut best = f64::INFINITY;
                for &(v, u) in &bb {
                    let d = (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt();
                    best = best.min(d);
                }
                all.push(best);
            }
            for &(y, x) in &bb {
                let mut best = f64::INFINITY;
                for &(v, u) in &ba {
                    let d = (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt();
                    best = best.min(d);
                }
                all.push(best);
            }
            all.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let rank = ((0.95 * all.len() as f64).ceil() as usize).clamp(1, all.len());
            assert_eq!(m.hd95, all[rank - 1]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = plane(4, 4, &vec![0.0; 16]);
        let b = plane(4, 5, &vec![0.0; 20]);
        assert!(compute_metrics(&a, &b, 0.5).is_err());
        assert!(compute_metrics(&a, &a, 0.0).is_err());
        assert!(compute_metrics(&a, &a, 1.0).is_err());
        let c = Tensor::zeros(&[2, 4, 4, 1]);
        assert!(compute_metrics(&c, &c, 0.5).is_err());
    }
}
