//! Segmentation and detection metrics.

use crate::boxes::Box9;

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const RECALL_POINTS: usize = 41;

/// Rows are ground truth, columns predictions; labels are `1..=K`, `0` is
/// ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Option<Self> {
        (counts.len() == k * k).then_some(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Counts one (gt, pred) pair of 1-based labels. Unlabeled ground truth
    /// and out-of-range labels are skipped.
    pub fn add(&mut self, gt: u8, pred: u8) {
        let (g, p) = (gt as usize, pred as usize);
        if g == 0 || p == 0 || g > self.k || p > self.k {
            return;
        }
        self.counts[(g - 1) * self.k + (p - 1)] += 1;
    }

    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8]) {
        for (&g, &p) in gt.iter().zip(pred) {
            self.add(g, p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Entry for 0-based class indices.
    pub fn get(&self, g: usize, p: usize) -> u64 {
        self.counts[g * self.k + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / t as f64
    }
}

/// Per-class IoU (`None` for classes with an empty union) and their mean.
pub fn miou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let k = cm.num_classes();
    let per: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    (per, mean)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a / 2.0
}

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn rotated_bev_iou(a: &Box9, b: &Box9) -> f64 {
    let area_a = a.size[0] * a.size[1];
    let area_b = b.size[0] * b.size[1];
    if !(area_a > 0.0 && area_b > 0.0) {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).abs();
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of boxes in descending score order, with input order breaking ties.
pub fn score_order(boxes: &[Box9]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score));
    order
}

/// Greedy same-class suppression. Returns kept indices in descending score.
pub fn nms(boxes: &[Box9], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        let suppressed = kept.iter().any(|&k| {
            boxes[k].class == boxes[i].class && rotated_bev_iou(&boxes[k], &boxes[i]) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// One scene's predictions and ground truth.
#[derive(Clone, Debug, Default)]
pub struct SceneDetections {
    pub preds: Vec<Box9>,
    pub gts: Vec<Box9>,
}

/// For one class and threshold: each prediction (in the order they are
/// processed) paired with its matched gt index, scene-local.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMatch {
    pub scene: usize,
    pub pred: usize,
    pub score: f64,
    pub gt: Option<usize>,
    pub distance: Option<f64>,
}

/// Greedy matching pooled across scenes: predictions in descending score
/// (ties by scene then index) take the nearest unmatched gt within `dist`.
pub fn match_detections(
    scenes: &[SceneDetections],
    class: u8,
    dist: f64,
) -> (Vec<DetectionMatch>, usize) {
    let mut cands: Vec<(usize, usize)> = Vec::new();
    for (s, sc) in scenes.iter().enumerate() {
        for (i, p) in sc.preds.iter().enumerate() {
            if p.class == class {
                cands.push((s, i));
            }
        }
    }
    cands.sort_by(|a, b| {
        scenes[b.0].preds[b.1]
            .score
            .total_cmp(&scenes[a.0].preds[a.1].score)
    });
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let num_gt = scenes
        .iter()
        .map(|s| s.gts.iter().filter(|g| g.class == class).count())
        .sum();
    let matches = cands
        .into_iter()
        .map(|(s, i)| {
            let p = &scenes[s].preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in scenes[s].gts.iter().enumerate() {
                if gt.class != class || used[s][g] {
                    continue;
                }
                let d = p.bev_center_distance(gt);
                if d <= dist && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((g, d));
                }
            }
            if let Some((g, _)) = best {
                used[s][g] = true;
            }
            DetectionMatch {
                scene: s,
                pred: i,
                score: p.score,
                gt: best.map(|b| b.0),
                distance: best.map(|b| b.1),
            }
        })
        .collect();
    (matches, num_gt)
}

/// 41-point interpolated AP with precision clipped to its running maximum.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (n, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (n + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        if let Some(idx) = rec.iter().position(|&x| x >= r - 1e-12) {
            sum += prec[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// `(class, AP per distance threshold)` for classes with ground truth.
    pub per_class: Vec<(u8, [f64; 4])>,
    pub map: f64,
}

/// Mean AP over classes with ground truth and the four distance thresholds.
pub fn map_distance(scenes: &[SceneDetections], classes: &[u8]) -> MapReport {
    let mut per_class = Vec::new();
    for &c in classes {
        let mut aps = [0.0; 4];
        let mut has_gt = false;
        for (t, &d) in DISTANCE_THRESHOLDS.iter().enumerate() {
            let (m, num_gt) = match_detections(scenes, c, d);
            has_gt = num_gt > 0;
            let tp: Vec<bool> = m.iter().map(|x| x.gt.is_some()).collect();
            aps[t] = average_precision(&tp, num_gt);
        }
        if has_gt {
            per_class.push((c, aps));
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().flat_map(|(_, a)| a.iter()).sum::<f64>() / (4 * per_class.len()) as f64
    };
    MapReport { per_class, map }
}

/// Fraction of gt boxes of the given classes matched within `dist`.
pub fn recall_at(scenes: &[SceneDetections], classes: &[u8], dist: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for &c in classes {
        let (m, n) = match_detections(scenes, c, dist);
        hit += m.iter().filter(|x| x.gt.is_some()).count();
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(x: f64, y: f64, yaw: f64) -> Box9 {
        Box9::new([x, y, 0.0], [1.0, 1.0, 1.0], yaw, 3)
    }

    #[test]
    fn miou_cases() {
        let cm = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 7]).unwrap();
        assert_eq!(miou(&cm).1, 1.0);
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1]).unwrap();
        let (per, m) = miou(&cm);
        assert!((per[0].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((m - 1.0 / 3.0).abs() < 1e-12);
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        let (per, m) = miou(&cm);
        assert_eq!(per[2], None);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn iou_cases() {
        assert!((rotated_bev_iou(&sq(0.0, 0.0, 0.3), &sq(0.0, 0.0, 0.3)) - 1.0).abs() < 1e-12);
        assert_eq!(rotated_bev_iou(&sq(0.0, 0.0, 0.0), &sq(3.0, 0.0, 0.0)), 0.0);
        assert!(
            (rotated_bev_iou(&sq(0.0, 0.0, 0.0), &sq(0.5, 0.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12
        );
        // Square rotated 45° inside a larger one: octagon overlap.
        let big = Box9::new([0.0; 3], [2.0, 2.0, 1.0], 0.0, 3);
        let d = Box9::new([0.0; 3], [2.0, 2.0, 1.0], std::f64::consts::FRAC_PI_4, 3);
        let inter = 8.0 * (2f64.sqrt() - 1.0);
        let expect = inter / (8.0 - inter);
        assert!((rotated_bev_iou(&big, &d) - expect).abs() < 1e-12);
        let flat = Box9 {
            size: [0.0, 1.0, 1.0],
            ..sq(0.0, 0.0, 0.0)
        };
        assert_eq!(rotated_bev_iou(&flat, &sq(0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn nms_keeps_higher() {
        let a = sq(0.0, 0.0, 0.0).with_score(0.4);
        let b = sq(0.0, 0.0, 0.0).with_score(0.9);
        assert_eq!(nms(&[a.clone(), b], 0.5), vec![1]);
        assert_eq!(nms(&[a], 0.5), vec![0]);
    }

    #[test]
    fn ap_extremes() {
        let gt = sq(0.0, 0.0, 0.0);
        let scene = SceneDetections {
            preds: vec![gt.clone().with_score(0.8)],
            gts: vec![gt.clone()],
        };
        assert_eq!(map_distance(&[scene], &[3]).map, 1.0);
        let scene = SceneDetections {
            preds: vec![],
            gts: vec![gt],
        };
        assert_eq!(map_distance(&[scene], &[3]).map, 0.0);
    }
}
