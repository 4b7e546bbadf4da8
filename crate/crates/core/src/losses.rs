//! Loss terms with analytic gradients and the learned task weighting.
//!
//! Every loss returns its value together with the gradient with respect to
//! its input matrix, plus a fingerprint of the discrete choices it made
//! (sort orders, sign and clamp branches) for finite-difference checks.

use crate::error::{Error, Result};
use crate::heads::REG_CHANNELS;
use crate::iarm::sigmoid;
use crate::mat::Mat;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Mat<T>,
    pub branch: u64,
}

impl<T: Real> LossGrad<T> {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: T::zero(),
            grad: Mat::zeros(rows, cols),
            branch: 0,
        }
    }
}

fn mix(h: &mut u64, v: u64) {
    *h = (*h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(23);
}

fn check_labels(labels: &[u8], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize > k) {
        Some(&l) => Err(Error::Label {
            label: l as usize,
            classes: k,
        }),
        None => Ok(()),
    }
}

pub fn softmax_rows<T: Real>(logits: &Mat<T>) -> Mat<T> {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    p
}

/// Mean over labeled rows of `-log softmax` at the 1-based true class.
/// Label 0 is ignored.
pub fn cross_entropy<T: Real>(logits: &Mat<T>, labels: &[u8]) -> Result<LossGrad<T>> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("one label per logit row required"));
    }
    check_labels(labels, logits.cols())?;
    let n = labels.iter().filter(|&&l| l > 0).count();
    if n == 0 {
        return Ok(LossGrad::zero(logits.rows(), logits.cols()));
    }
    let p = softmax_rows(logits);
    let inv = T::one() / T::c(n as f64);
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    let mut loss = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let t = l as usize - 1;
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(i);
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = p.get(i, k) * inv;
        }
        g[t] -= inv;
    }
    Ok(LossGrad {
        value: loss * inv,
        grad,
        branch: 0,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors already sorted in descending order.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let g = jac - prev;
            prev = jac;
            g
        })
        .collect()
}

/// Mean over classes present in `labels` of the Lovász hinge on per-class
/// errors `|[y = c] − p_c|`. Label 0 is ignored.
pub fn lovasz_softmax<T: Real>(probs: &Mat<T>, labels: &[u8]) -> Result<LossGrad<T>> {
    if labels.len() != probs.rows() {
        return Err(Error::shape("one label per probability row required"));
    }
    let k = probs.cols();
    check_labels(labels, k)?;
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    let present: Vec<usize> = (0..k)
        .filter(|&c| rows.iter().any(|&i| labels[i] as usize == c + 1))
        .collect();
    let mut out = LossGrad::zero(probs.rows(), k);
    if present.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for &c in &present {
        let mut errs: Vec<(f64, usize, bool)> = rows
            .iter()
            .map(|&i| {
                let fg = labels[i] as usize == c + 1;
                let p = probs.get(i, c).f64();
                ((if fg { 1.0 } else { 0.0 } - p).abs(), i, fg)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let fg_sorted: Vec<bool> = errs.iter().map(|e| e.2).collect();
        let g = lovasz_grad(&fg_sorted);
        for ((e, i, fg), gj) in errs.iter().zip(&g) {
            loss += e * gj;
            mix(&mut out.branch, *i as u64);
            // d|fg - p|/dp
            let de = if *fg { -1.0 } else { 1.0 };
            let cur = out.grad.get(*i, c);
            out.grad.set(*i, c, cur + T::c(gj * de * scale));
        }
    }
    out.value = T::c(loss * scale);
    Ok(out)
}

/// Chains a gradient with respect to softmax probabilities back to logits.
pub fn softmax_backward<T: Real>(probs: &Mat<T>, grad_p: &Mat<T>) -> Mat<T> {
    let mut g = Mat::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let gp = grad_p.row(i);
        let dot: T = p.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        for (k, o) in g.row_mut(i).iter_mut().enumerate() {
            *o = p[k] * (gp[k] - dot);
        }
    }
    g
}

/// Cross-entropy plus Lovász on softmax probabilities, both w.r.t. logits.
pub fn segmentation_loss<T: Real>(logits: &Mat<T>, labels: &[u8]) -> Result<LossGrad<T>> {
    let ce = cross_entropy(logits, labels)?;
    let p = softmax_rows(logits);
    let lv = lovasz_softmax(&p, labels)?;
    let mut grad = softmax_backward(&p, &lv.grad);
    grad.add_assign(&ce.grad);
    Ok(LossGrad {
        value: ce.value + lv.value,
        grad,
        branch: lv.branch,
    })
}

/// Mean binary cross-entropy on logits (`N × C`) over entries whose row is
/// selected by `mask`.
pub fn bce_with_logits<T: Real>(
    logits: &Mat<T>,
    targets: &Mat<f64>,
    mask: Option<&[bool]>,
) -> Result<LossGrad<T>> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::shape("bce target shape"));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let n = (0..logits.rows()).filter(|&i| keep(i)).count() * logits.cols();
    let mut out = LossGrad::zero(logits.rows(), logits.cols());
    if n == 0 {
        return Ok(out);
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for i in 0..logits.rows() {
        if !keep(i) {
            continue;
        }
        for k in 0..logits.cols() {
            let z = logits.get(i, k).f64();
            let t = targets.get(i, k);
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            out.grad.set(i, k, T::c((sigmoid(z) - t) * inv));
        }
    }
    out.value = T::c(loss * inv);
    Ok(out)
}

/// Binary Lovász on a single logit column (foreground vs background) over
/// rows selected by `mask`.
pub fn lovasz_binary<T: Real>(
    logits: &Mat<T>,
    targets: &[bool],
    mask: &[bool],
) -> Result<LossGrad<T>> {
    if logits.cols() != 1 || targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape("binary lovasz expects one logit column"));
    }
    let mut probs = Mat::zeros(logits.rows(), 2);
    let mut labels = vec![0u8; logits.rows()];
    for i in 0..logits.rows() {
        let p = sigmoid(logits.get(i, 0).f64());
        probs.set(i, 0, T::c(1.0 - p));
        probs.set(i, 1, T::c(p));
        if mask[i] {
            labels[i] = if targets[i] { 2 } else { 1 };
        }
    }
    let lv = lovasz_softmax(&probs, &labels)?;
    let mut grad = Mat::zeros(logits.rows(), 1);
    for i in 0..logits.rows() {
        let p = probs.get(i, 1);
        grad.set(
            i,
            0,
            (lv.grad.get(i, 1) - lv.grad.get(i, 0)) * p * (T::one() - p),
        );
    }
    Ok(LossGrad {
        value: lv.value,
        grad,
        branch: lv.branch,
    })
}

/// Axis-aligned BEV IoU between two `(center, size)` rectangles.
pub fn aligned_iou(ca: [f64; 2], sa: [f64; 2], cb: [f64; 2], sb: [f64; 2]) -> f64 {
    let overlap = |a: usize| {
        let lo = (ca[a] - sa[a] / 2.0).max(cb[a] - sb[a] / 2.0);
        let hi = (ca[a] + sa[a] / 2.0).min(cb[a] + sb[a] / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(0) * overlap(1);
    let union = sa[0] * sa[1] + sb[0] * sb[1] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug)]
pub struct DetLosses<T> {
    /// Heatmap BCE, gradient w.r.t. heat logits.
    pub cls: LossGrad<T>,
    /// L1 on regression channels at gt center cells, gradient w.r.t. reg.
    pub reg: LossGrad<T>,
    /// `1 − IoU` of decoded vs gt footprint, gradient w.r.t. reg.
    pub iou: LossGrad<T>,
}

impl<T: Real> DetLosses<T> {
    pub fn total(&self) -> T {
        self.cls.value + self.reg.value + self.iou.value
    }
}

/// Regression target at one cell, in cell units for the center offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct RegTarget {
    pub cell: usize,
    pub target: [f64; REG_CHANNELS],
}

/// `cell_size` converts offsets (cell units) to meters for the IoU term.
pub fn det_losses<T: Real>(
    heat: &Mat<T>,
    reg: &Mat<T>,
    heat_target: &Mat<f64>,
    targets: &[RegTarget],
    cell_size: [f64; 2],
) -> Result<DetLosses<T>> {
    if reg.cols() != REG_CHANNELS || reg.rows() != heat.rows() {
        return Err(Error::shape("regression map shape"));
    }
    let cls = bce_with_logits(heat, heat_target, None)?;
    let mut rl = LossGrad::zero(reg.rows(), REG_CHANNELS);
    let mut il = LossGrad::zero(reg.rows(), REG_CHANNELS);
    if targets.is_empty() {
        return Ok(DetLosses {
            cls,
            reg: rl,
            iou: il,
        });
    }
    let inv = 1.0 / targets.len() as f64;
    let (mut rsum, mut isum) = (0.0, 0.0);
    for t in targets {
        let r: Vec<f64> = reg.row(t.cell).iter().map(|v| v.f64()).collect();
        for (ch, (&p, &g)) in r.iter().zip(&t.target).enumerate() {
            rsum += (p - g).abs();
            let s = if p > g {
                1.0
            } else if p < g {
                -1.0
            } else {
                0.0
            };
            mix(&mut rl.branch, s as i64 as u64);
            let cur = rl.grad.get(t.cell, ch);
            rl.grad.set(t.cell, ch, cur + T::c(s * inv));
        }
        // Interval overlap per axis: centers in meters relative to the cell.
        let mut ov = [0.0; 2];
        let mut dov = [[0.0; 2]; 2]; // d overlap / d (offset, log size)
        let mut ps = [0.0; 2];
        let mut gs = [0.0; 2];
        for a in 0..2 {
            let pc = r[a] * cell_size[a];
            let gc = t.target[a] * cell_size[a];
            ps[a] = r[3 + a].clamp(-10.0, 10.0).exp();
            gs[a] = t.target[3 + a].exp();
            let (plo, phi) = (pc - ps[a] / 2.0, pc + ps[a] / 2.0);
            let (glo, ghi) = (gc - gs[a] / 2.0, gc + gs[a] / 2.0);
            let hi_p = phi < ghi;
            let lo_p = plo > glo;
            let hi = if hi_p { phi } else { ghi };
            let lo = if lo_p { plo } else { glo };
            let pos = hi > lo;
            let clamped = (-10.0..=10.0).contains(&r[3 + a]);
            mix(
                &mut il.branch,
                (hi_p as u64) | (lo_p as u64) << 1 | (pos as u64) << 2 | (clamped as u64) << 3,
            );
            if pos {
                ov[a] = hi - lo;
                let dhi = if hi_p {
                    [cell_size[a], ps[a] / 2.0]
                } else {
                    [0.0; 2]
                };
                let dlo = if lo_p {
                    [cell_size[a], -ps[a] / 2.0]
                } else {
                    [0.0; 2]
                };
                dov[a] = [dhi[0] - dlo[0], dhi[1] - dlo[1]];
                if !clamped {
                    dov[a][1] = 0.0;
                }
            }
        }
        let inter = ov[0] * ov[1];
        let ap = ps[0] * ps[1];
        let union = ap + gs[0] * gs[1] - inter;
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        isum += 1.0 - iou;
        if union > 0.0 && inter > 0.0 {
            for a in 0..2 {
                let o = 1 - a;
                // d inter / d offset_a, d inter / d logsize_a
                let di = [dov[a][0] * ov[o], dov[a][1] * ov[o]];
                let clamped = (-10.0..=10.0).contains(&r[3 + a]);
                let dap = [0.0, if clamped { ap } else { 0.0 }];
                for q in 0..2 {
                    let du = dap[q] - di[q];
                    let diou = (di[q] * union - inter * du) / (union * union);
                    let ch = if q == 0 { a } else { 3 + a };
                    let cur = il.grad.get(t.cell, ch);
                    il.grad.set(t.cell, ch, cur - T::c(diou * inv));
                }
            }
        }
    }
    rl.value = T::c(rsum * inv);
    il.value = T::c(isum * inv);
    Ok(DetLosses {
        cls,
        reg: rl,
        iou: il,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLosses<T> {
    pub seg: T,
    pub bev: T,
    pub det: T,
}

impl<T: Real> TaskLosses<T> {
    pub fn as_array(&self) -> [T; 3] {
        [self.seg, self.bev, self.det]
    }
}

/// Learned `log σ²` per task (seg, bev, det).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UncertaintyWeights<T> {
    pub log_var: [T; 3],
}

impl<T: Real> UncertaintyWeights<T> {
    pub fn variances(&self) -> [T; 3] {
        self.log_var.map(|s| s.exp())
    }
}

/// `L = Σ ½·e^{−s_i}·L_i + ½·s_i`, with gradients w.r.t. each `L_i` and
/// each `s_i`.
pub fn combine_uncertainty<T: Real>(
    losses: &TaskLosses<T>,
    w: &UncertaintyWeights<T>,
) -> (T, [T; 3], [T; 3]) {
    let half = T::c(0.5);
    let l = losses.as_array();
    let mut total = T::zero();
    let mut dl = [T::zero(); 3];
    let mut ds = [T::zero(); 3];
    for i in 0..3 {
        let e = (-w.log_var[i]).exp();
        total += half * e * l[i] + half * w.log_var[i];
        dl[i] = half * e;
        ds[i] = half - half * e * l[i];
    }
    (total, dl, ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_uniform_is_ln_k() {
        let l = cross_entropy(&Mat::<f64>::zeros(5, 16), &[1, 2, 3, 16, 0]).unwrap();
        assert!((l.value - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_is_near_zero_and_labels_checked() {
        let mut z = Mat::<f64>::zeros(1, 3);
        z.set(0, 1, 50.0);
        assert!(cross_entropy(&z, &[2]).unwrap().value < 1e-20);
        assert!(matches!(cross_entropy(&z, &[4]), Err(Error::Label { .. })));
    }

    #[test]
    fn lovasz_hard_cases() {
        let p = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(lovasz_softmax(&p, &[1, 2]).unwrap().value, 0.0);
        assert_eq!(lovasz_softmax(&p, &[2, 2]).unwrap().value, 0.5);
        let q = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(lovasz_softmax(&q, &[1, 1]).unwrap().value, 1.0);
    }

    #[test]
    fn lovasz_grad_matches_fd() {
        let p: Mat<f64> = Mat::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.6, 0.3],
            vec![0.35, 0.3, 0.35],
            vec![0.25, 0.15, 0.6],
        ])
        .unwrap();
        let labels = [1, 3, 2, 3];
        let a = lovasz_softmax(&p, &labels).unwrap();
        for k in 0..12 {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.as_mut_slice()[k] += 1e-7;
            lo.as_mut_slice()[k] -= 1e-7;
            let n = (lovasz_softmax(&hi, &labels).unwrap().value
                - lovasz_softmax(&lo, &labels).unwrap().value)
                / 2e-7;
            assert!((n - a.grad.as_slice()[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn iou_loss_limits() {
        let cell = [1.6, 1.6];
        let t = RegTarget {
            cell: 0,
            target: [0.1, -0.2, 0.0, 1.2, 0.5, 0.3, 0.0, 1.0, 0.0, 0.0],
        };
        let heat = Mat::<f64>::zeros(1, 1);
        let perfect = Mat::from_vec(1, REG_CHANNELS, t.target.to_vec()).unwrap();
        let d = det_losses(
            &heat,
            &perfect,
            &Mat::zeros(1, 1),
            std::slice::from_ref(&t),
            cell,
        )
        .unwrap();
        assert_eq!(d.reg.value, 0.0);
        assert!(d.iou.value.abs() < 1e-12);
        let mut far = t.target;
        far[0] += 20.0;
        let farm = Mat::from_vec(1, REG_CHANNELS, far.to_vec()).unwrap();
        let d = det_losses(&heat, &farm, &Mat::zeros(1, 1), &[t], cell).unwrap();
        assert_eq!(d.iou.value, 1.0);
    }

    #[test]
    fn uncertainty_unit_variance_halves() {
        let l = TaskLosses {
            seg: 1.0,
            bev: 2.0,
            det: 3.0,
        };
        let (v, dl, ds) = combine_uncertainty(&l, &UncertaintyWeights::default());
        assert_eq!(v, 3.0);
        assert_eq!(dl, [0.5; 3]);
        assert_eq!(ds, [0.0, -0.5, -1.0]);
        let w = UncertaintyWeights {
            log_var: [2f64.ln(), 0.0, 0.0],
        };
        assert!(combine_uncertainty(&l, &w).1[0] < dl[0]);
    }
}
