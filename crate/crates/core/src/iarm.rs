//! Instance-aware refinement: foreground gating, point-in-box masks and the
//! additive injection of proposal features into point features.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::RowMap;
use crate::boxes::Box9;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

pub const FOREGROUND_THRESHOLD: f64 = 0.5;

/// Side length (m) of the BEV buckets used to find candidate points.
const BUCKET: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundEstimate {
    pub prob: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl ForegroundEstimate {
    pub fn from_probs(prob: Vec<f64>, threshold: f64) -> Self {
        let mask = prob.iter().map(|&p| p >= threshold).collect();
        Self {
            prob,
            mask,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear layer (`C × 1` weights) followed by a sigmoid, per point.
pub fn foreground_prob<T: Real>(
    feats: &Mat<T>,
    weight: &Mat<T>,
    bias: T,
    threshold: f64,
) -> Result<ForegroundEstimate> {
    if weight.cols() != 1 {
        return Err(Error::shape("foreground weight must have one column"));
    }
    let logits = feats.matmul(weight, Some(&[bias]))?;
    let prob = logits.as_slice().iter().map(|v| sigmoid(v.f64())).collect();
    Ok(ForegroundEstimate::from_probs(prob, threshold))
}

/// Boundary-inclusive containment in the box's local frame.
pub fn point_in_box(p: [f64; 3], b: &Box9) -> bool {
    let l = b.to_local(p);
    l[0].abs() <= b.size[0] / 2.0 && l[1].abs() <= b.size[1] / 2.0 && l[2].abs() <= b.size[2] / 2.0
}

/// Point-index lists per box, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProposalMask {
    pub num_points: usize,
    pub per_box: Vec<Vec<u32>>,
}

impl ProposalMask {
    pub fn build(points: &[[f64; 3]], boxes: &[Box9]) -> Self {
        let cell = |v: f64| (v / BUCKET).floor() as i64;
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            if p[0].is_finite() && p[1].is_finite() {
                buckets
                    .entry((cell(p[0]), cell(p[1])))
                    .or_default()
                    .push(i as u32);
            }
        }
        let per_box = boxes
            .iter()
            .map(|b| {
                let corners = b.bev_corners();
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for c in corners {
                    for a in 0..2 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                }
                let mut inside = Vec::new();
                for cx in cell(lo[0])..=cell(hi[0]) {
                    for cy in cell(lo[1])..=cell(hi[1]) {
                        if let Some(ids) = buckets.get(&(cx, cy)) {
                            inside.extend(
                                ids.iter()
                                    .copied()
                                    .filter(|&i| point_in_box(points[i as usize], b)),
                            );
                        }
                    }
                }
                inside.sort_unstable();
                inside
            })
            .collect();
        Self {
            num_points: points.len(),
            per_box,
        }
    }

    pub fn num_boxes(&self) -> usize {
        self.per_box.len()
    }

    /// Box indices containing each point, ascending.
    pub fn per_point(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_points];
        for (j, ids) in self.per_box.iter().enumerate() {
            for &i in ids {
                out[i as usize].push(j as u32);
            }
        }
        out
    }

    pub fn contains(&self, point: usize, bx: usize) -> bool {
        self.per_box[bx].binary_search(&(point as u32)).is_ok()
    }
}

/// Two-layer MLP lifting proposal features to point-feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct IarmMlp<T> {
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

impl<T: Real> IarmMlp<T> {
    pub fn random(d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let mut init = |r: usize, c: usize| {
            let n = Normal::new(0.0, (2.0 / r as f64).sqrt()).expect("valid std");
            Mat::from_vec(r, c, (0..r * c).map(|_| T::c(n.sample(rng))).collect()).expect("sized")
        };
        Self {
            w1: init(d_in, hidden),
            b1: vec![T::zero(); hidden],
            w2: init(hidden, d_out),
            b2: vec![T::zero(); d_out],
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let h = x
            .matmul(&self.w1, Some(&self.b1))?
            .map(|v| if v > T::zero() { v } else { T::zero() });
        h.matmul(&self.w2, Some(&self.b2))
    }

    pub fn out_width(&self) -> usize {
        self.w2.cols()
    }
}

/// Row operator adding proposal row `j` to point row `i` whenever the point
/// is foreground and lies in box `j`. Rows are visited in ascending box order.
pub fn refine_map<T: Real>(fg: &ForegroundEstimate, pm: &ProposalMask) -> Result<RowMap<T>> {
    if fg.len() != pm.num_points {
        return Err(Error::shape(format!(
            "{} foreground entries for {} points",
            fg.len(),
            pm.num_points
        )));
    }
    let per_point = pm.per_point();
    let mut map = RowMap::new();
    for (i, boxes) in per_point.iter().enumerate() {
        if fg.mask[i] {
            for &j in boxes {
                map.push(0, j as usize, T::one());
            }
        }
        map.finish_row();
    }
    Ok(map)
}

/// `f'[i] = f[i] + Σ_j m_f[i]·m_b[i][j]·u[j]` for precomputed MLP outputs `u`.
pub fn refine_with_outputs<T: Real>(
    feats: &Mat<T>,
    fg: &ForegroundEstimate,
    pm: &ProposalMask,
    mlp_out: &Mat<T>,
) -> Result<Mat<T>> {
    if mlp_out.rows() != pm.num_boxes() {
        return Err(Error::shape("one MLP output row per box required"));
    }
    if feats.rows() != pm.num_points {
        return Err(Error::shape("point feature rows differ from mask"));
    }
    refine_map(fg, pm)?.apply(Some(feats), &[mlp_out], feats.cols())
}

pub fn refine<T: Real>(
    feats: &Mat<T>,
    fg: &ForegroundEstimate,
    boxes: &[Box9],
    pm: &ProposalMask,
    mlp: &IarmMlp<T>,
) -> Result<Mat<T>> {
    if mlp.out_width() != feats.cols() {
        return Err(Error::shape(format!(
            "MLP width {} differs from point features {}",
            mlp.out_width(),
            feats.cols()
        )));
    }
    let d = mlp.w1.rows();
    let mut fb = Mat::zeros(boxes.len(), d);
    for (j, b) in boxes.iter().enumerate() {
        if b.feature.len() != d {
            return Err(Error::shape(format!(
                "box feature width {} expected {d}",
                b.feature.len()
            )));
        }
        for (o, &v) in fb.row_mut(j).iter_mut().zip(&b.feature) {
            *o = T::c(v as f64);
        }
    }
    let u = mlp.forward(&fb)?;
    refine_with_outputs(feats, fg, pm, &u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_cube() -> Box9 {
        Box9::new([0.0; 3], [1.0; 3], 0.0, 3)
    }

    #[test]
    fn threshold_is_inclusive() {
        let fg = ForegroundEstimate::from_probs(vec![0.5, 0.4999, 0.9], 0.5);
        assert_eq!(fg.mask, vec![true, false, true]);
    }

    #[test]
    fn zero_weights_give_half() {
        let f = Mat::from_rows(&[vec![1.0, -3.0], vec![2.0, 5.0]]).unwrap();
        let fg = foreground_prob(&f, &Mat::zeros(2, 1), 0.0, FOREGROUND_THRESHOLD).unwrap();
        assert_eq!(fg.prob, vec![0.5, 0.5]);
        assert!(fg.mask.iter().all(|&m| m));
    }

    #[test]
    fn containment_basics() {
        let b = unit_cube();
        assert!(point_in_box([0.0; 3], &b));
        assert!(point_in_box([0.5, 0.0, 0.0], &b));
        assert!(!point_in_box([0.5001, 0.0, 0.0], &b));
        let r = Box9::new(
            [2.0, 1.0, 0.0],
            [4.0, 1.0, 1.0],
            std::f64::consts::FRAC_PI_2,
            3,
        );
        assert!(point_in_box([2.0, 2.9, 0.0], &r));
        assert!(!point_in_box([3.9, 1.0, 0.0], &r));
    }

    #[test]
    fn mask_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| {
                [
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let boxes: Vec<Box9> = (0..15)
            .map(|_| {
                Box9::new(
                    [
                        rng.random_range(-9.0..9.0),
                        rng.random_range(-9.0..9.0),
                        0.0,
                    ],
                    [rng.random_range(0.5..6.0), rng.random_range(0.5..3.0), 2.0],
                    rng.random_range(-3.0..3.0),
                    3,
                )
            })
            .collect();
        let pm = ProposalMask::build(&pts, &boxes);
        for (j, b) in boxes.iter().enumerate() {
            let brute: Vec<u32> = (0..pts.len() as u32)
                .filter(|&i| point_in_box(pts[i as usize], b))
                .collect();
            assert_eq!(pm.per_box[j], brute);
        }
    }

    #[test]
    fn background_passes_through() {
        let f = Mat::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let fg = ForegroundEstimate::from_probs(vec![0.1, 0.2], 0.5);
        let pm = ProposalMask {
            num_points: 2,
            per_box: vec![vec![0, 1]],
        };
        let u = Mat::from_rows(&[vec![10.0, 10.0]]).unwrap();
        assert_eq!(refine_with_outputs(&f, &fg, &pm, &u).unwrap(), f);
    }

    #[test]
    fn point_in_two_boxes_sums() {
        let f = Mat::from_rows(&[vec![1.0f64, 2.0]]).unwrap();
        let fg = ForegroundEstimate::from_probs(vec![0.9], 0.5);
        let pm = ProposalMask {
            num_points: 1,
            per_box: vec![vec![0], vec![0]],
        };
        let u = Mat::from_rows(&[vec![10.0, 20.0], vec![0.5, 0.25]]).unwrap();
        let out = refine_with_outputs(&f, &fg, &pm, &u).unwrap();
        assert_eq!(out.row(0), &[11.5, 22.25]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = IarmMlp::<f64>::random(4, 8, 3, &mut rng);
        let f = Mat::zeros(1, 2);
        let fg = ForegroundEstimate::from_probs(vec![1.0], 0.5);
        let pm = ProposalMask {
            num_points: 1,
            per_box: vec![],
        };
        assert!(matches!(
            refine(&f, &fg, &[], &pm, &mlp),
            Err(Error::Shape(_))
        ));
    }
}
