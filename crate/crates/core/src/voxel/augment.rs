use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::boxes::{wrap_yaw, Box9};
use crate::error::{Error, Result};
use crate::iarm::point_in_box;
use crate::mat::Mat;
use crate::metrics::rotated_bev_iou;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of mirroring across the x axis (`y → -y`).
    pub flip_x_prob: f64,
    /// Probability of mirroring across the y axis (`x → -x`).
    pub flip_y_prob: f64,
    /// Yaw rotation drawn uniformly from `[-r, r]` radians.
    pub rotation_range: f64,
    pub scale_range: [f64; 2],
    pub translation_std: [f64; 3],
    pub gt_sampling: Option<GtSamplingConfig>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            rotation_range: PI / 4.0,
            scale_range: [0.95, 1.05],
            translation_std: [0.2, 0.2, 0.1],
            gt_sampling: None,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            enabled: true,
            flip_x_prob: 0.0,
            flip_y_prob: 0.0,
            rotation_range: 0.0,
            scale_range: [1.0, 1.0],
            translation_std: [0.0; 3],
            gt_sampling: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSamplingConfig {
    /// Directory holding one scene file per object class.
    pub database: std::path::PathBuf,
    pub samples_per_class: usize,
    /// Fraction of final epochs that run without pasting.
    #[serde(default = "default_fade_fraction")]
    pub fade_fraction: f64,
}

fn default_fade_fraction() -> f64 {
    0.2
}

impl GtSamplingConfig {
    /// First epoch at which pasting is disabled.
    pub fn fade_epoch(&self, total_epochs: usize) -> usize {
        ((1.0 - self.fade_fraction) * total_epochs as f64).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub bbox: Box9,
    pub points: Mat<f32>,
    pub labels: Vec<u8>,
}

/// Objects available for ground-truth pasting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtDatabase {
    pub objects: Vec<GtObject>,
}

impl GtDatabase {
    /// Cuts every labeled box out of each cloud along with the points it contains.
    pub fn from_clouds<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<Self> {
        let mut objects = Vec::new();
        let mut channels = None;
        for pc in clouds {
            pc.validate().map_err(|e| Error::Augment(e.to_string()))?;
            if *channels.get_or_insert(pc.channels()) != pc.channels() {
                return Err(Error::Augment(
                    "database clouds disagree on channel count".into(),
                ));
            }
            let labels = pc
                .labels
                .as_ref()
                .ok_or_else(|| Error::Augment("database cloud without labels".into()))?;
            for b in &pc.boxes {
                if !b.is_valid() {
                    return Err(Error::Augment(format!("invalid box {b:?}")));
                }
                let inside: Vec<usize> = (0..pc.len())
                    .filter(|&i| point_in_box(pc.xyz(i), b))
                    .collect();
                if inside.is_empty() {
                    return Err(Error::Augment("database box contains no points".into()));
                }
                let mut pts = Mat::zeros(inside.len(), pc.channels());
                for (r, &i) in inside.iter().enumerate() {
                    pts.row_mut(r).copy_from_slice(pc.points.row(i));
                }
                objects.push(GtObject {
                    bbox: b.clone(),
                    points: pts,
                    labels: inside.iter().map(|&i| labels[i]).collect(),
                });
            }
        }
        Ok(Self { objects })
    }

    fn classes(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.objects.iter().map(|o| o.bbox.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

fn paste_objects(
    pc: &PointCloud,
    db: &GtDatabase,
    per_class: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    let mut boxes = pc.boxes.clone();
    let mut pasted: Vec<&GtObject> = Vec::new();
    for class in db.classes() {
        let pool: Vec<&GtObject> = db
            .objects
            .iter()
            .filter(|o| o.bbox.class == class)
            .collect();
        for _ in 0..per_class {
            let cand = *pool.choose(rng).expect("class present");
            if cand.points.cols() != pc.channels() {
                return Err(Error::Augment(format!(
                    "database object has {} channels, scene has {}",
                    cand.points.cols(),
                    pc.channels()
                )));
            }
            if boxes.iter().any(|b| rotated_bev_iou(b, &cand.bbox) > 0.0) {
                continue;
            }
            boxes.push(cand.bbox.clone());
            pasted.push(cand);
        }
    }
    if pasted.is_empty() {
        return Ok(pc.clone());
    }
    let labels = pc.labels.as_ref();
    let keep: Vec<usize> = (0..pc.len())
        .filter(|&i| !pasted.iter().any(|o| point_in_box(pc.xyz(i), &o.bbox)))
        .collect();
    let extra: usize = pasted.iter().map(|o| o.points.rows()).sum();
    let mut pts = Mat::zeros(keep.len() + extra, pc.channels());
    let mut out_labels = Vec::with_capacity(keep.len() + extra);
    for (r, &i) in keep.iter().enumerate() {
        pts.row_mut(r).copy_from_slice(pc.points.row(i));
        out_labels.push(labels.map_or(0, |l| l[i]));
    }
    let mut r = keep.len();
    for o in &pasted {
        for k in 0..o.points.rows() {
            pts.row_mut(r).copy_from_slice(o.points.row(k));
            out_labels.push(o.labels[k]);
            r += 1;
        }
    }
    Ok(PointCloud {
        points: pts,
        labels: pc.labels.as_ref().map(|_| out_labels),
        boxes,
    })
}

/// A similarity transform of the ground plane plus translation.
#[derive(Clone, Copy, Debug)]
struct GlobalTransform {
    flip_x: bool,
    flip_y: bool,
    yaw: f64,
    scale: f64,
    translation: [f64; 3],
}

impl GlobalTransform {
    fn apply_point(&self, p: &mut [f32]) {
        let (mut x, mut y, mut z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if self.flip_x {
            y = -y;
        }
        if self.flip_y {
            x = -x;
        }
        let (s, c) = self.yaw.sin_cos();
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        x = rx * self.scale + self.translation[0];
        y = ry * self.scale + self.translation[1];
        z = z * self.scale + self.translation[2];
        p[0] = x as f32;
        p[1] = y as f32;
        p[2] = z as f32;
    }

    fn apply_box(&self, b: &mut Box9) {
        let [mut x, mut y, z] = b.center;
        let [mut vx, mut vy] = b.velocity;
        let mut yaw = b.yaw;
        if self.flip_x {
            y = -y;
            vy = -vy;
            yaw = -yaw;
        }
        if self.flip_y {
            x = -x;
            vx = -vx;
            yaw = PI - yaw;
        }
        let (s, c) = self.yaw.sin_cos();
        b.center = [
            (c * x - s * y) * self.scale + self.translation[0],
            (s * x + c * y) * self.scale + self.translation[1],
            z * self.scale + self.translation[2],
        ];
        b.velocity = [
            (c * vx - s * vy) * self.scale,
            (s * vx + c * vy) * self.scale,
        ];
        b.size = b.size.map(|v| v * self.scale);
        b.yaw = wrap_yaw(yaw + self.yaw);
    }
}

/// Applies ground-truth pasting (only while `epoch < fade_epoch`) followed by
/// one global flip/rotate/scale/translate shared by points and boxes.
pub fn augment(
    pc: &PointCloud,
    cfg: &AugmentConfig,
    db: Option<&GtDatabase>,
    epoch: usize,
    total_epochs: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    if !cfg.enabled {
        return Ok(pc.clone());
    }
    let mut out = match (&cfg.gt_sampling, db) {
        (Some(gs), Some(db)) if epoch < gs.fade_epoch(total_epochs) && !db.objects.is_empty() => {
            paste_objects(pc, db, gs.samples_per_class, rng)?
        }
        (Some(_), None) => {
            return Err(Error::Augment(
                "gt sampling enabled without a database".into(),
            ))
        }
        _ => pc.clone(),
    };
    let t = GlobalTransform {
        flip_x: rng.random_bool(cfg.flip_x_prob.clamp(0.0, 1.0)),
        flip_y: rng.random_bool(cfg.flip_y_prob.clamp(0.0, 1.0)),
        yaw: if cfg.rotation_range > 0.0 {
            rng.random_range(-cfg.rotation_range..=cfg.rotation_range)
        } else {
            0.0
        },
        scale: if cfg.scale_range[1] > cfg.scale_range[0] {
            rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1])
        } else {
            cfg.scale_range[0]
        },
        translation: {
            let mut t = [0.0; 3];
            for (a, v) in t.iter_mut().enumerate() {
                if cfg.translation_std[a] > 0.0 {
                    *v = Normal::new(0.0, cfg.translation_std[a])
                        .expect("positive std")
                        .sample(rng);
                }
            }
            t
        },
    };
    for i in 0..out.len() {
        t.apply_point(out.points.row_mut(i));
    }
    for b in &mut out.boxes {
        t.apply_box(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> PointCloud {
        let mut pc = PointCloud::new(
            Mat::from_rows(&[
                vec![1.0, 0.0, 0.0, 0.3],
                vec![5.0, 5.2, 0.4, 0.9],
                vec![-3.0, 2.0, -1.0, 0.1],
            ])
            .unwrap(),
        )
        .unwrap();
        pc.labels = Some(vec![1, 3, 2]);
        pc.boxes = vec![Box9::new([5.0, 5.0, 0.5], [2.0, 1.0, 1.5], 0.3, 3)];
        pc
    }

    fn with_transform(t: GlobalTransform) -> PointCloud {
        let mut pc = scene();
        for i in 0..pc.len() {
            t.apply_point(pc.points.row_mut(i));
        }
        for b in &mut pc.boxes {
            t.apply_box(b);
        }
        pc
    }

    #[test]
    fn identity_is_bit_exact() {
        let pc = scene();
        let out = augment(
            &pc,
            &AugmentConfig::identity(),
            None,
            0,
            1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out, pc);
    }

    #[test]
    fn rotation_by_pi() {
        let out = with_transform(GlobalTransform {
            flip_x: false,
            flip_y: false,
            yaw: PI,
            scale: 1.0,
            translation: [0.0; 3],
        });
        let p = out.points.row(0);
        assert!((p[0] + 1.0).abs() < 1e-6 && p[1].abs() < 1e-6 && p[2] == 0.0);
        assert!((out.boxes[0].yaw - wrap_yaw(0.3 + PI)).abs() < 1e-12);
        assert!(out.boxes[0].yaw > -PI && out.boxes[0].yaw <= PI);
    }

    #[test]
    fn transforms_preserve_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pc = scene();
        let before: Vec<bool> = (0..pc.len())
            .map(|i| point_in_box(pc.xyz(i), &pc.boxes[0]))
            .collect();
        assert!(before[1]);
        let cfg = AugmentConfig {
            enabled: true,
            ..AugmentConfig::default()
        };
        for _ in 0..20 {
            let out = augment(&pc, &cfg, None, 0, 1, &mut rng).unwrap();
            assert_eq!(out.labels, pc.labels);
            for (i, &b) in before.iter().enumerate() {
                assert_eq!(point_in_box(out.xyz(i), &out.boxes[0]), b);
            }
        }
    }

    fn database() -> GtDatabase {
        let mut obj = PointCloud::new(
            Mat::from_rows(&[vec![-8.0, -8.0, 0.2, 0.7], vec![-8.2, -7.9, 0.6, 0.7]]).unwrap(),
        )
        .unwrap();
        obj.labels = Some(vec![4, 4]);
        obj.boxes = vec![Box9::new([-8.0, -8.0, 0.5], [0.8, 0.8, 1.8], 0.0, 4)];
        GtDatabase::from_clouds([&obj]).unwrap()
    }

    #[test]
    fn pasting_then_fading() {
        let db = database();
        let cfg = AugmentConfig {
            gt_sampling: Some(GtSamplingConfig {
                database: "unused".into(),
                samples_per_class: 1,
                fade_fraction: 0.2,
            }),
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let early = augment(&scene(), &cfg, Some(&db), 0, 10, &mut rng).unwrap();
        assert_eq!(early.boxes.len(), 2);
        assert_eq!(early.len(), 5);
        assert_eq!(&early.labels.as_ref().unwrap()[3..], &[4, 4]);
        for epoch in [8, 9] {
            let late = augment(&scene(), &cfg, Some(&db), epoch, 10, &mut rng).unwrap();
            assert_eq!(late, scene());
        }
    }

    #[test]
    fn malformed_database() {
        let mut bad = scene();
        bad.labels = None;
        assert!(matches!(
            GtDatabase::from_clouds([&bad]),
            Err(Error::Augment(_))
        ));
        let mut empty_box = scene();
        empty_box.boxes = vec![Box9::new([50.0, 50.0, 0.0], [1.0, 1.0, 1.0], 0.0, 3)];
        assert!(matches!(
            GtDatabase::from_clouds([&empty_box]),
            Err(Error::Augment(_))
        ));
    }
}
