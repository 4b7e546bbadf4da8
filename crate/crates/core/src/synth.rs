//! Deterministic synthetic lidar scenes: a noisy ground plane, clutter
//! clusters and cuboid objects sampled on their surfaces.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::Box9;
use crate::error::{Error, Result};
use crate::iarm::point_in_box;
use crate::mat::Mat;
use crate::voxel::{PointCloud, VoxelGridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: u8,
    pub count: usize,
    /// Mean length, width, height in meters.
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub points_per_object: usize,
    pub ground_points: usize,
    pub clutter_clusters: usize,
    pub points_per_cluster: usize,
    pub ground_class: u8,
    pub clutter_class: u8,
    /// Objects and clutter are placed with `|x|, |y| <= extent`.
    pub extent: f64,
    pub ground_z: f64,
    /// Relative size jitter applied per object.
    pub size_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            objects: vec![
                ObjectSpec {
                    class: 3,
                    count: 2,
                    size: [4.4, 1.9, 1.6],
                },
                ObjectSpec {
                    class: 4,
                    count: 2,
                    size: [0.8, 0.8, 1.8],
                },
            ],
            points_per_object: 500,
            ground_points: 3000,
            clutter_clusters: 4,
            points_per_cluster: 200,
            ground_class: 1,
            clutter_class: 2,
            extent: 12.0,
            ground_z: -1.6,
            size_jitter: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SceneSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if !(s.extent > 0.0) || !(0.0..0.5).contains(&s.size_jitter) {
            return Err(Error::Config(
                "scene extent must be positive and size_jitter in [0, 0.5)".into(),
            ));
        }
        if s.objects
            .iter()
            .any(|o| o.class == 0 || o.size.iter().any(|&v| !(v > 0.0)))
        {
            return Err(Error::Config(
                "object classes must be >= 1 with positive sizes".into(),
            ));
        }
        Ok(s)
    }

    /// Same layout with every point count multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let m = |n: usize| (n as f64 * factor).round() as usize;
        Self {
            points_per_object: m(self.points_per_object),
            ground_points: m(self.ground_points),
            points_per_cluster: m(self.points_per_cluster),
            ..self.clone()
        }
    }
}

/// Object surface points are pulled this far inside the box so they stay
/// contained after rounding to `f32`.
const SURFACE_INSET: f64 = 0.97;
const MAX_PLACEMENT_TRIES: usize = 200;

/// Points carry `x, y, z, intensity`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<Box9> = Vec::new();
    for o in &spec.objects {
        for _ in 0..o.count {
            let b = place_object(&mut rng, spec, o, &boxes).ok_or_else(|| {
                Error::Config(format!(
                    "could not place a class {} object without overlap",
                    o.class
                ))
            })?;
            boxes.push(b);
        }
    }

    let mut rows: Vec<[f32; 4]> = Vec::new();
    let mut labels = Vec::new();
    let ground_noise = Normal::new(0.0, 0.03).expect("valid sigma");
    for b in &boxes {
        for _ in 0..spec.points_per_object {
            let p = surface_point(&mut rng, b);
            rows.push([
                p[0] as f32,
                p[1] as f32,
                p[2] as f32,
                rng.random_range(0.5..1.0),
            ]);
            labels.push(b.class);
        }
    }

    let outside = |p: [f64; 3], boxes: &[Box9]| boxes.iter().all(|b| !point_in_box(p, b));
    let mut placed = 0;
    while placed < spec.ground_points {
        let r = spec.extent + 2.0;
        let p = [
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            spec.ground_z + ground_noise.sample(&mut rng),
        ];
        if !outside(p, &boxes) {
            continue;
        }
        rows.push([
            p[0] as f32,
            p[1] as f32,
            p[2] as f32,
            rng.random_range(0.05..0.3),
        ]);
        labels.push(spec.ground_class);
        placed += 1;
    }

    let spread = Normal::new(0.0, 0.5).expect("valid sigma");
    for _ in 0..spec.clutter_clusters {
        let c = [
            rng.random_range(-spec.extent..spec.extent),
            rng.random_range(-spec.extent..spec.extent),
        ];
        let height = rng.random_range(0.5..2.0);
        let mut placed = 0;
        let mut tries = 0;
        while placed < spec.points_per_cluster && tries < 20 * spec.points_per_cluster.max(1) {
            tries += 1;
            let p = [
                c[0] + spread.sample(&mut rng),
                c[1] + spread.sample(&mut rng),
                spec.ground_z + 0.1 + rng.random_range(0.0..height),
            ];
            if !outside(p, &boxes) {
                continue;
            }
            rows.push([
                p[0] as f32,
                p[1] as f32,
                p[2] as f32,
                rng.random_range(0.2..0.6),
            ]);
            labels.push(spec.clutter_class);
            placed += 1;
        }
    }

    let points = Mat::from_vec(rows.len(), 4, rows.into_iter().flatten().collect())?;
    let mut cloud = PointCloud::new(points)?;
    cloud.labels = Some(labels);
    cloud.boxes = boxes;
    Ok(cloud)
}

fn place_object(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    o: &ObjectSpec,
    placed: &[Box9],
) -> Option<Box9> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let j = spec.size_jitter;
        let size = o.size.map(|s| s * rng.random_range(1.0 - j..=1.0 + j));
        let lim = spec.extent - size[0].max(size[1]) / 2.0;
        if lim <= 0.0 {
            return None;
        }
        let center = [
            rng.random_range(-lim..lim),
            rng.random_range(-lim..lim),
            spec.ground_z + size[2] / 2.0,
        ];
        let yaw = rng.random_range(-PI..PI);
        let radius = |s: &[f64; 3]| (s[0] * s[0] + s[1] * s[1]).sqrt() / 2.0;
        let mut b = Box9::new(center, size, yaw, o.class);
        if placed
            .iter()
            .any(|q| q.bev_center_distance(&b) < radius(&q.size) + radius(&size) + 0.5)
        {
            continue;
        }
        b.velocity = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        return Some(b);
    }
    None
}

/// Uniform over the four side faces and the top, weighted by area.
fn surface_point(rng: &mut ChaCha8Rng, b: &Box9) -> [f64; 3] {
    let [l, w, h] = b.size.map(|s| s / 2.0 * SURFACE_INSET);
    let areas = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let u = rng.random_range(-1.0..=1.0);
    let v = rng.random_range(-1.0..=1.0);
    let local = match face {
        0 => [l, u * w, v * h],
        1 => [-l, u * w, v * h],
        2 => [u * l, w, v * h],
        3 => [u * l, -w, v * h],
        _ => [u * l, v * w, h],
    };
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] + c * local[0] - s * local[1],
        b.center[1] + s * local[0] + c * local[1],
        b.center[2] + local[2],
    ]
}

/// A `side³` block of occupied voxels centered in the grid, one point per
/// voxel, with one `det_class` box over part of it. Labels cycle through
/// `1..=classes` outside the box.
pub fn block_scene(
    grid: &VoxelGridSpec,
    side: usize,
    classes: u8,
    det_class: u8,
) -> Result<PointCloud> {
    let shape = grid.grid_shape()?;
    if side == 0 || shape.iter().any(|&s| (s as usize) < side) || classes == 0 {
        return Err(Error::Config(format!(
            "a {side}-voxel block does not fit grid {shape:?}"
        )));
    }
    let start = shape.map(|s| (s as usize - side) / 2);
    let at = |a: usize, i: usize, frac: f64| {
        grid.range_min[a] + ((start[a] + i) as f64 + frac) * grid.voxel_size[a]
    };
    let mid = [0, 1, 2].map(|a| at(a, side / 2, 0.0));
    let b = Box9::new(
        mid,
        [0, 1, 2].map(|a| grid.voxel_size[a] * side as f64 / 2.0),
        0.3,
        det_class,
    );
    let mut rows = Vec::with_capacity(side * side * side * 4);
    let mut labels = Vec::new();
    for i in 0..side * side * side {
        let (x, y, z) = (i % side, (i / side) % side, i / (side * side));
        let p = [at(0, x, 0.35), at(1, y, 0.55), at(2, z, 0.25)];
        rows.extend(p.map(|v| v as f32));
        rows.push(((i * 37) % 11) as f32 / 11.0);
        labels.push(if point_in_box(p, &b) {
            det_class
        } else {
            1 + ((x + 2 * y + 3 * z) % classes as usize) as u8
        });
    }
    let mut pc = PointCloud::new(Mat::from_vec(labels.len(), 4, rows)?)?;
    pc.labels = Some(labels);
    pc.boxes = vec![b];
    Ok(pc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let s = SceneSpec::default();
        assert_eq!(
            generate_scene(7, &s).unwrap(),
            generate_scene(7, &s).unwrap()
        );
        assert_ne!(
            generate_scene(7, &s).unwrap(),
            generate_scene(8, &s).unwrap()
        );
    }

    #[test]
    fn no_objects_all_background() {
        let s = SceneSpec {
            objects: vec![],
            ..Default::default()
        };
        let c = generate_scene(1, &s).unwrap();
        assert!(c.boxes.is_empty());
        assert!(c.labels.unwrap().iter().all(|&l| l == 1 || l == 2));
    }

    #[test]
    fn object_points_inside_their_box() {
        let s = SceneSpec::default();
        let c = generate_scene(3, &s).unwrap();
        let labels = c.labels.as_ref().unwrap();
        let mut k = 0;
        for b in &c.boxes {
            for _ in 0..s.points_per_object {
                assert_eq!(labels[k], b.class);
                assert!(point_in_box(c.xyz(k), b));
                k += 1;
            }
        }
        for i in k..c.len() {
            assert!(c.boxes.iter().all(|b| !point_in_box(c.xyz(i), b)));
        }
    }

    #[test]
    fn block_scene_occupies_side_cubed_voxels() {
        let grid = VoxelGridSpec {
            range_min: [0.0; 3],
            range_max: [6.4; 3],
            voxel_size: [0.2; 3],
        };
        let pc = block_scene(&grid, 6, 4, 3).unwrap();
        let (v, _) = crate::voxel::voxelize::<f64>(&pc, &grid, 0).unwrap();
        assert_eq!(v.len(), 216);
        let labels = pc.labels.unwrap();
        assert!(labels.contains(&3) && labels.contains(&1));
    }
}
