//! Point cloud to voxel bridging: mean-pooling voxel feature encoder,
//! devoxelization, and training-time augmentation.

mod augment;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::boxes::Box9;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;
use crate::sparse::{Coord, SparseTensor};

pub use augment::{augment, AugmentConfig, GtDatabase, GtObject, GtSamplingConfig};

/// Raw points (`xyz` in meters followed by extra channels), optional
/// per-point labels (`0` = unlabeled, `1..=K` classes) and ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Mat<f32>,
    pub labels: Option<Vec<u8>>,
    pub boxes: Vec<Box9>,
}

impl PointCloud {
    pub fn new(points: Mat<f32>) -> Result<Self> {
        if points.cols() < 3 {
            return Err(Error::shape("points need at least xyz"));
        }
        Ok(Self {
            points,
            labels: None,
            boxes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.points.cols()
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0] as f64, r[1] as f64, r[2] as f64]
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.cols() < 3 {
            return Err(Error::shape("points need at least xyz"));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::shape(format!(
                    "{} labels for {} points",
                    l.len(),
                    self.len()
                )));
            }
        }
        if !self.points.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::shape("non-finite point coordinates"));
        }
        Ok(())
    }
}

/// Metric extent and cell size of the voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl Default for VoxelGridSpec {
    /// 32 m × 32 m × 6.4 m at 0.2 m: a 160 × 160 × 32 grid.
    fn default() -> Self {
        Self {
            range_min: [-16.0, -16.0, -2.0],
            range_max: [16.0, 16.0, 4.4],
            voxel_size: [0.2, 0.2, 0.2],
        }
    }
}

impl VoxelGridSpec {
    pub fn grid_shape(&self) -> Result<[u32; 3]> {
        let mut shape = [0u32; 3];
        for a in 0..3 {
            let span = self.range_max[a] - self.range_min[a];
            if !(span > 0.0) || !(self.voxel_size[a] > 0.0) {
                return Err(Error::Grid(format!("axis {a}: empty range or cell")));
            }
            let cells = span / self.voxel_size[a];
            let n = cells.round();
            if (cells - n).abs() > 1e-6 * n.max(1.0) {
                return Err(Error::Grid(format!(
                    "axis {a}: span {span} is not a whole number of {} m cells",
                    self.voxel_size[a]
                )));
            }
            if n < 1.0 || n > u16::MAX as f64 {
                return Err(Error::Grid(format!(
                    "axis {a}: {n} cells do not fit 16 bits"
                )));
            }
            shape[a] = n as u32;
        }
        Ok(shape)
    }

    /// Half-open cell lookup `[min, max)` per axis.
    pub fn voxel_of(&self, p: [f64; 3], shape: [u32; 3]) -> Option<[i32; 3]> {
        let mut v = [0i32; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let c = ((p[a] - self.range_min[a]) / self.voxel_size[a]).floor();
            if c < 0.0 || c >= shape[a] as f64 {
                return None;
            }
            v[a] = c as i32;
        }
        Some(v)
    }
}

/// Surjection from points to the voxel rows that contain them.
#[derive(Clone, Debug, PartialEq)]
pub struct PointVoxelMap {
    pub point_to_voxel: Vec<Option<u32>>,
    pub voxel_point_counts: Vec<u32>,
}

impl PointVoxelMap {
    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_point_counts.len()
    }
}

/// Mean-pools point features into stride-1 voxels of batch `batch`.
pub fn voxelize<T: Real>(
    pc: &PointCloud,
    spec: &VoxelGridSpec,
    batch: u32,
) -> Result<(SparseTensor<T>, PointVoxelMap)> {
    let shape = spec.grid_shape()?;
    let ch = pc.channels();
    let mut slot_of: HashMap<[i32; 3], usize> = HashMap::new();
    let mut cells: Vec<[i32; 3]> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    let mut point_slot = Vec::with_capacity(pc.len());
    for i in 0..pc.len() {
        let Some(v) = spec.voxel_of(pc.xyz(i), shape) else {
            point_slot.push(None);
            continue;
        };
        let slot = *slot_of.entry(v).or_insert_with(|| {
            cells.push(v);
            sums.extend(std::iter::repeat_n(0.0, ch));
            counts.push(0);
            cells.len() - 1
        });
        for (s, &f) in sums[slot * ch..(slot + 1) * ch]
            .iter_mut()
            .zip(pc.points.row(i))
        {
            *s += f as f64;
        }
        counts[slot] += 1;
        point_slot.push(Some(slot));
    }
    let coords: Vec<Coord> = cells
        .iter()
        .map(|v| Coord::new(batch, v[0], v[1], v[2]))
        .collect();
    let mut feats = Vec::with_capacity(sums.len());
    for (slot, &n) in counts.iter().enumerate() {
        let n = n as f64;
        feats.extend(
            sums[slot * ch..(slot + 1) * ch]
                .iter()
                .map(|&s| T::c(s / n)),
        );
    }
    let x = SparseTensor::new(&coords, Mat::from_vec(coords.len(), ch, feats)?, 1, shape)?;
    let mut row_of_slot = vec![0u32; cells.len()];
    let mut voxel_point_counts = vec![0u32; cells.len()];
    for (slot, c) in coords.iter().enumerate() {
        let row = x.lookup(c).expect("voxel present");
        row_of_slot[slot] = row as u32;
        voxel_point_counts[row] = counts[slot];
    }
    let point_to_voxel = point_slot
        .into_iter()
        .map(|s| s.map(|s| row_of_slot[s]))
        .collect();
    Ok((
        x,
        PointVoxelMap {
            point_to_voxel,
            voxel_point_counts,
        },
    ))
}

/// Gathers each point's voxel feature row; out-of-range points get zeros.
pub fn devoxelize<T: Real>(x: &SparseTensor<T>, map: &PointVoxelMap) -> Result<Mat<T>> {
    if x.stride() != 1 {
        return Err(Error::Stride {
            expected: 1,
            actual: x.stride(),
        });
    }
    if map.num_voxels() != x.len() {
        return Err(Error::shape(format!(
            "map covers {} voxels, tensor has {}",
            map.num_voxels(),
            x.len()
        )));
    }
    let mut out = Mat::zeros(map.num_points(), x.channels());
    for (i, v) in map.point_to_voxel.iter().enumerate() {
        if let Some(v) = v {
            out.row_mut(i)
                .copy_from_slice(x.features().row(*v as usize));
        }
    }
    Ok(out)
}
