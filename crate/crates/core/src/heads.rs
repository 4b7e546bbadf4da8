//! Segmentation, BEV segmentation and center-heatmap detection heads:
//! target rasterization, box encoding and proposal extraction.

use serde::{Deserialize, Serialize};

use crate::boxes::Box9;
use crate::error::{Error, Result};
use crate::iarm::point_in_box;
use crate::mat::Mat;
use crate::real::Real;
use crate::sparse::SparseTensor;
use crate::voxel::{devoxelize, PointVoxelMap, VoxelGridSpec};

/// off_x, off_y, z, log l, log w, log h, sin yaw, cos yaw, vx, vy.
pub const REG_CHANNELS: usize = 10;

/// `ln(0.1 / 0.9)`: initial heatmap probability 0.1.
pub const HEAT_BIAS_INIT: f64 = -2.197_224_577_336_219_4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Semantic classes `1..=K`.
    pub num_classes: usize,
    /// Semantic labels that are detected as objects (also the foreground set).
    pub det_classes: Vec<u8>,
    pub det_hidden: usize,
    pub proposal_dim: usize,
    pub iarm_hidden: usize,
    pub max_proposals: usize,
    /// Proposals below this score do not take part in refinement.
    pub iarm_score_threshold: f64,
    pub use_iarm: bool,
    pub foreground_threshold: f64,
    pub min_radius: usize,
    pub nms_iou: f64,
    /// Boxes below this score are dropped from written predictions.
    pub output_score_threshold: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            det_classes: vec![3, 4],
            det_hidden: 64,
            proposal_dim: 64,
            iarm_hidden: 64,
            max_proposals: 100,
            iarm_score_threshold: 0.1,
            use_iarm: true,
            foreground_threshold: 0.5,
            min_radius: 2,
            nms_iou: 0.1,
            output_score_threshold: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config("num_classes must be in 1..=255".into()));
        }
        if self.det_classes.is_empty() {
            return Err(Error::Config("det_classes must not be empty".into()));
        }
        for &c in &self.det_classes {
            if c == 0 || c as usize > self.num_classes {
                return Err(Error::Label {
                    label: c as usize,
                    classes: self.num_classes,
                });
            }
        }
        if [self.det_hidden, self.proposal_dim, self.iarm_hidden].contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    pub fn det_index(&self, class: u8) -> Option<usize> {
        self.det_classes.iter().position(|&c| c == class)
    }

    pub fn is_foreground(&self, label: u8) -> bool {
        self.det_classes.contains(&label)
    }
}

/// Metric layout of the stride-8 BEV grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    pub origin: [f64; 2],
    pub cell: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl BevGrid {
    pub fn new(spec: &VoxelGridSpec) -> Result<Self> {
        let shape = spec.grid_shape()?;
        Ok(Self {
            origin: [spec.range_min[0], spec.range_min[1]],
            cell: [spec.voxel_size[0] * 8.0, spec.voxel_size[1] * 8.0],
            nx: (shape[0] / 8) as usize,
            ny: (shape[1] / 8) as usize,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.origin[0]) / self.cell[0]).floor();
        let j = ((y - self.origin[1]) / self.cell[1]).floor();
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.nx && (j as usize) < self.ny)
            .then_some((i as usize, j as usize))
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell[0],
            self.origin[1] + (j as f64 + 0.5) * self.cell[1],
        ]
    }
}

/// Regression target of a box relative to the cell holding its center.
pub fn encode_box(b: &Box9, grid: &BevGrid) -> Option<(usize, [f64; REG_CHANNELS])> {
    let (i, j) = grid.cell_of(b.center[0], b.center[1])?;
    let ox = (b.center[0] - grid.origin[0]) / grid.cell[0] - i as f64 - 0.5;
    let oy = (b.center[1] - grid.origin[1]) / grid.cell[1] - j as f64 - 0.5;
    let (s, c) = b.yaw.sin_cos();
    Some((
        grid.index(i, j),
        [
            ox,
            oy,
            b.center[2],
            b.size[0].ln(),
            b.size[1].ln(),
            b.size[2].ln(),
            s,
            c,
            b.velocity[0],
            b.velocity[1],
        ],
    ))
}

pub fn decode_box(cell: usize, reg: &[f64], grid: &BevGrid, score: f64, class: u8) -> Box9 {
    let (i, j) = (cell % grid.nx, cell / grid.nx);
    let x = grid.origin[0] + (i as f64 + 0.5 + reg[0]) * grid.cell[0];
    let y = grid.origin[1] + (j as f64 + 0.5 + reg[1]) * grid.cell[1];
    let size = [reg[3], reg[4], reg[5]].map(|v| v.clamp(-10.0, 10.0).exp());
    let mut b = Box9::new([x, y, reg[2]], size, reg[6].atan2(reg[7]), class);
    b.velocity = [reg[8], reg[9]];
    b.score = score;
    b
}

pub fn gaussian_radius(b: &Box9, grid: &BevGrid, min_radius: usize) -> usize {
    let r = (0.5 * b.size[0].max(b.size[1]) / grid.cell[0].min(grid.cell[1])).ceil();
    (r as usize).max(min_radius)
}

/// Soft heatmap targets (`cells × det classes`), max-combined Gaussians
/// centered on each box's cell.
pub fn heat_targets(boxes: &[Box9], grid: &BevGrid, cfg: &HeadConfig) -> Mat<f64> {
    let mut t = Mat::zeros(grid.num_cells(), cfg.det_classes.len());
    for b in boxes {
        let (Some(k), Some((ci, cj))) = (
            cfg.det_index(b.class),
            grid.cell_of(b.center[0], b.center[1]),
        ) else {
            continue;
        };
        let r = gaussian_radius(b, grid, cfg.min_radius) as i64;
        let sigma = (2 * r + 1) as f64 / 6.0;
        for dj in -r..=r {
            for di in -r..=r {
                let (i, j) = (ci as i64 + di, cj as i64 + dj);
                if i < 0 || j < 0 || i >= grid.nx as i64 || j >= grid.ny as i64 {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let idx = grid.index(i as usize, j as usize);
                if v > t.get(idx, k) {
                    t.set(idx, k, v);
                }
            }
        }
    }
    t
}

/// Cells whose center lies inside some box footprint.
pub fn bev_seg_targets(boxes: &[Box9], grid: &BevGrid) -> Vec<bool> {
    let mut t = vec![false; grid.num_cells()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = grid.center(i, j);
            t[grid.index(i, j)] = boxes
                .iter()
                .any(|b| point_in_box([c[0], c[1], b.center[2]], b));
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub cell: usize,
    /// Index into the detection class list.
    pub class_idx: usize,
    pub logit: f64,
}

/// 3×3 local maxima among `candidate` cells, highest first, at most `max`.
/// A neighbor with an equal logit and lower cell index suppresses a cell.
pub fn extract_peaks<T: Real>(
    heat: &Mat<T>,
    candidate: &[bool],
    nx: usize,
    ny: usize,
    max: usize,
) -> Vec<Peak> {
    let mut peaks = Vec::new();
    for k in 0..heat.cols() {
        for j in 0..ny {
            for i in 0..nx {
                let idx = j * nx + i;
                if !candidate[idx] {
                    continue;
                }
                let v = heat.get(idx, k);
                let mut is_peak = true;
                'n: for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if (di, dj) == (0, 0)
                            || ni < 0
                            || nj < 0
                            || ni >= nx as i64
                            || nj >= ny as i64
                        {
                            continue;
                        }
                        let nidx = nj as usize * nx + ni as usize;
                        let w = heat.get(nidx, k);
                        if w > v || (w == v && nidx < idx) {
                            is_peak = false;
                            break 'n;
                        }
                    }
                }
                if is_peak {
                    peaks.push(Peak {
                        cell: idx,
                        class_idx: k,
                        logit: v.f64(),
                    });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.logit
            .total_cmp(&a.logit)
            .then(a.cell.cmp(&b.cell))
            .then(a.class_idx.cmp(&b.class_idx))
    });
    peaks.truncate(max);
    peaks
}

/// Per-voxel and per-point class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits<T> {
    pub voxel: Mat<T>,
    pub point: Mat<T>,
}

/// Linear classifier on stride-1 voxels, gathered to points.
pub fn seg_head<T: Real>(
    fused: &SparseTensor<T>,
    map: &PointVoxelMap,
    weight: &Mat<T>,
    bias: &[T],
) -> Result<SegLogits<T>> {
    let voxel = fused.features().matmul(weight, Some(bias))?;
    let point = devoxelize(&fused.with_features(voxel.clone())?, map)?;
    Ok(SegLogits { voxel, point })
}

/// Row-wise argmax as 1-based labels; ties go to the lowest class.
pub fn argmax_labels<T: Real>(logits: &Mat<T>) -> Vec<u8> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8 + 1
        })
        .collect()
}
