//! Sparse encoder/decoder with multi-scale aggregation.
//!
//! Coordinate bookkeeping (rulebooks, merge and projection maps) depends
//! only on the input's active sites, so it is computed once per scene in
//! [`BackboneGeometry`] and reused by every forward pass over that scene.

mod net;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use net::{Backbone, BackboneOutput, SparseVar};

use crate::autograd::RowMap;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;
use crate::sparse::{ConvMode, Coord, CoordSet, Rulebook, SparseTensor};

/// How stride-16/32 features are brought onto stride-8 sites for the
/// segmentation branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    InverseDistance,
    NearestActive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem: usize,
    pub widths: [usize; 4],
    pub extra: [usize; 2],
    pub kernel_size: usize,
    pub block_depth: usize,
    pub hfcm_width: usize,
    pub interpolation: Interpolation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            stem: 16,
            widths: [16, 32, 64, 128],
            extra: [128, 128],
            kernel_size: 3,
            block_depth: 1,
            hfcm_width: 32,
            interpolation: Interpolation::InverseDistance,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.in_channels, self.stem, self.hfcm_width];
        if widths
            .iter()
            .chain(&self.widths)
            .chain(&self.extra)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size > 5 {
            return Err(Error::InvalidKernel(self.kernel_size));
        }
        Ok(())
    }

    /// Width of the fused stride-1 features.
    pub fn fused_width(&self) -> usize {
        4 * self.hfcm_width
    }

    pub fn bev_width(&self) -> usize {
        self.widths[3]
    }
}

/// Dense BEV layout at stride 8: cell row `(b·ny + y)·nx + x`.
#[derive(Clone, Debug)]
pub struct BevLayout<T> {
    pub batch: usize,
    pub nx: usize,
    pub ny: usize,
    pub map: Arc<RowMap<T>>,
    /// `true` where at least one voxel projects into the cell.
    pub occupied: Vec<bool>,
}

impl<T> BevLayout<T> {
    pub fn num_cells(&self) -> usize {
        self.batch * self.nx * self.ny
    }

    pub fn cell_index(&self, b: usize, x: usize, y: usize) -> usize {
        (b * self.ny + y) * self.nx + x
    }
}

/// Precomputed coordinate sets, rulebooks and row maps for one input.
pub struct BackboneGeometry<T> {
    pub spatial_shape: [u32; 3],
    pub batch: usize,
    /// Active sites at strides 1, 2, 4, 8, 16, 32.
    pub levels: [Arc<CoordSet>; 6],
    /// Submanifold rulebooks on strides 1..8.
    pub sub: [Arc<Rulebook>; 4],
    /// Strided rulebooks from level `i` to `i+1`.
    pub down: [Arc<Rulebook>; 5],
    /// Inverse rulebooks from level `i+1` back onto level `i` (i = 0..3).
    pub up: [Arc<Rulebook>; 3],
    pub det_coords: Arc<CoordSet>,
    pub det_map: Arc<RowMap<T>>,
    pub seg_map: Arc<RowMap<T>>,
    /// Nearest-ancestor maps onto stride 1 from strides 2, 4, 8.
    pub ancestors: [Arc<RowMap<T>>; 3],
    pub bev: BevLayout<T>,
}

impl<T: Real> BackboneGeometry<T> {
    pub fn build(
        input: &Arc<CoordSet>,
        spatial_shape: [u32; 3],
        batch: usize,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        let k = cfg.kernel_size;
        let sub0 = Arc::new(Rulebook::build(
            input,
            1,
            spatial_shape,
            k,
            ConvMode::Submanifold,
            1,
            None,
        )?);
        let mut levels = vec![input.clone()];
        let mut down = Vec::new();
        for s in 0..5 {
            let rb = Rulebook::build(
                &levels[s],
                1 << s,
                spatial_shape,
                k,
                ConvMode::Strided,
                2,
                None,
            )?;
            levels.push(rb.out_set().clone());
            down.push(Arc::new(rb));
        }
        let mut sub = vec![sub0];
        for s in 1..4 {
            sub.push(Arc::new(Rulebook::build(
                &levels[s],
                1 << s,
                spatial_shape,
                k,
                ConvMode::Submanifold,
                1,
                None,
            )?));
        }
        let mut up = Vec::new();
        for s in 0..3 {
            up.push(Arc::new(Rulebook::build(
                &levels[s + 1],
                2 << s,
                spatial_shape,
                k,
                ConvMode::Inverse,
                1,
                Some(&levels[s]),
            )?));
        }
        let (det_coords, det_map) = detection_union_map(&levels[3], &levels[4], &levels[5])?;
        let seg_map = segmentation_merge_map(&levels[3], &levels[4], &levels[5], cfg.interpolation);
        let ancestors = [1, 2, 3].map(|i| Arc::new(ancestor_map(&levels[0], &levels[i], 1 << i)));
        let bev = bev_layout(&det_coords, spatial_shape, batch)?;
        let levels: [Arc<CoordSet>; 6] = levels.try_into().expect("six levels");
        Ok(Self {
            spatial_shape,
            batch,
            levels,
            sub: sub.try_into().expect("four levels"),
            down: down.try_into().expect("five levels"),
            up: up.try_into().expect("three levels"),
            det_coords: Arc::new(det_coords),
            det_map: Arc::new(det_map),
            seg_map: Arc::new(seg_map),
            ancestors,
            bev,
        })
    }
}

fn scaled(c: &Coord, f: i32) -> Result<Coord> {
    let s = c.scale(f);
    s.key().ok_or(Error::CoordOverflow(s))?;
    Ok(s)
}

/// Union `P4 ∪ 2·P5 ∪ 4·P6` and a map summing coinciding rows in the order
/// F4, F5, F6 (sources 0, 1, 2).
pub fn detection_union_map<T: Real>(
    p4: &CoordSet,
    p5: &CoordSet,
    p6: &CoordSet,
) -> Result<(CoordSet, RowMap<T>)> {
    let mut all = p4.coords().to_vec();
    for c in p5.coords() {
        all.push(scaled(c, 2)?);
    }
    for c in p6.coords() {
        all.push(scaled(c, 4)?);
    }
    let union = CoordSet::from_unsorted_dedup(all)?;
    let mut map = RowMap::new();
    for c in union.coords() {
        if let Some(r) = p4.lookup(c) {
            map.push(0, r, T::one());
        }
        let [x, y, z] = c.xyz();
        if [x, y, z].iter().all(|v| v % 2 == 0) {
            if let Some(r) = p5.lookup(&c.floor_div(2)) {
                map.push(1, r, T::one());
            }
        }
        if [x, y, z].iter().all(|v| v % 4 == 0) {
            if let Some(r) = p6.lookup(&c.floor_div(4)) {
                map.push(2, r, T::one());
            }
        }
        map.finish_row();
    }
    Ok((union, map))
}

/// Interpolation weights for one fine site against a coarser level. The
/// site's continuous coarse position is `p / factor`; candidates are the
/// eight corner cells `floor(u) + {0,1}³`.
pub fn interpolation_weights(
    p: &Coord,
    coarse: &CoordSet,
    factor: i32,
    mode: Interpolation,
) -> Vec<(usize, f64)> {
    let u = p.xyz().map(|v| v as f64 / factor as f64);
    let base = p.floor_div(factor);
    let mut cands: Vec<(usize, f64)> = Vec::with_capacity(8);
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let c = base.offset(dx, dy, dz);
                if let Some(r) = coarse.lookup(&c) {
                    let cx = c.xyz();
                    let d2: f64 = (0..3).map(|a| (u[a] - cx[a] as f64).powi(2)).sum();
                    cands.push((r, d2.sqrt()));
                }
            }
        }
    }
    if cands.is_empty() {
        return cands;
    }
    if let Some(&(r, _)) = cands.iter().find(|c| c.1 == 0.0) {
        return vec![(r, 1.0)];
    }
    match mode {
        Interpolation::NearestActive => {
            let best = cands
                .iter()
                .copied()
                .fold(cands[0], |b, c| if c.1 < b.1 { c } else { b });
            vec![(best.0, 1.0)]
        }
        Interpolation::InverseDistance => {
            let total: f64 = cands.iter().map(|c| 1.0 / c.1).sum();
            cands
                .into_iter()
                .map(|(r, d)| (r, 1.0 / d / total))
                .collect()
        }
    }
}

/// Map realizing `F4 + F5' + F6'` on `P4` (sources 0 = F5, 1 = F6; the
/// base is F4).
pub fn segmentation_merge_map<T: Real>(
    p4: &CoordSet,
    p5: &CoordSet,
    p6: &CoordSet,
    mode: Interpolation,
) -> RowMap<T> {
    let mut map = RowMap::new();
    for p in p4.coords() {
        for (src, (set, f)) in [(p5, 2), (p6, 4)].into_iter().enumerate() {
            for (r, w) in interpolation_weights(p, set, f, mode) {
                map.push(src, r, T::c(w));
            }
        }
        map.finish_row();
    }
    map
}

/// Each fine site reads the coarse site containing it (zero if inactive).
pub fn ancestor_map<T: Real>(fine: &CoordSet, coarse: &CoordSet, factor: i32) -> RowMap<T> {
    let mut map = RowMap::new();
    for c in fine.coords() {
        if let Some(r) = coarse.lookup(&c.floor_div(factor)) {
            map.push(0, r, T::one());
        }
        map.finish_row();
    }
    map
}

pub fn bev_layout<T: Real>(
    coords: &CoordSet,
    spatial_shape: [u32; 3],
    batch: usize,
) -> Result<BevLayout<T>> {
    let nx = (spatial_shape[0] / 8) as usize;
    let ny = (spatial_shape[1] / 8) as usize;
    let cells = batch * nx * ny;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (r, c) in coords.coords().iter().enumerate() {
        let [x, y, _] = c.xyz();
        let b = c.batch as usize;
        if b >= batch || x < 0 || y < 0 || x as usize >= nx || y as usize >= ny {
            return Err(Error::CoordOutOfBounds {
                coord: *c,
                bound: [nx as u32, ny as u32, spatial_shape[2] / 8],
            });
        }
        members[(b * ny + y as usize) * nx + x as usize].push(r);
    }
    let mut map = RowMap::new();
    let mut occupied = Vec::with_capacity(cells);
    for m in &members {
        for &r in m {
            map.push(0, r, T::one());
        }
        occupied.push(!m.is_empty());
        map.finish_row();
    }
    Ok(BevLayout {
        batch,
        nx,
        ny,
        map: Arc::new(map),
        occupied,
    })
}

fn expect_stride<T: Real>(x: &SparseTensor<T>, stride: u32) -> Result<()> {
    if x.stride() != stride {
        return Err(Error::Stride {
            expected: stride,
            actual: x.stride(),
        });
    }
    Ok(())
}

fn check_widths<T: Real>(
    f4: &SparseTensor<T>,
    f5: &SparseTensor<T>,
    f6: &SparseTensor<T>,
) -> Result<()> {
    expect_stride(f4, 8)?;
    expect_stride(f5, 16)?;
    expect_stride(f6, 32)?;
    if f5.channels() != f4.channels() || f6.channels() != f4.channels() {
        return Err(Error::shape("merge inputs need equal channel widths"));
    }
    Ok(())
}

/// Coordinate union with summed features at stride 8.
pub fn hiam_detection_merge<T: Real>(
    f4: &SparseTensor<T>,
    f5: &SparseTensor<T>,
    f6: &SparseTensor<T>,
) -> Result<SparseTensor<T>> {
    check_widths(f4, f5, f6)?;
    let (coords, map) = detection_union_map::<T>(f4.coord_set(), f5.coord_set(), f6.coord_set())?;
    let feats = map.apply(
        None,
        &[f4.features(), f5.features(), f6.features()],
        f4.channels(),
    )?;
    SparseTensor::from_set(Arc::new(coords), feats, 8, f4.spatial_shape())
}

/// Interpolating merge that keeps exactly the stride-8 sites.
pub fn hiam_segmentation_merge<T: Real>(
    f4: &SparseTensor<T>,
    f5: &SparseTensor<T>,
    f6: &SparseTensor<T>,
    mode: Interpolation,
) -> Result<SparseTensor<T>> {
    check_widths(f4, f5, f6)?;
    let map = segmentation_merge_map::<T>(f4.coord_set(), f5.coord_set(), f6.coord_set(), mode);
    let feats = map.apply(
        Some(f4.features()),
        &[f5.features(), f6.features()],
        f4.channels(),
    )?;
    f4.with_features(feats)
}

/// Sum over z of stride-8 features.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMap<T> {
    pub batch: usize,
    pub nx: usize,
    pub ny: usize,
    /// One row per cell, `(b·ny + y)·nx + x`.
    pub features: Mat<T>,
    pub occupied: Vec<bool>,
}

impl<T: Real> BevMap<T> {
    pub fn cell(&self, b: usize, x: usize, y: usize) -> &[T] {
        self.features.row((b * self.ny + y) * self.nx + x)
    }
}

pub fn bev_project<T: Real>(fd: &SparseTensor<T>, batch: usize) -> Result<BevMap<T>> {
    expect_stride(fd, 8)?;
    let layout = bev_layout::<T>(fd.coord_set(), fd.spatial_shape(), batch)?;
    let features = layout.map.apply(None, &[fd.features()], fd.channels())?;
    Ok(BevMap {
        batch,
        nx: layout.nx,
        ny: layout.ny,
        features,
        occupied: layout.occupied,
    })
}

/// Broadcasts a coarse tensor onto fine sites by nearest ancestor.
pub fn upscale_to<T: Real>(coarse: &SparseTensor<T>, fine: &SparseTensor<T>) -> Result<Mat<T>> {
    if coarse.stride() < fine.stride() || !coarse.stride().is_multiple_of(fine.stride()) {
        return Err(Error::Stride {
            expected: fine.stride(),
            actual: coarse.stride(),
        });
    }
    let f = (coarse.stride() / fine.stride()) as i32;
    ancestor_map::<T>(fine.coord_set(), coarse.coord_set(), f).apply(
        None,
        &[coarse.features()],
        coarse.channels(),
    )
}
