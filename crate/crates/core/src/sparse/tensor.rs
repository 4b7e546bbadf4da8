use std::sync::Arc;

use super::coord::{Coord, CoordSet};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

/// Active voxel sites with one feature row each, at a power-of-two stride
/// relative to a base grid of `spatial_shape` cells.
#[derive(Clone, Debug)]
pub struct SparseTensor<T> {
    coords: Arc<CoordSet>,
    features: Mat<T>,
    stride: u32,
    spatial_shape: [u32; 3],
}

pub(crate) fn check_stride(stride: u32, shape: [u32; 3]) -> Result<()> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::shape(format!(
            "stride {stride} is not a power of two"
        )));
    }
    if shape.iter().any(|&s| s == 0 || s % stride != 0) {
        return Err(Error::shape(format!(
            "stride {stride} does not divide spatial shape {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn check_bounds(set: &CoordSet, stride: u32, shape: [u32; 3]) -> Result<()> {
    let bound = [shape[0] / stride, shape[1] / stride, shape[2] / stride];
    for c in set.coords() {
        let ok = c
            .xyz()
            .iter()
            .zip(bound)
            .all(|(&v, b)| v >= 0 && (v as u32) < b);
        if !ok {
            return Err(Error::CoordOutOfBounds { coord: *c, bound });
        }
    }
    Ok(())
}

impl<T: Real> SparseTensor<T> {
    /// Builds a tensor from unsorted coordinates; rows of `features` follow
    /// the input order and are permuted into canonical order.
    pub fn new(
        coords: &[Coord],
        features: Mat<T>,
        stride: u32,
        spatial_shape: [u32; 3],
    ) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::shape(format!(
                "{} coords but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        check_stride(stride, spatial_shape)?;
        let (set, perm) = CoordSet::build(coords)?;
        check_bounds(&set, stride, spatial_shape)?;
        let mut sorted = Mat::zeros(coords.len(), features.cols());
        for (row, &src) in perm.iter().enumerate() {
            sorted.row_mut(row).copy_from_slice(features.row(src));
        }
        Ok(Self {
            coords: Arc::new(set),
            features: sorted,
            stride,
            spatial_shape,
        })
    }

    /// Attaches features to an existing canonical coordinate set.
    pub fn from_set(
        coords: Arc<CoordSet>,
        features: Mat<T>,
        stride: u32,
        spatial_shape: [u32; 3],
    ) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::shape(format!(
                "{} coords but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        check_stride(stride, spatial_shape)?;
        Ok(Self {
            coords,
            features,
            stride,
            spatial_shape,
        })
    }

    pub fn empty(channels: usize, stride: u32, spatial_shape: [u32; 3]) -> Result<Self> {
        Self::from_set(
            Arc::new(CoordSet::default()),
            Mat::zeros(0, channels),
            stride,
            spatial_shape,
        )
    }

    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn coords(&self) -> &[Coord] {
        self.coords.coords()
    }

    pub fn features(&self) -> &Mat<T> {
        &self.features
    }

    pub fn into_features(self) -> Mat<T> {
        self.features
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn spatial_shape(&self) -> [u32; 3] {
        self.spatial_shape
    }

    /// Grid extent at this tensor's stride.
    pub fn grid_extent(&self) -> [u32; 3] {
        let s = self.stride;
        [
            self.spatial_shape[0] / s,
            self.spatial_shape[1] / s,
            self.spatial_shape[2] / s,
        ]
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self, c: &Coord) -> Option<usize> {
        self.coords.lookup(c)
    }

    pub fn with_features(&self, features: Mat<T>) -> Result<Self> {
        Self::from_set(
            self.coords.clone(),
            features,
            self.stride,
            self.spatial_shape,
        )
    }

    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor {
            coords: self.coords.clone(),
            features: self.features.cast(),
            stride: self.stride,
            spatial_shape: self.spatial_shape,
        }
    }
}
