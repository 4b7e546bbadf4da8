use super::coord::Coord;
use super::tensor::SparseTensor;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

/// Largest dense grid the oracle bridge will allocate, in scalar entries.
pub const MAX_DENSE_ENTRIES: usize = 1 << 26;

/// Dense `batch × C × X × Y × Z` array, used only as a test oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid<T> {
    pub batch: usize,
    pub channels: usize,
    pub extent: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> DenseGrid<T> {
    pub fn zeros(batch: usize, channels: usize, extent: [usize; 3]) -> Result<Self> {
        let entries = batch
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(extent[0]))
            .and_then(|v| v.checked_mul(extent[1]))
            .and_then(|v| v.checked_mul(extent[2]))
            .unwrap_or(usize::MAX);
        if entries > MAX_DENSE_ENTRIES {
            return Err(Error::OracleTooLarge { cells: entries });
        }
        Ok(Self {
            batch,
            channels,
            extent,
            data: vec![T::zero(); entries],
        })
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        (((b * self.channels + c) * self.extent[0] + x) * self.extent[1] + y) * self.extent[2] + z
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.idx(b, c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, x: usize, y: usize, z: usize, v: T) {
        let i = self.idx(b, c, x, y, z);
        self.data[i] = v;
    }
}

/// Scatters active sites into a dense grid at the tensor's stride.
/// `batch` may exceed the largest batch index present (empty tensors).
pub fn densify<T: Real>(x: &SparseTensor<T>, batch: usize) -> Result<DenseGrid<T>> {
    let e = x.grid_extent();
    let batch = batch.max(x.coord_set().num_batches());
    let mut g = DenseGrid::zeros(
        batch,
        x.channels(),
        [e[0] as usize, e[1] as usize, e[2] as usize],
    )?;
    for (row, c) in x.coords().iter().enumerate() {
        for (ch, &v) in x.features().row(row).iter().enumerate() {
            g.set(
                c.batch as usize,
                ch,
                c.x as usize,
                c.y as usize,
                c.z as usize,
                v,
            );
        }
    }
    Ok(g)
}

/// Inverse of [`densify`]: every site with any nonzero channel is active.
pub fn sparsify<T: Real>(g: &DenseGrid<T>, stride: u32) -> Result<SparseTensor<T>> {
    let [ex, ey, ez] = g.extent;
    let shape = [ex as u32 * stride, ey as u32 * stride, ez as u32 * stride];
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    for b in 0..g.batch {
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    let f: Vec<T> = (0..g.channels).map(|c| g.get(b, c, x, y, z)).collect();
                    if f.iter().any(|&v| v != T::zero()) {
                        coords.push(Coord::new(b as u32, x as i32, y as i32, z as i32));
                        rows.extend(f);
                    }
                }
            }
        }
    }
    let feats = Mat::from_vec(coords.len(), g.channels, rows)?;
    SparseTensor::new(&coords, feats, stride, shape)
}
