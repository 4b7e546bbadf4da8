use std::fmt;
use std::sync::Arc;

use super::coord::{Coord, CoordSet};
use super::tensor::{check_bounds, check_stride, SparseTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Output sites are exactly the input sites.
    Submanifold,
    /// Stride-2 downsampling; outputs at the floor-divided input sites.
    Strided,
    /// Transposed stride-2 convolution onto a caller-supplied finer set.
    Inverse,
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvMode::Submanifold => "submanifold",
            ConvMode::Strided => "strided",
            ConvMode::Inverse => "inverse",
        })
    }
}

impl ConvMode {
    fn name(self) -> &'static str {
        match self {
            ConvMode::Submanifold => "submanifold",
            ConvMode::Strided => "strided",
            ConvMode::Inverse => "inverse",
        }
    }
}

/// Kernel offsets in lexicographic `(dz, dy, dx)` order.
pub fn kernel_offsets(k: usize) -> Vec<[i32; 3]> {
    let r = (k / 2) as i32;
    let mut v = Vec::with_capacity(k * k * k);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}

/// Per-offset `(in_row, out_row)` pair lists driving gather-scatter
/// convolution. Each list is sorted by `in_row`.
#[derive(Clone, Debug)]
pub struct Rulebook {
    kernel_size: usize,
    mode: ConvMode,
    rules: Vec<Vec<(u32, u32)>>,
    num_in: usize,
    out: Arc<CoordSet>,
    in_stride: u32,
    out_stride: u32,
    spatial_shape: [u32; 3],
}

impl Rulebook {
    pub fn build(
        input: &Arc<CoordSet>,
        in_stride: u32,
        spatial_shape: [u32; 3],
        kernel_size: usize,
        mode: ConvMode,
        stride: u32,
        target: Option<&Arc<CoordSet>>,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) || kernel_size > 5 {
            return Err(Error::InvalidKernel(kernel_size));
        }
        let expected_stride = if mode == ConvMode::Strided { 2 } else { 1 };
        if stride != expected_stride {
            return Err(Error::InvalidStride {
                stride,
                mode: mode.name(),
            });
        }
        match (mode, target) {
            (ConvMode::Inverse, None) => return Err(Error::MissingTarget),
            (ConvMode::Inverse, Some(_)) => {}
            (_, Some(_)) => return Err(Error::UnexpectedTarget),
            _ => {}
        }
        check_stride(in_stride, spatial_shape)?;
        let offsets = kernel_offsets(kernel_size);
        let mut rules = vec![Vec::new(); offsets.len()];
        let (out, out_stride) = match mode {
            ConvMode::Submanifold => {
                for (o, d) in offsets.iter().enumerate() {
                    for (j, c) in input.coords().iter().enumerate() {
                        if let Some(i) = input.lookup(&c.offset(d[0], d[1], d[2])) {
                            rules[o].push((i as u32, j as u32));
                        }
                    }
                }
                (input.clone(), in_stride)
            }
            ConvMode::Strided => {
                let out_stride = in_stride * 2;
                check_stride(out_stride, spatial_shape)?;
                let out = Arc::new(CoordSet::from_unsorted_dedup(
                    input.coords().iter().map(|c| c.floor_div(2)),
                )?);
                for (o, d) in offsets.iter().enumerate() {
                    for (i, c) in input.coords().iter().enumerate() {
                        // c = 2·site + d
                        let rel = c.offset(-d[0], -d[1], -d[2]);
                        if rel.xyz().iter().any(|v| v.rem_euclid(2) != 0) {
                            continue;
                        }
                        if let Some(j) = out.lookup(&rel.floor_div(2)) {
                            rules[o].push((i as u32, j as u32));
                        }
                    }
                }
                (out, out_stride)
            }
            ConvMode::Inverse => {
                if in_stride < 2 {
                    return Err(Error::InvalidStride {
                        stride: in_stride,
                        mode: mode.name(),
                    });
                }
                let target = target.expect("checked above");
                let out_stride = in_stride / 2;
                check_bounds(target, out_stride, spatial_shape)?;
                for (o, d) in offsets.iter().enumerate() {
                    for (j, t) in target.coords().iter().enumerate() {
                        // mirror of the strided rule t = 2·site + d
                        let rel = t.offset(-d[0], -d[1], -d[2]);
                        if rel.xyz().iter().any(|v| v.rem_euclid(2) != 0) {
                            continue;
                        }
                        if let Some(i) = input.lookup(&rel.floor_div(2)) {
                            rules[o].push((i as u32, j as u32));
                        }
                    }
                }
                (target.clone(), out_stride)
            }
        };
        for r in &mut rules {
            r.sort_unstable();
        }
        Ok(Self {
            kernel_size,
            mode,
            rules,
            num_in: input.len(),
            out,
            in_stride,
            out_stride,
            spatial_shape,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn rules(&self) -> &[Vec<(u32, u32)>] {
        &self.rules
    }

    pub fn num_pairs(&self) -> usize {
        self.rules.iter().map(Vec::len).sum()
    }

    pub fn num_in(&self) -> usize {
        self.num_in
    }

    pub fn num_out(&self) -> usize {
        self.out.len()
    }

    pub fn out_set(&self) -> &Arc<CoordSet> {
        &self.out
    }

    pub fn out_coords(&self) -> &[Coord] {
        self.out.coords()
    }

    pub fn in_stride(&self) -> u32 {
        self.in_stride
    }

    pub fn out_stride(&self) -> u32 {
        self.out_stride
    }

    pub fn spatial_shape(&self) -> [u32; 3] {
        self.spatial_shape
    }
}

/// Rulebook for a tensor; `stride` must be 2 for strided mode and 1 otherwise.
pub fn build_rulebook<T: crate::real::Real>(
    x: &SparseTensor<T>,
    kernel_size: usize,
    mode: ConvMode,
    stride: u32,
    target: Option<&Arc<CoordSet>>,
) -> Result<Rulebook> {
    Rulebook::build(
        x.coord_set(),
        x.stride(),
        x.spatial_shape(),
        kernel_size,
        mode,
        stride,
        target,
    )
}
