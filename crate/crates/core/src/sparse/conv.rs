use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::rulebook::Rulebook;
use super::tensor::SparseTensor;
use crate::error::{Error, Result};
use crate::mat::{axpy_row, Mat};
use crate::real::Real;

/// Kernel stored as `k³·C_in × C_out`: the block for offset `o` spans rows
/// `o·C_in .. (o+1)·C_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T> {
    pub kernel: Mat<T>,
    pub bias: Vec<T>,
    pub kernel_size: usize,
}

impl<T: Real> ConvWeights<T> {
    pub fn new(kernel: Mat<T>, bias: Vec<T>, kernel_size: usize) -> Result<Self> {
        let vol = kernel_size.pow(3);
        if !kernel.rows().is_multiple_of(vol) || bias.len() != kernel.cols() {
            return Err(Error::shape(format!(
                "kernel {}x{} / bias {} inconsistent with k={kernel_size}",
                kernel.rows(),
                kernel.cols(),
                bias.len()
            )));
        }
        if !kernel.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::shape("non-finite conv weights"));
        }
        Ok(Self {
            kernel,
            bias,
            kernel_size,
        })
    }

    pub fn zeros(kernel_size: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel: Mat::zeros(kernel_size.pow(3) * c_in, c_out),
            bias: vec![T::zero(); c_out],
            kernel_size,
        }
    }

    /// Center tap = identity, all other taps zero.
    pub fn identity(kernel_size: usize, channels: usize) -> Self {
        let mut w = Self::zeros(kernel_size, channels, channels);
        let center = kernel_size.pow(3) / 2;
        for c in 0..channels {
            w.kernel.set(center * channels + c, c, T::one());
        }
        w
    }

    pub fn random(kernel_size: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (kernel_size.pow(3) * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..kernel_size.pow(3) * c_in * c_out)
            .map(|_| T::c(normal.sample(rng)))
            .collect();
        Self {
            kernel: Mat::from_vec(kernel_size.pow(3) * c_in, c_out, data).expect("sized"),
            bias: vec![T::zero(); c_out],
            kernel_size,
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernel.rows() / self.kernel_size.pow(3)
    }

    pub fn c_out(&self) -> usize {
        self.kernel.cols()
    }
}

fn check_kernel<T: Real>(x: &Mat<T>, rb: &Rulebook, kernel: &Mat<T>) -> Result<usize> {
    let vol = rb.kernel_volume();
    if !kernel.rows().is_multiple_of(vol) {
        return Err(Error::shape(format!(
            "kernel has {} rows, not a multiple of {vol}",
            kernel.rows()
        )));
    }
    let c_in = kernel.rows() / vol;
    if x.cols() != c_in {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {c_in}",
            x.cols()
        )));
    }
    if x.rows() != rb.num_in() {
        return Err(Error::shape(format!(
            "input has {} rows, rulebook expects {}",
            x.rows(),
            rb.num_in()
        )));
    }
    Ok(c_in)
}

/// Gather-scatter convolution over feature rows. Offsets are visited in
/// lexicographic order and pairs in ascending input row, so every output
/// row accumulates in a fixed order.
pub fn conv_forward_raw<T: Real>(
    x: &Mat<T>,
    rb: &Rulebook,
    kernel: &Mat<T>,
    bias: &[T],
) -> Result<Mat<T>> {
    let c_in = check_kernel(x, rb, kernel)?;
    let c_out = kernel.cols();
    if bias.len() != c_out {
        return Err(Error::shape("bias width mismatch"));
    }
    let mut out = Mat::zeros(rb.num_out(), c_out);
    for j in 0..rb.num_out() {
        out.row_mut(j).copy_from_slice(bias);
    }
    let kdata = kernel.as_slice();
    for (o, pairs) in rb.rules().iter().enumerate() {
        let w = &kdata[o * c_in * c_out..(o + 1) * c_in * c_out];
        for &(i, j) in pairs {
            axpy_row(out.row_mut(j as usize), x.row(i as usize), w, c_out);
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub grad_x: Mat<T>,
    pub grad_kernel: Mat<T>,
    pub grad_bias: Vec<T>,
}

/// Exact adjoint of [`conv_forward_raw`].
pub fn conv_backward_raw<T: Real>(
    grad_out: &Mat<T>,
    x: &Mat<T>,
    rb: &Rulebook,
    kernel: &Mat<T>,
) -> Result<ConvGrads<T>> {
    let c_in = check_kernel(x, rb, kernel)?;
    let c_out = kernel.cols();
    if grad_out.rows() != rb.num_out() || grad_out.cols() != c_out {
        return Err(Error::shape(format!(
            "grad_out {}x{} vs output {}x{c_out}",
            grad_out.rows(),
            grad_out.cols(),
            rb.num_out()
        )));
    }
    let mut grad_x = Mat::zeros(x.rows(), c_in);
    let mut grad_kernel = Mat::zeros(kernel.rows(), c_out);
    let kdata = kernel.as_slice();
    for (o, pairs) in rb.rules().iter().enumerate() {
        let base = o * c_in * c_out;
        let w = &kdata[base..base + c_in * c_out];
        for &(i, j) in pairs {
            let g = grad_out.row(j as usize);
            let gx = grad_x.row_mut(i as usize);
            for (ci, gxv) in gx.iter_mut().enumerate() {
                let wr = &w[ci * c_out..(ci + 1) * c_out];
                let mut acc = T::zero();
                for (&gv, &wv) in g.iter().zip(wr) {
                    acc += gv * wv;
                }
                *gxv += acc;
            }
            let xi = x.row(i as usize);
            let gk = &mut grad_kernel.as_mut_slice()[base..base + c_in * c_out];
            axpy_outer(gk, xi, g);
        }
    }
    Ok(ConvGrads {
        grad_x,
        grad_kernel,
        grad_bias: grad_out.col_sums(),
    })
}

#[inline]
fn axpy_outer<T: Real>(out: &mut [T], a: &[T], b: &[T]) {
    let n = b.len();
    for (ci, &av) in a.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        for (o, &bv) in out[ci * n..(ci + 1) * n].iter_mut().zip(b) {
            *o += av * bv;
        }
    }
}

/// Applies a rulebook to a sparse tensor. The output carries the
/// rulebook's coordinate set and output stride.
pub fn conv_forward<T: Real>(
    x: &SparseTensor<T>,
    rb: &Rulebook,
    w: &ConvWeights<T>,
) -> Result<SparseTensor<T>> {
    if w.kernel_size != rb.kernel_size() {
        return Err(Error::shape("kernel size does not match rulebook"));
    }
    if x.stride() != rb.in_stride() {
        return Err(Error::Stride {
            expected: rb.in_stride(),
            actual: x.stride(),
        });
    }
    let out = conv_forward_raw(x.features(), rb, &w.kernel, &w.bias)?;
    SparseTensor::from_set(
        rb.out_set().clone(),
        out,
        rb.out_stride(),
        rb.spatial_shape(),
    )
}

pub fn conv_backward<T: Real>(
    grad_out: &Mat<T>,
    x: &SparseTensor<T>,
    rb: &Rulebook,
    w: &ConvWeights<T>,
) -> Result<(Mat<T>, ConvWeights<T>)> {
    let g = conv_backward_raw(grad_out, x.features(), rb, &w.kernel)?;
    Ok((
        g.grad_x,
        ConvWeights {
            kernel: g.grad_kernel,
            bias: g.grad_bias,
            kernel_size: w.kernel_size,
        },
    ))
}
