//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a [`Mat`]; sparse tensors ride along as their
//! feature matrices while coordinates live outside the tape. Loss terms
//! enter as [`Tape::scalar`] nodes that carry their own local gradients,
//! so the tape only needs the handful of structural ops the network uses.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;
use crate::sparse::{conv_backward_raw, conv_forward_raw, Rulebook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Linear row operator: `out[j] = Σ w · source[src][row]` over the entries
/// listed for output row `j`, in list order.
#[derive(Clone, Debug, Default)]
pub struct RowMap<T> {
    offsets: Vec<usize>,
    entries: Vec<(u16, u32, T)>,
}

impl<T: Real> RowMap<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends one entry to the row currently being built.
    pub fn push(&mut self, src: usize, row: usize, w: T) {
        self.entries.push((src as u16, row as u32, w));
    }

    /// Closes the current output row.
    pub fn finish_row(&mut self) {
        self.offsets.push(self.entries.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, j: usize) -> &[(u16, u32, T)] {
        &self.entries[self.offsets[j]..self.offsets[j + 1]]
    }

    /// Forward application on plain matrices.
    pub fn apply(&self, base: Option<&Mat<T>>, sources: &[&Mat<T>], cols: usize) -> Result<Mat<T>> {
        for s in sources {
            if s.cols() != cols {
                return Err(Error::shape(format!(
                    "row map source has {} columns, expected {cols}",
                    s.cols()
                )));
            }
        }
        let mut out = match base {
            Some(b) => {
                if b.rows() != self.out_rows() || b.cols() != cols {
                    return Err(Error::shape("row map base shape mismatch"));
                }
                b.clone()
            }
            None => Mat::zeros(self.out_rows(), cols),
        };
        for j in 0..self.out_rows() {
            let o = out.row_mut(j);
            for &(s, r, w) in self.row(j) {
                let src = sources
                    .get(s as usize)
                    .ok_or_else(|| Error::shape("row map source index"))?;
                if r as usize >= src.rows() {
                    return Err(Error::shape("row map row index out of range"));
                }
                for (ov, &xv) in o.iter_mut().zip(src.row(r as usize)) {
                    *ov += w * xv;
                }
            }
        }
        Ok(out)
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        rb: Arc<Rulebook>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Affine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Gather {
        base: Option<Var>,
        sources: Vec<Var>,
        map: Arc<RowMap<T>>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Mat<T>>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Records non-differentiable decisions (activation patterns, sort orders,
/// thresholded masks) so finite-difference checks can detect when a
/// perturbation crossed a kink.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchSignature(u64);

impl BranchSignature {
    #[inline]
    pub fn mix(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(17);
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    track: bool,
    signature: BranchSignature,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
            signature: BranchSignature::default(),
        }
    }

    /// A tape that fingerprints every branch decision it sees.
    pub fn tracking() -> Self {
        Self {
            track: true,
            ..Self::new()
        }
    }

    pub fn tracks_branches(&self) -> bool {
        self.track
    }

    pub fn signature(&self) -> BranchSignature {
        self.signature
    }

    pub fn note_branch(&mut self, v: u64) {
        if self.track {
            self.signature.mix(v);
        }
    }

    pub fn note_bits(&mut self, bits: impl IntoIterator<Item = bool>) {
        if self.track {
            let mut word = 0u64;
            let mut n = 0;
            for b in bits {
                word = (word << 1) | b as u64;
                n += 1;
                if n == 64 {
                    self.signature.mix(word);
                    word = 0;
                    n = 0;
                }
            }
            self.signature.mix(word ^ (n as u64) << 58);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, x: Var, rb: Arc<Rulebook>, w: Var, b: Var) -> Result<Var> {
        let out = conv_forward_raw(self.value(x), &rb, self.value(w), self.value(b).as_slice())?;
        Ok(self.push(out, Op::Conv { x, w, b, rb }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b).as_slice());
        if let Some(bias) = bias {
            if bias.len() != self.value(w).cols() {
                return Err(Error::shape("linear bias width"));
            }
        }
        let out = self.value(x).matmul(self.value(w), bias)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = self.value(scale).as_slice();
        let t = self.value(shift).as_slice();
        if s.len() != xv.cols() || t.len() != xv.cols() {
            return Err(Error::shape("affine width"));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for ((o, &sv), &tv) in out.row_mut(i).iter_mut().zip(s).zip(t) {
                *o = *o * sv + tv;
            }
        }
        Ok(self.push(out, Op::Affine { x, scale, shift }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        if self.track {
            let bits: Vec<bool> = self
                .value(x)
                .as_slice()
                .iter()
                .map(|&v| v > T::zero())
                .collect();
            self.note_bits(bits);
        }
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(format!(
                "add {}x{} + {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn gather(
        &mut self,
        base: Option<Var>,
        sources: &[Var],
        map: Arc<RowMap<T>>,
        cols: usize,
    ) -> Result<Var> {
        let srcs: Vec<&Mat<T>> = sources.iter().map(|&s| self.value(s)).collect();
        let out = map.apply(base.map(|b| self.value(b)), &srcs, cols)?;
        Ok(self.push(
            out,
            Op::Gather {
                base,
                sources: sources.to_vec(),
                map,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat row mismatch"));
            }
            for i in 0..rows {
                out.row_mut(i)[c0..c0 + v.cols()].copy_from_slice(v.row(i));
            }
            c0 += v.cols();
        }
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// A 1×1 node whose derivative w.r.t. each input is given up front.
    pub fn scalar(&mut self, value: T, inputs: &[Var], grads: Vec<Mat<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::shape("scalar node needs one gradient per input"));
        }
        for (&i, g) in inputs.iter().zip(&grads) {
            if !self.value(i).same_shape(g) {
                return Err(Error::shape("scalar node gradient shape"));
            }
        }
        Ok(self.push(
            Mat::filled(1, 1, value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
        ))
    }

    /// Reverse sweep from a scalar output. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).rows() != 1 || self.value(root).cols() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Conv { x, w, b, rb } => {
                    let cg = conv_backward_raw(&g, self.value(*x), rb, self.value(*w))?;
                    accumulate(&mut grads, *x, cg.grad_x);
                    accumulate(&mut grads, *w, cg.grad_kernel);
                    accumulate(
                        &mut grads,
                        *b,
                        Mat::from_vec(1, cg.grad_bias.len(), cg.grad_bias)?,
                    );
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let gx = g.matmul(&wv.transpose(), None)?;
                    let gw = xv.transpose().matmul(&g, None)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let s = g.col_sums();
                        accumulate(&mut grads, *b, Mat::from_vec(1, s.len(), s)?);
                    }
                }
                Op::Affine { x, scale, shift } => {
                    let xv = self.value(*x);
                    let s = self.value(*scale).as_slice();
                    let cols = xv.cols();
                    let mut gx = g.clone();
                    let mut gs = vec![T::zero(); cols];
                    for i in 0..g.rows() {
                        let xr = xv.row(i);
                        for (c, gv) in gx.row_mut(i).iter_mut().enumerate() {
                            gs[c] += *gv * xr[c];
                            *gv *= s[c];
                        }
                    }
                    let gt = g.col_sums();
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *scale, Mat::from_vec(1, cols, gs)?);
                    accumulate(&mut grads, *shift, Mat::from_vec(1, cols, gt)?);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Gather { base, sources, map } => {
                    let mut gsrc: Vec<Mat<T>> = sources
                        .iter()
                        .map(|&s| Mat::zeros(self.value(s).rows(), g.cols()))
                        .collect();
                    for j in 0..map.out_rows() {
                        let gr = g.row(j);
                        for &(s, r, w) in map.row(j) {
                            for (o, &gv) in gsrc[s as usize].row_mut(r as usize).iter_mut().zip(gr)
                            {
                                *o += w * gv;
                            }
                        }
                    }
                    for (&s, gs) in sources.iter().zip(gsrc) {
                        accumulate(&mut grads, s, gs);
                    }
                    if let Some(b) = base {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Concat { parts } => {
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Mat::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[c0..c0 + cols]);
                        }
                        c0 += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Scalar {
                    inputs,
                    grads: local,
                } => {
                    let up = g.get(0, 0);
                    for (&i, lg) in inputs.iter().zip(local) {
                        accumulate(&mut grads, i, lg.map(|v| v * up));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zeros of the leaf's shape when nothing flowed.
    pub fn of(&self, tape: &Tape<T>, v: Var) -> Mat<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(tape.value(v).rows(), tape.value(v).cols()),
        }
    }
}
