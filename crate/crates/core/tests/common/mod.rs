//! Reference implementations used as test oracles. None of these call into
//! the library's own kernels; they work on plain arrays with explicit loops.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use voxmt::sparse::{ConvMode, Coord};
use voxmt::Box9;

/// Dense `batch × X × Y × Z × C` array of `f64`, zero outside active sites.
pub struct DenseVolume {
    pub batch: usize,
    pub ext: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseVolume {
    pub fn zeros(batch: usize, ext: [usize; 3], channels: usize) -> Self {
        Self {
            batch,
            ext,
            channels,
            data: vec![0.0; batch * ext[0] * ext[1] * ext[2] * channels],
        }
    }

    fn offset(&self, b: usize, p: [i64; 3]) -> Option<usize> {
        if b >= self.batch {
            return None;
        }
        let mut idx = b;
        for (&v, &e) in p.iter().zip(&self.ext) {
            if v < 0 || v as usize >= e {
                return None;
            }
            idx = idx * e + v as usize;
        }
        Some(idx * self.channels)
    }

    pub fn at(&self, b: usize, p: [i64; 3]) -> Option<&[f64]> {
        self.offset(b, p).map(|o| &self.data[o..o + self.channels])
    }

    pub fn set(&mut self, b: usize, p: [i64; 3], v: &[f64]) {
        let o = self.offset(b, p).expect("site inside volume");
        self.data[o..o + self.channels].copy_from_slice(v);
    }
}

/// Conv weights as `k³` blocks of `c_in × c_out`, offset index
/// `((dz + r)·k + (dy + r))·k + (dx + r)`.
pub struct DenseKernel {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseKernel {
    fn tap(&self, d: [i64; 3]) -> usize {
        let r = (self.k / 2) as i64;
        let k = self.k as i64;
        (((d[2] + r) * k + (d[1] + r)) * k + (d[0] + r)) as usize
    }

    fn accumulate(&self, acc: &mut [f64], d: [i64; 3], x: &[f64]) {
        let base = self.tap(d) * self.c_in * self.c_out;
        for (ci, &xv) in x.iter().enumerate() {
            let row = &self.w[base + ci * self.c_out..base + (ci + 1) * self.c_out];
            for (a, &wv) in acc.iter_mut().zip(row) {
                *a += xv * wv;
            }
        }
    }

    fn offsets(&self) -> Vec<[i64; 3]> {
        let r = (self.k / 2) as i64;
        let mut v = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    v.push([dx, dy, dz]);
                }
            }
        }
        v
    }
}

pub fn xyz(c: &Coord) -> [i64; 3] {
    [c.x as i64, c.y as i64, c.z as i64]
}

/// Dense convolution restricted to the active output sites of `mode`.
///
/// * submanifold: `out[p] = b + Σ_d in[p + d]·W[d]` at every input site.
/// * strided: `out[o] = b + Σ_d in[2o + d]·W[d]` at every `o = ⌊c/2⌋`.
/// * inverse: `out[t] = b + Σ_{d : t − d even} in[(t − d)/2]·W[d]` at every target.
///
/// `ext` is the grid extent of the input level.
pub fn dense_conv(
    mode: ConvMode,
    coords: &[Coord],
    feats: &[Vec<f64>],
    ext: [usize; 3],
    kernel: &DenseKernel,
    target: &[Coord],
) -> HashMap<Coord, Vec<f64>> {
    let batch = coords
        .iter()
        .chain(target)
        .map(|c| c.batch as usize + 1)
        .max()
        .unwrap_or(1);
    let mut vol = DenseVolume::zeros(batch, ext, kernel.c_in);
    for (c, f) in coords.iter().zip(feats) {
        vol.set(c.batch as usize, xyz(c), f);
    }
    let sites: BTreeSet<Coord> = match mode {
        ConvMode::Submanifold => coords.iter().copied().collect(),
        ConvMode::Strided => coords
            .iter()
            .map(|c| {
                Coord::new(
                    c.batch,
                    c.x.div_euclid(2),
                    c.y.div_euclid(2),
                    c.z.div_euclid(2),
                )
            })
            .collect(),
        ConvMode::Inverse => target.iter().copied().collect(),
    };
    let mut out = HashMap::new();
    for s in sites {
        let p = xyz(&s);
        let mut acc = kernel.bias.clone();
        for d in kernel.offsets() {
            let src = match mode {
                ConvMode::Submanifold => Some([p[0] + d[0], p[1] + d[1], p[2] + d[2]]),
                ConvMode::Strided => Some([2 * p[0] + d[0], 2 * p[1] + d[1], 2 * p[2] + d[2]]),
                ConvMode::Inverse => {
                    let q = [p[0] - d[0], p[1] - d[1], p[2] - d[2]];
                    q.iter()
                        .all(|v| v.rem_euclid(2) == 0)
                        .then(|| q.map(|v| v / 2))
                }
            };
            if let Some(x) = src.and_then(|q| vol.at(s.batch as usize, q)) {
                kernel.accumulate(&mut acc, d, x);
            }
        }
        out.insert(s, acc);
    }
    out
}

/// Jaccard loss `|M| / |F ∪ M|` of a mispredicted set against foreground `F`.
fn jaccard_loss(mis: &[bool], fg: &[bool]) -> f64 {
    let m = mis.iter().filter(|&&v| v).count();
    let union = mis.iter().zip(fg).filter(|(&a, &b)| a || b).count();
    if union == 0 {
        0.0
    } else {
        m as f64 / union as f64
    }
}

/// `∫₀¹ Δ({i : e_i ≥ t}) dt` evaluated exactly on the piecewise-constant
/// level sets, averaged over classes present among labelled points.
/// Labels are `1..=K`; 0 is ignored.
pub fn lovasz_oracle(probs: &[Vec<f64>], labels: &[u8], k: usize) -> f64 {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    let mut total = 0.0;
    let mut present = 0;
    for c in 1..=k as u8 {
        let fg: Vec<bool> = rows.iter().map(|&i| labels[i] == c).collect();
        if !fg.iter().any(|&f| f) {
            continue;
        }
        present += 1;
        let err: Vec<f64> = rows
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| ((if f { 1.0 } else { 0.0 }) - probs[i][c as usize - 1]).abs())
            .collect();
        let mut levels: Vec<f64> = err.clone();
        levels.push(0.0);
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut area = 0.0;
        for w in levels.windows(2) {
            let mis: Vec<bool> = err.iter().map(|&e| e >= w[1]).collect();
            area += jaccard_loss(&mis, &fg) * (w[1] - w[0]);
        }
        total += area;
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

/// Containment by edge half-planes of the forward-transformed footprint,
/// with the point first snapped to a 1 mm lattice.
pub fn raster_in_box(p: [f64; 3], b: &Box9) -> bool {
    const CELL: f64 = 1e-3;
    let q = p.map(|v| ((v / CELL).floor() + 0.5) * CELL);
    let corners = footprint(b);
    let inside_xy = (0..4).all(|e| {
        let a = corners[e];
        let c = corners[(e + 1) % 4];
        (c[0] - a[0]) * (q[1] - a[1]) - (c[1] - a[1]) * (q[0] - a[0]) >= 0.0
    });
    inside_xy && (q[2] - b.center[2]).abs() <= b.size[2] / 2.0
}

/// Distance from `p` to the nearest face plane of the box.
pub fn boundary_distance(p: [f64; 3], b: &Box9) -> f64 {
    let corners = footprint(b);
    let mut d = ((p[2] - b.center[2]).abs() - b.size[2] / 2.0).abs();
    for e in 0..4 {
        let a = corners[e];
        let c = corners[(e + 1) % 4];
        let len = ((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2)).sqrt();
        let cross = (c[0] - a[0]) * (p[1] - a[1]) - (c[1] - a[1]) * (p[0] - a[0]);
        d = d.min(cross.abs() / len);
    }
    d
}

/// Counter-clockwise BEV corners from center, size and yaw.
fn footprint(b: &Box9) -> [[f64; 2]; 4] {
    let (hl, hw) = (b.size[0] / 2.0, b.size[1] / 2.0);
    let (s, c) = b.yaw.sin_cos();
    [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
        .map(|[u, v]| [b.center[0] + u * c - v * s, b.center[1] + u * s + v * c])
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> Box9 {
    Box9::new(
        [
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            rng.random_range(-2.0..2.0),
        ],
        [
            rng.random_range(0.3..5.0),
            rng.random_range(0.3..3.0),
            rng.random_range(0.3..2.5),
        ],
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        1,
    )
}

/// Uniform point within the box's axis-aligned bounds grown by `margin`.
pub fn point_near(rng: &mut impl Rng, b: &Box9, margin: f64) -> [f64; 3] {
    let r = (b.size[0].powi(2) + b.size[1].powi(2)).sqrt() / 2.0 + margin;
    let hz = b.size[2] / 2.0 + margin;
    [
        b.center[0] + rng.random_range(-r..r),
        b.center[1] + rng.random_range(-r..r),
        b.center[2] + rng.random_range(-hz..hz),
    ]
}
