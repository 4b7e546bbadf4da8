use std::sync::Arc;

use rand::Rng;

use super::{BackboneConfig, BackboneGeometry};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::sparse::{CoordSet, Rulebook};

/// Feature matrix on the tape plus the coordinates it lives on.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub var: Var,
    pub coords: Arc<CoordSet>,
    pub stride: u32,
}

pub struct Encoded {
    /// F1..F4 at strides 1, 2, 4, 8.
    pub enc: [SparseVar; 4],
    /// F5, F6 at strides 16, 32.
    pub extra: [SparseVar; 2],
}

pub struct Merged {
    /// Detection branch on the stride-8 union.
    pub fd: SparseVar,
    /// Segmentation branch on exactly the stride-8 sites.
    pub fs: SparseVar,
    /// BEV cells × width.
    pub bev: Var,
}

pub struct BackboneOutput {
    pub enc: [SparseVar; 4],
    pub extra: [SparseVar; 2],
    pub fd: SparseVar,
    pub fs: SparseVar,
    pub bev: Var,
    /// F1′, F2′, F3′.
    pub dec: [SparseVar; 3],
    /// Fused stride-1 features.
    pub fused: SparseVar,
}

pub struct Backbone<'c> {
    pub cfg: &'c BackboneConfig,
}

fn block_params<T: Real>(
    p: &mut ParamStore<T>,
    name: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let vol = k.pow(3);
    p.he_normal(&format!("{name}.w"), vol * c_in, c_out, vol * c_in, rng)?;
    p.constant(&format!("{name}.b"), c_out, 0.0, false)?;
    p.constant(&format!("{name}.scale"), c_out, 1.0, false)?;
    p.constant(&format!("{name}.shift"), c_out, 0.0, false)
}

fn linear_params<T: Real>(
    p: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    p.he_normal(&format!("{name}.w"), c_in, c_out, c_in, rng)?;
    p.constant(&format!("{name}.b"), c_out, 0.0, false)
}

impl<'c> Backbone<'c> {
    pub fn new(cfg: &'c BackboneConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params<T: Real>(&self, p: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let c = self.cfg;
        let k = c.kernel_size;
        let w = c.widths;
        block_params(p, "stem", k, c.in_channels, c.stem, rng)?;
        let mut prev = c.stem;
        for s in 0..4 {
            if s > 0 {
                block_params(p, &format!("enc{}.down", s + 1), k, prev, w[s], rng)?;
            } else if prev != w[0] {
                block_params(p, "enc1.lift", k, prev, w[0], rng)?;
            }
            prev = w[s];
            for d in 0..c.block_depth {
                block_params(p, &format!("enc{}.sub{d}", s + 1), k, w[s], w[s], rng)?;
            }
        }
        block_params(p, "extra5", k, w[3], c.extra[0], rng)?;
        block_params(p, "extra6", k, c.extra[0], c.extra[1], rng)?;
        linear_params(p, "hiam.p5", c.extra[0], w[3], rng)?;
        linear_params(p, "hiam.p6", c.extra[1], w[3], rng)?;
        for s in (0..4).rev() {
            for d in 0..c.block_depth {
                block_params(p, &format!("dec{}.sub{d}", s + 1), k, w[s], w[s], rng)?;
            }
            if s > 0 {
                block_params(p, &format!("dec{}.up", s), k, w[s], w[s - 1], rng)?;
            }
        }
        for (name, width) in [
            ("hfcm.t1", w[0]),
            ("hfcm.t2", w[1]),
            ("hfcm.t3", w[2]),
            ("hfcm.ts", w[3]),
        ] {
            linear_params(p, name, width, c.hfcm_width, rng)?;
        }
        Ok(())
    }

    fn block<T: Real>(
        tape: &mut Tape<T>,
        b: &Bound,
        name: &str,
        x: Var,
        rb: &Arc<Rulebook>,
    ) -> Result<Var> {
        let y = tape.conv(
            x,
            rb.clone(),
            b.var(&format!("{name}.w"))?,
            b.var(&format!("{name}.b"))?,
        )?;
        let y = tape.affine(
            y,
            b.var(&format!("{name}.scale"))?,
            b.var(&format!("{name}.shift"))?,
        )?;
        Ok(tape.relu(y))
    }

    fn linear<T: Real>(tape: &mut Tape<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
        tape.linear(
            x,
            b.var(&format!("{name}.w"))?,
            Some(b.var(&format!("{name}.b"))?),
        )
    }

    fn sv<T>(geo: &BackboneGeometry<T>, level: usize, var: Var) -> SparseVar {
        SparseVar {
            var,
            coords: geo.levels[level].clone(),
            stride: 1 << level,
        }
    }

    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        geo: &BackboneGeometry<T>,
        x0: Var,
    ) -> Result<Encoded> {
        let c = self.cfg;
        let mut x = Self::block(tape, b, "stem", x0, &geo.sub[0])?;
        if c.stem != c.widths[0] {
            x = Self::block(tape, b, "enc1.lift", x, &geo.sub[0])?;
        }
        let mut enc = Vec::with_capacity(4);
        for s in 0..4 {
            if s > 0 {
                x = Self::block(tape, b, &format!("enc{}.down", s + 1), x, &geo.down[s - 1])?;
            }
            for d in 0..c.block_depth {
                x = Self::block(tape, b, &format!("enc{}.sub{d}", s + 1), x, &geo.sub[s])?;
            }
            enc.push(Self::sv(geo, s, x));
        }
        let f5 = Self::block(tape, b, "extra5", x, &geo.down[3])?;
        let f6 = Self::block(tape, b, "extra6", f5, &geo.down[4])?;
        Ok(Encoded {
            enc: enc.try_into().expect("four stages"),
            extra: [Self::sv(geo, 4, f5), Self::sv(geo, 5, f6)],
        })
    }

    pub fn merge<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        geo: &BackboneGeometry<T>,
        e: &Encoded,
    ) -> Result<Merged> {
        let w = self.cfg.widths[3];
        let p5 = Self::linear(tape, b, "hiam.p5", e.extra[0].var)?;
        let p6 = Self::linear(tape, b, "hiam.p6", e.extra[1].var)?;
        let f4 = e.enc[3].var;
        let fd = tape.gather(None, &[f4, p5, p6], geo.det_map.clone(), w)?;
        let fs = tape.gather(Some(f4), &[p5, p6], geo.seg_map.clone(), w)?;
        let bev = tape.gather(None, &[fd], geo.bev.map.clone(), w)?;
        Ok(Merged {
            fd: SparseVar {
                var: fd,
                coords: geo.det_coords.clone(),
                stride: 8,
            },
            fs: Self::sv(geo, 3, fs),
            bev,
        })
    }

    /// Decoder plus hierarchical fusion. Returns `(F1′, F2′, F3′)` and the
    /// fused stride-1 features.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        geo: &BackboneGeometry<T>,
        e: &Encoded,
        fs: Var,
    ) -> Result<([SparseVar; 3], SparseVar)> {
        let c = self.cfg;
        let mut x = fs;
        let mut ups = [None; 3];
        let mut sums = vec![None; 3];
        for s in (0..4).rev() {
            for d in 0..c.block_depth {
                x = Self::block(tape, b, &format!("dec{}.sub{d}", s + 1), x, &geo.sub[s])?;
            }
            if s > 0 {
                let up = Self::block(tape, b, &format!("dec{}.up", s), x, &geo.up[s - 1])?;
                ups[s - 1] = Some(up);
                x = tape.add(e.enc[s - 1].var, up)?;
                sums[s - 1] = Some(x);
            }
        }
        let sums: Vec<Var> = sums.into_iter().map(|v| v.expect("filled")).collect();
        let mut parts = Vec::with_capacity(4);
        for (i, &v) in sums.iter().enumerate() {
            let t = Self::linear(tape, b, &format!("hfcm.t{}", i + 1), v)?;
            let t = tape.relu(t);
            parts.push(if i == 0 {
                t
            } else {
                tape.gather(None, &[t], geo.ancestors[i - 1].clone(), c.hfcm_width)?
            });
        }
        let t = Self::linear(tape, b, "hfcm.ts", fs)?;
        let t = tape.relu(t);
        parts.push(tape.gather(None, &[t], geo.ancestors[2].clone(), c.hfcm_width)?);
        let fused = tape.concat_cols(&parts)?;
        let dec = [0, 1, 2].map(|i| Self::sv(geo, i, ups[i].expect("filled")));
        Ok((dec, Self::sv(geo, 0, fused)))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        geo: &BackboneGeometry<T>,
        x0: Var,
    ) -> Result<BackboneOutput> {
        let e = self.encode(tape, b, geo, x0)?;
        let m = self.merge(tape, b, geo, &e)?;
        let (dec, fused) = self.decode(tape, b, geo, &e, m.fs.var)?;
        Ok(BackboneOutput {
            enc: e.enc,
            extra: e.extra,
            fd: m.fd,
            fs: m.fs,
            bev: m.bev,
            dec,
            fused,
        })
    }
}
