//! The end-to-end network: voxel features through the backbone, detection
//! and segmentation heads, instance-aware refinement and the
//! uncertainty-weighted objective, all recorded on one tape.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BranchSignature, RowMap, Tape, Var};
use crate::backbone::{Backbone, BackboneGeometry};
use crate::boxes::Box9;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{
    argmax_labels, bev_seg_targets, decode_box, encode_box, extract_peaks, heat_targets, BevGrid,
    HEAT_BIAS_INIT, REG_CHANNELS,
};
use crate::iarm::{refine_map, sigmoid, ForegroundEstimate, ProposalMask};
use crate::losses::{
    bce_with_logits, combine_uncertainty, det_losses, lovasz_binary, segmentation_loss, RegTarget,
    TaskLosses, UncertaintyWeights,
};
use crate::mat::Mat;
use crate::metrics::nms;
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::sparse::SparseTensor;
use crate::voxel::{voxelize, PointCloud, PointVoxelMap};

pub const LOG_VAR: &str = "loss.log_var";

/// Supervision derived from a labeled scene.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Per-point labels; out-of-range points are set to 0 (ignored).
    pub labels: Vec<u8>,
    pub foreground: Mat<f64>,
    pub labeled: Vec<bool>,
    pub bev: Vec<bool>,
    pub bev_mat: Mat<f64>,
    pub heat: Mat<f64>,
    pub reg: Vec<RegTarget>,
}

/// A point cloud with everything that depends only on its geometry.
pub struct Scene<T> {
    pub cloud: PointCloud,
    pub voxels: SparseTensor<T>,
    /// Voxel features with xyz rescaled to `[-1, 1]` over the grid range.
    pub input: Mat<T>,
    pub map: PointVoxelMap,
    pub point_map: Arc<RowMap<T>>,
    pub xyz: Vec<[f64; 3]>,
    pub geometry: BackboneGeometry<T>,
    pub grid: BevGrid,
    pub targets: Option<Targets>,
    pub voxelize_time: Duration,
    pub rulebook_time: Duration,
}

impl<T: Real> Scene<T> {
    pub fn new(cfg: &RunConfig, cloud: PointCloud) -> Result<Self> {
        cloud.validate()?;
        if cloud.channels() != cfg.backbone.in_channels {
            return Err(Error::shape(format!(
                "scene has {} point channels, model expects {}",
                cloud.channels(),
                cfg.backbone.in_channels
            )));
        }
        let t0 = Instant::now();
        let (voxels, map) = voxelize::<T>(&cloud, &cfg.grid, 0)?;
        let voxelize_time = t0.elapsed();
        let mut input = voxels.features().clone();
        let g = &cfg.grid;
        for i in 0..input.rows() {
            let row = input.row_mut(i);
            for a in 0..3 {
                let mid = (g.range_min[a] + g.range_max[a]) / 2.0;
                let half = (g.range_max[a] - g.range_min[a]) / 2.0;
                row[a] = T::c((row[a].f64() - mid) / half);
            }
        }
        let mut pm = RowMap::new();
        for v in &map.point_to_voxel {
            if let Some(v) = v {
                pm.push(0, *v as usize, T::one());
            }
            pm.finish_row();
        }
        let t1 = Instant::now();
        let geometry =
            BackboneGeometry::build(voxels.coord_set(), voxels.spatial_shape(), 1, &cfg.backbone)?;
        let rulebook_time = t1.elapsed();
        let grid = BevGrid::new(&cfg.grid)?;
        let xyz = (0..cloud.len()).map(|i| cloud.xyz(i)).collect();
        let targets = match &cloud.labels {
            Some(labels) => Some(build_targets(cfg, &cloud, labels, &map, &grid)?),
            None => None,
        };
        Ok(Self {
            cloud,
            voxels,
            input,
            map,
            point_map: Arc::new(pm),
            xyz,
            geometry,
            grid,
            targets,
            voxelize_time,
            rulebook_time,
        })
    }

    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }
}

fn build_targets(
    cfg: &RunConfig,
    cloud: &PointCloud,
    labels: &[u8],
    map: &PointVoxelMap,
    grid: &BevGrid,
) -> Result<Targets> {
    let k = cfg.heads.num_classes;
    if let Some(&l) = labels.iter().find(|&&l| l as usize > k) {
        return Err(Error::Label {
            label: l as usize,
            classes: k,
        });
    }
    let labels: Vec<u8> = labels
        .iter()
        .zip(&map.point_to_voxel)
        .map(|(&l, v)| if v.is_some() { l } else { 0 })
        .collect();
    let labeled: Vec<bool> = labels.iter().map(|&l| l > 0).collect();
    let fg: Vec<f64> = labels
        .iter()
        .map(|&l| if cfg.heads.is_foreground(l) { 1.0 } else { 0.0 })
        .collect();
    let bev = bev_seg_targets(&cloud.boxes, grid);
    let bev_mat = Mat::from_vec(bev.len(), 1, bev.iter().map(|&b| b as u8 as f64).collect())?;
    let reg = cloud
        .boxes
        .iter()
        .filter(|b| cfg.heads.det_index(b.class).is_some())
        .filter_map(|b| encode_box(b, grid))
        .map(|(cell, target)| RegTarget { cell, target })
        .collect();
    Ok(Targets {
        labels,
        foreground: Mat::from_vec(fg.len(), 1, fg)?,
        labeled,
        bev,
        bev_mat,
        heat: heat_targets(&cloud.boxes, grid, &cfg.heads),
        reg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tasks {
    pub seg: bool,
    pub det: bool,
}

impl Tasks {
    pub const ALL: Tasks = Tasks {
        seg: true,
        det: true,
    };
    pub const SEG: Tasks = Tasks {
        seg: true,
        det: false,
    };
    pub const DET: Tasks = Tasks {
        seg: false,
        det: true,
    };
}

/// Wall time spent per pipeline stage, accumulated across calls.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageTimes {
    pub convs: Duration,
    pub hiam: Duration,
    pub heads: Duration,
    pub iarm: Duration,
    pub loss: Duration,
}

pub struct Outputs {
    pub seg_logits: Option<Var>,
    pub fg_logits: Option<Var>,
    pub bev_logits: Option<Var>,
    pub heat: Option<Var>,
    pub reg: Option<Var>,
    /// Decoded peaks, highest score first, with their proposal features.
    pub proposals: Vec<Box9>,
    /// Points whose features received at least one proposal feature.
    pub refined_points: usize,
    pub loss: Option<Var>,
    pub task_losses: TaskLosses<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub boxes: Vec<Box9>,
}

pub struct LossEval<T> {
    pub total: f64,
    pub tasks: TaskLosses<f64>,
    pub grads: Vec<Mat<T>>,
    pub signature: BranchSignature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: RunConfig,
    pub params: ParamStore<T>,
}

fn linear_init<T: Real>(
    p: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    bias: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    p.he_normal(&format!("{name}.w"), c_in, c_out, c_in, rng)?;
    p.constant(&format!("{name}.b"), c_out, bias, false)
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        Backbone::new(&config.backbone).init_params(&mut p, &mut rng)?;
        let h = &config.heads;
        let w4 = config.backbone.bev_width();
        let fused = config.backbone.fused_width();
        linear_init(&mut p, "det.hidden", w4, h.det_hidden, 0.0, &mut rng)?;
        linear_init(
            &mut p,
            "det.heat",
            h.det_hidden,
            h.det_classes.len(),
            HEAT_BIAS_INIT,
            &mut rng,
        )?;
        linear_init(&mut p, "det.reg", h.det_hidden, REG_CHANNELS, 0.0, &mut rng)?;
        linear_init(
            &mut p,
            "det.fb",
            h.det_hidden,
            h.proposal_dim,
            0.0,
            &mut rng,
        )?;
        linear_init(&mut p, "bevseg", w4, 1, 0.0, &mut rng)?;
        linear_init(&mut p, "fg", fused, 1, 0.0, &mut rng)?;
        linear_init(&mut p, "seg", fused, h.num_classes, 0.0, &mut rng)?;
        linear_init(
            &mut p,
            "iarm.l1",
            h.proposal_dim,
            h.iarm_hidden,
            0.0,
            &mut rng,
        )?;
        linear_init(&mut p, "iarm.l2", h.iarm_hidden, fused, 0.0, &mut rng)?;
        p.insert(
            LOG_VAR,
            Mat::from_vec(
                1,
                3,
                config.train.init_log_var.iter().map(|&v| T::c(v)).collect(),
            )?,
            false,
        )?;
        Ok(Self { config, params: p })
    }

    /// Adopts stored tensors after checking them against the layout the
    /// config implies.
    pub fn from_parts(config: RunConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config)?;
        if reference.params.names() != params.names() {
            return Err(Error::format(
                "checkpoint",
                "parameter names differ from the config",
            ));
        }
        for (name, (a, b)) in params
            .names()
            .iter()
            .zip(reference.params.values().iter().zip(params.values()))
        {
            if !a.same_shape(b) {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has the wrong shape"),
                ));
            }
        }
        let mut out = reference;
        for (dst, src) in out.params.values_mut().iter_mut().zip(params.values()) {
            *dst = src.clone();
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn prepare(&self, cloud: PointCloud) -> Result<Scene<T>> {
        Scene::new(&self.config, cloud)
    }

    pub fn uncertainty(&self) -> Result<UncertaintyWeights<f64>> {
        let s = self.params.get(LOG_VAR)?;
        Ok(UncertaintyWeights {
            log_var: [0, 1, 2].map(|i| s.get(0, i).f64()),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        scene: &Scene<T>,
        tasks: Tasks,
        with_loss: bool,
        times: &mut StageTimes,
    ) -> Result<Outputs> {
        let cfg = &self.config;
        let h = &cfg.heads;
        let geo = &scene.geometry;
        let bb = Backbone::new(&cfg.backbone);
        let fused_w = cfg.backbone.fused_width();

        let t = Instant::now();
        let x0 = tape.leaf(scene.input.clone());
        let enc = bb.encode(tape, b, geo, x0)?;
        times.convs += t.elapsed();
        let t = Instant::now();
        let merged = bb.merge(tape, b, geo, &enc)?;
        times.hiam += t.elapsed();
        let fused = if tasks.seg {
            let t = Instant::now();
            let (_, f) = bb.decode(tape, b, geo, &enc, merged.fs.var)?;
            times.convs += t.elapsed();
            Some(f)
        } else {
            None
        };

        let mut out = Outputs {
            seg_logits: None,
            fg_logits: None,
            bev_logits: None,
            heat: None,
            reg: None,
            proposals: Vec::new(),
            refined_points: 0,
            loss: None,
            task_losses: TaskLosses::default(),
        };

        let t = Instant::now();
        let mut fb = None;
        if tasks.det {
            let bev = merged.bev;
            let hid = tape.linear(bev, b.var("det.hidden.w")?, Some(b.var("det.hidden.b")?))?;
            let hid = tape.relu(hid);
            let heat = tape.linear(hid, b.var("det.heat.w")?, Some(b.var("det.heat.b")?))?;
            let reg = tape.linear(hid, b.var("det.reg.w")?, Some(b.var("det.reg.b")?))?;
            let bevl = tape.linear(bev, b.var("bevseg.w")?, Some(b.var("bevseg.b")?))?;
            let grid = &scene.grid;
            let peaks = extract_peaks(
                tape.value(heat),
                &geo.bev.occupied,
                grid.nx,
                grid.ny,
                h.max_proposals,
            );
            let mut peak_map = RowMap::new();
            for p in &peaks {
                tape.note_branch(((p.cell as u64) << 8) | p.class_idx as u64);
                peak_map.push(0, p.cell, T::one());
                peak_map.finish_row();
            }
            let cols = tape.gather(None, &[hid], Arc::new(peak_map), h.det_hidden)?;
            let f = tape.linear(cols, b.var("det.fb.w")?, Some(b.var("det.fb.b")?))?;
            let regv = tape.value(reg);
            let fv = tape.value(f);
            out.proposals = peaks
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let r: Vec<f64> = regv.row(p.cell).iter().map(|v| v.f64()).collect();
                    let mut bx = decode_box(
                        p.cell,
                        &r,
                        grid,
                        sigmoid(p.logit),
                        h.det_classes[p.class_idx],
                    );
                    bx.feature = fv.row(j).iter().map(|v| v.f32()).collect();
                    bx
                })
                .collect();
            fb = Some(f);
            out.heat = Some(heat);
            out.reg = Some(reg);
            out.bev_logits = Some(bevl);
        }

        if let Some(fused) = fused {
            let pf = tape.gather(None, &[fused.var], scene.point_map.clone(), fused_w)?;
            let fg = tape.linear(pf, b.var("fg.w")?, Some(b.var("fg.b")?))?;
            times.heads += t.elapsed();
            let mut feats = pf;
            if h.use_iarm && tasks.det {
                let ti = Instant::now();
                let probs: Vec<f64> = tape
                    .value(fg)
                    .as_slice()
                    .iter()
                    .zip(&scene.map.point_to_voxel)
                    .map(|(z, v)| if v.is_some() { sigmoid(z.f64()) } else { 0.0 })
                    .collect();
                let est = ForegroundEstimate::from_probs(probs, h.foreground_threshold);
                tape.note_bits(est.mask.iter().copied());
                let selected: Vec<usize> = (0..out.proposals.len())
                    .filter(|&j| out.proposals[j].score >= h.iarm_score_threshold)
                    .collect();
                tape.note_bits(
                    out.proposals
                        .iter()
                        .map(|p| p.score >= h.iarm_score_threshold),
                );
                if let (false, Some(fb)) = (selected.is_empty(), fb) {
                    let boxes: Vec<Box9> =
                        selected.iter().map(|&j| out.proposals[j].clone()).collect();
                    let pm = ProposalMask::build(&scene.xyz, &boxes);
                    let hid = tape.linear(fb, b.var("iarm.l1.w")?, Some(b.var("iarm.l1.b")?))?;
                    let hid = tape.relu(hid);
                    let u = tape.linear(hid, b.var("iarm.l2.w")?, Some(b.var("iarm.l2.b")?))?;
                    let mut sel = RowMap::new();
                    for &j in &selected {
                        sel.push(0, j, T::one());
                        sel.finish_row();
                    }
                    let u_sel = tape.gather(None, &[u], Arc::new(sel), fused_w)?;
                    let rm = refine_map::<T>(&est, &pm)?;
                    out.refined_points = (0..rm.out_rows())
                        .filter(|&i| !rm.row(i).is_empty())
                        .count();
                    feats = tape.gather(Some(pf), &[u_sel], Arc::new(rm), fused_w)?;
                }
                times.iarm += ti.elapsed();
            }
            let t = Instant::now();
            let seg = tape.linear(feats, b.var("seg.w")?, Some(b.var("seg.b")?))?;
            times.heads += t.elapsed();
            out.seg_logits = Some(seg);
            out.fg_logits = Some(fg);
        } else {
            times.heads += t.elapsed();
        }

        if with_loss {
            let t = Instant::now();
            self.attach_loss(tape, b, scene, &mut out)?;
            times.loss += t.elapsed();
        }
        Ok(out)
    }

    fn attach_loss(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        scene: &Scene<T>,
        out: &mut Outputs,
    ) -> Result<()> {
        let tg = scene
            .targets
            .as_ref()
            .ok_or_else(|| Error::Config("scene has no labels to train on".into()))?;
        let (Some(seg), Some(fg), Some(bevl), Some(heat), Some(reg)) = (
            out.seg_logits,
            out.fg_logits,
            out.bev_logits,
            out.heat,
            out.reg,
        ) else {
            return Err(Error::Config(
                "the training loss needs both task branches".into(),
            ));
        };
        let sl = segmentation_loss(tape.value(seg), &tg.labels)?;
        let fl = bce_with_logits(tape.value(fg), &tg.foreground, Some(&tg.labeled))?;
        tape.note_branch(sl.branch);
        let lseg = tape.scalar(sl.value + fl.value, &[seg, fg], vec![sl.grad, fl.grad])?;

        let occ = &scene.geometry.bev.occupied;
        let bb = bce_with_logits(tape.value(bevl), &tg.bev_mat, Some(occ))?;
        let bl = lovasz_binary(tape.value(bevl), &tg.bev, occ)?;
        tape.note_branch(bl.branch);
        let mut g = bb.grad;
        g.add_assign(&bl.grad);
        let lbev = tape.scalar(bb.value + bl.value, &[bevl], vec![g])?;

        let dl = det_losses(
            tape.value(heat),
            tape.value(reg),
            &tg.heat,
            &tg.reg,
            scene.grid.cell,
        )?;
        tape.note_branch(dl.reg.branch);
        tape.note_branch(dl.iou.branch);
        let mut rg = dl.reg.grad.clone();
        rg.add_assign(&dl.iou.grad);
        let ldet = tape.scalar(dl.total(), &[heat, reg], vec![dl.cls.grad.clone(), rg])?;

        let s = b.var(LOG_VAR)?;
        let sv = tape.value(s);
        let w = UncertaintyWeights {
            log_var: [sv.get(0, 0), sv.get(0, 1), sv.get(0, 2)],
        };
        let losses = TaskLosses {
            seg: tape.scalar_value(lseg),
            bev: tape.scalar_value(lbev),
            det: tape.scalar_value(ldet),
        };
        let (total, dl_i, ds) = combine_uncertainty(&losses, &w);
        let one = |v: T| Mat::filled(1, 1, v);
        let loss = tape.scalar(
            total,
            &[lseg, lbev, ldet, s],
            vec![
                one(dl_i[0]),
                one(dl_i[1]),
                one(dl_i[2]),
                Mat::from_vec(1, 3, ds.to_vec())?,
            ],
        )?;
        out.task_losses = TaskLosses {
            seg: losses.seg.f64(),
            bev: losses.bev.f64(),
            det: losses.det.f64(),
        };
        out.loss = Some(loss);
        Ok(())
    }

    /// Loss, parameter gradients (store order) and branch signature.
    pub fn loss_and_grads(&self, scene: &Scene<T>, track: bool) -> Result<LossEval<T>> {
        let mut tape = if track { Tape::tracking() } else { Tape::new() };
        let b = self.params.bind(&mut tape);
        let out = self.forward(
            &mut tape,
            &b,
            scene,
            Tasks::ALL,
            true,
            &mut StageTimes::default(),
        )?;
        let loss = out.loss.expect("loss requested");
        let g = tape.backward(loss)?;
        Ok(LossEval {
            total: tape.scalar_value(loss).f64(),
            tasks: out.task_losses,
            grads: b.grads(&tape, &g),
            signature: tape.signature(),
        })
    }

    /// Loss value and branch signature without the backward sweep.
    pub fn loss_only(&self, scene: &Scene<T>) -> Result<(f64, BranchSignature)> {
        let mut tape = Tape::tracking();
        let b = self.params.bind(&mut tape);
        let out = self.forward(
            &mut tape,
            &b,
            scene,
            Tasks::ALL,
            true,
            &mut StageTimes::default(),
        )?;
        Ok((
            tape.scalar_value(out.loss.expect("loss requested")).f64(),
            tape.signature(),
        ))
    }

    pub fn predict(&self, scene: &Scene<T>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let out = self.forward(
            &mut tape,
            &b,
            scene,
            Tasks::ALL,
            false,
            &mut StageTimes::default(),
        )?;
        let labels = argmax_labels(tape.value(out.seg_logits.expect("seg branch")));
        let h = &self.config.heads;
        let cands: Vec<Box9> = out
            .proposals
            .into_iter()
            .filter(|p| p.score >= h.output_score_threshold)
            .collect();
        let boxes = nms(&cands, h.nms_iou)
            .into_iter()
            .map(|i| cands[i].clone())
            .collect();
        Ok(Prediction { labels, boxes })
    }
}
