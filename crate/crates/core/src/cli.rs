//! The `gen`, `train`, `infer`, `eval`, `bench` and `gradcheck` commands.
//! Reports are `key=value` lines; logs are one record per line.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    decode_checkpoint, decode_prediction, decode_scene, encode_checkpoint, encode_prediction,
    encode_scene, read_file, write_file,
};
use crate::metrics::{
    map_distance, miou, recall_at, ConfusionMatrix, MapReport, SceneDetections, DISTANCE_THRESHOLDS,
};
use crate::model::{Model, Prediction, StageTimes, Tasks};
use crate::synth::{block_scene, generate_scene, SceneSpec};
use crate::train::{grad_check_model, train, GradCheckReport};
use crate::voxel::{GtDatabase, PointCloud};

pub const SCENE_EXTENSION: &str = "lisd";

pub fn cmd_gen(seed: u64, spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::from(e).in_file(p))?;
            SceneSpec::from_toml(&text).map_err(|e| e.in_file(p))?
        }
        None => SceneSpec::default(),
    };
    write_file(out, &encode_scene(&generate_scene(seed, &spec)?)?)
}

/// Every `*.lisd` file in `dir`, in file-name order.
pub fn load_scenes(dir: &Path) -> Result<Vec<(PathBuf, PointCloud)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::from(e).in_file(dir))?.path();
        if p.extension().is_some_and(|x| x == SCENE_EXTENSION) {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_file(&p, decode_scene).map(|c| (p, c)))
        .collect()
}

pub fn cmd_train(
    config: &Path,
    scenes: &Path,
    out: &Path,
    steps: Option<usize>,
    log: &mut impl Write,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let clouds: Vec<PointCloud> = load_scenes(scenes)?.into_iter().map(|(_, c)| c).collect();
    let steps = steps.unwrap_or(cfg.train.steps);
    if clouds.is_empty() && steps > 0 {
        return Err(Error::Config(format!(
            "no .{SCENE_EXTENSION} scenes in {}",
            scenes.display()
        )));
    }
    let db = match &cfg.augment.gt_sampling {
        Some(gs) if cfg.augment.enabled => {
            let objs: Vec<PointCloud> = load_scenes(&gs.database)?
                .into_iter()
                .map(|(_, c)| c)
                .collect();
            Some(GtDatabase::from_clouds(&objs)?)
        }
        _ => None,
    };
    let mut model = Model::<f32>::new(cfg)?;
    train(&mut model, &clouds, steps, db.as_ref(), |r| {
        writeln!(log, "{r}")?;
        Ok(())
    })?;
    write_file(out, &encode_checkpoint(&model)?)
}

pub fn cmd_infer(ckpt: &Path, scene: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let model = read_file(ckpt, decode_checkpoint)?;
    if let Some(c) = config {
        if RunConfig::load(c)?.hash() != model.config.hash() {
            return Err(Error::ConfigMismatch);
        }
    }
    let cloud = read_file(scene, decode_scene)?;
    let s = model.prepare(cloud).map_err(|e| e.in_file(scene))?;
    write_file(out, &encode_prediction(&model.predict(&s)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub points: usize,
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub detection: MapReport,
    pub recall_2m: f64,
    pub pred_boxes: usize,
    pub gt_boxes: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "points={}", self.points)?;
        writeln!(f, "evaluated={}", self.confusion.total())?;
        writeln!(f, "accuracy_pct={:.4}", 100.0 * self.confusion.accuracy())?;
        writeln!(f, "miou_pct={:.4}", 100.0 * self.miou)?;
        for (k, v) in self.iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(f, "iou_pct.{}={:.4}", k + 1, 100.0 * v)?,
                None => writeln!(f, "iou_pct.{}=absent", k + 1)?,
            }
        }
        writeln!(f, "map={:.6}", self.detection.map)?;
        for (c, aps) in &self.detection.per_class {
            for (d, ap) in DISTANCE_THRESHOLDS.iter().zip(aps) {
                writeln!(f, "ap.{c}@{d}m={ap:.6}")?;
            }
        }
        writeln!(f, "recall@2m={:.6}", self.recall_2m)?;
        writeln!(f, "boxes.pred={}", self.pred_boxes)?;
        write!(f, "boxes.gt={}", self.gt_boxes)
    }
}

/// Classes are `1..=K` with `K` the largest label in either set; detection
/// classes are those present among the boxes.
pub fn evaluate(pred: &Prediction, gt: &PointCloud) -> Result<EvalReport> {
    let labels = gt
        .labels
        .as_ref()
        .ok_or_else(|| Error::format("ground truth", "scene has no labels"))?;
    if labels.len() != pred.labels.len() {
        return Err(Error::shape(format!(
            "{} predicted labels for {} points",
            pred.labels.len(),
            labels.len()
        )));
    }
    let k = labels
        .iter()
        .chain(&pred.labels)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as usize;
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(labels, &pred.labels);
    let (iou, m) = miou(&cm);
    let mut classes: Vec<u8> = gt
        .boxes
        .iter()
        .chain(&pred.boxes)
        .map(|b| b.class)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let scenes = [SceneDetections {
        preds: pred.boxes.clone(),
        gts: gt.boxes.clone(),
    }];
    Ok(EvalReport {
        points: labels.len(),
        confusion: cm,
        iou,
        miou: m,
        detection: map_distance(&scenes, &classes),
        recall_2m: recall_at(&scenes, &classes, 2.0),
        pred_boxes: pred.boxes.len(),
        gt_boxes: gt.boxes.len(),
    })
}

pub fn cmd_eval(pred: &Path, gt: &Path, out: &mut impl Write) -> Result<()> {
    let p = read_file(pred, decode_prediction)?;
    let g = read_file(gt, decode_scene)?;
    writeln!(out, "{}", evaluate(&p, &g)?)?;
    Ok(())
}

pub const BENCH_DENSITIES: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];
pub const BENCH_REPEATS: usize = 5;
const BENCH_MIN_TIME: Duration = Duration::from_millis(200);
const BENCH_MAX_REPEATS: usize = 1000;

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub density: f64,
    pub points: usize,
    pub voxels: usize,
    pub voxelize: Duration,
    pub rulebooks: Duration,
    /// Per-stage split of the fastest multi-task pass.
    pub stages: StageTimes,
    pub multi: Duration,
    pub seg_only: Duration,
    pub det_only: Duration,
}

impl BenchRow {
    pub fn single_pass_faster(&self) -> bool {
        self.multi < self.seg_only + self.det_only
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "density={} points={} voxels={} voxelize_ms={:.3} rulebooks_ms={:.3} convs_ms={:.3} hiam_ms={:.3} heads_ms={:.3} iarm_ms={:.3} multi_ms={:.3} seg_only_ms={:.3} det_only_ms={:.3} single_pass_faster={}",
            self.density,
            self.points,
            self.voxels,
            ms(self.voxelize),
            ms(self.rulebooks),
            ms(self.stages.convs),
            ms(self.stages.hiam),
            ms(self.stages.heads),
            ms(self.stages.iarm),
            ms(self.multi),
            ms(self.seg_only),
            ms(self.det_only),
            self.single_pass_faster()
        )
    }
}

/// Times inference on synthetic scenes scaled by each density. The three
/// pass kinds are interleaved and each reports its fastest of at least
/// `repeats` runs, more for cheap scenes.
pub fn bench(cfg: &RunConfig, densities: &[f64], repeats: usize) -> Result<Vec<BenchRow>> {
    let model = Model::<f32>::new(cfg.clone())?;
    let repeats = repeats.max(1);
    densities
        .iter()
        .map(|&d| {
            let cloud = generate_scene(cfg.seed, &SceneSpec::default().scaled(d))?;
            let points = cloud.len();
            let scene = model.prepare(cloud)?;
            let once = |tasks| -> Result<(Duration, StageTimes)> {
                let mut times = StageTimes::default();
                let t = Instant::now();
                let mut tape = Tape::new();
                let b = model.params.bind(&mut tape);
                model.forward(&mut tape, &b, &scene, tasks, false, &mut times)?;
                Ok((t.elapsed(), times))
            };
            let mut best = [(Duration::MAX, StageTimes::default()); 3];
            let start = Instant::now();
            let mut n = 0;
            while n < repeats || (start.elapsed() < BENCH_MIN_TIME && n < BENCH_MAX_REPEATS) {
                n += 1;
                for (slot, tasks) in best.iter_mut().zip([Tasks::ALL, Tasks::SEG, Tasks::DET]) {
                    let r = once(tasks)?;
                    if r.0 < slot.0 {
                        *slot = r;
                    }
                }
            }
            let [(multi, stages), (seg_only, _), (det_only, _)] = best;
            Ok(BenchRow {
                density: d,
                points,
                voxels: scene.voxels.len(),
                voxelize: scene.voxelize_time,
                rulebooks: scene.rulebook_time,
                stages,
                multi,
                seg_only,
                det_only,
            })
        })
        .collect()
}

pub fn cmd_bench(config: &Path, out: &mut impl Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let rows = bench(&cfg, &BENCH_DENSITIES, BENCH_REPEATS)?;
    for r in &rows {
        writeln!(out, "{r}")?;
    }
    writeln!(
        out,
        "single_pass_faster_all={}",
        rows.iter().all(BenchRow::single_pass_faster)
    )?;
    Ok(())
}

pub const GRADCHECK_SIDE: usize = 6;
pub const GRADCHECK_SAMPLES: usize = 256;

/// Gradient check of the training objective on a block scene in `f64`.
pub fn gradcheck(cfg: &RunConfig, eps: f64, samples: usize) -> Result<GradCheckReport> {
    let det_class = *cfg
        .heads
        .det_classes
        .first()
        .ok_or_else(|| Error::Config("no detection classes".into()))?;
    let cloud = block_scene(
        &cfg.grid,
        GRADCHECK_SIDE,
        cfg.heads.num_classes as u8,
        det_class,
    )?;
    let model = Model::<f64>::new(cfg.clone())?;
    let scene = model.prepare(cloud)?;
    grad_check_model(&model, &scene, eps, samples)
}

pub fn cmd_gradcheck(config: &Path, eps: f64, samples: usize, out: &mut impl Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let r = gradcheck(&cfg, eps, samples)?;
    writeln!(out, "checked={}", r.checked)?;
    writeln!(out, "skipped={}", r.skipped)?;
    writeln!(out, "significant={}", r.significant)?;
    writeln!(out, "max_rel_error={:.3e}", r.max_rel_error)?;
    if let Some((name, i)) = &r.worst {
        writeln!(out, "worst={name}[{i}]")?;
    }
    Ok(())
}
