//! Training loop and the finite-difference gradient checker.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::BranchSignature;
use crate::error::{Error, Result};
use crate::losses::TaskLosses;
use crate::mat::Mat;
use crate::model::{Model, Scene};
use crate::optim::{adamw_step, one_cycle_lr, AdamState};
use crate::params::ParamStore;
use crate::voxel::{augment, GtDatabase, PointCloud};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tasks: TaskLosses<f64>,
    /// `σ²` for seg, bev and det at the time of the step.
    pub sigma2: [f64; 3],
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} loss={:.6} L_seg={:.6} L_bev={:.6} L_det={:.6} sigma2_seg={:.6} sigma2_bev={:.6} sigma2_det={:.6}",
            self.step,
            self.lr,
            self.loss,
            self.tasks.seg,
            self.tasks.bev,
            self.tasks.det,
            self.sigma2[0],
            self.sigma2[1],
            self.sigma2[2]
        )
    }
}

/// Runs `steps` AdamW updates, visiting `clouds` round-robin. Scenes are
/// re-augmented per step when augmentation is enabled.
pub fn train(
    model: &mut Model<f32>,
    clouds: &[PointCloud],
    steps: usize,
    db: Option<&GtDatabase>,
    mut log: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if clouds.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let aug = model.config.augment.clone();
    let fixed: Vec<Scene<f32>> = if aug.enabled {
        Vec::new()
    } else {
        clouds
            .iter()
            .map(|c| model.prepare(c.clone()))
            .collect::<Result<_>>()?
    };
    let total_epochs = steps.div_ceil(clouds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x05ee_da11);
    let mut state = AdamState::zeros_like(model.params.values());
    let decay = model.params.decays().to_vec();
    for step in 0..steps {
        let lr = one_cycle_lr(step, steps, model.config.train.max_lr)?;
        let k = step % clouds.len();
        let owned;
        let scene = if aug.enabled {
            let pc = augment(
                &clouds[k],
                &aug,
                db,
                step / clouds.len(),
                total_epochs,
                &mut rng,
            )?;
            owned = model.prepare(pc)?;
            &owned
        } else {
            &fixed[k]
        };
        let sigma2 = model.uncertainty()?.log_var.map(f64::exp);
        let eval = model.loss_and_grads(scene, false)?;
        if !eval.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let opt = model.config.train.optimizer;
        adamw_step(
            model.params.values_mut(),
            &eval.grads,
            &decay,
            &mut state,
            lr,
            &opt,
        )?;
        log(&StepRecord {
            step,
            lr,
            loss: eval.total,
            tasks: eval.tasks,
            sigma2,
        })?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates dropped because a perturbation crossed a branch point.
    pub skipped: usize,
    /// Checked coordinates whose gradient magnitude reached `GRAD_FLOOR`.
    pub significant: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

/// Relative errors use `max(|analytic|, |numeric|, GRAD_FLOOR)` as the
/// denominator so vanishing gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Central differences of `loss` against `analytic` on `samples` random
/// scalar coordinates. A coordinate whose `±eps` evaluations take a
/// different branch than the unperturbed point is replaced by another draw.
pub fn grad_check(
    params: &ParamStore<f64>,
    analytic: &[Mat<f64>],
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<(f64, BranchSignature)>,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if analytic.len() != params.len() {
        return Err(Error::shape("one gradient per parameter tensor expected"));
    }
    let (_, base_sig) = loss(params)?;
    let sizes: Vec<usize> = params.values().iter().map(|m| m.as_slice().len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        significant: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let max_draws = samples.saturating_mul(20).max(1);
    let mut draws = 0;
    while report.checked < samples.min(total) && draws < max_draws {
        draws += 1;
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let orig = params.values()[t].as_slice()[flat];
        work.values_mut()[t].as_mut_slice()[flat] = orig + eps;
        let (lp, sp) = loss(&work)?;
        work.values_mut()[t].as_mut_slice()[flat] = orig - eps;
        let (lm, sm) = loss(&work)?;
        work.values_mut()[t].as_mut_slice()[flat] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[t].as_slice()[flat];
        let mag = a.abs().max(numeric.abs());
        let rel = (a - numeric).abs() / mag.max(GRAD_FLOOR);
        report.checked += 1;
        report.significant += (mag >= GRAD_FLOOR) as usize;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.names()[t].clone(), flat));
        }
    }
    Ok(report)
}

/// Gradient check of the complete training objective on one scene.
pub fn grad_check_model(
    model: &Model<f64>,
    scene: &Scene<f64>,
    eps: f64,
    samples: usize,
) -> Result<GradCheckReport> {
    let eval = model.loss_and_grads(scene, true)?;
    let mut probe = model.clone();
    grad_check(
        &model.params,
        &eval.grads,
        |p| {
            probe.params.clone_from(p);
            probe.loss_only(scene)
        },
        eps,
        samples,
        model.config.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap(),
            true,
        )
        .unwrap();
        let x = [1.5, 2.0, -0.5];
        let grads = vec![Mat::from_vec(1, 3, x.to_vec()).unwrap()];
        let r = grad_check(
            &p,
            &grads,
            |p| {
                let w = p.values()[0].as_slice();
                Ok((
                    (0..3).map(|i| w[i] * x[i]).sum(),
                    BranchSignature::default(),
                ))
            },
            1e-4,
            3,
            0,
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn kinks_are_skipped() {
        let mut p = ParamStore::new();
        p.insert("w", Mat::from_vec(1, 1, vec![1e-9]).unwrap(), true)
            .unwrap();
        let grads = vec![Mat::from_vec(1, 1, vec![1.0]).unwrap()];
        let r = grad_check(
            &p,
            &grads,
            |p| {
                let w = p.values()[0].get(0, 0);
                let mut sig = BranchSignature::default();
                sig.mix((w > 0.0) as u64);
                Ok((w.max(0.0), sig))
            },
            1e-6,
            1,
            0,
        )
        .unwrap();
        assert_eq!(r.checked, 0);
        assert!(r.skipped > 0);
    }
}
