mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmt::losses::{
    aligned_iou, combine_uncertainty, cross_entropy, lovasz_softmax, TaskLosses, UncertaintyWeights,
};
use voxmt::Mat;

#[test]
fn cross_entropy_matches_per_point_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, k) = (40, 5);
    let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=k as u8)).collect();
    let got = cross_entropy(&Mat::from_vec(n, k, logits.clone()).unwrap(), &labels).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        if labels[i] == 0 {
            continue;
        }
        let row = &logits[i * k..(i + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        sum += -(row[labels[i] as usize - 1].exp() / z).ln();
        count += 1;
    }
    assert!((got.value - sum / count as f64).abs() < 1e-12);
}

#[test]
fn lovasz_perfect_and_all_wrong() {
    let perfect = Mat::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(lovasz_softmax(&perfect, &[1, 2, 1]).unwrap().value, 0.0);
    // One present class, every hard prediction wrong: Jaccard 0, loss 1.
    let wrong = Mat::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(lovasz_softmax(&wrong, &[1, 1]).unwrap().value, 1.0);
}

#[test]
fn lovasz_per_class_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(1..=30);
        let k = rng.random_range(1..=5);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=k as u8)).collect();
        let v = lovasz_softmax(&Mat::from_vec(n, k, probs.concat()).unwrap(), &labels)
            .unwrap()
            .value;
        assert!((0.0..=1.0).contains(&v));
        assert!((v - common::lovasz_oracle(&probs, &labels, k)).abs() < 1e-9);
    }
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

#[test]
fn aligned_iou_matches_interval_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let c = [0; 4].map(|_| rng.random_range(-2.0..2.0));
        let s = [0; 4].map(|_| rng.random_range(0.1..3.0));
        let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
        let ix = interval_overlap(span(c[0], s[0]), span(c[2], s[2]));
        let iy = interval_overlap(span(c[1], s[1]), span(c[3], s[3]));
        let inter = ix * iy;
        let expect = inter / (s[0] * s[1] + s[2] * s[3] - inter);
        let got = aligned_iou([c[0], c[1]], [s[0], s[1]], [c[2], c[3]], [s[2], s[3]]);
        assert!((got - expect).abs() < 1e-12);
    }
    assert_eq!(
        aligned_iou([0.0, 0.0], [1.0, 1.0], [5.0, 0.0], [1.0, 1.0]),
        0.0
    );
    assert_eq!(
        aligned_iou([1.0, 2.0], [1.5, 0.5], [1.0, 2.0], [1.5, 0.5]),
        1.0
    );
}

proptest! {
    /// The gradient in `log σ²` vanishes exactly where `σ² = L`.
    #[test]
    fn uncertainty_gradient_zero_iff_variance_equals_loss(l in 0.01f64..100.0, s in -6.0f64..6.0) {
        let losses = TaskLosses { seg: l, bev: l, det: l };
        let at_opt = combine_uncertainty(&losses, &UncertaintyWeights { log_var: [l.ln(); 3] }).2;
        prop_assert!(at_opt.iter().all(|g| g.abs() < 1e-12));
        let ds = combine_uncertainty(&losses, &UncertaintyWeights { log_var: [s; 3] }).2;
        prop_assert_eq!(ds[0] > 0.0, s.exp() > l);
        prop_assert!(s.exp().is_finite() && s.exp() > 0.0);
    }
}

/// Two parameters shared by conflicting task losses; the learned variances
/// order like the final task losses.
#[test]
fn toy_training_orders_variances_by_loss() {
    let targets = [[1.0, -1.0], [2.0, 3.0], [-4.0, 0.5]];
    let scales = [0.1, 1.0, 10.0];
    let mut theta = [0.0f64; 2];
    let mut w = UncertaintyWeights {
        log_var: [0.0f64; 3],
    };
    let lr = 0.01;
    let mut tasks = [0.0; 3];
    for _ in 0..20_000 {
        let mut dtheta = [0.0; 2];
        let grads: Vec<[f64; 2]> = targets
            .iter()
            .zip(scales)
            .enumerate()
            .map(|(i, (t, s))| {
                let d = [theta[0] - t[0], theta[1] - t[1]];
                tasks[i] = s * (d[0] * d[0] + d[1] * d[1]);
                [2.0 * s * d[0], 2.0 * s * d[1]]
            })
            .collect();
        let losses = TaskLosses {
            seg: tasks[0],
            bev: tasks[1],
            det: tasks[2],
        };
        let (_, dl, ds) = combine_uncertainty(&losses, &w);
        for (g, d) in grads.iter().zip(dl) {
            dtheta[0] += d * g[0];
            dtheta[1] += d * g[1];
        }
        for a in 0..2 {
            theta[a] -= lr * dtheta[a];
        }
        for (s, d) in w.log_var.iter_mut().zip(ds) {
            *s -= 0.05 * d;
        }
    }
    let var = w.variances();
    let mut by_loss = [0, 1, 2];
    by_loss.sort_by(|&a, &b| tasks[a].total_cmp(&tasks[b]));
    let mut by_var = [0, 1, 2];
    by_var.sort_by(|&a, &b| var[a].total_cmp(&var[b]));
    assert_eq!(by_loss, by_var, "losses {tasks:?} variances {var:?}");
}
