use proptest::prelude::*;
use raydf::cli::build_dataset;
use raydf::config::RunConfig;
use raydf::dataset::{denormalize_ray, SampleStore};
use raydf::geometry::ray_to_points;
use raydf::scene::Scene;
use raydf::training::{
    build_multiview_batch, multiview_loss, train_distance, DistanceConfig, LossNorm, OracleScorer, ScoreOptions,
};
use raydf::Error;

fn small_store(name: &str) -> (Scene, SampleStore) {
    let cfg = RunConfig::from_toml(&format!(
        "seed = 5\nscene.name = \"{name}\"\nrender.width = 16\nrender.height = 16\n"
    ))
    .unwrap();
    let data = build_dataset(&cfg).unwrap();
    (data.scene, data.store)
}

fn small_distance(m: usize, seed: u64) -> DistanceConfig {
    DistanceConfig {
        epochs: 3,
        batch_size: 256,
        lr_init: 1e-4,
        lr_final: 1e-5,
        m,
        hidden: 32,
        layers: 3,
        seed,
        ..DistanceConfig::default()
    }
}

const NO_NOISE: ScoreOptions = ScoreOptions {
    noise_variance: 0.0,
    threshold: None,
};

#[test]
fn loss_matches_worked_example() {
    // primary error 0.1, two visible companions with errors 0.2 and 0.4, one hidden
    let (loss, grad) = multiview_loss(
        0.5,
        &[0.3, 0.3, 0.3],
        &[1.0, 1.0, 0.0],
        &[0.6, 0.5, 0.7, 0.9],
        LossNorm::L1,
    )
    .unwrap();
    assert!((loss - 0.7 / 3.0).abs() < 1e-12, "{loss}");
    assert_eq!(grad.len(), 4);
    assert!((grad[0] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(grad[3], 0.0);
}

#[test]
fn loss_rejects_mismatched_lengths() {
    assert!(matches!(
        multiview_loss(0.0, &[0.1, 0.2], &[1.0], &[0.0, 0.1, 0.2], LossNorm::L1),
        Err(Error::ShapeMismatch(_))
    ));
}

proptest! {
    #[test]
    fn zero_weights_reduce_to_primary_error(
        target in 0.0f64..1.0,
        pred in proptest::collection::vec(0.0f64..1.0, 1..8),
    ) {
        let m = pred.len() - 1;
        let d = vec![0.5; m];
        let w = vec![0.0; m];
        let (l1, _) = multiview_loss(target, &d, &w, &pred, LossNorm::L1).unwrap();
        let (l2, _) = multiview_loss(target, &d, &w, &pred, LossNorm::L2).unwrap();
        prop_assert!((l1 - (pred[0] - target).abs()).abs() < 1e-12);
        prop_assert!((l2 - (pred[0] - target).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded_by_worst_term(
        target in 0.0f64..1.0,
        rows in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 0..10),
        p0 in 0.0f64..1.0,
    ) {
        let d: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mut pred = vec![p0];
        pred.extend(rows.iter().map(|r| r.2));
        let (loss, _) = multiview_loss(target, &d, &w, &pred, LossNorm::L1).unwrap();
        let worst = rows.iter().map(|r| (r.2 - r.0).abs()).fold((p0 - target).abs(), f64::max);
        prop_assert!(loss >= 0.0 && loss <= worst + 1e-12);
    }

    #[test]
    fn l2_gradient_matches_differences(
        target in 0.0f64..1.0,
        rows in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..6),
        p0 in 0.0f64..1.0,
    ) {
        let d: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mut pred = vec![p0];
        pred.extend(rows.iter().map(|r| r.2));
        let (_, grad) = multiview_loss(target, &d, &w, &pred, LossNorm::L2).unwrap();
        let h = 1e-6;
        for k in 0..pred.len() {
            let mut a = pred.clone();
            let mut b = pred.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (multiview_loss(target, &d, &w, &a, LossNorm::L2).unwrap().0
                - multiview_loss(target, &d, &w, &b, LossNorm::L2).unwrap().0)
                / (2.0 * h);
            prop_assert!((fd - grad[k]).abs() < 1e-7, "{k}: {fd} vs {}", grad[k]);
        }
    }
}

#[test]
fn companions_pass_through_the_hit_point() {
    let (scene, store) = small_store("two-spheres");
    let scorer = OracleScorer { scene: &scene, epsilon: 1e-3 };
    let indices: Vec<usize> = (0..store.len()).step_by(7).collect();
    let batch = build_multiview_batch(&store, &indices, Some(&scorer), 6, NO_NOISE, 9).unwrap();
    assert_eq!(batch.rays.len(), indices.len() * 6);
    let sphere = store.sphere;
    let mut visible = 0;
    for (i, p) in batch.point.iter().enumerate() {
        for j in 0..6 {
            let k = i * 6 + j;
            let ray = denormalize_ray(&batch.rays[k]).unwrap();
            let (entry, _, dir) = ray_to_points(&ray, &sphere).unwrap();
            let along = entry + batch.d_tilde[k] * sphere.diameter * dir;
            assert!((along - p).norm() < 1e-4, "companion misses the point by {}", (along - p).norm());
            assert!(batch.weight[k] == 0.0 || batch.weight[k] == 1.0);
            visible += batch.weight[k] as usize;
        }
    }
    // every point sees at least part of the sphere it lies on
    assert!(visible > 0 && visible < batch.weight.len());
}

#[test]
fn batches_do_not_depend_on_layout() {
    let (scene, store) = small_store("sphere");
    let scorer = OracleScorer { scene: &scene, epsilon: 1e-3 };
    let all: Vec<usize> = (0..40).collect();
    let full = build_multiview_batch(&store, &all, Some(&scorer), 4, NO_NOISE, 3).unwrap();
    let part = build_multiview_batch(&store, &all[20..], Some(&scorer), 4, NO_NOISE, 3).unwrap();
    assert_eq!(full.rays[80..], part.rays[..]);
    assert_eq!(full.weight[80..], part.weight[..]);
    let again = build_multiview_batch(&store, &all, Some(&scorer), 4, NO_NOISE, 3).unwrap();
    assert_eq!(full, again);
}

#[test]
fn noise_and_threshold_keep_weights_in_range() {
    let (scene, store) = small_store("box");
    let scorer = OracleScorer { scene: &scene, epsilon: 1e-3 };
    let idx: Vec<usize> = (0..100).collect();
    let noisy = ScoreOptions {
        noise_variance: 0.5,
        threshold: None,
    };
    let batch = build_multiview_batch(&store, &idx, Some(&scorer), 5, noisy, 1).unwrap();
    assert!(batch.weight.iter().all(|w| (0.0..=1.0).contains(w)));
    assert!(batch.weight.iter().any(|w| *w > 0.0 && *w < 1.0));
    let hard = ScoreOptions {
        threshold: Some(0.5),
        ..noisy
    };
    let batch = build_multiview_batch(&store, &idx, Some(&scorer), 5, hard, 1).unwrap();
    assert!(batch.weight.iter().all(|w| *w == 0.0 || *w == 1.0));
}

#[test]
fn companions_need_a_scorer() {
    let (_, store) = small_store("sphere");
    assert!(matches!(
        build_multiview_batch(&store, &[0, 1], None, 3, NO_NOISE, 0),
        Err(Error::MissingClassifier)
    ));
    assert!(matches!(
        train_distance(&store, None, &small_distance(3, 0), None),
        Err(Error::MissingClassifier)
    ));
}

#[test]
fn primary_only_training_reduces_loss() {
    let (_, store) = small_store("sphere");
    let mut log = Vec::new();
    let (_, report) = train_distance(&store, None, &small_distance(0, 2), Some(&mut log)).unwrap();
    let curve = &report.loss_curve;
    assert_eq!(curve.len(), 3);
    assert!(curve[2] < curve[0], "{curve:?}");
    let lines = String::from_utf8(log).unwrap().lines().count() as u64;
    assert_eq!(lines, report.steps);
}

#[test]
fn training_is_deterministic() {
    let (scene, store) = small_store("two-spheres");
    let scorer = OracleScorer { scene: &scene, epsilon: 1e-3 };
    let cfg = DistanceConfig {
        epochs: 1,
        ..small_distance(2, 8)
    };
    let (a, ra) = train_distance(&store, Some(&scorer), &cfg, None).unwrap();
    let (b, rb) = train_distance(&store, Some(&scorer), &cfg, None).unwrap();
    assert_eq!(ra, rb);
    assert!(a == b);
}
