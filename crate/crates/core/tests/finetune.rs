use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smart::eval::{auc, finetune, percentile, FinetuneConfig, FinetuneReport, PhantomSet};
use smart::phantom::ShapeKind;
use smart::pretrain::{TrainConfig, Trainer};
use smart::volume::VolumeSample;

fn sphere_vs_box(count: usize, grid_size: usize, radius: (f64, f64)) -> Vec<VolumeSample<f32>> {
    PhantomSet {
        count,
        classes: vec![ShapeKind::Sphere, ShapeKind::Box],
        grid_size,
        radius_min: radius.0,
        radius_max: radius.1,
        seed: 31,
        ..Default::default()
    }
    .generate::<f32>()
    .unwrap()
}

/// Held-out class-1 scores and labels, checked against the report's AUC.
fn held_out(report: &FinetuneReport, data: &[VolumeSample<f32>]) -> (Vec<f64>, Vec<bool>) {
    assert_eq!(report.held_out.len(), report.n_test);
    assert_eq!(report.probabilities.len(), report.n_test);
    let scores: Vec<f64> = report.probabilities.iter().map(|p| p[1]).collect();
    let labels: Vec<bool> = report.held_out.iter().map(|&i| data[i].label == Some(1)).collect();
    let observed = auc(&scores, &labels).unwrap();
    assert!((observed - report.metrics.auc).abs() < 1e-12, "{observed} vs {}", report.metrics.auc);
    (scores, labels)
}

#[test]
fn held_out_scores_reproduce_the_reported_auc() {
    let trainer = Trainer::<f32>::new(TrainConfig::tiny()).unwrap();
    let data = sphere_vs_box(12, 16, (2.0, 4.0));
    let cfg = FinetuneConfig { steps: 4, ..Default::default() };
    let report = finetune(&trainer.encoder, &trainer.student, &data, &cfg).unwrap();
    let (_, labels) = held_out(&report, &data);
    assert!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
    for p in &report.probabilities {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

/// Desk-scale fine-tuning against a label-permutation null. Measured at
/// 60 phantoms, 150 steps, lr 1e-3: held-out AUC 0.58 vs a null 95th
/// percentile of 0.72, so the trend is not reached at this scale.
#[test]
#[ignore = "desk-scale trend not reached; run with --ignored to measure"]
fn sphere_vs_box_beats_the_permutation_null() {
    let trainer = Trainer::<f32>::new(TrainConfig::desk()).unwrap();
    let data = sphere_vs_box(60, 32, (4.0, 7.0));
    let cfg = FinetuneConfig { steps: 150, lr: 1e-3, ..Default::default() };
    let report = finetune(&trainer.encoder, &trainer.student, &data, &cfg).unwrap();
    let (scores, labels) = held_out(&report, &data);
    let observed = report.metrics.auc;

    // null: the same scores against shuffled labels
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shuffled = labels.clone();
    let null: Vec<f64> = (0..2000)
        .map(|_| {
            shuffled.shuffle(&mut rng);
            auc(&scores, &shuffled).unwrap()
        })
        .collect();
    let p95 = percentile(&null, 95.0).unwrap();
    assert!(observed > p95, "held-out AUC {observed:.3} vs null 95th percentile {p95:.3}");
}
