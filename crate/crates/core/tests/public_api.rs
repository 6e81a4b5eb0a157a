use vidproto_core::trainer::SigmaTracker;
use vidproto_core::*;

fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
    random_unit_vectors(n, d, seed)
}

// Loss written directly from the margin formula, one term at a time.
fn margin_loss(e: &Matrix, labels: &[usize], w: &Matrix, m: f64, s: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let cos = |c: usize| {
            let (a, b) = (e.row(i), w.row(c));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let target = (cos(y).clamp(-1.0, 1.0).acos() + m).cos();
        let num = (s * target).exp();
        let others: f64 = (0..w.rows()).filter(|&c| c != y).map(|c| (s * cos(c)).exp()).sum();
        total += -(num / (num + others)).ln();
    }
    total / labels.len() as f64
}

#[test]
fn margin_loss_matches_direct_evaluation() {
    let e = unit_rows(6, 8, 1);
    let w = unit_rows(5, 8, 2);
    let labels = [0, 1, 2, 3, 4, 0];
    let got = arcface_forward_backward(&e, &labels, &w, &ArcFaceConfig::new(0.5, 30.0).unwrap(), &[true; 6]).unwrap();
    let want = margin_loss(&e, &labels, &w, 0.5, 30.0);
    assert!((got.loss - want).abs() < 1e-10, "{} vs {want}", got.loss);
}

#[test]
fn ema_blends_with_alpha_point_nine() {
    let t = SigmaTracker::from_parts(vec![1.0], 0.9, 1).unwrap();
    let next = ema_update(&t, &[2.0]).unwrap();
    assert_eq!(next.sigma()[0], 0.9 * 2.0 + 0.1 * 1.0);
    assert!((next.sigma()[0] - 1.9).abs() < 1e-15);
}

#[test]
fn virtual_batch_matches_desk_and_full_scale_configs() {
    assert_eq!(virtual_batch_size(10500, 60000, 512), 2926);
    assert_eq!(virtual_batch_size(50, 20, 128), 51);
    assert_eq!(virtual_batch_size(1000, 1, 1), 1);
    assert_eq!(virtual_batch_size(50, 0, 128), 0);
}

#[test]
fn short_training_run_keeps_virtual_prototypes_apart() {
    let data = generate_synthetic_clusters(10, 8, 16, 0.1, 4).unwrap();
    let cfg = TrainRunConfig { virtual_ids: 5, batch_real: 32, iterations: 150, lr_decay_at: vec![100], ..Default::default() };
    let report = train_stage1(&data, &cfg).unwrap();
    assert_eq!(report.bank.len(), 15);
    let last = report.checkpoints.last().unwrap();
    assert_eq!(last.iteration, 150);
    assert!(last.summary.virtual_virtual.unwrap().mean < 0.3);
    // Same seed, same bank.
    assert_eq!(train_stage1(&data, &cfg).unwrap().bank, report.bank);
}

#[test]
fn copied_centers_leak() {
    let data = generate_synthetic_clusters(9, 4, 8, 0.2, 1).unwrap();
    let centers = class_centers(&data).unwrap();
    let report = leakage_audit(&centers, &centers, 2).unwrap();
    let v = leakage_verdict(&report, 1.0).unwrap();
    assert!(!v.leak_free);
    assert!((v.query_quantile - 1.0).abs() < 1e-12);
}

#[test]
fn property_report_on_zero_spread_surrogate() {
    let bank = trainer::PrototypeBank::random(3, 4, 12, 2).unwrap();
    let cfg = SurrogateConfig { spread: Spread::Scalar(0.0), per_class: 3, ..SurrogateConfig::default() };
    let set = sample_surrogate_dataset(&bank, Partition::Both, &cfg).unwrap();
    let scores = QualityScoreSet::new((0..set.len()).map(|i| (i % 2) as f64).collect()).unwrap();
    let report = property_report(&set, Some(&scores)).unwrap();
    assert_eq!(report.classes.len(), 7);
    for c in &report.classes {
        assert!((c.consistency - 1.0).abs() < 1e-12);
        assert!(c.diversity.unwrap() > 0.0);
    }
}
