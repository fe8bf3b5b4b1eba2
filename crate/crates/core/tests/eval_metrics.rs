use amd_distill::data::{synth_dataset, Split, SynthSpec};
use amd_distill::metrics::{
    calibration, calibration_from_logits, ece_from_bins, ece_from_rows, evaluate, predict, read_reliability_csv,
    reliability_diagram, write_reliability_csv,
};
use amd_distill::nn::{Model, ModelSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three-class rows; confidences 0.7 and 0.35 land in bins 10 and 5 of 15.
fn fixture() -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..10 {
        probs.push(vec![0.7, 0.2, 0.1]);
        labels.push(if i < 6 { 0 } else { 1 });
    }
    for i in 0..10 {
        probs.push(vec![0.3, 0.35, 0.35]);
        labels.push(if i < 5 { 1 } else { 2 });
    }
    (probs, labels)
}

#[test]
fn hand_binned_fixture() {
    let (probs, labels) = fixture();
    let r = calibration(&probs, &labels, 15).unwrap();
    // Second group: confidence 0.35 (class 1 wins the tie), five right.
    assert_eq!(r.bins[10].count, 10);
    assert_eq!(r.bins[5].count, 10);
    assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 20);
    assert!((r.bins[10].accuracy - 0.6).abs() < 1e-15);
    assert!((r.bins[5].accuracy - 0.5).abs() < 1e-15);
    let ece = 0.5 * (0.7f64 - 0.6).abs() + 0.5 * (0.35f64 - 0.5).abs();
    assert!((r.ece - ece).abs() < 1e-15, "{} vs {ece}", r.ece);
    assert!((r.ece_percent - 100.0 * ece).abs() < 1e-12);
    assert_eq!(r.accuracy, 11.0 / 20.0);
    let nll = -(6.0 * 0.7f64.ln() + 4.0 * 0.2f64.ln() + 10.0 * 0.35f64.ln()) / 20.0;
    assert!((r.nll - nll).abs() < 1e-14);
}

#[test]
fn overconfident_bin_has_gap_point_four() {
    let probs: Vec<Vec<f64>> = (0..10).map(|_| vec![0.9, 0.1]).collect();
    let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
    let rows = reliability_diagram(&calibration(&probs, &labels, 15).unwrap());
    let row = rows.iter().find(|r| r.count > 0).unwrap();
    assert!((row.gap - 0.4).abs() < 1e-12);
    assert!((row.midpoint - (row.lower + row.upper) / 2.0).abs() < 1e-15);
}

#[test]
fn reliability_csv_round_trips_to_the_same_ece() {
    let (probs, labels) = fixture();
    let r = calibration(&probs, &labels, 15).unwrap();
    let rows = reliability_diagram(&r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rel.csv");
    write_reliability_csv(&path, &rows).unwrap();
    let back = read_reliability_csv(&path).unwrap();
    assert_eq!(back, rows);
    assert!((ece_from_rows(&back) - r.ece).abs() < 1e-15);
}

#[test]
fn bin_count_changes_ece_but_not_accuracy() {
    // 0.32 and 0.35 share (0.3, 0.4] with 10 bins but straddle 1/3 with 15.
    let probs = vec![
        vec![0.32, 0.23, 0.22, 0.23],
        vec![0.32, 0.23, 0.22, 0.23],
        vec![0.35, 0.25, 0.2, 0.2],
        vec![0.35, 0.25, 0.2, 0.2],
    ];
    let labels = vec![0, 0, 1, 1];
    let r15 = calibration(&probs, &labels, 15).unwrap();
    let r10 = calibration(&probs, &labels, 10).unwrap();
    assert_eq!(r10.accuracy, r15.accuracy);
    assert_eq!(r10.nll, r15.nll);
    assert_eq!(r10.bins.len(), 10);
    assert!((r15.ece - (0.5 * 0.68 + 0.5 * 0.35)).abs() < 1e-12, "{}", r15.ece);
    assert!((r10.ece - (0.5 - 0.335f64).abs()).abs() < 1e-12, "{}", r10.ece);
}

#[test]
fn model_evaluation_matches_logit_path() {
    let data = synth_dataset(
        &SynthSpec {
            per_class: 3,
            size: 8,
            ..SynthSpec::default()
        },
        Split::Train,
    )
    .unwrap();
    let spec = ModelSpec::wrn(10, 1, data.classes).with_input(data.image_shape);
    let model = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let a = evaluate(&model, &data, 15, 7).unwrap();
    let b = calibration_from_logits(&predict(&model, &data, 30).unwrap(), &data.labels, 15).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n, data.len());
}

proptest! {
    #[test]
    fn ece_is_recomputable_from_bins(seed in any::<u64>(), n in 1usize..60, bins in 1usize..20) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let r = calibration(&probs, &labels, bins).unwrap();
        prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), n);
        prop_assert!((ece_from_bins(&r.bins, n) - r.ece).abs() < 1e-12);
        prop_assert!(r.ece >= 0.0 && r.ece <= 1.0);
        prop_assert!(r.nll >= 0.0);
    }
}
