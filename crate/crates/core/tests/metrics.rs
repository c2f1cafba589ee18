use fmnet_core::io::write_pgm;
use fmnet_core::metrics::{adaptive_threshold, evaluate, evaluate_dirs, f_measure, mae, MetricsReport, DEFAULT_BETA2};
use fmnet_core::Tensor;

fn t(h: usize, w: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(&[h, w], v.to_vec()).unwrap()
}

#[test]
fn mae_by_hand() {
    let p = t(2, 2, &[0.0, 0.5, 1.0, 0.25]);
    let g = t(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    assert_eq!(mae(&p, &g).unwrap(), (0.0 + 0.5 + 1.0 + 0.25) / 4.0);
    assert_eq!(mae(&g, &g).unwrap(), 0.0);
}

#[test]
fn graded_prediction_by_hand() {
    // mean 0.325 gives threshold 0.65: positives are 0.9, 0.8 and 0.7
    let p = t(2, 4, &[0.9, 0.8, 0.7, 0.2, 0.0, 0.0, 0.0, 0.0]);
    let g = t(2, 4, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((adaptive_threshold(&p) - 0.65).abs() < 1e-15);
    let f = f_measure(&p, &g, DEFAULT_BETA2).unwrap();
    let (prec, rec) = (2.0 / 3.0, 2.0 / 3.0);
    assert!((f.precision - prec).abs() < 1e-15 && (f.recall - rec).abs() < 1e-15);
    assert!((f.f - 1.3 * prec * rec / (0.3 * prec + rec)).abs() < 1e-15);
}

#[test]
fn threshold_caps_at_one() {
    let p = t(1, 4, &[1.0, 1.0, 1.0, 0.8]);
    let g = t(1, 4, &[1.0, 1.0, 1.0, 1.0]);
    let f = f_measure(&p, &g, DEFAULT_BETA2).unwrap();
    assert_eq!(f.threshold, 1.0);
    assert_eq!(f.recall, 0.75);
    assert_eq!(f.precision, 1.0);
}

#[test]
fn report_means_and_csv() {
    let g = t(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let pairs = vec![("a".to_string(), g.clone(), g.clone()), ("b".to_string(), t(2, 2, &[0.0, 1.0, 0.0, 0.0]), g.clone())];
    let r = evaluate(&pairs, DEFAULT_BETA2).unwrap();
    assert_eq!(r.images[0].mae, 0.0);
    assert_eq!(r.images[0].f_measure, 1.0);
    assert_eq!(r.images[1].mae, 0.5);
    assert_eq!(r.images[1].f_measure, 0.0);
    assert_eq!(r.mean_mae, 0.25);
    assert_eq!(r.mean_f_measure, 0.5);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], MetricsReport::csv_header());
    assert_eq!(lines[1], "a,0.000000,1.000000,0.500000");
    assert_eq!(lines[3], "mean,0.250000,0.500000,");
    assert!(evaluate(&[], DEFAULT_BETA2).is_err());
}

#[test]
fn identical_directories_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for i in 0..3 {
        let m = Tensor::from_vec(&[8, 8], (0..64).map(|k| if (k + i) % 5 < 2 { 1.0 } else { 0.0 }).collect()).unwrap();
        write_pgm(&pred.join(format!("{i}.pgm")), &m).unwrap();
        write_pgm(&gt.join(format!("{i}.pgm")), &m).unwrap();
    }
    let r = evaluate_dirs(&pred, &gt, DEFAULT_BETA2).unwrap();
    assert_eq!(r.images.len(), 3);
    assert_eq!(r.mean_mae, 0.0);
    assert_eq!(r.mean_f_measure, 1.0);
    std::fs::remove_file(pred.join("1.pgm")).unwrap();
    assert!(evaluate_dirs(&pred, &gt, DEFAULT_BETA2).is_err());
}
