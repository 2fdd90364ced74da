use codephys::hr::{estimate_hr, DEFAULT_BAND};
use codephys::report::*;
use codephys::signal::PPGSignal;

fn tone(f: f64, phase: f64) -> PPGSignal {
    PPGSignal::new(
        (0..160)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 30.0 + phase).sin())
            .collect(),
        30.0,
    )
    .unwrap()
}

fn result(id: &str, f_gt: f64, f_pred: f64) -> SampleResult {
    let (s_gt, s_pred) = (tone(f_gt, 0.0), tone(f_pred, 0.4));
    SampleResult {
        id: id.into(),
        hr_gt: estimate_hr(&s_gt, DEFAULT_BAND).unwrap(),
        hr_pred: estimate_hr(&s_pred, DEFAULT_BAND).unwrap(),
        s_gt,
        s_pred,
    }
}

#[test]
fn zero_samples_write_empty_metrics_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&[], dir.path(), &ReportOptions::default()).is_err());
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text, "mae,rmse,sd,r\n");
}

#[test]
fn one_perfect_prediction_flags_r_as_nan() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = result("only", 1.2, 1.2);
    r.hr_pred = r.hr_gt;
    emit_report(&[r], dir.path(), &ReportOptions::default()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text, "mae,rmse,sd,r\n0,0,0,nan\n");
    let m = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert!(m.pearson_r.is_nan());
}

#[test]
fn report_files_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let results = vec![
        result("a", 1.0, 1.05),
        result("b", 1.5, 1.45),
        result("c", 2.0, 2.1),
    ];
    let opts = ReportOptions {
        plots: true,
        band: None,
        summary: vec![("param_count".into(), "42".into())],
    };
    let m = emit_report(&results, dir.path(), &opts).unwrap();
    assert_eq!(read_metrics(&dir.path().join("metrics.csv")).unwrap(), m);
    let ba = std::fs::read_to_string(dir.path().join("ba.csv")).unwrap();
    let rows: Vec<&str> = ba.lines().collect();
    assert_eq!(rows[0], "mean,diff");
    assert_eq!(rows.len(), 4);
    let (mean, diff) = rows[2].split_once(',').unwrap();
    let r = &results[1];
    assert!((mean.parse::<f64>().unwrap() - 0.5 * (r.hr_pred + r.hr_gt)).abs() < 1e-12);
    assert!((diff.parse::<f64>().unwrap() - (r.hr_pred - r.hr_gt)).abs() < 1e-12);
    let (gt, pred) = read_signal_pair(&dir.path().join("signals/b.csv")).unwrap();
    assert_eq!(gt.samples, r.s_gt.samples);
    assert_eq!(pred.samples, r.s_pred.samples);
    assert!((gt.fps - 30.0).abs() < 1e-9);
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("param_count=42"));
    assert!(summary.contains("n=3"));
    let png = image::open(dir.path().join("plots/c.png")).unwrap();
    assert_eq!((png.width(), png.height()), (480, 320));
    assert!(dir.path().join("ba_summary.txt").exists());
}

#[test]
fn number_format_round_trips() {
    for v in [0.0, 1.0 / 3.0, -2.5e-9, 123456.789] {
        assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
    }
    assert_eq!(fmt_num(f64::NAN), "nan");
}
