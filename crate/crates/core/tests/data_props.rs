use std::fs;

use proptest::prelude::*;
use stformer_core::data::{
    generate_synthetic, load_bundle, make_windows, write_bundle, ForecastBatch, Normalizer, SplitRatios,
    DISTANCES_FILE, SERIES_FILE,
};
use stformer_core::train::{masked_mae, HorizonMetrics};
use stformer_core::{Error, Tensor};

#[test]
fn bundle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic(5, 400, 9).unwrap();
    assert!(bundle.flow.null_count() > 0);
    write_bundle(&bundle, dir.path()).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded.metadata, bundle.metadata);
    assert_eq!(loaded.geometry, bundle.geometry);
    assert_eq!(loaded.flow.timestamps(), bundle.flow.timestamps());
    assert_eq!(loaded.flow.day_of_week(), bundle.flow.day_of_week());
    assert_eq!(loaded.flow.time_of_day(), bundle.flow.time_of_day());
    for (a, b) in loaded.flow.values().iter().zip(bundle.flow.values()) {
        match (a, b) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9),
            (None, None) => {}
            _ => panic!("null marker changed"),
        }
    }
}

fn written(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&generate_synthetic(n, 60, 1).unwrap(), dir.path()).unwrap();
    dir
}

#[test]
fn empty_series_is_an_error() {
    let dir = written(3);
    fs::write(dir.path().join(SERIES_FILE), "").unwrap();
    assert!(load_bundle(dir.path()).is_err());
    fs::write(dir.path().join(SERIES_FILE), "timestamp,node_0,node_1,node_2\n").unwrap();
    assert!(load_bundle(dir.path()).is_err());
}

#[test]
fn missing_file_is_an_error() {
    let dir = written(3);
    fs::remove_file(dir.path().join(DISTANCES_FILE)).unwrap();
    let e = load_bundle(dir.path()).unwrap_err().to_string();
    assert!(e.contains(DISTANCES_FILE), "{e}");
}

#[test]
fn node_count_mismatch_is_an_error() {
    let dir = written(3);
    let other = written(4);
    fs::copy(other.path().join(DISTANCES_FILE), dir.path().join(DISTANCES_FILE)).unwrap();
    let e = load_bundle(dir.path()).unwrap_err().to_string();
    assert!(e.contains("3 nodes") && e.contains('4'), "{e}");
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = written(2);
    let path = dir.path().join(SERIES_FILE);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[5] = "2012-03-01 00:25:00,abc,1.0".into();
    fs::write(&path, lines.join("\n")).unwrap();
    match load_bundle(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
        other => panic!("expected a parse error, got {other:?}"),
    }
    lines[5] = "2012-03-01 00:25:00,1.0".into();
    fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(Error::Parse { line: 6, .. })));
}

#[test]
fn normalisation_ignores_nulls() {
    let bundle = generate_synthetic(3, 300, 4).unwrap();
    let flow = &bundle.flow;
    assert!((0..210).any(|t| (0..3).any(|k| flow.value(t, k).is_none())));
    let norm = Normalizer::fit(flow, 0..210).unwrap();
    for k in 0..3 {
        let xs: Vec<f64> = (0..210).filter_map(|t| flow.value(t, k)).collect();
        let mu = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((norm.mean[k] - mu).abs() < 1e-12);
        // Counting nulls as zero would pull the mean far below ~50.
        let leaked = xs.iter().sum::<f64>() / 210.0;
        assert!((leaked - mu).abs() > 1e-3 || xs.len() == 210);
    }
}

#[test]
fn training_statistics_are_reused_downstream() {
    let bundle = generate_synthetic(3, 600, 5).unwrap();
    let splits = make_windows(&bundle.flow, 12, 12, SplitRatios::default()).unwrap();
    let norm = Normalizer::fit(&bundle.flow, splits.train.range.clone()).unwrap();
    let test_norm = Normalizer::fit(&bundle.flow, splits.test.range.clone()).unwrap();
    assert_ne!(norm, test_norm);
    let start = splits.test.starts[3];
    let batch = ForecastBatch::build(&bundle.flow, &norm, &[start], 12, 12).unwrap();
    let input = batch.input(0);
    for t in 0..12 {
        for k in 0..3 {
            if let Some(raw) = bundle.flow.value(start + t, k) {
                let z = input.data()[(t * 3 + k) * 3];
                assert!((norm.denormalize(z, k) - raw).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn masked_targets_never_reach_loss_or_metrics() {
    let bundle = generate_synthetic(4, 400, 6).unwrap();
    let norm = Normalizer::fit(&bundle.flow, 0..280).unwrap();
    let start = (0..370)
        .find(|&s| (s + 12..s + 24).any(|t| (0..4).any(|k| bundle.flow.value(t, k).is_none())))
        .expect("synthetic data has nulls");
    let batch = ForecastBatch::build(&bundle.flow, &norm, &[start], 12, 12).unwrap();
    let (target, mask) = batch.target(0);
    assert!(mask.iter().any(|m| !m));
    let mut poisoned = target.clone();
    for (v, m) in poisoned.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = 1e9;
        }
    }
    let pred = Tensor::full(target.shape(), 50.0);
    let clean = masked_mae(&pred, &target, mask).unwrap().item();
    let dirty = masked_mae(&pred, &poisoned, mask).unwrap().item();
    assert_eq!(clean, dirty);
    let a = HorizonMetrics::compute(1, pred.data(), target.data(), mask).unwrap();
    let b = HorizonMetrics::compute(1, pred.data(), poisoned.data(), mask).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_cover_each_split_exactly(
        len in 60usize..400,
        input in 1usize..8,
        output in 1usize..8,
        train in 0.3f64..0.8,
        val_share in 0.2f64..0.8,
    ) {
        let val = (1.0 - train) * val_share;
        let ratios = SplitRatios { train, val, test: 1.0 - train - val };
        let bundle = generate_synthetic(2, len, 0).unwrap();
        let span = input + output;
        let bounds = ratios.boundaries(len);
        match make_windows(&bundle.flow, input, output, ratios) {
            Ok(splits) => {
                let sets = [&splits.train, &splits.val, &splits.test];
                for (k, set) in sets.iter().enumerate() {
                    let (lo, hi) = (bounds[k], bounds[k + 1]);
                    prop_assert_eq!(set.range.clone(), lo..hi);
                    let expected: Vec<usize> = (lo..=hi - span).collect();
                    prop_assert_eq!(&set.starts, &expected);
                    prop_assert_eq!(set.len(), hi - lo - span + 1);
                    prop_assert!(set.starts.iter().all(|&s| s >= lo && s + span <= hi));
                }
            }
            Err(_) => {
                prop_assert!((0..3).any(|k| bounds[k + 1] - bounds[k] < span));
            }
        }
    }
}
