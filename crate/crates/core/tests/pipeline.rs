use std::fmt::Write as _;

use chrono::DateTime;
use mvfn_core::data::{
    bin_demand, chronological_split, ingest_trip_records, make_windows, read_trip_records, DemandTensor,
    NodeAssignment, PreparedWindows, ScaleDirection, ScalerStats, Site, TimeFormat, TripRecord, TripSchema, DROPOFF,
    PICKUP,
};
use ndarray::{s, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

const T0: i64 = 1_459_468_800; // 2016-04-01T00:00:00Z

fn iso(t: i64) -> String {
    DateTime::from_timestamp(t, 0)
        .unwrap()
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

#[test]
fn ten_thousand_generated_rows_are_all_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut csv = String::from("ride_id,started_at,ended_at,start_station,end_station\n");
    let mut expected = Vec::new();
    let mut bad_lines = Vec::new();
    for i in 0..10_000 {
        let start = T0 + rng.random_range(0..30 * 86_400);
        let end = start + rng.random_range(60..7_200);
        let (from, to) = (rng.random_range(0..40), rng.random_range(0..40));
        writeln!(csv, "{i},{},{},{from},{to}", iso(start), iso(end)).unwrap();
        expected.push((start, end, from.to_string(), to.to_string()));
        if i % 200 == 0 {
            // a malformed row after every 200 good ones
            writeln!(csv, "x{i},not-a-time,{},{from},{to}", iso(end)).unwrap();
            bad_lines.push(expected.len() + bad_lines.len() + 2);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trips.csv");
    std::fs::write(&path, csv).unwrap();

    let schema = TripSchema::with_node_columns("started_at", "ended_at", "start_station", "end_station");
    let report = ingest_trip_records(&path, &schema).unwrap();
    assert_eq!(report.records.len(), 10_000);
    assert_eq!(report.total_rows(), 10_050);
    let lines: Vec<usize> = report.rejects.iter().map(|r| r.line).collect();
    assert_eq!(lines, bad_lines);
    for (rec, (start, end, from, to)) in report.records.iter().zip(&expected) {
        assert_eq!(rec.pickup_time, *start);
        assert_eq!(rec.dropoff_time, *end);
        assert_eq!(rec.pickup, Site::Key(from.clone()));
        assert_eq!(rec.dropoff, Site::Key(to.clone()));
    }
}

/// Counts by comparing each endpoint against explicit bin edges.
fn brute_force_recount(records: &[TripRecord], start: i64, interval: i64, steps: usize, nodes: usize) -> Array3<f64> {
    let mut out = Array3::zeros((steps, nodes, 2));
    for rec in records {
        for (feature, time, site) in [
            (PICKUP, rec.pickup_time, &rec.pickup),
            (DROPOFF, rec.dropoff_time, &rec.dropoff),
        ] {
            let Site::Key(k) = site else { continue };
            let node: usize = k.parse().unwrap();
            for t in 0..steps {
                let lo = start + t as i64 * interval;
                if lo <= time && time < lo + interval {
                    out[[t, node, feature]] += 1.0;
                }
            }
        }
    }
    out
}

#[test]
fn poisson_trips_bin_to_brute_force_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(68);
    let (steps, nodes, interval) = (96usize, 5usize, 1_800i64);
    let mut pickups = Array3::<f64>::zeros((steps, nodes, 1));
    let mut records = Vec::new();
    for t in 0..steps {
        for n in 0..nodes {
            let rate = 0.5 + 4.0 * ((t as f64 / 48.0 * std::f64::consts::TAU).sin() + 1.0) * (n + 1) as f64 / 5.0;
            let count = Poisson::new(rate).unwrap().sample(&mut rng) as usize;
            pickups[[t, n, 0]] = count as f64;
            for _ in 0..count {
                let pickup_time = T0 + t as i64 * interval + rng.random_range(0..interval);
                records.push(TripRecord {
                    pickup_time,
                    dropoff_time: pickup_time + rng.random_range(0..5_400),
                    pickup: Site::Key(n.to_string()),
                    dropoff: Site::Key(rng.random_range(0..nodes).to_string()),
                });
            }
        }
    }
    let span = (T0, T0 + steps as i64 * interval);
    let binned = bin_demand(
        &records,
        interval,
        &NodeAssignment::Identity { node_count: nodes },
        span,
    )
    .unwrap();
    let oracle = brute_force_recount(&records, T0, interval, steps, nodes);
    assert_eq!(binned.tensor.values, oracle);
    assert_eq!(binned.tensor.values.slice(s![.., .., 0..1]), pickups);
    let late = records.iter().filter(|r| r.dropoff_time >= span.1).count();
    assert_eq!(binned.out_of_span, late);
    assert_eq!(binned.unassigned, 0);
}

#[test]
fn in_memory_and_file_ingest_agree_on_epoch_seconds() {
    let text = "a,b,p,d\n100,200,0,1\n300,250,1,0\n400,500,1,1\n";
    let mut schema = TripSchema::with_node_columns("a", "b", "p", "d");
    schema.time_format = TimeFormat::EpochSeconds;
    schema.max_reject_fraction = 0.5;
    let mem = read_trip_records(text.as_bytes(), &schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.csv"), text).unwrap();
    let file = ingest_trip_records(dir.path().join("t.csv"), &schema).unwrap();
    assert_eq!(mem.records, file.records);
    assert_eq!(mem.records.len(), 2);
    assert_eq!(mem.rejects.len(), 1);
}

fn weekly_tensor(weeks: usize, extra: usize, seed: u64) -> DemandTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = weeks * 336 + extra;
    let mut t = DemandTensor::zeros(steps, 3, T0, 1_800);
    t.values.mapv_inplace(|_| rng.random_range(0..20) as f64);
    t
}

#[test]
fn scaler_sees_only_the_training_segment() {
    let tensor = weekly_tensor(5, 0, 1);
    let split = chronological_split(&tensor, 2, 2, 12, 12).unwrap();
    let mut poisoned = tensor.clone();
    poisoned.values.slice_mut(s![split.train_range.end.., .., ..]).fill(1e6);
    let split2 = chronological_split(&poisoned, 2, 2, 12, 12).unwrap();
    let a = PreparedWindows::from_split(&split, 12, 12, 1).unwrap();
    let b = PreparedWindows::from_split(&split2, 12, 12, 1).unwrap();
    assert_eq!(a.scaler, b.scaler);
    assert_eq!(a.train, b.train);

    // two-pass reference over the training rows only
    for f in 0..2 {
        let lane = split.train.values.slice(s![.., .., f]);
        let n = lane.len() as f64;
        let mean = lane.iter().sum::<f64>() / n;
        let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((a.scaler.mean[f] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((a.scaler.std[f] - var.sqrt()).abs() <= 1e-12 * var.sqrt().max(1.0));
    }

    // scaled training windows invert back to the raw tensor
    let w = &a.train[17];
    let raw = a.scaler.apply(&w.input, ScaleDirection::Inverse);
    let expect = tensor.values.slice(s![w.t0..w.t0 + 12, .., ..]);
    assert!(raw.iter().zip(expect.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
    // held-out windows stay raw
    assert_eq!(a.test[0].input, split.test.values.slice(s![0..12, .., ..]));
}

#[test]
fn ninety_one_day_protocol_counts() {
    let tensor = weekly_tensor(13, 0, 2);
    assert_eq!(tensor.time_steps(), 4368);
    let split = chronological_split(&tensor, 2, 2, 12, 12).unwrap();
    assert_eq!(split.test_range, 3696..4368);
    assert_eq!(split.validation_range, 3024..3696);
    let all = make_windows(&tensor, 12, 12, 1);
    assert_eq!(all.len(), 4345);
    let enumerated = (0..tensor.time_steps())
        .filter(|t0| t0 + 24 <= tensor.time_steps())
        .count();
    assert_eq!(all.len(), enumerated);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binning_conserves_assigned_in_span_endpoints(
        trips in prop::collection::vec((0i64..20_000, 0i64..4_000, 0usize..5, 0usize..5), 0..200),
        nodes in 1usize..5,
    ) {
        let records: Vec<TripRecord> = trips
            .iter()
            .map(|&(t, d, a, b)| TripRecord {
                pickup_time: T0 + t,
                dropoff_time: T0 + t + d,
                pickup: Site::Key(a.to_string()),
                dropoff: Site::Key(b.to_string()),
            })
            .collect();
        let span = (T0, T0 + 18_000);
        let out = bin_demand(&records, 1_800, &NodeAssignment::Identity { node_count: nodes }, span).unwrap();
        let in_span = |t: i64, n: usize| n < nodes && t >= span.0 && t < span.1;
        for (feature, pick) in [(PICKUP, true), (DROPOFF, false)] {
            let expected = records
                .iter()
                .filter(|r| {
                    let (t, site) = if pick { (r.pickup_time, &r.pickup) } else { (r.dropoff_time, &r.dropoff) };
                    let Site::Key(k) = site else { return false };
                    in_span(t, k.parse().unwrap())
                })
                .count();
            prop_assert_eq!(out.tensor.values.slice(s![.., .., feature]).sum(), expected as f64);
        }
        let unassigned = records
            .iter()
            .flat_map(|r| [&r.pickup, &r.dropoff])
            .filter(|s| matches!(s, Site::Key(k) if k.parse::<usize>().unwrap() >= nodes))
            .count();
        prop_assert_eq!(out.unassigned, unassigned);
    }

    #[test]
    fn stride_one_windows_reconstruct_the_prefix(steps in 2usize..60, p in 1usize..8, q in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensor = DemandTensor::zeros(steps, 2, T0, 1_800);
        tensor.values.mapv_inplace(|_| rng.random_range(0.0..10.0));
        let windows = make_windows(&tensor, p, q, 1);
        if steps < p + q {
            prop_assert!(windows.is_empty());
            return Ok(());
        }
        prop_assert_eq!(windows.len(), steps - p - q + 1);
        // first step of every input, then the tail of the last input
        let mut rebuilt: Vec<f64> = windows.iter().flat_map(|w| w.input.slice(s![0, .., ..]).iter().copied().collect::<Vec<f64>>()).collect();
        rebuilt.extend(windows.last().unwrap().input.slice(s![1.., .., ..]).iter().copied());
        let prefix: Vec<f64> = tensor.values.slice(s![..steps - q, .., ..]).iter().copied().collect();
        prop_assert_eq!(rebuilt, prefix);
    }

    #[test]
    fn scaler_round_trip(values in prop::collection::vec(-1e6f64..1e6, 2..80), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = values.len() / 2;
        prop_assume!(steps >= 1);
        let x = Array3::from_shape_vec((steps, 1, 2), values[..steps * 2].to_vec()).unwrap();
        let stats = ScalerStats {
            mean: vec![rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)],
            std: vec![rng.random_range(1e-3..50.0), rng.random_range(1e-3..50.0)],
        };
        let back = stats.apply(&stats.apply(&x, ScaleDirection::Forward), ScaleDirection::Inverse);
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn split_targets_are_disjoint(weeks in 2usize..5, extra in 24usize..400, val in 0usize..2, test in 1usize..2) {
        prop_assume!(val + test < weeks);
        let tensor = weekly_tensor(weeks, extra, 9);
        let split = chronological_split(&tensor, val, test, 12, 12).unwrap();
        let reads = |offset: usize, seg: &DemandTensor| -> Vec<usize> {
            make_windows(seg, 12, 12, 1).iter().flat_map(|w| offset + w.t0..offset + w.t0 + 24).collect()
        };
        let tr = reads(split.train_range.start, &split.train);
        let va = reads(split.validation_range.start, &split.validation);
        let te = reads(split.test_range.start, &split.test);
        prop_assert!(tr.iter().all(|&i| i < split.train_range.end));
        prop_assert!(va.iter().all(|&i| split.validation_range.contains(&i)));
        prop_assert!(te.iter().all(|&i| split.test_range.contains(&i)));
    }
}
