use flashlab::metrics::{
    allocation_rate, confidence_interval, deletion_latency, expected_lifetime, nearest_rank, reallocation_periods,
    AllocationRecord, MetricsError, SecretRow, Window,
};
use flashlab::Geometry;
use proptest::prelude::*;

fn alloc(t: u64, block: u32) -> AllocationRecord {
    AllocationRecord {
        time_ticks: t,
        physical_block: block,
        sequence_number: t,
        free_chunks: 0,
        erased_blocks: 0,
        partition: "data".into(),
    }
}

/// Smallest sample value whose cumulative share reaches p percent.
fn rank_by_counting(values: &[f64], p: f64) -> f64 {
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    *sorted
        .iter()
        .find(|&&v| sorted.iter().filter(|&&x| x <= v).count() as f64 >= (p / 100.0 * n).max(1.0) - 1e-9)
        .unwrap()
}

#[test]
fn ci_of_one_to_eight_matches_t_table() {
    // t(0.975, 7) = 2.3646 from a printed table; sd of 1..8 is sqrt(6).
    let vals: Vec<f64> = (1..=8).map(f64::from).collect();
    let (mean, half) = confidence_interval(&vals, 0.95).unwrap();
    assert_eq!(mean, 4.5);
    let expected = 2.3646 * 6f64.sqrt() / 8f64.sqrt();
    assert!((half - expected).abs() < 1e-3, "{half} vs {expected}");
    assert!((half - 2.048).abs() < 1e-3);
}

#[test]
fn ci_rejects_single_run_and_bad_level() {
    assert_eq!(confidence_interval(&[1.0], 0.95), Err(MetricsError::TooFewRuns(1)));
    assert_eq!(confidence_interval(&[1.0, 2.0], 1.0), Err(MetricsError::InvalidLevel(1.0)));
}

#[test]
fn lifetime_of_default_medium() {
    let g = Geometry::default();
    // 1571 blocks * 10^4 erasures / (100 allocs/h * 8766 h/y)
    let years = expected_lifetime(100.0, &g).unwrap();
    assert!((years - 15_710_000.0 / 876_600.0).abs() < 1e-9);
    assert_eq!(expected_lifetime(0.0, &g), Err(MetricsError::ZeroRate));
}

#[test]
fn latency_excludes_censored_and_undeleted() {
    let rows = vec![
        SecretRow { secret_id: 0, t_written: 0, t_deleted: Some(10), t_erased: Some(3610), censored: false },
        SecretRow { secret_id: 1, t_written: 0, t_deleted: Some(10), t_erased: Some(7210), censored: false },
        SecretRow { secret_id: 2, t_written: 0, t_deleted: Some(10), t_erased: None, censored: true },
        SecretRow { secret_id: 3, t_written: 0, t_deleted: None, t_erased: None, censored: true },
    ];
    let stats = deletion_latency(&rows).unwrap();
    assert_eq!(stats.values, vec![1.0, 2.0]);
    assert_eq!((stats.n_secrets, stats.n_censored), (3, 1));
    assert_eq!(stats.p50(), 1.0);
    assert_eq!(stats.percentiles[4], 2.0);
}

#[test]
fn reallocation_gaps_per_block() {
    let recs = [alloc(0, 3), alloc(3600, 4), alloc(7200, 3), alloc(18000, 3)];
    let gaps = reallocation_periods(&recs);
    assert_eq!(gaps[&3], vec![2.0, 3.0]);
    assert!(gaps[&4].is_empty());
}

proptest! {
    #[test]
    fn nearest_rank_agrees_with_counting(
        mut vals in prop::collection::vec(0.0f64..1e6, 1..60),
        p in 0.5f64..100.0,
    ) {
        let oracle = rank_by_counting(&vals, p);
        vals.sort_by(f64::total_cmp);
        prop_assert_eq!(nearest_rank(&vals, p), oracle);
    }

    #[test]
    fn rate_splits_over_sub_windows(
        times in prop::collection::vec(0u64..100_000, 0..200),
        cut in 1u64..99_999,
    ) {
        let recs: Vec<_> = times.iter().map(|&t| alloc(t, 1)).collect();
        let whole = allocation_rate(&recs, Window::new(0, 100_000)).unwrap() * 100_000.0;
        let left = allocation_rate(&recs, Window::new(0, cut)).unwrap() * cut as f64;
        let right = allocation_rate(&recs, Window::new(cut, 100_000)).unwrap() * (100_000 - cut) as f64;
        prop_assert!((whole - left - right).abs() < 1e-6 * whole.max(1.0));
        prop_assert!((whole / 3600.0 - times.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn ci_half_width_scales_with_data(vals in prop::collection::vec(-1e3f64..1e3, 2..20), k in 0.1f64..10.0) {
        let (m, h) = confidence_interval(&vals, 0.95).unwrap();
        let scaled: Vec<f64> = vals.iter().map(|v| v * k).collect();
        let (ms, hs) = confidence_interval(&scaled, 0.95).unwrap();
        prop_assert!((ms - m * k).abs() < 1e-6 * (1.0 + m.abs() * k));
        prop_assert!((hs - h * k).abs() < 1e-6 * (1.0 + h * k));
    }
}
