//! Instrumentation records and the statistics derived from them.
//!
//! Times are integer ticks (one tick is one simulated second); everything
//! reported to users is converted to hours.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::medium::Geometry;

pub const TICKS_PER_HOUR: f64 = 3600.0;

/// Hours in a mean (365.25 day) year.
pub const HOURS_PER_YEAR: f64 = 8766.0;

/// Percentile ranks reported for deletion latency.
pub const LATENCY_PERCENTILES: [f64; 5] = [1.0, 50.0, 90.0, 95.0, 100.0];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no secret records to summarise")]
    NoRecords,
    #[error("observation window is empty")]
    EmptyWindow,
    #[error("block allocation rate must be positive")]
    ZeroRate,
    #[error("confidence interval needs at least two runs, got {0}")]
    TooFewRuns(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// One row of `allocations.csv`: logged whenever the file system opens a
/// new erase block for writing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub time_ticks: u64,
    pub physical_block: u32,
    pub sequence_number: u64,
    pub free_chunks: u64,
    pub erased_blocks: u64,
    pub partition: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    File,
    Header,
    Junk,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::File => "file",
            DataKind::Header => "header",
            DataKind::Junk => "junk",
        })
    }
}

/// One row of `chunk_writes.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkWriteRecord {
    pub time_ticks: u64,
    pub block: u32,
    pub chunk: u32,
    pub writer_id: u8,
    pub kind: DataKind,
    pub object_id: u32,
    pub chunk_offset: u32,
}

/// One row of `secrets.csv`. `t_deleted` is absent when the probe never got
/// to delete the secret; `t_erased` is absent when the secret outlived the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretRow {
    pub secret_id: u64,
    pub t_written: u64,
    pub t_deleted: Option<u64>,
    pub t_erased: Option<u64>,
    pub censored: bool,
}

impl SecretRow {
    /// Deletion latency in ticks, or `None` for secrets never deleted or
    /// still on the medium.
    pub fn latency_ticks(&self) -> Option<u64> {
        match (self.t_deleted, self.t_erased) {
            (Some(t1), Some(t2)) if !self.censored => Some(t2.saturating_sub(t1)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    /// Latency in hours at each rank of [`LATENCY_PERCENTILES`].
    pub percentiles: [f64; 5],
    pub n_secrets: usize,
    pub n_censored: usize,
    pub mean: f64,
    /// Sorted resolved latencies in hours.
    pub values: Vec<f64>,
}

impl LatencyStats {
    pub fn p50(&self) -> f64 {
        self.percentiles[1]
    }
}

/// Nearest-rank percentile of an ascending slice: the value at index
/// `ceil(p/100 * n) - 1`, clamped to the first element for tiny `p`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty list");
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Deletion latency (t2 - t1) summary over the resolved secrets. Censored
/// secrets are counted but excluded from the percentiles; secrets that were
/// never deleted are ignored.
pub fn deletion_latency(records: &[SecretRow]) -> Result<LatencyStats> {
    let deleted: Vec<&SecretRow> = records.iter().filter(|r| r.t_deleted.is_some()).collect();
    let n_censored = deleted.iter().filter(|r| r.censored || r.t_erased.is_none()).count();
    let mut values: Vec<f64> = deleted
        .iter()
        .filter_map(|r| r.latency_ticks())
        .map(|t| t as f64 / TICKS_PER_HOUR)
        .collect();
    if values.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    values.sort_by(f64::total_cmp);
    let percentiles = LATENCY_PERCENTILES.map(|p| nearest_rank(&values, p));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(LatencyStats { percentiles, n_secrets: deleted.len(), n_censored, mean, values })
}

/// Half-open observation window in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn new(start: u64, end: u64) -> Self {
        Window { start, end }
    }

    pub fn hours(&self) -> f64 {
        self.end.saturating_sub(self.start) as f64 / TICKS_PER_HOUR
    }

    pub fn contains(&self, t: u64) -> bool {
        (self.start..self.end).contains(&t)
    }
}

/// Block allocations per hour inside `window`.
pub fn allocation_rate(records: &[AllocationRecord], window: Window) -> Result<f64> {
    if window.end <= window.start {
        return Err(MetricsError::EmptyWindow);
    }
    let count = records.iter().filter(|r| window.contains(r.time_ticks)).count();
    Ok(count as f64 / window.hours())
}

/// Expected minimum device lifetime in years, assuming wear is spread
/// uniformly over every block.
pub fn expected_lifetime(rate_per_hour: f64, geometry: &Geometry) -> Result<f64> {
    if !(rate_per_hour > 0.0) {
        return Err(MetricsError::ZeroRate);
    }
    let budget = geometry.block_count as f64 * geometry.erasure_limit as f64;
    Ok(budget / (rate_per_hour * HOURS_PER_YEAR))
}

/// Student-t confidence interval for the mean: `(mean, half_width)`.
pub fn confidence_interval(values: &[f64], level: f64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewRuns(n));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidLevel(level));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

/// For each physical block, the gaps in hours between consecutive
/// allocations. Blocks allocated once map to an empty list.
pub fn reallocation_periods(records: &[AllocationRecord]) -> BTreeMap<u32, Vec<f64>> {
    let mut last: BTreeMap<u32, u64> = BTreeMap::new();
    let mut periods: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in records {
        let entry = periods.entry(r.physical_block).or_default();
        if let Some(prev) = last.insert(r.physical_block, r.time_ticks) {
            entry.push(r.time_ticks.saturating_sub(prev) as f64 / TICKS_PER_HOUR);
        }
    }
    periods
}

/// Wear figures for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct WearReport {
    pub block_allocs_per_hour: f64,
    pub ratio_vs_baseline: f64,
    /// `None` when no block was allocated.
    pub expected_min_lifetime_years: Option<f64>,
    pub total_erasures: u64,
    pub max_block_erasures: u64,
}

impl WearReport {
    pub fn new(rate: f64, baseline_rate: f64, geometry: &Geometry, total_erasures: u64, max_block_erasures: u64) -> Self {
        WearReport {
            block_allocs_per_hour: rate,
            ratio_vs_baseline: if baseline_rate > 0.0 { rate / baseline_rate } else { f64::NAN },
            expected_min_lifetime_years: expected_lifetime(rate, geometry).ok(),
            total_erasures,
            max_block_erasures,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secret(t1: u64, t2: Option<u64>) -> SecretRow {
        SecretRow { secret_id: 0, t_written: 0, t_deleted: Some(t1), t_erased: t2, censored: t2.is_none() }
    }

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

    #[test]
    fn latency_from_ticks() {
        let s = deletion_latency(&[secret(25, Some(40))]).unwrap();
        for p in s.percentiles {
            assert_eq!(p, 15.0 / 3600.0);
        }
    }

    #[test]
    fn nearest_rank_on_one_to_hundred() {
        let rows: Vec<_> = (1..=100).map(|h| secret(0, Some(h * 3600))).collect();
        let s = deletion_latency(&rows).unwrap();
        assert_eq!(s.percentiles, [1.0, 50.0, 90.0, 95.0, 100.0]);
        assert_eq!(s.mean, 50.5);
    }

    #[test]
    fn censored_secrets_excluded_but_counted() {
        let rows = vec![secret(0, Some(7200)), secret(0, None), secret(10, None)];
        let s = deletion_latency(&rows).unwrap();
        assert_eq!(s.n_secrets, 3);
        assert_eq!(s.n_censored, 2);
        assert_eq!(s.values, vec![2.0]);
        assert_eq!(deletion_latency(&[secret(0, None)]), Err(MetricsError::NoRecords));
        assert_eq!(deletion_latency(&[]), Err(MetricsError::NoRecords));
    }

    #[test]
    fn never_deleted_secrets_ignored() {
        let mut pending = secret(0, None);
        pending.t_deleted = None;
        pending.censored = false;
        let s = deletion_latency(&[pending, secret(0, Some(3600))]).unwrap();
        assert_eq!(s.n_secrets, 1);
        assert_eq!(s.n_censored, 0);
    }

    #[test]
    fn rate_is_count_over_hours() {
        let recs: Vec<_> = (0..10).map(|i| alloc(i * 700, 1)).collect();
        assert_eq!(allocation_rate(&recs, Window::new(0, 7200)).unwrap(), 5.0);
        assert_eq!(allocation_rate(&recs, Window::new(5, 5)), Err(MetricsError::EmptyWindow));
    }

    #[test]
    fn lifetime_table_rows() {
        let g = Geometry::default();
        assert!((expected_lifetime(32.57, &g).unwrap() - 55.1).abs() <= 0.1);
        assert!((expected_lifetime(325.37, &g).unwrap() - 5.5).abs() <= 0.1);
        assert!((expected_lifetime(196.00, &g).unwrap() - 9.1).abs() <= 0.1);
        assert_eq!(expected_lifetime(0.0, &g), Err(MetricsError::ZeroRate));
        assert_eq!(expected_lifetime(-1.0, &g), Err(MetricsError::ZeroRate));
    }

    #[test]
    fn ci_matches_t_table() {
        let (m, h) = confidence_interval(&[3.0; 8], 0.95).unwrap();
        assert_eq!((m, h), (3.0, 0.0));
        let vals: Vec<f64> = (1..=8).map(f64::from).collect();
        let (m, h) = confidence_interval(&vals, 0.95).unwrap();
        assert_eq!(m, 4.5);
        // t(7, 0.975) = 2.3646 from a standard table, s = sqrt(6)
        let expected = 2.3646 * 6f64.sqrt() / 8f64.sqrt();
        assert!((h - expected).abs() < 1e-3, "{h} vs {expected}");
        assert!((h - 2.048).abs() < 1e-3);
        assert_eq!(confidence_interval(&[1.0], 0.95), Err(MetricsError::TooFewRuns(1)));
    }

    #[test]
    fn periods_per_block() {
        let recs = vec![alloc(0, 3), alloc(100, 4), alloc(30 * 3600, 3)];
        let p = reallocation_periods(&recs);
        assert_eq!(p[&3], vec![30.0]);
        assert!(p[&4].is_empty());
        assert!(!p.contains_key(&5));
    }

    #[test]
    fn wear_report_ratio() {
        let w = WearReport::new(20.0, 10.0, &Geometry::default(), 7, 2);
        assert_eq!(w.ratio_vs_baseline, 2.0);
        assert!(w.expected_min_lifetime_years.is_some());
        let idle = WearReport::new(0.0, 10.0, &Geometry::default(), 0, 0);
        assert_eq!(idle.expected_min_lifetime_years, None);
    }
}
