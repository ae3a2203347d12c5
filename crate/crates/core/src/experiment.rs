//! Batch experiments, on-disk run logs, the summary report and the purge
//! demonstration.
//!
//! Layout of an output directory:
//!
//! ```text
//! run.toml                       experiment order and baseline label
//! report.csv                     one row per visible experiment
//! <label>/experiment.toml        settings needed to rebuild the report
//! <label>/rep-<r>/allocations.csv
//! <label>/rep-<r>/chunk_writes.csv   (when enabled)
//! <label>/rep-<r>/secrets.csv
//! <label>/rep-<r>/wear.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentSpec, MechanismKind, RunConfig};
use crate::fs::{FileSystem, FsConfig, FsError};
use crate::medium::{Geometry, Medium, MediumError};
use crate::metrics::{
    allocation_rate, confidence_interval, deletion_latency, expected_lifetime, AllocationRecord, SecretRow, Window,
};
use crate::secdel::{self, JunkSource, PurgeReport, SecdelError};
use crate::workload::{run_simulation, RunResult, SimError};

pub const RUN_FILE: &str = "run.toml";
pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_HEADER: &str =
    "config_label,free_blocks_target,p01,p50,p90,p95,p100,allocs_per_hour,ratio,lifetime_years,ci_half_width";

/// Label of the reference run added when a config has no `none` experiment.
pub const HIDDEN_BASELINE: &str = "_baseline";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{label} rep {rep}: {source}")]
    Sim { label: String, rep: u32, source: SimError },
    #[error("missing {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Metadata { path: PathBuf, message: String },
    #[error("invalid secret: {0}")]
    InvalidSecret(String),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error(transparent)]
    Medium(#[from] MediumError),
    #[error(transparent)]
    Secdel(#[from] SecdelError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub experiments: Vec<String>,
    pub baseline: String,
}

/// Per-experiment settings stored next to the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMeta {
    pub label: String,
    pub mechanism: MechanismKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_blocks_target: Option<f64>,
    pub seed: u64,
    pub repetitions: u32,
    pub warmup_ticks: u64,
    pub duration_ticks: u64,
    pub geometry: Geometry,
}

impl ExperimentMeta {
    pub fn window(&self) -> Window {
        Window::new(self.warmup_ticks, self.duration_ticks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config_label: String,
    pub free_blocks_target: Option<f64>,
    /// Mean over repetitions of each latency percentile, in hours; `None`
    /// when no secret was resolved in any repetition.
    pub percentiles: Option<[f64; 5]>,
    pub allocs_per_hour: f64,
    pub ratio: f64,
    pub lifetime_years: f64,
    /// 95% half width of the allocation rate across repetitions.
    pub ci_half_width: Option<f64>,
}

fn fixed(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        let mut line = String::new();
        let target = self.free_blocks_target.map(|t| t.to_string()).unwrap_or_default();
        write!(line, "{},{}", self.config_label, target).unwrap();
        match self.percentiles {
            Some(p) => p.iter().for_each(|v| write!(line, ",{}", fixed(*v)).unwrap()),
            None => line.push_str(",NaN,NaN,NaN,NaN,NaN"),
        }
        write!(
            line,
            ",{},{},{},{}",
            fixed(self.allocs_per_hour),
            fixed(self.ratio),
            fixed(self.lifetime_years),
            fixed(self.ci_half_width.unwrap_or(f64::NAN))
        )
        .unwrap();
        line
    }
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    let csv_err = |source| ExperimentError::Csv { path: path.into(), source };
    let file = fs::File::create(path).map_err(io_err(path))?;
    // explicit header so empty logs still carry one
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(std::io::BufWriter::new(file));
    w.write_record(header.split(',')).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(ExperimentError::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|source| ExperimentError::Csv { path: path.into(), source })?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|source| ExperimentError::Csv { path: path.into(), source })
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).expect("metadata serializes");
    fs::write(path, text).map_err(io_err(path))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(ExperimentError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| ExperimentError::Metadata { path: path.into(), message: e.to_string() })
}

#[derive(Serialize)]
struct WearRow {
    block: u32,
    erase_count: u64,
}

fn write_run_logs(dir: &Path, result: &RunResult, chunk_writes: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(&dir.join("allocations.csv"), &result.allocations, "time_ticks,physical_block,sequence_number,free_chunks,erased_blocks,partition")?;
    if chunk_writes {
        write_csv(&dir.join("chunk_writes.csv"), &result.chunk_writes, "time_ticks,block,chunk,writer_id,kind,object_id,chunk_offset")?;
    }
    let secrets: Vec<SecretRow> = result.secrets.iter().map(|s| s.to_row()).collect();
    write_csv(&dir.join("secrets.csv"), &secrets, "secret_id,t_written,t_deleted,t_erased,censored")?;
    let wear: Vec<WearRow> = result
        .wear
        .per_block
        .iter()
        .enumerate()
        .map(|(i, &erase_count)| WearRow { block: i as u32 + 1, erase_count })
        .collect();
    write_csv(&dir.join("wear.csv"), &wear, "block,erase_count")
}

/// Runs every experiment of `cfg` (all repetitions, in parallel), writes the
/// logs under `out_dir` and returns the report rows, which are also written
/// to `report.csv`. `base_dir` anchors a relative profile path.
pub fn simulate(cfg: &RunConfig, base_dir: &Path, out_dir: &Path, progress: &(dyn Fn(&str) + Sync)) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let profile = cfg.load_profile(base_dir)?;
    let mut experiments = cfg.experiments.clone();
    let baseline = match experiments.iter().find(|e| e.mechanism == MechanismKind::None) {
        Some(e) => e.label.clone(),
        None => {
            experiments.push(ExperimentSpec::none(HIDDEN_BASELINE));
            HIDDEN_BASELINE.to_string()
        }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let manifest = RunManifest { experiments: cfg.experiments.iter().map(|e| e.label.clone()).collect(), baseline };
    for e in &experiments {
        let dir = out_dir.join(&e.label);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let meta = ExperimentMeta {
            label: e.label.clone(),
            mechanism: e.mechanism,
            free_blocks_target: e.free_blocks_target,
            seed: cfg.seed,
            repetitions: cfg.repetitions,
            warmup_ticks: cfg.warmup_ticks,
            duration_ticks: cfg.duration_ticks,
            geometry: cfg.geometry,
        };
        write_toml(&dir.join(EXPERIMENT_FILE), &meta)?;
    }

    let jobs: Vec<(&ExperimentSpec, u32)> =
        experiments.iter().flat_map(|e| (0..cfg.repetitions).map(move |r| (e, r))).collect();
    jobs.par_iter().try_for_each(|&(e, rep)| -> Result<()> {
        let sim = cfg.sim_config(e, rep)?;
        let sim_err = |source| ExperimentError::Sim { label: e.label.clone(), rep, source };
        let result = run_simulation(profile.clone(), sim).map_err(sim_err)?;
        write_run_logs(&out_dir.join(&e.label).join(format!("rep-{rep}")), &result, cfg.record_chunk_writes)?;
        progress(&format!(
            "{} rep {rep}: {} allocations, {} secrets",
            e.label,
            result.allocations.len(),
            result.secrets.len()
        ));
        Ok(())
    })?;
    write_toml(&out_dir.join(RUN_FILE), &manifest)?;
    report(out_dir)
}

struct ExperimentSummary {
    meta: ExperimentMeta,
    rates: Vec<f64>,
    percentiles: Vec<[f64; 5]>,
}

fn summarize(dir: &Path) -> Result<ExperimentSummary> {
    let meta: ExperimentMeta = read_toml(&dir.join(EXPERIMENT_FILE))?;
    let window = meta.window();
    let mut rates = Vec::new();
    let mut percentiles = Vec::new();
    for rep in 0..meta.repetitions {
        let rep_dir = dir.join(format!("rep-{rep}"));
        let allocations: Vec<AllocationRecord> = read_csv(&rep_dir.join("allocations.csv"))?;
        let secrets: Vec<SecretRow> = read_csv(&rep_dir.join("secrets.csv"))?;
        rates.push(allocation_rate(&allocations, window).unwrap_or(0.0));
        let in_window: Vec<SecretRow> = secrets.into_iter().filter(|s| window.contains(s.t_written)).collect();
        if let Ok(stats) = deletion_latency(&in_window) {
            percentiles.push(stats.percentiles);
        }
    }
    Ok(ExperimentSummary { meta, rates, percentiles })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Rebuilds `report.csv` in `out_dir` from the raw logs and returns its rows.
pub fn report(out_dir: &Path) -> Result<Vec<ReportRow>> {
    let manifest: RunManifest = read_toml(&out_dir.join(RUN_FILE))?;
    let baseline = summarize(&out_dir.join(&manifest.baseline))?;
    let baseline_rate = mean(&baseline.rates);
    let mut rows = Vec::new();
    for label in &manifest.experiments {
        let s = if *label == manifest.baseline { None } else { Some(summarize(&out_dir.join(label))?) };
        let s = s.as_ref().unwrap_or(&baseline);
        let rate = mean(&s.rates);
        let percentiles = (!s.percentiles.is_empty()).then(|| {
            std::array::from_fn(|i| mean(&s.percentiles.iter().map(|p| p[i]).collect::<Vec<_>>()))
        });
        rows.push(ReportRow {
            config_label: label.clone(),
            free_blocks_target: s.meta.free_blocks_target,
            percentiles,
            allocs_per_hour: rate,
            ratio: if baseline_rate > 0.0 { rate / baseline_rate } else { f64::NAN },
            lifetime_years: expected_lifetime(rate, &s.meta.geometry).unwrap_or(f64::INFINITY),
            ci_half_width: confidence_interval(&s.rates, 0.95).ok().map(|(_, h)| h),
        });
    }
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, render_report(&rows)).map_err(io_err(&path))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub geometry: Geometry,
    pub zero_overwrite: bool,
    pub seed: u64,
    /// Where to save the four medium snapshots, as `<prefix>-<n>-<stage>.img`.
    pub snapshot_prefix: Option<PathBuf>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            geometry: Geometry { block_count: 64, ..Geometry::default() },
            zero_overwrite: false,
            seed: 0,
            snapshot_prefix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoStage {
    pub name: &'static str,
    pub hits: usize,
    pub expect_found: bool,
    pub snapshot: Option<PathBuf>,
}

impl DemoStage {
    pub fn as_expected(&self) -> bool {
        (self.hits > 0) == self.expect_found
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoOutcome {
    pub stages: Vec<DemoStage>,
    pub purge: PurgeReport,
}

impl DemoOutcome {
    /// True when every snapshot matched its expectation, which includes a
    /// clean final scan.
    pub fn passed(&self) -> bool {
        self.stages.iter().all(DemoStage::as_expected)
    }
}

/// Writes a secret among other data, deletes it and purges, scanning a
/// snapshot of the raw medium before the write and after each step.
pub fn purge_demo(secret: &[u8], cfg: &DemoConfig) -> Result<DemoOutcome> {
    if secret.is_empty() {
        return Err(ExperimentError::InvalidSecret("secret must not be empty".into()));
    }
    if secret.len() > cfg.geometry.chunk_size_bytes {
        return Err(ExperimentError::InvalidSecret(format!(
            "secret is {} bytes, longer than a {}-byte chunk",
            secret.len(),
            cfg.geometry.chunk_size_bytes
        )));
    }
    let g = cfg.geometry;
    let mut fs = FileSystem::new(Medium::new(g)?, FsConfig::default())?;
    secdel::set_zero_overwrite(&mut fs, cfg.zero_overwrite)?;
    let junk = JunkSource::new(cfg.seed);
    let mut stages = Vec::new();
    let mut snapshot = |fs: &FileSystem, name: &'static str, expect_found: bool| -> Result<()> {
        let hits = fs.medium().raw_scan(secret)?.len();
        let path = match &cfg.snapshot_prefix {
            Some(prefix) => {
                let mut p = prefix.clone().into_os_string();
                p.push(format!("-{}-{name}.img", stages.len()));
                let p = PathBuf::from(p);
                fs.medium().save(&p)?;
                Some(p)
            }
            None => None,
        };
        stages.push(DemoStage { name, hits, expect_found, snapshot: path });
        Ok(())
    };

    // ordinary data around the secret so it shares blocks with live files
    let before = fs.create_file("app-data", 1)?;
    let before_len = g.chunks_per_block * g.chunk_size_bytes * 3 / 2;
    fs.write_file(before, 0, &junk.bytes(before, g.chunk_size_bytes, 0, before_len))?;
    snapshot(&fs, "before-write", false)?;

    let id = fs.create_file("secret", 1)?;
    fs.write_file(id, 0, secret)?;
    let after = fs.create_file("app-log", 1)?;
    fs.write_file(after, 0, &junk.bytes(after, g.chunk_size_bytes, 0, g.chunk_size_bytes * 4))?;
    snapshot(&fs, "after-write", true)?;

    fs.delete_file(id)?;
    snapshot(&fs, "after-delete", !cfg.zero_overwrite)?;

    let purge = secdel::purge(&mut fs, &junk)?;
    snapshot(&fs, "after-purge", false)?;
    Ok(DemoOutcome { stages, purge })
}
