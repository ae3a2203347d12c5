//! Run configuration documents.
//!
//! A run config names a workload profile, the medium and file-system
//! parameters shared by every experiment, and a list of experiments that
//! differ only in their deletion mechanism.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fs::FsConfig;
use crate::medium::{Geometry, DEFAULT_BLOCK_COUNT};
use crate::secdel::BallooningConfig;
use crate::workload::{load_profile, Mechanism, ProfileError, SimConfig, WorkloadProfile, ANDROID_LIKE_PROFILE};

/// Profile reference that selects the profile compiled into the crate.
pub const BUILTIN_PROFILE: &str = "builtin:android-like";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("profile {path}: {source}")]
    Profile { path: String, source: ProfileError },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    None,
    Ballooning,
    Purge,
    ZeroOverwrite,
}

impl MechanismKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismKind::None => "none",
            MechanismKind::Ballooning => "ballooning",
            MechanismKind::Purge => "purge",
            MechanismKind::ZeroOverwrite => "zero-overwrite",
        }
    }
}

fn default_junk_blocks() -> u32 {
    1
}

fn default_balloon_period() -> u64 {
    60
}

fn default_min_free_fraction() -> f64 {
    0.05
}

/// One row of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Bare label used for the output directory and report row.
    pub label: String,
    pub mechanism: MechanismKind,
    /// Target free space in erase blocks of the reference medium. Scaled by
    /// `block_count / target_reference_blocks` before use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_blocks_target: Option<f64>,
    /// Explicit thresholds in erase blocks, overriding the target mapping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_threshold_blocks: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_threshold_blocks: Option<f64>,
    #[serde(default = "default_junk_blocks")]
    pub junk_file_blocks: u32,
    #[serde(default = "default_balloon_period")]
    pub balloon_period_ticks: u64,
    #[serde(default = "default_min_free_fraction")]
    pub min_free_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_age_limit: Option<u64>,
    /// Purge times in ticks; empty purges after every secret deletion.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub purge_times: Vec<u64>,
}

impl ExperimentSpec {
    pub fn none(label: &str) -> Self {
        ExperimentSpec {
            label: label.to_string(),
            mechanism: MechanismKind::None,
            free_blocks_target: None,
            upper_threshold_blocks: None,
            lower_threshold_blocks: None,
            junk_file_blocks: default_junk_blocks(),
            balloon_period_ticks: default_balloon_period(),
            min_free_fraction: default_min_free_fraction(),
            rotation_age_limit: None,
            purge_times: Vec::new(),
        }
    }

    pub fn ballooning(label: &str, free_blocks_target: f64) -> Self {
        ExperimentSpec { mechanism: MechanismKind::Ballooning, free_blocks_target: Some(free_blocks_target), ..Self::none(label) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path to a profile document, relative to the config file, or
    /// `builtin:android-like`.
    pub profile: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    pub duration_ticks: u64,
    #[serde(default)]
    pub warmup_ticks: u64,
    /// Ticks between secret probes.
    #[serde(default = "default_secret_period")]
    pub secret_period_ticks: u64,
    /// Whether to write `chunk_writes.csv` (large on long runs).
    #[serde(default = "default_true")]
    pub record_chunk_writes: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Medium size the free-space targets refer to.
    #[serde(default = "default_reference_blocks")]
    pub target_reference_blocks: usize,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub fs: FsConfig,
    #[serde(rename = "experiment")]
    pub experiments: Vec<ExperimentSpec>,
}

fn default_repetitions() -> u32 {
    1
}

fn default_secret_period() -> u64 {
    1800
}

fn default_true() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("flashlab-out")
}

fn default_reference_blocks() -> usize {
    DEFAULT_BLOCK_COUNT
}

fn valid_label(label: &str) -> bool {
    !label.is_empty() && !label.starts_with('_') && label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl RunConfig {
    pub fn parse(source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(source).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.repetitions < 1 {
            return bad("repetitions must be >= 1".into());
        }
        if self.warmup_ticks > self.duration_ticks {
            return bad("warmup_ticks exceeds duration_ticks".into());
        }
        if self.secret_period_ticks == 0 {
            return bad("secret_period_ticks must be positive".into());
        }
        if self.target_reference_blocks == 0 {
            return bad("target_reference_blocks must be positive".into());
        }
        self.geometry.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.fs.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.experiments.is_empty() {
            return bad("at least one [[experiment]] is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.experiments {
            if !valid_label(&e.label) {
                return bad(format!("label {:?} must be letters, digits, '-', '_' or '.' and not start with '_'", e.label));
            }
            if !seen.insert(e.label.as_str()) {
                return bad(format!("duplicate label {:?}", e.label));
            }
            self.mechanism(e).map_err(|m| ConfigError::Invalid(format!("experiment {:?}: {m}", e.label)))?;
        }
        Ok(())
    }

    /// Target free blocks rescaled to this config's medium.
    pub fn scaled_blocks(&self, reference_blocks: f64) -> f64 {
        reference_blocks * self.geometry.block_count as f64 / self.target_reference_blocks as f64
    }

    /// The simulator mechanism for one experiment.
    pub fn mechanism(&self, e: &ExperimentSpec) -> Result<Mechanism, String> {
        let cpb = self.geometry.chunks_per_block as u64;
        let ballooning_only = e.free_blocks_target.is_some()
            || e.upper_threshold_blocks.is_some()
            || e.lower_threshold_blocks.is_some()
            || e.rotation_age_limit.is_some();
        if e.mechanism != MechanismKind::Ballooning && ballooning_only {
            return Err("free-space targets and thresholds apply to ballooning only".into());
        }
        if e.mechanism != MechanismKind::Purge && !e.purge_times.is_empty() {
            return Err("purge_times apply to the purge mechanism only".into());
        }
        Ok(match e.mechanism {
            MechanismKind::None => Mechanism::None,
            MechanismKind::ZeroOverwrite => {
                if !self.geometry.multiple_programming_allowed {
                    return Err("zero-overwrite needs a medium that allows multiple programming".into());
                }
                Mechanism::ZeroOverwrite
            }
            MechanismKind::Purge => Mechanism::Purge { times: e.purge_times.clone() },
            MechanismKind::Ballooning => {
                let mut config = match (e.free_blocks_target, e.upper_threshold_blocks, e.lower_threshold_blocks) {
                    (_, Some(upper), Some(lower)) => {
                        let chunks = |b: f64| (self.scaled_blocks(b).max(0.0) * cpb as f64).round() as u64;
                        BallooningConfig {
                            upper_threshold_chunks: chunks(upper),
                            lower_threshold_chunks: chunks(lower),
                            junk_file_blocks: e.junk_file_blocks,
                            min_free_fraction: e.min_free_fraction,
                            rotation_age_limit: None,
                        }
                    }
                    (Some(target), None, None) => {
                        BallooningConfig::for_target_free_blocks(self.scaled_blocks(target), e.junk_file_blocks, cpb)
                    }
                    _ => return Err("ballooning needs free_blocks_target or both threshold bounds".into()),
                };
                config.min_free_fraction = e.min_free_fraction;
                config.rotation_age_limit = e.rotation_age_limit;
                config.validate().map_err(|err| err.to_string())?;
                if e.balloon_period_ticks == 0 {
                    return Err("balloon_period_ticks must be positive".into());
                }
                Mechanism::Ballooning { config, period_ticks: e.balloon_period_ticks }
            }
        })
    }

    /// Simulator settings for one experiment and repetition. Repetition `r`
    /// runs with seed `seed + r` for every experiment, so experiments are
    /// compared on identical workloads.
    pub fn sim_config(&self, e: &ExperimentSpec, repetition: u32) -> Result<SimConfig> {
        let mechanism = self.mechanism(e).map_err(ConfigError::Invalid)?;
        Ok(SimConfig {
            geometry: self.geometry,
            fs: self.fs.clone(),
            mechanism,
            duration_ticks: self.duration_ticks,
            warmup_ticks: self.warmup_ticks,
            seed: self.seed.wrapping_add(u64::from(repetition)),
            secret_period_ticks: Some(self.secret_period_ticks),
            record_chunk_writes: self.record_chunk_writes,
        })
    }

    /// Loads the profile, resolving relative paths against `base_dir`.
    pub fn load_profile(&self, base_dir: &Path) -> Result<WorkloadProfile> {
        let (text, shown) = if self.profile == BUILTIN_PROFILE {
            (ANDROID_LIKE_PROFILE.to_string(), self.profile.clone())
        } else {
            let path = base_dir.join(&self.profile);
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
            (text, path.display().to_string())
        };
        load_profile(&text).map_err(|source| ConfigError::Profile { path: shown, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SWEEP: &str = r#"
profile = "builtin:android-like"
seed = 7
repetitions = 2
duration_ticks = 7200
warmup_ticks = 600

[geometry]
chunk_size_bytes = 512
chunks_per_block = 32
block_count = 400
erasure_limit = 10000
multiple_programming_allowed = true

[[experiment]]
label = "none"
mechanism = "none"

[[experiment]]
label = "free-50"
mechanism = "ballooning"
free_blocks_target = 50
junk_file_blocks = 2
"#;

    #[test]
    fn parses_and_scales_targets() {
        let cfg = RunConfig::parse(SWEEP).unwrap();
        assert_eq!(cfg.fs, FsConfig::default());
        assert_eq!(cfg.secret_period_ticks, 1800);
        let Mechanism::Ballooning { config, period_ticks } = cfg.mechanism(&cfg.experiments[1]).unwrap() else { panic!() };
        assert_eq!(period_ticks, 60);
        // 50 * 400 / 1571 = 12.73 blocks of 32 chunks
        assert_eq!(config.upper_threshold_chunks, 407);
        assert_eq!(config.lower_threshold_chunks, 407 - 64);
        let sim = cfg.sim_config(&cfg.experiments[0], 3).unwrap();
        assert_eq!(sim.seed, 10);
        assert_eq!(sim.mechanism, Mechanism::None);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            SWEEP.replace("repetitions = 2", "repetitions = 0"),
            SWEEP.replace("label = \"free-50\"", "label = \"none\""),
            SWEEP.replace("label = \"free-50\"", "label = \"a,b\""),
            SWEEP.replace("free_blocks_target = 50\n", ""),
            SWEEP.replace("mechanism = \"none\"", "mechanism = \"none\"\nfree_blocks_target = 3"),
            SWEEP.replace("warmup_ticks = 600", "warmup_ticks = 9000"),
            SWEEP.replace("seed = 7", "seed = 7\nbogus = 1"),
        ];
        for case in cases {
            assert!(RunConfig::parse(&case).is_err(), "{case}");
        }
        assert!(matches!(RunConfig::parse("profile = "), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn profile_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("p.toml"), ANDROID_LIKE_PROFILE).unwrap();
        let mut cfg = RunConfig::parse(SWEEP).unwrap();
        cfg.profile = "p.toml".into();
        assert!(cfg.load_profile(dir.path()).is_ok());
        cfg.profile = "missing.toml".into();
        let err = cfg.load_profile(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing.toml"), "{err}");
    }
}
