//! Discrete-event workload simulation.
//!
//! Writers from a [`WorkloadProfile`] create files of randomly chosen types;
//! each file is reopened and written on its own schedule until its lifetime
//! ends. Alongside them a secret probe writes one-chunk secrets, deletes each
//! once the file system has opened a new block, and records when the last
//! physical copy of the secret disappears.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fs::{ChunkAddr, FileSystem, FsConfig, FsError, FsEvent, FsStats, ObjectId, WriterId};
use crate::medium::{Geometry, Medium, MediumError, WearSummary};
use crate::metrics::{AllocationRecord, ChunkWriteRecord, DataKind, SecretRow, Window};
use crate::secdel::{self, BalloonAgent, BallooningConfig, JunkSource, SecdelError};

/// Writer id stamped on secret-probe files.
pub const SECRET_WRITER: WriterId = 254;

/// Most writers a profile may declare; ids above are reserved.
pub const MAX_WRITERS: usize = 250;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("profile parse error: {0}")]
    Parse(String),
    #[error("unknown distribution {0:?}")]
    UnknownDistribution(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error(transparent)]
    Medium(#[from] MediumError),
    #[error(transparent)]
    Secdel(#[from] SecdelError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    Empirical(Vec<(f64, f64)>),
}

/// On-disk shape of a distribution, e.g. `{ kind = "uniform", low = 1, high = 4 }`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistribution {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<Vec<(f64, f64)>>,
}

fn need(v: Option<f64>, field: &str, kind: &str) -> Result<f64, ProfileError> {
    match v {
        Some(x) if x.is_finite() => Ok(x),
        Some(_) => Err(ProfileError::Parse(format!("{kind}: {field} must be finite"))),
        None => Err(ProfileError::Parse(format!("{kind}: missing {field}"))),
    }
}

impl Distribution {
    fn from_raw(raw: &RawDistribution) -> Result<Self, ProfileError> {
        let k = raw.kind.as_str();
        let allowed: &[&str] = match k {
            "constant" => &["value"],
            "uniform" => &["low", "high"],
            "exponential" => &["mean"],
            "empirical" => &["points"],
            other => return Err(ProfileError::UnknownDistribution(other.to_string())),
        };
        let present = [
            ("value", raw.value.is_some()),
            ("low", raw.low.is_some()),
            ("high", raw.high.is_some()),
            ("mean", raw.mean.is_some()),
            ("points", raw.points.is_some()),
        ];
        if let Some((field, _)) = present.iter().find(|(f, p)| *p && !allowed.contains(f)) {
            return Err(ProfileError::Parse(format!("{k}: unexpected field {field}")));
        }
        let dist = match k {
            "constant" => Distribution::Constant(need(raw.value, "value", k)?),
            "uniform" => Distribution::Uniform { low: need(raw.low, "low", k)?, high: need(raw.high, "high", k)? },
            "exponential" => Distribution::Exponential { mean: need(raw.mean, "mean", k)? },
            _ => Distribution::Empirical(raw.points.clone().ok_or_else(|| ProfileError::Parse("empirical: missing points".into()))?),
        };
        dist.validate()?;
        Ok(dist)
    }

    fn to_raw(&self) -> RawDistribution {
        match self {
            Distribution::Constant(v) => RawDistribution { kind: "constant".into(), value: Some(*v), ..Default::default() },
            Distribution::Uniform { low, high } => {
                RawDistribution { kind: "uniform".into(), low: Some(*low), high: Some(*high), ..Default::default() }
            }
            Distribution::Exponential { mean } => RawDistribution { kind: "exponential".into(), mean: Some(*mean), ..Default::default() },
            Distribution::Empirical(points) => RawDistribution { kind: "empirical".into(), points: Some(points.clone()), ..Default::default() },
        }
    }

    fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Parse(m.to_string()));
        match self {
            Distribution::Constant(v) if *v < 0.0 => bad("constant: value must be >= 0"),
            Distribution::Uniform { low, high } if !(0.0 <= *low && low <= high) => bad("uniform: need 0 <= low <= high"),
            Distribution::Exponential { mean } if !(*mean > 0.0) => bad("exponential: mean must be > 0"),
            Distribution::Empirical(points) => {
                if points.is_empty() {
                    return bad("empirical: needs at least one point");
                }
                if points.iter().any(|(v, w)| !v.is_finite() || *v < 0.0 || !w.is_finite() || *w < 0.0) {
                    return bad("empirical: values and weights must be finite and >= 0");
                }
                if points.iter().all(|(_, w)| *w == 0.0) {
                    return bad("empirical: weights must not all be zero");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Strictly positive support, as required of time distributions.
    fn is_strictly_positive(&self) -> bool {
        match self {
            Distribution::Constant(v) => *v > 0.0,
            Distribution::Uniform { low, .. } => *low > 0.0,
            Distribution::Exponential { .. } => true,
            Distribution::Empirical(points) => points.iter().all(|(v, w)| *v > 0.0 || *w == 0.0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Distribution::Constant(v) => *v,
            Distribution::Uniform { low, high } => {
                if low == high {
                    *low
                } else {
                    rng.random_range(*low..*high)
                }
            }
            Distribution::Exponential { mean } => Exp::new(1.0 / mean).expect("validated mean").sample(rng),
            Distribution::Empirical(points) => {
                let index = WeightedIndex::new(points.iter().map(|(_, w)| *w)).expect("validated weights");
                points[index.sample(rng)].0
            }
        }
    }

    /// A time sample rounded up to whole ticks, at least one.
    pub fn sample_ticks<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        (self.sample(rng).ceil() as u64).max(1)
    }
}

impl Serialize for Distribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_raw().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Distribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawDistribution::deserialize(d)?;
        Distribution::from_raw(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileType {
    pub name: String,
    /// Ticks from creation to deletion; absent for permanent files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lifetime_dist: Option<Distribution>,
    /// Ticks between successive opens for writing.
    pub open_period_dist: Distribution,
    /// Chunks written per open (rounded, at least one).
    pub chunks_per_open_dist: Distribution,
    /// Relative position of each write: values >= 1 append, values in
    /// [0, 1) overwrite starting at that fraction of the file.
    pub write_location_dist: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTypeWeight {
    pub file_type: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WriterProfile {
    pub name: String,
    pub inter_creation_time_dist: Distribution,
    pub file_type_dist: Vec<FileTypeWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(rename = "file_type")]
    pub file_types: Vec<FileType>,
    #[serde(rename = "writer")]
    pub writers: Vec<WriterProfile>,
}

fn toml_error(e: toml::de::Error) -> ProfileError {
    let msg = e.message().to_string();
    // surface distribution errors with their own variant
    if let Some(rest) = msg.strip_prefix("unknown distribution ") {
        return ProfileError::UnknownDistribution(rest.trim_matches('"').to_string());
    }
    ProfileError::Parse(e.to_string())
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: String| Err(ProfileError::Parse(m));
        if self.writers.is_empty() {
            return bad("profile declares no writers".into());
        }
        if self.writers.len() > MAX_WRITERS {
            return bad(format!("at most {MAX_WRITERS} writers are supported"));
        }
        let mut names = BTreeSet::new();
        for ft in &self.file_types {
            if !names.insert(ft.name.as_str()) {
                return bad(format!("duplicate file type {:?}", ft.name));
            }
            if let Some(l) = &ft.lifetime_dist {
                if !l.is_strictly_positive() {
                    return bad(format!("file type {:?}: lifetime_dist must be strictly positive", ft.name));
                }
            }
            if !ft.open_period_dist.is_strictly_positive() {
                return bad(format!("file type {:?}: open_period_dist must be strictly positive", ft.name));
            }
        }
        for w in &self.writers {
            if !w.inter_creation_time_dist.is_strictly_positive() {
                return bad(format!("writer {:?}: inter_creation_time_dist must be strictly positive", w.name));
            }
            if w.file_type_dist.is_empty() {
                return bad(format!("writer {:?}: empty file_type_dist", w.name));
            }
            let mut sum = 0.0;
            for entry in &w.file_type_dist {
                if !names.contains(entry.file_type.as_str()) {
                    return bad(format!("writer {:?}: unknown file type {:?}", w.name, entry.file_type));
                }
                if !(entry.weight >= 0.0) {
                    return bad(format!("writer {:?}: negative probability", w.name));
                }
                sum += entry.weight;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("writer {:?}: file type probabilities sum to {sum}, not 1", w.name));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an identical profile.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("profiles always serialize")
    }
}

/// Parses and validates a profile document.
pub fn load_profile(source: &str) -> Result<WorkloadProfile, ProfileError> {
    let profile: WorkloadProfile = toml::from_str(source).map_err(toml_error)?;
    profile.validate()?;
    Ok(profile)
}

/// The synthetic profile shipped with the crate.
pub const ANDROID_LIKE_PROFILE: &str = include_str!("../profiles/android-like.toml");

#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    None,
    Ballooning {
        config: BallooningConfig,
        /// Ticks between agent runs.
        period_ticks: u64,
    },
    /// Purges at the listed times; an empty list purges right after every
    /// secret deletion.
    Purge { times: Vec<u64> },
    ZeroOverwrite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub fs: FsConfig,
    pub mechanism: Mechanism,
    pub duration_ticks: u64,
    /// Secrets written and allocations made before this are left out of
    /// the statistics.
    pub warmup_ticks: u64,
    pub seed: u64,
    /// Ticks between secret probes; `None` disables the probe.
    pub secret_period_ticks: Option<u64>,
    pub record_chunk_writes: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.geometry.validate()?;
        self.fs.validate()?;
        if self.warmup_ticks > self.duration_ticks {
            return Err(SimError::ConfigInvalid("warmup exceeds duration".into()));
        }
        if self.secret_period_ticks == Some(0) {
            return Err(SimError::ConfigInvalid("secret period must be positive".into()));
        }
        match &self.mechanism {
            Mechanism::Ballooning { config, period_ticks } => {
                config.validate()?;
                if *period_ticks == 0 {
                    return Err(SimError::ConfigInvalid("ballooning period must be positive".into()));
                }
            }
            Mechanism::ZeroOverwrite if !self.geometry.multiple_programming_allowed => {
                return Err(SimError::Fs(FsError::MediumForbidsReprogram));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn window(&self) -> Window {
        Window::new(self.warmup_ticks, self.duration_ticks)
    }
}

/// Lifecycle of one secret probe: written at t0, deleted at t1, physically
/// gone at t2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretRecord {
    pub secret_id: u64,
    pub pattern: Vec<u8>,
    pub object_id: ObjectId,
    pub t_written: u64,
    pub t_deleted: Option<u64>,
    pub t_erased: Option<u64>,
    /// Every physical block that ever held a copy of the secret.
    pub blocks_touched: BTreeSet<u32>,
    pub censored: bool,
}

impl SecretRecord {
    pub fn to_row(&self) -> SecretRow {
        SecretRow {
            secret_id: self.secret_id,
            t_written: self.t_written,
            t_deleted: self.t_deleted,
            t_erased: self.t_erased,
            censored: self.censored,
        }
    }

    /// Latency in ticks; censored secrets report run end minus t1.
    pub fn latency_ticks(&self, run_end: u64) -> Option<u64> {
        let t1 = self.t_deleted?;
        Some(self.t_erased.unwrap_or(run_end).saturating_sub(t1))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub allocations: Vec<AllocationRecord>,
    pub chunk_writes: Vec<ChunkWriteRecord>,
    pub secrets: Vec<SecretRecord>,
    pub wear: WearSummary,
    pub fs_stats: FsStats,
    /// Writer operations refused with ENOSPC.
    pub enospc_events: u64,
    pub window: Window,
    pub geometry: Geometry,
}

impl RunResult {
    /// Secrets written inside the observation window.
    pub fn secret_rows(&self) -> Vec<SecretRow> {
        self.secrets.iter().filter(|s| self.window.contains(s.t_written)).map(SecretRecord::to_row).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    WriterCreate { writer: usize },
    FileWrite { object: ObjectId },
    FileDelete { object: ObjectId },
    SecretWrite,
    SecretDelete { secret: usize },
    BalloonStep,
    Purge,
}

#[derive(Debug, Clone, Copy)]
struct SimFile {
    file_type: usize,
}

struct SecretTrack {
    record: SecretRecord,
    locations: BTreeSet<ChunkAddr>,
}

/// Time-ordered event queue; ties dispatch in scheduling order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(u64, u64, usize)>>,
    payloads: Vec<Option<EventKind>>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: u64, kind: EventKind) {
        let slot = self.payloads.len();
        self.payloads.push(Some(kind));
        self.heap.push(Reverse((time, self.seq, slot)));
        self.seq += 1;
    }

    fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((t, _, _))| *t)
    }

    fn pop(&mut self) -> Option<(u64, EventKind)> {
        let Reverse((t, _, slot)) = self.heap.pop()?;
        let kind = self.payloads[slot].take().expect("event dispatched once");
        if self.heap.is_empty() {
            self.payloads.clear();
        }
        Some((t, kind))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// A single simulation run, steppable one event at a time.
pub struct Simulation {
    profile: WorkloadProfile,
    config: SimConfig,
    fs: FileSystem,
    rng: ChaCha8Rng,
    queue: EventQueue,
    now: u64,
    files: HashMap<ObjectId, SimFile>,
    file_type_index: Vec<Vec<usize>>,
    type_choice: Vec<WeightedIndex<f64>>,
    created: Vec<u64>,
    agent: Option<BalloonAgent>,
    junk: JunkSource,
    secrets: Vec<SecretTrack>,
    secret_by_object: HashMap<ObjectId, usize>,
    awaiting_allocation: Vec<usize>,
    allocations: Vec<AllocationRecord>,
    chunk_writes: Vec<ChunkWriteRecord>,
    enospc_events: u64,
}

impl Simulation {
    pub fn new(profile: WorkloadProfile, config: SimConfig) -> Result<Self, SimError> {
        profile.validate()?;
        config.validate()?;
        let medium = Medium::new(config.geometry)?;
        let mut fs = FileSystem::new(medium, config.fs.clone())?;
        if config.mechanism == Mechanism::ZeroOverwrite {
            secdel::set_zero_overwrite(&mut fs, true)?;
        }
        let types: BTreeMap<&str, usize> = profile.file_types.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();
        let file_type_index: Vec<Vec<usize>> = profile
            .writers
            .iter()
            .map(|w| w.file_type_dist.iter().map(|e| types[e.file_type.as_str()]).collect())
            .collect();
        let type_choice = profile
            .writers
            .iter()
            .map(|w| WeightedIndex::new(w.file_type_dist.iter().map(|e| e.weight)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ProfileError::Parse(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let junk = JunkSource::new(rng.next_u64());
        let agent = match &config.mechanism {
            Mechanism::Ballooning { config: bc, .. } => Some(BalloonAgent::new(bc.clone(), junk)?),
            _ => None,
        };
        let mut sim = Simulation {
            created: vec![0; profile.writers.len()],
            profile,
            fs,
            rng,
            queue: EventQueue::default(),
            now: 0,
            files: HashMap::new(),
            file_type_index,
            type_choice,
            agent,
            junk,
            secrets: Vec::new(),
            secret_by_object: HashMap::new(),
            awaiting_allocation: Vec::new(),
            allocations: Vec::new(),
            chunk_writes: Vec::new(),
            enospc_events: 0,
            config,
        };
        sim.schedule_initial();
        Ok(sim)
    }

    fn schedule_initial(&mut self) {
        if let Mechanism::Ballooning { .. } = self.config.mechanism {
            self.queue.push(0, EventKind::BalloonStep);
        }
        if let Mechanism::Purge { times } = &self.config.mechanism {
            for &t in times {
                self.queue.push(t, EventKind::Purge);
            }
        }
        for writer in 0..self.profile.writers.len() {
            let first = self.profile.writers[writer].inter_creation_time_dist.sample_ticks(&mut self.rng);
            self.queue.push(first, EventKind::WriterCreate { writer });
        }
        if let Some(period) = self.config.secret_period_ticks {
            self.queue.push(self.config.warmup_ticks + period, EventKind::SecretWrite);
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn file_system(&self) -> &FileSystem {
        &self.fs
    }

    pub fn medium(&self) -> &Medium {
        self.fs.medium()
    }

    pub fn secrets(&self) -> impl Iterator<Item = &SecretRecord> {
        self.secrets.iter().map(|s| &s.record)
    }

    pub fn is_finished(&self) -> bool {
        self.queue.peek_time().is_none_or(|t| t >= self.config.duration_ticks)
    }

    /// Dispatches the next event. Returns its time, or `None` once the run
    /// has reached its duration.
    pub fn step(&mut self) -> Result<Option<u64>, SimError> {
        if self.is_finished() {
            return Ok(None);
        }
        let (time, kind) = self.queue.pop().expect("queue not empty");
        self.now = time;
        self.fs.set_time(time);
        self.dispatch(kind)?;
        Ok(Some(time))
    }

    pub fn run(mut self) -> Result<RunResult, SimError> {
        while self.step()?.is_some() {}
        Ok(self.finish())
    }

    /// Closes the run: secrets still on the medium are censored at the
    /// run's end.
    pub fn finish(mut self) -> RunResult {
        for s in &mut self.secrets {
            if s.record.t_deleted.is_some() && s.record.t_erased.is_none() {
                s.record.censored = true;
            }
        }
        RunResult {
            allocations: self.allocations,
            chunk_writes: self.chunk_writes,
            secrets: self.secrets.into_iter().map(|s| s.record).collect(),
            wear: self.fs.medium().wear_summary(),
            fs_stats: self.fs.stats(),
            enospc_events: self.enospc_events,
            window: self.config.window(),
            geometry: self.config.geometry,
        }
    }

    fn tolerate_full<T>(&mut self, r: Result<T, FsError>) -> Result<Option<T>, SimError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(FsError::FileSystemFull) => {
                self.enospc_events += 1;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::WriterCreate { writer } => self.writer_create(writer)?,
            EventKind::FileWrite { object } => self.file_write(object)?,
            EventKind::FileDelete { object } => {
                if self.files.remove(&object).is_some() {
                    self.fs.delete_file(object)?;
                }
            }
            EventKind::SecretWrite => {
                self.secret_probe_step()?;
                if let Some(period) = self.config.secret_period_ticks {
                    self.queue.push(self.now + period, EventKind::SecretWrite);
                }
            }
            EventKind::SecretDelete { secret } => self.secret_delete(secret)?,
            EventKind::BalloonStep => {
                let agent = self.agent.as_mut().expect("ballooning configured");
                agent.step(&mut self.fs, self.now)?;
                if let Mechanism::Ballooning { period_ticks, .. } = self.config.mechanism {
                    self.queue.push(self.now + period_ticks, EventKind::BalloonStep);
                }
            }
            EventKind::Purge => {
                secdel::purge(&mut self.fs, &self.junk)?;
            }
        }
        self.absorb_events(true);
        Ok(())
    }

    fn writer_create(&mut self, writer: usize) -> Result<(), SimError> {
        let pick = self.type_choice[writer].sample(&mut self.rng);
        let file_type = self.file_type_index[writer][pick];
        let n = self.created[writer];
        self.created[writer] += 1;
        let name = format!("{}-{n}", self.profile.writers[writer].name);
        let created = self.fs.create_file(&name, writer as WriterId);
        if let Some(object) = self.tolerate_full(created)? {
            self.files.insert(object, SimFile { file_type });
            self.queue.push(self.now, EventKind::FileWrite { object });
            if let Some(life) = &self.profile.file_types[file_type].lifetime_dist {
                let at = self.now + life.sample_ticks(&mut self.rng);
                self.queue.push(at, EventKind::FileDelete { object });
            }
        }
        let next = self.now + self.profile.writers[writer].inter_creation_time_dist.sample_ticks(&mut self.rng);
        self.queue.push(next, EventKind::WriterCreate { writer });
        Ok(())
    }

    fn file_write(&mut self, object: ObjectId) -> Result<(), SimError> {
        let Some(file) = self.files.get(&object).copied() else { return Ok(()) };
        let ft = &self.profile.file_types[file.file_type];
        let chunks = (ft.chunks_per_open_dist.sample(&mut self.rng).round() as usize).max(1);
        let location = ft.write_location_dist.sample(&mut self.rng);
        let period = ft.open_period_dist.sample_ticks(&mut self.rng);
        let cs = self.config.geometry.chunk_size_bytes;
        let size = self.fs.file(object).map(|f| f.size_bytes).unwrap_or(0);
        let existing = size.div_ceil(cs as u64);
        let offset = if location >= 1.0 || existing == 0 {
            size
        } else {
            (location * existing as f64).floor() as u64 * cs as u64
        };
        let mut data = vec![0u8; chunks * cs];
        self.rng.fill_bytes(&mut data);
        let written = self.fs.write_file(object, offset, &data);
        self.tolerate_full(written)?;
        self.queue.push(self.now + period, EventKind::FileWrite { object });
        Ok(())
    }

    /// Writes one secret chunk with a fresh pattern and arms deletion on the
    /// next block allocation.
    pub fn secret_probe_step(&mut self) -> Result<(), SimError> {
        let secret_id = self.secrets.len() as u64;
        let mut pattern = format!("SECRET:{secret_id:08}:").into_bytes();
        pattern.extend((0..8).map(|_| b"0123456789abcdef"[self.rng.random_range(0..16)]));
        let cs = self.config.geometry.chunk_size_bytes;
        if pattern.len() > cs {
            return Err(SimError::ConfigInvalid("chunk too small for a secret pattern".into()));
        }
        self.absorb_events(true);
        let name = format!("secret-{secret_id}");
        let created = self.fs.create_file(&name, SECRET_WRITER);
        let Some(object) = self.tolerate_full(created)? else { return Ok(()) };
        let index = self.secrets.len();
        self.secrets.push(SecretTrack {
            record: SecretRecord {
                secret_id,
                pattern: pattern.clone(),
                object_id: object,
                t_written: self.now,
                t_deleted: None,
                t_erased: None,
                blocks_touched: BTreeSet::new(),
                censored: false,
            },
            locations: BTreeSet::new(),
        });
        self.secret_by_object.insert(object, index);
        let mut payload = pattern.repeat(cs / pattern.len() + 1);
        payload.truncate(cs);
        let written = self.fs.write_file(object, 0, &payload);
        // allocations caused by the secret's own write don't count
        self.absorb_events(false);
        if self.tolerate_full(written)?.is_some() {
            self.awaiting_allocation.push(index);
        } else {
            self.queue.push(self.now, EventKind::SecretDelete { secret: index });
        }
        Ok(())
    }

    fn secret_delete(&mut self, secret: usize) -> Result<(), SimError> {
        let track = &mut self.secrets[secret];
        if track.record.t_deleted.is_some() {
            return Ok(());
        }
        track.record.t_deleted = Some(self.now);
        let object = track.record.object_id;
        self.fs.delete_file(object)?;
        self.absorb_events(true);
        self.resolve_secret(secret);
        if matches!(&self.config.mechanism, Mechanism::Purge { times } if times.is_empty()) {
            secdel::purge(&mut self.fs, &self.junk)?;
        }
        Ok(())
    }

    fn resolve_secret(&mut self, index: usize) {
        let track = &mut self.secrets[index];
        if track.record.t_deleted.is_some() && track.record.t_erased.is_none() && track.locations.is_empty() {
            track.record.t_erased = Some(self.now);
        }
    }

    fn absorb_events(&mut self, arm_deletions: bool) {
        let mut allocated = false;
        let mut touched = BTreeSet::new();
        for event in self.fs.drain_events() {
            match event {
                FsEvent::BlockAllocated(record) => {
                    allocated = true;
                    self.allocations.push(record);
                }
                FsEvent::ChunkWritten(record) => {
                    if let Some(&i) = self.secret_by_object.get(&record.object_id) {
                        if record.kind == DataKind::File {
                            let s = &mut self.secrets[i];
                            s.locations.insert(ChunkAddr { block: record.block, chunk: record.chunk });
                            s.record.blocks_touched.insert(record.block);
                        }
                    }
                    if self.config.record_chunk_writes {
                        self.chunk_writes.push(record);
                    }
                }
                FsEvent::ChunkZeroed { addr, object_id, .. } => {
                    if let Some(&i) = self.secret_by_object.get(&object_id) {
                        self.secrets[i].locations.remove(&addr);
                        touched.insert(i);
                    }
                }
                FsEvent::BlockErased { block, .. } => {
                    for (i, s) in self.secrets.iter_mut().enumerate() {
                        if s.record.t_erased.is_none() && s.locations.iter().any(|a| a.block == block) {
                            s.locations.retain(|a| a.block != block);
                            touched.insert(i);
                        }
                    }
                }
            }
        }
        for i in touched {
            self.resolve_secret(i);
        }
        if allocated && arm_deletions {
            for secret in std::mem::take(&mut self.awaiting_allocation) {
                self.queue.push(self.now, EventKind::SecretDelete { secret });
            }
        }
    }
}

/// Runs a whole simulation.
pub fn run_simulation(profile: WorkloadProfile, config: SimConfig) -> Result<RunResult, SimError> {
    Simulation::new(profile, config)?.run()
}
