//! Secure deletion on top of the file system: purging, the ballooning agent
//! and the zero-overwrite switch.

use std::collections::VecDeque;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fs::{FileSystem, FsError, ObjectId, WriterId};

/// Writer id stamped on junk files.
pub const JUNK_WRITER: WriterId = 255;

#[derive(Debug, Error)]
pub enum SecdelError {
    #[error("invalid ballooning config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fs(#[from] FsError),
}

pub type Result<T, E = SecdelError> = std::result::Result<T, E>;

/// Deterministic filler bytes keyed by run seed, object and chunk.
#[derive(Debug, Clone, Copy)]
pub struct JunkSource {
    seed: u64,
}

impl JunkSource {
    pub fn new(seed: u64) -> Self {
        JunkSource { seed }
    }

    /// Junk content for bytes `[offset, offset + len)` of object `id`.
    pub fn bytes(&self, id: ObjectId, chunk_size: usize, offset: u64, len: usize) -> Vec<u8> {
        let cs = chunk_size as u64;
        let mut out = Vec::with_capacity(len);
        let mut pos = offset;
        let end = offset + len as u64;
        let mut chunk = vec![0u8; chunk_size];
        while pos < end {
            let index = pos / cs;
            let key = self.seed ^ (u64::from(id) << 32) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            ChaCha8Rng::seed_from_u64(key).fill_bytes(&mut chunk);
            let from = (pos - index * cs) as usize;
            let to = ((end - index * cs).min(cs)) as usize;
            out.extend_from_slice(&chunk[from..to]);
            pos = index * cs + to as u64;
        }
        out
    }
}

fn unique_name(fs: &FileSystem, prefix: &str) -> String {
    (0u64..)
        .map(|n| format!("{prefix}-{n}"))
        .find(|name| fs.lookup(name).is_none())
        .expect("name space is unbounded")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PurgeReport {
    pub blocks_erased: u64,
    pub chunks_written: u64,
    /// Simulated time spent; file system operations are instantaneous in
    /// the simulator, so this is zero unless the caller advances the clock.
    pub duration_ticks: u64,
}

/// Fills all free space with one junk file, one erase block of data per
/// append, until the file system reports full, then deletes the file. Every
/// chunk that was deleted before the purge sits in a block the file system
/// had to erase to make room.
pub fn purge(fs: &mut FileSystem, junk: &JunkSource) -> Result<PurgeReport> {
    let start = fs.stats();
    let started_at = fs.now();
    let g = *fs.medium().geometry();
    let step = g.chunk_size_bytes * g.chunks_per_block;
    let name = unique_name(fs, "purge-junk");
    match fs.create_junk_file(&name, JUNK_WRITER) {
        Ok(id) => {
            loop {
                let size = fs.file(id).expect("junk file exists").size_bytes;
                let data = junk.bytes(id, g.chunk_size_bytes, size, step);
                match fs.write_file(id, size, &data) {
                    Ok(_) => {}
                    Err(FsError::FileSystemFull) => break,
                    Err(e) => return Err(e.into()),
                }
            }
            fs.delete_file(id)?;
        }
        // not even a header fits; the medium is already as full as it gets
        Err(FsError::FileSystemFull) => {}
        Err(e) => return Err(e.into()),
    }
    let end = fs.stats();
    Ok(PurgeReport {
        blocks_erased: end.blocks_erased - start.blocks_erased,
        chunks_written: end.chunks_programmed - start.chunks_programmed,
        duration_ticks: fs.now() - started_at,
    })
}

/// Enables or disables zero overwriting of deleted chunks.
pub fn set_zero_overwrite(fs: &mut FileSystem, enabled: bool) -> Result<()> {
    fs.set_zero_overwrite(enabled)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallooningConfig {
    /// Junk is created while available chunks (free minus the GC
    /// reserve, as user space sees it) exceed this.
    pub upper_threshold_chunks: u64,
    /// Junk is deleted while available chunks are below this.
    pub lower_threshold_chunks: u64,
    pub junk_file_blocks: u32,
    /// Fraction of the medium that junk rotation must leave free.
    #[serde(default = "default_min_free_fraction")]
    pub min_free_fraction: f64,
    /// Junk files older than this many ticks are rewritten.
    #[serde(default)]
    pub rotation_age_limit: Option<u64>,
}

fn default_min_free_fraction() -> f64 {
    0.05
}

impl BallooningConfig {
    /// Thresholds that keep about `target_blocks` erase blocks available:
    /// upper = target, lower = target - one junk file. Fractional targets
    /// (from scaling to a smaller medium) round to whole chunks.
    pub fn for_target_free_blocks(target_blocks: f64, junk_file_blocks: u32, chunks_per_block: u64) -> Self {
        let upper = (target_blocks.max(0.0) * chunks_per_block as f64).round() as u64;
        BallooningConfig {
            upper_threshold_chunks: upper,
            lower_threshold_chunks: upper.saturating_sub(u64::from(junk_file_blocks) * chunks_per_block),
            junk_file_blocks,
            min_free_fraction: default_min_free_fraction(),
            rotation_age_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower_threshold_chunks >= self.upper_threshold_chunks {
            return Err(SecdelError::InvalidConfig("lower_threshold_chunks must be below upper_threshold_chunks".into()));
        }
        if self.junk_file_blocks < 1 {
            return Err(SecdelError::InvalidConfig("junk_file_blocks must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_free_fraction) {
            return Err(SecdelError::InvalidConfig("min_free_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JunkFile {
    pub object_id: ObjectId,
    pub creation_time: u64,
    pub size_blocks: u32,
}

/// Junk files owned by the agent, oldest first.
#[derive(Debug, Clone, Default)]
pub struct JunkPool {
    files: VecDeque<JunkFile>,
}

impl JunkPool {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &JunkFile> {
        self.files.iter()
    }

    fn push(&mut self, file: JunkFile) {
        debug_assert!(self.files.back().is_none_or(|last| last.creation_time <= file.creation_time));
        self.files.push_back(file);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalloonAction {
    Created(usize),
    Deleted(usize),
    Refreshed(usize),
    None,
}

/// The user-space ballooning agent. Each step reads the free-chunk count
/// and creates or deletes junk files to keep it between the thresholds.
#[derive(Debug, Clone)]
pub struct BalloonAgent {
    config: BallooningConfig,
    pool: JunkPool,
    junk: JunkSource,
}

impl BalloonAgent {
    pub fn new(config: BallooningConfig, junk: JunkSource) -> Result<Self> {
        config.validate()?;
        Ok(BalloonAgent { config, pool: JunkPool::default(), junk })
    }

    pub fn config(&self) -> &BallooningConfig {
        &self.config
    }

    pub fn pool(&self) -> &JunkPool {
        &self.pool
    }

    fn floor_chunks(&self, fs: &FileSystem) -> u64 {
        (self.config.min_free_fraction * fs.total_good_chunks() as f64).ceil() as u64
    }

    /// Live chunks one junk file adds: its data plus its header.
    fn junk_cost(&self, fs: &FileSystem) -> u64 {
        u64::from(self.config.junk_file_blocks) * fs.medium().geometry().chunks_per_block as u64 + 1
    }

    fn create_junk(&mut self, fs: &mut FileSystem, now: u64) -> Result<bool> {
        let g = *fs.medium().geometry();
        let name = unique_name(fs, "balloon-junk");
        let id = match fs.create_junk_file(&name, JUNK_WRITER) {
            Ok(id) => id,
            Err(FsError::FileSystemFull) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        let len = self.config.junk_file_blocks as usize * g.chunks_per_block * g.chunk_size_bytes;
        let data = self.junk.bytes(id, g.chunk_size_bytes, 0, len);
        let complete = match fs.write_file(id, 0, &data) {
            Ok(_) => true,
            Err(FsError::FileSystemFull) => false,
            Err(e) => return Err(e.into()),
        };
        self.pool.push(JunkFile { object_id: id, creation_time: now, size_blocks: self.config.junk_file_blocks });
        Ok(complete)
    }

    fn delete_oldest(&mut self, fs: &mut FileSystem) -> Result<bool> {
        let Some(old) = self.pool.files.pop_front() else { return Ok(false) };
        fs.delete_file(old.object_id)?;
        Ok(true)
    }

    pub fn step(&mut self, fs: &mut FileSystem, now: u64) -> Result<BalloonAction> {
        let free = |fs: &FileSystem| fs.free_space().available_chunks;
        let floor = self.floor_chunks(fs);
        let cost = self.junk_cost(fs);

        if free(fs) > self.config.upper_threshold_chunks {
            let mut created = 0;
            while free(fs) > self.config.upper_threshold_chunks && free(fs) >= cost {
                let complete = self.create_junk(fs, now)?;
                created += 1;
                if !complete {
                    break;
                }
            }
            if created > 0 {
                return Ok(BalloonAction::Created(created));
            }
            return Ok(BalloonAction::None);
        }

        if free(fs) < self.config.lower_threshold_chunks {
            let mut deleted = 0;
            while free(fs) < self.config.lower_threshold_chunks && self.delete_oldest(fs)? {
                deleted += 1;
            }
            return Ok(if deleted > 0 { BalloonAction::Deleted(deleted) } else { BalloonAction::None });
        }

        if let Some(limit) = self.config.rotation_age_limit {
            let stale = self.pool.files.iter().filter(|f| now.saturating_sub(f.creation_time) >= limit).count();
            let mut refreshed = 0;
            for _ in 0..stale {
                // write the replacement first so it lands on different blocks
                if free(fs) < floor + cost {
                    break;
                }
                let complete = self.create_junk(fs, now)?;
                self.delete_oldest(fs)?;
                refreshed += 1;
                if !complete {
                    break;
                }
            }
            if refreshed > 0 {
                return Ok(BalloonAction::Refreshed(refreshed));
            }
        }
        Ok(BalloonAction::None)
    }
}
