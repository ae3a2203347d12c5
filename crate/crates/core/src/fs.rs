//! A YAFFS-style log-structured file system on top of [`Medium`].
//!
//! Every change appends chunks at the current allocation point. Superseded
//! chunks are only marked deleted in RAM; their bytes stay on flash until the
//! garbage collector erases the block, unless zero overwriting is enabled, in
//! which case the chunk is reprogrammed to all zeros the moment it is deleted.
//!
//! Block allocation scans forward cyclically from the last allocated block.
//! Passive GC copies a few live chunks per write out of a dirty block;
//! aggressive GC kicks in when empty blocks drop below the reserve and
//! collects whole blocks, fewest live chunks first.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::medium::{Medium, MediumError, SPARE_SIZE};
use crate::metrics::{AllocationRecord, ChunkWriteRecord, DataKind};

pub type ObjectId = u32;
pub type WriterId = u8;

pub const PARTITION_LABEL: &str = "data";

const HEADER_MAGIC: &[u8; 4] = b"HDR1";

#[derive(Debug, Error)]
pub enum FsError {
    #[error("no such file: object {0}")]
    NoSuchFile(ObjectId),
    #[error("a file named {0:?} already exists")]
    AlreadyExists(String),
    #[error("file system is full")]
    FileSystemFull,
    #[error("cannot truncate to {requested} bytes, file holds {current}")]
    InvalidSize { requested: u64, current: u64 },
    #[error("medium does not allow multiple programming, zero overwriting is unavailable")]
    MediumForbidsReprogram,
    #[error("medium must be blank when the file system is created")]
    MediumNotBlank,
    #[error("invalid file system config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Medium(#[from] MediumError),
}

pub type Result<T, E = FsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsConfig {
    /// Aggressive GC runs while fewer than this many blocks are empty.
    pub reserve_blocks: usize,
    /// Live chunks passive GC may copy per write.
    pub passive_gc_copy_budget: usize,
    /// Deleted fraction that makes a block a passive GC candidate.
    pub passive_gc_dirtiness_threshold: f64,
    pub zero_overwrite_enabled: bool,
}

impl Default for FsConfig {
    fn default() -> Self {
        FsConfig {
            reserve_blocks: 5,
            passive_gc_copy_budget: 4,
            passive_gc_dirtiness_threshold: 0.5,
            zero_overwrite_enabled: false,
        }
    }
}

impl FsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reserve_blocks < 1 {
            return Err(FsError::InvalidConfig("reserve_blocks must be >= 1".into()));
        }
        let t = self.passive_gc_dirtiness_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(FsError::InvalidConfig("passive_gc_dirtiness_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkKind {
    Header,
    Data,
    /// Data chunk of a junk (filler) file.
    Junk,
}

impl ChunkKind {
    fn code(self) -> u8 {
        match self {
            ChunkKind::Header => 1,
            ChunkKind::Data => 2,
            ChunkKind::Junk => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ChunkKind::Header),
            2 => Some(ChunkKind::Data),
            3 => Some(ChunkKind::Junk),
            _ => None,
        }
    }

    pub fn data_kind(self) -> DataKind {
        match self {
            ChunkKind::Header => DataKind::Header,
            ChunkKind::Data => DataKind::File,
            ChunkKind::Junk => DataKind::Junk,
        }
    }
}

/// Out-of-band tag stored in a chunk's spare area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkTag {
    pub object_id: ObjectId,
    /// 0 for the header, n for the n-th data chunk.
    pub chunk_offset: u32,
    pub sequence_number: u32,
    pub byte_count: u16,
    pub kind: ChunkKind,
    pub writer_id: WriterId,
}

impl ChunkTag {
    pub fn to_bytes(&self) -> [u8; SPARE_SIZE] {
        let mut b = [0u8; SPARE_SIZE];
        b[0..4].copy_from_slice(&self.object_id.to_le_bytes());
        b[4..8].copy_from_slice(&self.chunk_offset.to_le_bytes());
        b[8..12].copy_from_slice(&self.sequence_number.to_le_bytes());
        b[12..14].copy_from_slice(&self.byte_count.to_le_bytes());
        b[14] = self.kind.code();
        b[15] = self.writer_id;
        b
    }

    /// Parses a spare area; `None` for erased or zeroed tags.
    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != SPARE_SIZE {
            return None;
        }
        let kind = ChunkKind::from_code(b[14])?;
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        Some(ChunkTag {
            object_id: u32_at(0),
            chunk_offset: u32_at(4),
            sequence_number: u32_at(8),
            byte_count: u16::from_le_bytes([b[12], b[13]]),
            kind,
            writer_id: b[15],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockState {
    Empty,
    Allocating,
    /// Fully written, no deleted chunks.
    Full,
    /// Fully written with at least one deleted chunk.
    Dirty,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub state: BlockState,
    pub live_chunks: u32,
    pub deleted_chunks: u32,
    pub next_free_chunk: u32,
    pub sequence_number_at_alloc: u64,
}

impl BlockInfo {
    fn empty() -> Self {
        BlockInfo {
            state: BlockState::Empty,
            live_chunks: 0,
            deleted_chunks: 0,
            next_free_chunk: 0,
            sequence_number_at_alloc: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkAddr {
    pub block: u32,
    pub chunk: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileObject {
    pub object_id: ObjectId,
    pub name: String,
    pub size_bytes: u64,
    /// Data chunk offset (1-based) to the newest copy on flash.
    pub chunk_map: BTreeMap<u32, ChunkAddr>,
    pub header: ChunkAddr,
    pub owner: WriterId,
    pub is_junk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeSpace {
    /// Chunks not holding live data: erased plus deleted (reclaimable).
    pub free_chunks: u64,
    pub empty_blocks: u64,
    pub deleted_chunks: u64,
    /// What user space is told: free chunks minus the GC reserve.
    pub available_chunks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GcMode {
    Passive,
    Aggressive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FsStats {
    pub chunks_programmed: u64,
    pub gc_copies: u64,
    pub blocks_erased: u64,
    pub block_allocations: u64,
    pub chunks_zeroed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsEvent {
    BlockAllocated(AllocationRecord),
    ChunkWritten(ChunkWriteRecord),
    /// A deleted chunk was reprogrammed to zeros.
    ChunkZeroed { time_ticks: u64, addr: ChunkAddr, object_id: ObjectId },
    BlockErased { time_ticks: u64, block: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Free,
    Live,
    Deleted,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    state: SlotState,
    object_id: ObjectId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AllocClass {
    /// Ordinary writes; must leave one empty block for GC.
    User,
    /// Deletion and truncation headers; may take the last empty block.
    Privileged,
    /// Aggressive GC copies.
    Gc,
    /// Passive GC copies; never trigger further GC.
    PassiveGc,
}

/// Returns the first block after `last` (wrapping past `count` back to 1)
/// for which `is_empty` holds.
pub fn cyclic_scan(last: u32, count: u32, is_empty: impl Fn(u32) -> bool) -> Option<u32> {
    (1..=count).map(|step| (last + step - 1) % count + 1).find(|&b| is_empty(b))
}

#[derive(Debug)]
pub struct FileSystem {
    medium: Medium,
    config: FsConfig,
    blocks: Vec<BlockInfo>,
    slots: Vec<Slot>,
    files: BTreeMap<ObjectId, FileObject>,
    names: HashMap<String, ObjectId>,
    /// Deletion headers of removed files, kept live until every other chunk
    /// of the file has been erased.
    tombstones: BTreeMap<ObjectId, ChunkAddr>,
    /// Deleted but not yet erased chunks per object.
    unreclaimed: HashMap<ObjectId, u32>,
    next_object_id: ObjectId,
    next_chunk_seq: u32,
    next_block_seq: u64,
    alloc_block: Option<u32>,
    last_allocated: u32,
    passive_victim: Option<u32>,
    in_gc: bool,
    erasing: bool,
    pending_erase: Vec<u32>,
    empty_blocks: u64,
    live_total: u64,
    deleted_total: u64,
    good_chunks: u64,
    now: u64,
    events: Vec<FsEvent>,
    stats: FsStats,
}

impl FileSystem {
    pub fn new(medium: Medium, config: FsConfig) -> Result<Self> {
        config.validate()?;
        let g = *medium.geometry();
        if g.chunk_size_bytes > u16::MAX as usize {
            return Err(FsError::InvalidConfig("chunk_size_bytes must fit in a 16-bit tag field".into()));
        }
        if config.zero_overwrite_enabled && !g.multiple_programming_allowed {
            return Err(FsError::MediumForbidsReprogram);
        }
        let mut blocks = Vec::with_capacity(g.block_count);
        let mut empty_blocks = 0;
        for b in g.block_indices() {
            if medium.is_bad(b) {
                blocks.push(BlockInfo { state: BlockState::Bad, ..BlockInfo::empty() });
            } else if medium.is_erased(b) {
                blocks.push(BlockInfo::empty());
                empty_blocks += 1;
            } else {
                return Err(FsError::MediumNotBlank);
            }
        }
        Ok(FileSystem {
            slots: vec![Slot { state: SlotState::Free, object_id: 0 }; g.total_chunks()],
            good_chunks: empty_blocks * g.chunks_per_block as u64,
            blocks,
            medium,
            config,
            files: BTreeMap::new(),
            names: HashMap::new(),
            tombstones: BTreeMap::new(),
            unreclaimed: HashMap::new(),
            next_object_id: 1,
            next_chunk_seq: 1,
            next_block_seq: 1,
            alloc_block: None,
            last_allocated: 0,
            passive_victim: None,
            in_gc: false,
            erasing: false,
            pending_erase: Vec::new(),
            empty_blocks,
            live_total: 0,
            deleted_total: 0,
            now: 0,
            events: Vec::new(),
            stats: FsStats::default(),
        })
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn into_medium(self) -> Medium {
        self.medium
    }

    pub fn config(&self) -> &FsConfig {
        &self.config
    }

    pub fn stats(&self) -> FsStats {
        self.stats
    }

    pub fn set_time(&mut self, now: u64) {
        self.now = now;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Takes the events emitted since the last call.
    pub fn drain_events(&mut self) -> Vec<FsEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn zero_overwrite_enabled(&self) -> bool {
        self.config.zero_overwrite_enabled
    }

    pub fn set_zero_overwrite(&mut self, enabled: bool) -> Result<()> {
        if enabled && !self.medium.geometry().multiple_programming_allowed {
            return Err(FsError::MediumForbidsReprogram);
        }
        self.config.zero_overwrite_enabled = enabled;
        Ok(())
    }

    fn cpb(&self) -> u32 {
        self.medium.geometry().chunks_per_block as u32
    }

    fn chunk_size(&self) -> usize {
        self.medium.geometry().chunk_size_bytes
    }

    fn slot_index(&self, addr: ChunkAddr) -> usize {
        (addr.block as usize - 1) * self.cpb() as usize + addr.chunk as usize
    }

    fn info(&self, block: u32) -> &BlockInfo {
        &self.blocks[block as usize - 1]
    }

    fn info_mut(&mut self, block: u32) -> &mut BlockInfo {
        &mut self.blocks[block as usize - 1]
    }

    pub fn block_info(&self, block: u32) -> Option<BlockInfo> {
        self.blocks.get((block as usize).checked_sub(1)?).copied()
    }

    pub fn block_infos(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn free_space(&self) -> FreeSpace {
        FreeSpace {
            free_chunks: self.good_chunks - self.live_total,
            empty_blocks: self.empty_blocks,
            deleted_chunks: self.deleted_total,
            available_chunks: (self.good_chunks - self.live_total)
                .saturating_sub(self.config.reserve_blocks as u64 * self.medium.geometry().chunks_per_block as u64),
        }
    }

    pub fn total_good_chunks(&self) -> u64 {
        self.good_chunks
    }

    pub fn lookup(&self, name: &str) -> Option<ObjectId> {
        self.names.get(name).copied()
    }

    pub fn file(&self, id: ObjectId) -> Option<&FileObject> {
        self.files.get(&id)
    }

    pub fn files(&self) -> impl Iterator<Item = &FileObject> {
        self.files.values()
    }

    /// Object ids whose deletion header is still live.
    pub fn pending_deletion_headers(&self) -> impl Iterator<Item = (ObjectId, ChunkAddr)> + '_ {
        self.tombstones.iter().map(|(id, addr)| (*id, *addr))
    }

    pub fn current_allocation_block(&self) -> Option<u32> {
        self.alloc_block
    }

    pub fn last_allocated_block(&self) -> u32 {
        self.last_allocated
    }

    fn is_closed(&self, block: u32) -> bool {
        !matches!(self.info(block).state, BlockState::Empty | BlockState::Bad | BlockState::Allocating)
    }

    fn refresh_state(&mut self, block: u32) {
        let cpb = self.cpb();
        let alloc = self.alloc_block == Some(block);
        let info = self.info_mut(block);
        if info.state == BlockState::Bad {
            return;
        }
        info.state = if alloc {
            BlockState::Allocating
        } else if info.next_free_chunk == 0 {
            BlockState::Empty
        } else if info.deleted_chunks > 0 {
            BlockState::Dirty
        } else {
            debug_assert!(info.next_free_chunk <= cpb);
            BlockState::Full
        };
    }

    /// Opens the next empty block, scanning cyclically from the last one
    /// allocated. Any partially written allocation block is closed first.
    /// Drops below the reserve trigger aggressive GC before returning.
    pub fn allocate_block(&mut self) -> Result<u32> {
        if let Some(prev) = self.alloc_block.take() {
            if self.info(prev).next_free_chunk == 0 {
                self.empty_blocks += 1;
            }
            self.refresh_state(prev);
            self.maybe_schedule_erase(prev);
        }
        let count = self.blocks.len() as u32;
        let block = cyclic_scan(self.last_allocated, count, |b| self.info(b).state == BlockState::Empty)
            .ok_or(FsError::FileSystemFull)?;
        let seq = self.next_block_seq;
        self.next_block_seq += 1;
        *self.info_mut(block) = BlockInfo { state: BlockState::Allocating, sequence_number_at_alloc: seq, ..BlockInfo::empty() };
        self.alloc_block = Some(block);
        self.last_allocated = block;
        self.empty_blocks -= 1;
        self.stats.block_allocations += 1;
        self.events.push(FsEvent::BlockAllocated(AllocationRecord {
            time_ticks: self.now,
            physical_block: block,
            sequence_number: seq,
            free_chunks: self.free_space().free_chunks,
            erased_blocks: self.empty_blocks,
            partition: PARTITION_LABEL.to_string(),
        }));
        self.process_erases()?;
        if (self.empty_blocks as usize) < self.config.reserve_blocks && !self.in_gc {
            self.aggressive_until(self.config.reserve_blocks)?;
        }
        Ok(block)
    }

    fn alloc_chunk(&mut self, class: AllocClass) -> Result<ChunkAddr> {
        loop {
            if let Some(block) = self.alloc_block {
                let cpb = self.cpb();
                let info = self.info_mut(block);
                if info.next_free_chunk < cpb {
                    let chunk = info.next_free_chunk;
                    info.next_free_chunk += 1;
                    if info.next_free_chunk == cpb {
                        self.alloc_block = None;
                    }
                    return Ok(ChunkAddr { block, chunk });
                }
                self.alloc_block = None;
                self.refresh_state(block);
            }
            let keep: u64 = match class {
                AllocClass::User | AllocClass::PassiveGc => 1,
                AllocClass::Privileged | AllocClass::Gc => 0,
            };
            let may_gc = matches!(class, AllocClass::User | AllocClass::Privileged);
            if may_gc && !self.in_gc && self.empty_blocks <= 1 {
                self.aggressive_until(self.config.reserve_blocks.max(2))?;
                if self.alloc_block.is_some() {
                    continue;
                }
            }
            if self.empty_blocks <= keep {
                return Err(FsError::FileSystemFull);
            }
            self.allocate_block()?;
        }
    }

    fn write_chunk(&mut self, tag: ChunkTag, payload: &[u8], class: AllocClass) -> Result<ChunkAddr> {
        debug_assert_eq!(payload.len(), self.chunk_size());
        let addr = self.alloc_chunk(class)?;
        let tag = ChunkTag { sequence_number: self.next_chunk_seq, ..tag };
        self.next_chunk_seq += 1;
        self.medium.program_chunk(addr.block, addr.chunk, payload, &tag.to_bytes())?;
        let idx = self.slot_index(addr);
        self.slots[idx] = Slot { state: SlotState::Live, object_id: tag.object_id };
        self.info_mut(addr.block).live_chunks += 1;
        self.live_total += 1;
        if self.alloc_block != Some(addr.block) {
            self.refresh_state(addr.block);
        }
        self.stats.chunks_programmed += 1;
        self.events.push(FsEvent::ChunkWritten(ChunkWriteRecord {
            time_ticks: self.now,
            block: addr.block,
            chunk: addr.chunk,
            writer_id: tag.writer_id,
            kind: tag.kind.data_kind(),
            object_id: tag.object_id,
            chunk_offset: tag.chunk_offset,
        }));
        Ok(addr)
    }

    /// Marks a live chunk deleted, zero-programming it when requested.
    fn retire(&mut self, addr: ChunkAddr, zero: bool) -> Result<()> {
        let idx = self.slot_index(addr);
        let slot = self.slots[idx];
        debug_assert_eq!(slot.state, SlotState::Live, "retiring non-live chunk {addr:?}");
        self.slots[idx].state = SlotState::Deleted;
        let info = self.info_mut(addr.block);
        info.live_chunks -= 1;
        info.deleted_chunks += 1;
        self.live_total -= 1;
        self.deleted_total += 1;
        *self.unreclaimed.entry(slot.object_id).or_default() += 1;
        if zero {
            let g = *self.medium.geometry();
            self.medium.program_chunk(addr.block, addr.chunk, &vec![0; g.chunk_size_bytes], &[0; SPARE_SIZE])?;
            self.stats.chunks_zeroed += 1;
            self.events.push(FsEvent::ChunkZeroed { time_ticks: self.now, addr, object_id: slot.object_id });
        }
        if self.alloc_block != Some(addr.block) {
            self.refresh_state(addr.block);
        }
        self.maybe_schedule_erase(addr.block);
        self.process_erases()
    }

    fn delete_chunk(&mut self, addr: ChunkAddr) -> Result<()> {
        self.retire(addr, self.config.zero_overwrite_enabled)
    }

    fn maybe_schedule_erase(&mut self, block: u32) {
        let info = self.info(block);
        if self.is_closed(block) && info.live_chunks == 0 && info.next_free_chunk > 0 && !self.pending_erase.contains(&block) {
            self.pending_erase.push(block);
        }
    }

    fn process_erases(&mut self) -> Result<()> {
        if self.erasing {
            return Ok(());
        }
        self.erasing = true;
        let result = self.drain_erase_queue();
        self.erasing = false;
        result
    }

    fn drain_erase_queue(&mut self) -> Result<()> {
        while let Some(block) = self.pending_erase.pop() {
            if self.is_closed(block) && self.info(block).live_chunks == 0 && self.info(block).next_free_chunk > 0 {
                self.erase(block)?;
            }
        }
        Ok(())
    }

    fn erase(&mut self, block: u32) -> Result<()> {
        let cpb = self.cpb();
        debug_assert_eq!(self.info(block).live_chunks, 0);
        let mut finished = Vec::new();
        for chunk in 0..cpb {
            let idx = self.slot_index(ChunkAddr { block, chunk });
            let slot = self.slots[idx];
            if slot.state == SlotState::Deleted {
                let left = self.unreclaimed.get_mut(&slot.object_id).expect("deleted chunk is tracked");
                *left -= 1;
                if *left == 0 {
                    self.unreclaimed.remove(&slot.object_id);
                    finished.push(slot.object_id);
                }
            }
            self.slots[idx] = Slot { state: SlotState::Free, object_id: 0 };
        }
        let deleted = self.info(block).deleted_chunks as u64;
        self.deleted_total -= deleted;
        let view = self.medium.erase_block(block)?;
        if view.is_bad {
            *self.info_mut(block) = BlockInfo { state: BlockState::Bad, ..BlockInfo::empty() };
            self.good_chunks -= cpb as u64;
        } else {
            *self.info_mut(block) = BlockInfo::empty();
            self.empty_blocks += 1;
        }
        if self.passive_victim == Some(block) {
            self.passive_victim = None;
        }
        self.stats.blocks_erased += 1;
        self.events.push(FsEvent::BlockErased { time_ticks: self.now, block });
        for id in finished {
            if let Some(header) = self.tombstones.remove(&id) {
                self.delete_chunk(header)?;
            }
        }
        Ok(())
    }

    /// Copies one live chunk to the allocation point and retires the source.
    fn relocate(&mut self, addr: ChunkAddr, class: AllocClass) -> Result<()> {
        if self.slots[self.slot_index(addr)].state != SlotState::Live {
            // released while the victim was being drained
            return Ok(());
        }
        let view = self.medium.read_chunk(addr.block, addr.chunk)?;
        let payload = view.payload.to_vec();
        let tag = ChunkTag::from_bytes(view.spare).expect("live chunk carries a tag");
        let new = self.write_chunk(tag, &payload, class)?;
        let slot_owner = self.slots[self.slot_index(addr)].object_id;
        debug_assert_eq!(slot_owner, tag.object_id);
        if let Some(file) = self.files.get_mut(&tag.object_id) {
            if tag.chunk_offset == 0 {
                debug_assert_eq!(file.header, addr);
                file.header = new;
            } else {
                let entry = file.chunk_map.get_mut(&tag.chunk_offset).expect("live data chunk is mapped");
                debug_assert_eq!(*entry, addr);
                *entry = new;
            }
        } else if let Some(header) = self.tombstones.get_mut(&tag.object_id) {
            debug_assert_eq!(*header, addr);
            *header = new;
        } else {
            unreachable!("live chunk {addr:?} has no owner");
        }
        self.stats.gc_copies += 1;
        self.retire(addr, false)
    }

    fn live_chunks_of(&self, block: u32) -> Vec<ChunkAddr> {
        (0..self.info(block).next_free_chunk)
            .map(|chunk| ChunkAddr { block, chunk })
            .filter(|a| self.slots[self.slot_index(*a)].state == SlotState::Live)
            .collect()
    }

    fn aggressive_candidate(&self) -> Option<u32> {
        (1..=self.blocks.len() as u32)
            .filter(|&b| self.is_closed(b) && self.info(b).deleted_chunks > 0)
            .min_by_key(|&b| (self.info(b).live_chunks, b))
    }

    fn passive_candidate(&self) -> Option<u32> {
        if let Some(v) = self.passive_victim {
            if self.is_closed(v) && self.info(v).live_chunks > 0 {
                return Some(v);
            }
        }
        let cpb = self.cpb() as f64;
        let threshold = self.config.passive_gc_dirtiness_threshold;
        (1..=self.blocks.len() as u32)
            .filter(|&b| {
                let info = self.info(b);
                self.is_closed(b) && info.deleted_chunks > 0 && info.deleted_chunks as f64 / cpb >= threshold
            })
            .min_by_key(|&b| (self.info(b).live_chunks, b))
    }

    fn collect_block(&mut self, block: u32) -> Result<bool> {
        for addr in self.live_chunks_of(block) {
            if self.relocate(addr, AllocClass::Gc).is_err() {
                return Ok(false);
            }
        }
        // the last relocation erased it through the eager path
        self.process_erases()?;
        Ok(self.info(block).state == BlockState::Empty || self.info(block).state == BlockState::Bad)
    }

    fn aggressive_until(&mut self, target: usize) -> Result<usize> {
        if self.in_gc {
            return Ok(0);
        }
        self.in_gc = true;
        let result = (|| {
            let mut reclaimed = 0;
            while (self.empty_blocks as usize) < target {
                let Some(victim) = self.aggressive_candidate() else { break };
                if !self.collect_block(victim)? {
                    break;
                }
                reclaimed += 1;
            }
            Ok(reclaimed)
        })();
        self.in_gc = false;
        result
    }

    fn passive_step(&mut self) -> Result<usize> {
        if self.in_gc {
            return Ok(0);
        }
        let Some(victim) = self.passive_candidate() else { return Ok(0) };
        self.in_gc = true;
        self.passive_victim = Some(victim);
        let result = (|| {
            for addr in self.live_chunks_of(victim).into_iter().take(self.config.passive_gc_copy_budget) {
                if self.relocate(addr, AllocClass::PassiveGc).is_err() {
                    break;
                }
            }
            self.process_erases()?;
            Ok(usize::from(!self.is_closed(victim)))
        })();
        self.in_gc = false;
        result
    }

    /// Runs one round of garbage collection and returns the number of
    /// blocks erased by it.
    pub fn garbage_collect(&mut self, mode: GcMode) -> Result<usize> {
        let before = self.stats.blocks_erased;
        match mode {
            GcMode::Passive => {
                self.passive_step()?;
            }
            GcMode::Aggressive => {
                self.aggressive_until(self.config.reserve_blocks)?;
            }
        }
        Ok((self.stats.blocks_erased - before) as usize)
    }

    fn header_payload(&self, file_name: &str, object_id: ObjectId, size: u64, deleted: bool) -> (Vec<u8>, u16) {
        let cs = self.chunk_size();
        let mut buf = Vec::with_capacity(cs);
        buf.extend_from_slice(HEADER_MAGIC);
        buf.extend_from_slice(&object_id.to_le_bytes());
        buf.extend_from_slice(&size.to_le_bytes());
        buf.push(u8::from(deleted));
        buf.extend_from_slice(&(file_name.len() as u16).to_le_bytes());
        buf.extend_from_slice(file_name.as_bytes());
        buf.truncate(cs);
        let used = buf.len() as u16;
        buf.resize(cs, 0xFF);
        (buf, used)
    }

    fn write_header(&mut self, id: ObjectId, class: AllocClass) -> Result<()> {
        let file = &self.files[&id];
        let (payload, used) = self.header_payload(&file.name, id, file.size_bytes, false);
        let tag = ChunkTag {
            object_id: id,
            chunk_offset: 0,
            sequence_number: 0,
            byte_count: used,
            kind: ChunkKind::Header,
            writer_id: file.owner,
        };
        let new = self.write_chunk(tag, &payload, class)?;
        let old = std::mem::replace(&mut self.files.get_mut(&id).expect("file exists").header, new);
        self.delete_chunk(old)
    }

    pub fn create_file(&mut self, name: &str, owner: WriterId) -> Result<ObjectId> {
        self.create(name, owner, false)
    }

    /// Creates a filler file whose data chunks are tagged as junk.
    pub fn create_junk_file(&mut self, name: &str, owner: WriterId) -> Result<ObjectId> {
        self.create(name, owner, true)
    }

    fn create(&mut self, name: &str, owner: WriterId, is_junk: bool) -> Result<ObjectId> {
        if self.names.contains_key(name) {
            return Err(FsError::AlreadyExists(name.to_string()));
        }
        let id = self.next_object_id;
        let (payload, used) = self.header_payload(name, id, 0, false);
        let tag = ChunkTag {
            object_id: id,
            chunk_offset: 0,
            sequence_number: 0,
            byte_count: used,
            kind: ChunkKind::Header,
            writer_id: owner,
        };
        let header = self.write_chunk(tag, &payload, AllocClass::User)?;
        self.next_object_id += 1;
        self.files.insert(
            id,
            FileObject {
                object_id: id,
                name: name.to_string(),
                size_bytes: 0,
                chunk_map: BTreeMap::new(),
                header,
                owner,
                is_junk,
            },
        );
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Valid bytes of data chunk `offset` (1-based) in a file of `size` bytes.
    fn valid_bytes(&self, size: u64, offset: u32) -> usize {
        let cs = self.chunk_size() as u64;
        size.saturating_sub((offset as u64 - 1) * cs).min(cs) as usize
    }

    /// The first `valid` bytes of a data chunk. Bytes past what the chunk
    /// was written with (a hole left by a later write) read as zeros.
    fn chunk_contents(&self, addr: Option<ChunkAddr>, valid: usize) -> Result<Vec<u8>> {
        let mut out = match addr {
            Some(a) => {
                let view = self.medium.read_chunk(a.block, a.chunk)?;
                let written = ChunkTag::from_bytes(view.spare).map_or(0, |t| t.byte_count as usize);
                view.payload[..valid.min(written)].to_vec()
            }
            None => Vec::new(),
        };
        out.resize(valid, 0);
        Ok(out)
    }

    fn put_data_chunk(&mut self, id: ObjectId, offset: u32, contents: &[u8], class: AllocClass) -> Result<()> {
        let cs = self.chunk_size();
        let file = &self.files[&id];
        let tag = ChunkTag {
            object_id: id,
            chunk_offset: offset,
            sequence_number: 0,
            byte_count: contents.len() as u16,
            kind: if file.is_junk { ChunkKind::Junk } else { ChunkKind::Data },
            writer_id: file.owner,
        };
        let mut payload = contents.to_vec();
        payload.resize(cs, 0xFF);
        let new = self.write_chunk(tag, &payload, class)?;
        let old = self.files.get_mut(&id).expect("file exists").chunk_map.insert(offset, new);
        if let Some(old) = old {
            self.delete_chunk(old)?;
        }
        Ok(())
    }

    /// Writes `data` at `offset_bytes`, growing the file as needed. Gaps
    /// beyond the old end read back as zeros. Returns the new size.
    pub fn write_file(&mut self, id: ObjectId, offset_bytes: u64, data: &[u8]) -> Result<u64> {
        let old_size = self.files.get(&id).ok_or(FsError::NoSuchFile(id))?.size_bytes;
        if data.is_empty() {
            return Ok(old_size);
        }
        let cs = self.chunk_size() as u64;
        let end = offset_bytes + data.len() as u64;
        let new_size = old_size.max(end);
        let first = (offset_bytes / cs) as u32 + 1;
        let last = ((end - 1) / cs) as u32 + 1;
        for offset in first..=last {
            let chunk_start = (offset as u64 - 1) * cs;
            let chunk_end = (chunk_start + cs).min(new_size);
            let file = &self.files[&id];
            let old_valid = self.valid_bytes(file.size_bytes, offset);
            let mut contents = self.chunk_contents(file.chunk_map.get(&offset).copied(), old_valid)?;
            contents.resize((chunk_end - chunk_start) as usize, 0);
            let lo = offset_bytes.max(chunk_start);
            let hi = end.min(chunk_end);
            contents[(lo - chunk_start) as usize..(hi - chunk_start) as usize]
                .copy_from_slice(&data[(lo - offset_bytes) as usize..(hi - offset_bytes) as usize]);
            if let Err(e) = self.put_data_chunk(id, offset, &contents, AllocClass::User) {
                // record what made it to flash before giving up
                if self.files[&id].size_bytes != old_size {
                    let _ = self.write_header(id, AllocClass::Privileged);
                }
                return Err(e);
            }
            let file = self.files.get_mut(&id).expect("file exists");
            file.size_bytes = file.size_bytes.max(chunk_end);
        }
        self.write_header(id, AllocClass::Privileged)?;
        self.passive_step()?;
        Ok(new_size)
    }

    pub fn truncate_file(&mut self, id: ObjectId, new_size: u64) -> Result<()> {
        let file = self.files.get(&id).ok_or(FsError::NoSuchFile(id))?;
        let current = file.size_bytes;
        if new_size > current {
            return Err(FsError::InvalidSize { requested: new_size, current });
        }
        if new_size == current {
            return Ok(());
        }
        let cs = self.chunk_size() as u64;
        let keep = new_size.div_ceil(cs) as u32;
        let doomed: Vec<(u32, ChunkAddr)> = file.chunk_map.range(keep + 1..).map(|(o, a)| (*o, *a)).collect();
        for (offset, addr) in doomed {
            self.files.get_mut(&id).expect("file exists").chunk_map.remove(&offset);
            self.delete_chunk(addr)?;
        }
        let tail = (new_size % cs) as usize;
        if tail != 0 {
            if let Some(&addr) = self.files[&id].chunk_map.get(&keep) {
                let contents = self.chunk_contents(Some(addr), tail)?;
                self.put_data_chunk(id, keep, &contents, AllocClass::Privileged)?;
            }
        }
        self.files.get_mut(&id).expect("file exists").size_bytes = new_size;
        self.write_header(id, AllocClass::Privileged)?;
        self.passive_step()?;
        Ok(())
    }

    /// Unlinks a file. Its chunks become deleted (zeroed in zero-overwrite
    /// mode) and a deletion header is appended that stays live until every
    /// other chunk of the file has been erased.
    pub fn delete_file(&mut self, id: ObjectId) -> Result<()> {
        let file = self.files.remove(&id).ok_or(FsError::NoSuchFile(id))?;
        self.names.remove(&file.name);
        for addr in file.chunk_map.values() {
            self.delete_chunk(*addr)?;
        }
        self.delete_chunk(file.header)?;
        let (payload, used) = self.header_payload(&file.name, id, 0, true);
        let tag = ChunkTag {
            object_id: id,
            chunk_offset: 0,
            sequence_number: 0,
            byte_count: used,
            kind: ChunkKind::Header,
            writer_id: file.owner,
        };
        match self.write_chunk(tag, &payload, AllocClass::Privileged) {
            Ok(addr) => {
                if self.unreclaimed.contains_key(&id) {
                    self.tombstones.insert(id, addr);
                } else {
                    self.delete_chunk(addr)?;
                }
            }
            // the unlink itself already happened in RAM
            Err(FsError::FileSystemFull) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    pub fn read_file(&self, id: ObjectId) -> Result<Vec<u8>> {
        let file = self.files.get(&id).ok_or(FsError::NoSuchFile(id))?;
        let cs = self.chunk_size() as u64;
        let chunks = file.size_bytes.div_ceil(cs) as u32;
        let mut out = Vec::with_capacity(file.size_bytes as usize);
        for offset in 1..=chunks {
            let valid = self.valid_bytes(file.size_bytes, offset);
            out.extend(self.chunk_contents(file.chunk_map.get(&offset).copied(), valid)?);
        }
        Ok(out)
    }

    /// Recomputes every counter from scratch and checks the bookkeeping
    /// invariants. Intended for tests.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let cpb = self.cpb();
        let (mut live_total, mut deleted_total, mut empty, mut good) = (0u64, 0u64, 0u64, 0u64);
        for (bi, info) in self.blocks.iter().enumerate() {
            let block = bi as u32 + 1;
            let (mut live, mut deleted, mut written) = (0u32, 0u32, 0u32);
            for chunk in 0..cpb {
                match self.slots[self.slot_index(ChunkAddr { block, chunk })].state {
                    SlotState::Live => live += 1,
                    SlotState::Deleted => deleted += 1,
                    SlotState::Free => {
                        if chunk < info.next_free_chunk && info.state != BlockState::Bad {
                            // handed out but not programmed: only legal mid-operation
                            return Err(format!("block {block} chunk {chunk} allocated but free"));
                        }
                        continue;
                    }
                }
                written = chunk + 1;
            }
            if live != info.live_chunks || deleted != info.deleted_chunks {
                return Err(format!("block {block}: counted {live}/{deleted}, recorded {info:?}"));
            }
            if written > info.next_free_chunk {
                return Err(format!("block {block}: data beyond next_free_chunk"));
            }
            let free = cpb - info.next_free_chunk;
            if info.live_chunks + info.deleted_chunks + free != cpb && info.state != BlockState::Bad {
                return Err(format!("block {block}: live+deleted+free != chunks_per_block ({info:?})"));
            }
            let is_empty = info.live_chunks == 0 && info.deleted_chunks == 0 && info.next_free_chunk == 0;
            if (info.state == BlockState::Empty) != (is_empty && info.state != BlockState::Bad && self.alloc_block != Some(block)) {
                return Err(format!("block {block}: state {:?} disagrees with counts", info.state));
            }
            if info.state == BlockState::Empty {
                empty += 1;
            }
            if info.state != BlockState::Bad {
                good += cpb as u64;
            }
            if self.is_closed(block) && info.live_chunks == 0 {
                return Err(format!("block {block}: closed with no live chunks but not erased"));
            }
            live_total += live as u64;
            deleted_total += deleted as u64;
        }
        if (live_total, deleted_total, empty, good) != (self.live_total, self.deleted_total, self.empty_blocks, self.good_chunks) {
            return Err("global counters drifted".into());
        }
        // newest-wins: every mapped chunk is live, carries the right tag and
        // the highest sequence number among surviving copies
        let mut newest: HashMap<(ObjectId, u32), u32> = HashMap::new();
        for block in 1..=self.blocks.len() as u32 {
            for chunk in 0..self.info(block).next_free_chunk {
                let view = self.medium.read_chunk(block, chunk).map_err(|e| e.to_string())?;
                if let Some(tag) = ChunkTag::from_bytes(view.spare) {
                    let e = newest.entry((tag.object_id, tag.chunk_offset)).or_insert(0);
                    *e = (*e).max(tag.sequence_number);
                }
            }
        }
        for file in self.files.values() {
            let entries = std::iter::once((0u32, file.header)).chain(file.chunk_map.iter().map(|(o, a)| (*o, *a)));
            for (offset, addr) in entries {
                if self.slots[self.slot_index(addr)].state != SlotState::Live {
                    return Err(format!("file {} offset {offset} maps to non-live chunk", file.object_id));
                }
                let view = self.medium.read_chunk(addr.block, addr.chunk).map_err(|e| e.to_string())?;
                let tag = ChunkTag::from_bytes(view.spare).ok_or("mapped chunk without tag")?;
                if tag.object_id != file.object_id || tag.chunk_offset != offset {
                    return Err(format!("tag mismatch at {addr:?}"));
                }
                if newest[&(tag.object_id, offset)] != tag.sequence_number {
                    return Err(format!("file {} offset {offset} is not the newest copy", file.object_id));
                }
            }
        }
        Ok(())
    }
}
