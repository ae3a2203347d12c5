//! Raw NAND flash array.
//!
//! Programming follows flash physics: an erase sets every bit of a block to
//! one, and a program can only clear bits (the written bytes are ANDed into
//! the cell). Blocks are numbered from 1, chunks within a block from 0.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of the out-of-band area stored next to every chunk payload.
pub const SPARE_SIZE: usize = 16;

/// Magic prefix of a serialized medium image.
pub const IMAGE_MAGIC: &[u8; 8] = b"FLASHIMG";

const FLAG_MULTIPLE_PROGRAMMING: u64 = 1;

/// Erase blocks on the data partition of the reference handset.
pub const DEFAULT_BLOCK_COUNT: usize = 1571;

#[derive(Debug, Error)]
pub enum MediumError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("chunk {chunk} of block {block} is out of range")]
    IndexOutOfRange { block: u32, chunk: u32 },
    #[error("block {0} is bad")]
    BadBlock(u32),
    #[error("chunk {chunk} of block {block} was already programmed and the medium forbids reprogramming")]
    MultipleProgrammingForbidden { block: u32, chunk: u32 },
    #[error("expected {expected} bytes, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("scan pattern is empty")]
    EmptyPattern,
    #[error("scan pattern is {len} bytes, longer than a chunk ({max} bytes)")]
    PatternTooLong { len: usize, max: usize },
    #[error("corrupt medium image: {0}")]
    CorruptImage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = MediumError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub chunk_size_bytes: usize,
    pub chunks_per_block: usize,
    pub block_count: usize,
    /// Erasures a block survives before it is retired as bad.
    pub erasure_limit: u64,
    pub multiple_programming_allowed: bool,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            chunk_size_bytes: 2048,
            chunks_per_block: 64,
            block_count: DEFAULT_BLOCK_COUNT,
            erasure_limit: 10_000,
            multiple_programming_allowed: true,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size_bytes == 0 {
            return Err(MediumError::InvalidGeometry("chunk_size_bytes must be >= 1".into()));
        }
        if self.chunks_per_block == 0 {
            return Err(MediumError::InvalidGeometry("chunks_per_block must be >= 1".into()));
        }
        if self.block_count == 0 {
            return Err(MediumError::InvalidGeometry("block_count must be >= 1".into()));
        }
        if self.erasure_limit == 0 {
            return Err(MediumError::InvalidGeometry("erasure_limit must be >= 1".into()));
        }
        if self.block_count > u32::MAX as usize || self.chunks_per_block > u32::MAX as usize {
            return Err(MediumError::InvalidGeometry("block or chunk count exceeds u32".into()));
        }
        Ok(())
    }

    /// Bytes one chunk occupies in an image: payload followed by spare.
    pub fn chunk_stride(&self) -> usize {
        self.chunk_size_bytes + SPARE_SIZE
    }

    pub fn block_bytes(&self) -> usize {
        self.chunk_stride() * self.chunks_per_block
    }

    pub fn total_chunks(&self) -> usize {
        self.chunks_per_block * self.block_count
    }

    pub fn block_indices(&self) -> impl Iterator<Item = u32> {
        1..=self.block_count as u32
    }
}

/// Borrowed view of one chunk cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkView<'a> {
    pub payload: &'a [u8],
    pub spare: &'a [u8],
    /// Programs since the last erase.
    pub program_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockView {
    pub index: u32,
    pub erase_count: u64,
    pub is_bad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScanHit {
    pub block: u32,
    pub chunk: u32,
    /// Byte offset of the first occurrence inside the chunk payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WearSummary {
    /// Erase count per block, index 0 holding block 1.
    pub per_block: Vec<u64>,
    pub total_erasures: u64,
    pub max_erase_count: u64,
}

#[derive(Debug, Clone)]
struct BlockCells {
    /// Chunk cells laid out as in the image; `None` while the block is erased.
    data: Option<Box<[u8]>>,
    program_counts: Vec<u32>,
    erase_count: u64,
    is_bad: bool,
}

/// A simulated NAND array.
#[derive(Debug, Clone)]
pub struct Medium {
    geometry: Geometry,
    blocks: Vec<BlockCells>,
    erased_chunk: Box<[u8]>,
}

impl Medium {
    pub fn new(geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        let blocks = (0..geometry.block_count)
            .map(|_| BlockCells {
                data: None,
                program_counts: vec![0; geometry.chunks_per_block],
                erase_count: 0,
                is_bad: false,
            })
            .collect();
        Ok(Medium {
            geometry,
            blocks,
            erased_chunk: vec![0xFF; geometry.chunk_stride()].into_boxed_slice(),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn check(&self, block: u32, chunk: u32) -> Result<usize> {
        if block == 0 || block as usize > self.geometry.block_count || chunk as usize >= self.geometry.chunks_per_block {
            return Err(MediumError::IndexOutOfRange { block, chunk });
        }
        Ok(block as usize - 1)
    }

    fn check_block(&self, block: u32) -> Result<usize> {
        self.check(block, 0)
    }

    pub fn program_chunk(&mut self, block: u32, chunk: u32, payload: &[u8], spare: &[u8]) -> Result<ChunkView<'_>> {
        let bi = self.check(block, chunk)?;
        let g = self.geometry;
        if payload.len() != g.chunk_size_bytes {
            return Err(MediumError::SizeMismatch { expected: g.chunk_size_bytes, got: payload.len() });
        }
        if spare.len() != SPARE_SIZE {
            return Err(MediumError::SizeMismatch { expected: SPARE_SIZE, got: spare.len() });
        }
        let cells = &mut self.blocks[bi];
        if cells.is_bad {
            return Err(MediumError::BadBlock(block));
        }
        let ci = chunk as usize;
        if cells.program_counts[ci] >= 1 && !g.multiple_programming_allowed {
            return Err(MediumError::MultipleProgrammingForbidden { block, chunk });
        }
        let data = cells
            .data
            .get_or_insert_with(|| vec![0xFF; g.block_bytes()].into_boxed_slice());
        let start = ci * g.chunk_stride();
        let cell = &mut data[start..start + g.chunk_stride()];
        for (bit, w) in cell.iter_mut().zip(payload.iter().chain(spare)) {
            *bit &= *w;
        }
        cells.program_counts[ci] += 1;
        self.read_chunk(block, chunk)
    }

    pub fn erase_block(&mut self, block: u32) -> Result<BlockView> {
        let bi = self.check_block(block)?;
        let limit = self.geometry.erasure_limit;
        let cells = &mut self.blocks[bi];
        if cells.is_bad {
            return Err(MediumError::BadBlock(block));
        }
        cells.data = None;
        cells.program_counts.iter_mut().for_each(|c| *c = 0);
        cells.erase_count += 1;
        if cells.erase_count > limit {
            cells.is_bad = true;
        }
        Ok(self.block_view(block).expect("checked"))
    }

    pub fn read_chunk(&self, block: u32, chunk: u32) -> Result<ChunkView<'_>> {
        let bi = self.check(block, chunk)?;
        let g = &self.geometry;
        let cells = &self.blocks[bi];
        let cell: &[u8] = match &cells.data {
            Some(data) => {
                let start = chunk as usize * g.chunk_stride();
                &data[start..start + g.chunk_stride()]
            }
            None => &self.erased_chunk,
        };
        let (payload, spare) = cell.split_at(g.chunk_size_bytes);
        Ok(ChunkView { payload, spare, program_count: cells.program_counts[chunk as usize] })
    }

    pub fn block_view(&self, block: u32) -> Result<BlockView> {
        let bi = self.check_block(block)?;
        let cells = &self.blocks[bi];
        Ok(BlockView { index: block, erase_count: cells.erase_count, is_bad: cells.is_bad })
    }

    pub fn is_bad(&self, block: u32) -> bool {
        self.block_view(block).map(|b| b.is_bad).unwrap_or(false)
    }

    /// True when the block has not been programmed since its last erase.
    pub fn is_erased(&self, block: u32) -> bool {
        self.check_block(block).map(|bi| self.blocks[bi].data.is_none()).unwrap_or(false)
    }

    /// Searches every chunk payload on the medium for `pattern`, regardless of
    /// whether the file system still considers the chunk live. Matches never
    /// span chunk boundaries; spare areas are not searched.
    pub fn raw_scan(&self, pattern: &[u8]) -> Result<Vec<ScanHit>> {
        if pattern.is_empty() {
            return Err(MediumError::EmptyPattern);
        }
        let g = &self.geometry;
        if pattern.len() > g.chunk_size_bytes {
            return Err(MediumError::PatternTooLong { len: pattern.len(), max: g.chunk_size_bytes });
        }
        let finder = memchr::memmem::Finder::new(pattern);
        let erased_hit = finder.find(&self.erased_chunk[..g.chunk_size_bytes]);
        let mut hits = Vec::new();
        for (bi, cells) in self.blocks.iter().enumerate() {
            let block = bi as u32 + 1;
            match &cells.data {
                None => {
                    if let Some(offset) = erased_hit {
                        hits.extend((0..g.chunks_per_block as u32).map(|chunk| ScanHit { block, chunk, offset }));
                    }
                }
                Some(data) => {
                    for (ci, cell) in data.chunks_exact(g.chunk_stride()).enumerate() {
                        if let Some(offset) = finder.find(&cell[..g.chunk_size_bytes]) {
                            hits.push(ScanHit { block, chunk: ci as u32, offset });
                        }
                    }
                }
            }
        }
        Ok(hits)
    }

    pub fn wear_summary(&self) -> WearSummary {
        let per_block: Vec<u64> = self.blocks.iter().map(|b| b.erase_count).collect();
        WearSummary {
            total_erasures: per_block.iter().sum(),
            max_erase_count: per_block.iter().copied().max().unwrap_or(0),
            per_block,
        }
    }

    pub fn write_image<W: Write>(&self, mut out: W) -> Result<()> {
        let g = &self.geometry;
        out.write_all(IMAGE_MAGIC)?;
        let flags = if g.multiple_programming_allowed { FLAG_MULTIPLE_PROGRAMMING } else { 0 };
        for field in [g.chunk_size_bytes as u64, g.chunks_per_block as u64, g.block_count as u64, g.erasure_limit, flags] {
            out.write_all(&field.to_le_bytes())?;
        }
        let erased_block = vec![0xFF; g.block_bytes()];
        for cells in &self.blocks {
            out.write_all(cells.data.as_deref().unwrap_or(&erased_block))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_image<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| MediumError::CorruptImage("truncated header".into()))?;
        if &magic != IMAGE_MAGIC {
            return Err(MediumError::CorruptImage("bad magic".into()));
        }
        let mut fields = [0u64; 5];
        for f in fields.iter_mut() {
            let mut buf = [0u8; 8];
            input
                .read_exact(&mut buf)
                .map_err(|_| MediumError::CorruptImage("truncated header".into()))?;
            *f = u64::from_le_bytes(buf);
        }
        let [chunk_size, chunks_per_block, block_count, erasure_limit, flags] = fields;
        if flags & !FLAG_MULTIPLE_PROGRAMMING != 0 {
            return Err(MediumError::CorruptImage(format!("unknown flags {flags:#x}")));
        }
        // Guard against absurd headers before allocating.
        let too_big = |v: u64| v > u32::MAX as u64;
        if too_big(chunk_size) || too_big(chunks_per_block) || too_big(block_count) {
            return Err(MediumError::CorruptImage("geometry field out of range".into()));
        }
        let geometry = Geometry {
            chunk_size_bytes: chunk_size as usize,
            chunks_per_block: chunks_per_block as usize,
            block_count: block_count as usize,
            erasure_limit,
            multiple_programming_allowed: flags & FLAG_MULTIPLE_PROGRAMMING != 0,
        };
        let mut medium = Medium::new(geometry).map_err(|e| MediumError::CorruptImage(e.to_string()))?;
        let stride = geometry.chunk_stride();
        for cells in medium.blocks.iter_mut() {
            let mut data = vec![0u8; geometry.block_bytes()].into_boxed_slice();
            input
                .read_exact(&mut data)
                .map_err(|_| MediumError::CorruptImage("truncated block data".into()))?;
            if data.iter().all(|&b| b == 0xFF) {
                continue;
            }
            for (count, cell) in cells.program_counts.iter_mut().zip(data.chunks_exact(stride)) {
                *count = u32::from(cell.iter().any(|&b| b != 0xFF));
            }
            cells.data = Some(data);
        }
        let mut trailing = [0u8; 1];
        match input.read(&mut trailing) {
            Ok(0) => Ok(medium),
            Ok(_) => Err(MediumError::CorruptImage("trailing bytes after last block".into())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_image(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Medium::read_image(BufReader::new(File::open(path)?))
    }

    pub fn to_image_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.geometry.block_bytes() * self.geometry.block_count);
        self.write_image(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(multi: bool) -> Medium {
        Medium::new(Geometry {
            chunk_size_bytes: 16,
            chunks_per_block: 4,
            block_count: 4,
            erasure_limit: 3,
            multiple_programming_allowed: multi,
        })
        .unwrap()
    }

    const SPARE: [u8; SPARE_SIZE] = [0xFF; SPARE_SIZE];

    #[test]
    fn program_erased_cell_stores_payload() {
        let mut m = small(true);
        let data: Vec<u8> = (0..16).collect();
        let view = m.program_chunk(1, 0, &data, &SPARE).unwrap();
        assert_eq!(view.payload, &data[..]);
        assert_eq!(view.program_count, 1);
    }

    #[test]
    fn zero_program_clears_cell() {
        let mut m = small(true);
        m.program_chunk(2, 3, &[0xA5; 16], &SPARE).unwrap();
        m.program_chunk(2, 3, &[0; 16], &[0; SPARE_SIZE]).unwrap();
        let view = m.read_chunk(2, 3).unwrap();
        assert!(view.payload.iter().all(|&b| b == 0));
        assert!(view.spare.iter().all(|&b| b == 0));
        assert_eq!(view.program_count, 2);
    }

    #[test]
    fn program_is_bitwise_and() {
        let mut m = small(true);
        m.program_chunk(1, 1, &[0b1010; 16], &SPARE).unwrap();
        let view = m.program_chunk(1, 1, &[0b0110; 16], &SPARE).unwrap();
        assert!(view.payload.iter().all(|&b| b == 0b0010));
    }

    #[test]
    fn reprogram_forbidden_on_single_program_medium() {
        let mut m = small(false);
        m.program_chunk(1, 0, &[1; 16], &SPARE).unwrap();
        assert!(matches!(
            m.program_chunk(1, 0, &[0; 16], &SPARE),
            Err(MediumError::MultipleProgrammingForbidden { block: 1, chunk: 0 })
        ));
        m.erase_block(1).unwrap();
        m.program_chunk(1, 0, &[0; 16], &SPARE).unwrap();
    }

    #[test]
    fn index_and_size_errors() {
        let mut m = small(true);
        assert!(matches!(m.read_chunk(0, 0), Err(MediumError::IndexOutOfRange { .. })));
        assert!(matches!(m.read_chunk(5, 0), Err(MediumError::IndexOutOfRange { .. })));
        assert!(matches!(m.read_chunk(1, 4), Err(MediumError::IndexOutOfRange { .. })));
        assert!(matches!(m.erase_block(9), Err(MediumError::IndexOutOfRange { .. })));
        assert!(matches!(m.program_chunk(1, 0, &[0; 15], &SPARE), Err(MediumError::SizeMismatch { .. })));
        assert!(matches!(m.program_chunk(1, 0, &[0; 16], &[0; 3]), Err(MediumError::SizeMismatch { .. })));
    }

    #[test]
    fn erase_resets_and_counts() {
        let mut m = small(true);
        m.program_chunk(3, 2, &[0x11; 16], &[0x22; SPARE_SIZE]).unwrap();
        let v = m.erase_block(3).unwrap();
        assert_eq!(v.erase_count, 1);
        for c in 0..4 {
            let view = m.read_chunk(3, c).unwrap();
            assert!(view.payload.iter().chain(view.spare).all(|&b| b == 0xFF));
            assert_eq!(view.program_count, 0);
        }
        let v = m.erase_block(3).unwrap();
        assert_eq!(v.erase_count, 2);
        assert!(m.read_chunk(3, 2).unwrap().payload.iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn block_goes_bad_past_erasure_limit() {
        let mut m = small(true);
        for _ in 0..3 {
            assert!(!m.erase_block(4).unwrap().is_bad);
        }
        // erase_count == erasure_limit; one more erase retires it
        let v = m.erase_block(4).unwrap();
        assert!(v.is_bad);
        assert_eq!(v.erase_count, 4);
        assert!(matches!(m.erase_block(4), Err(MediumError::BadBlock(4))));
        assert!(matches!(m.program_chunk(4, 0, &[0; 16], &SPARE), Err(MediumError::BadBlock(4))));
        // reads still work on bad blocks
        m.read_chunk(4, 0).unwrap();
    }

    #[test]
    fn scan_finds_and_loses_pattern() {
        let mut m = small(true);
        let mut payload = [0u8; 16];
        payload[5..9].copy_from_slice(b"KEYS");
        m.program_chunk(2, 1, &payload, &SPARE).unwrap();
        assert_eq!(m.raw_scan(b"KEYS").unwrap(), vec![ScanHit { block: 2, chunk: 1, offset: 5 }]);
        m.erase_block(2).unwrap();
        assert!(m.raw_scan(b"KEYS").unwrap().is_empty());
    }

    #[test]
    fn scan_rejects_bad_patterns() {
        let m = small(true);
        assert!(matches!(m.raw_scan(b""), Err(MediumError::EmptyPattern)));
        assert!(matches!(m.raw_scan(&[1; 17]), Err(MediumError::PatternTooLong { len: 17, max: 16 })));
    }

    #[test]
    fn scan_ignores_spare_area() {
        let mut m = small(true);
        let mut spare = [0u8; SPARE_SIZE];
        spare[..4].copy_from_slice(b"TAGS");
        m.program_chunk(1, 0, &[0; 16], &spare).unwrap();
        assert!(m.raw_scan(b"TAGS").unwrap().is_empty());
    }

    #[test]
    fn wear_summary_tracks_erases() {
        let mut m = small(true);
        assert_eq!(m.wear_summary(), WearSummary { per_block: vec![0; 4], total_erasures: 0, max_erase_count: 0 });
        for _ in 0..2 {
            m.erase_block(1).unwrap();
        }
        let w = m.wear_summary();
        assert_eq!(w.per_block, vec![2, 0, 0, 0]);
        assert_eq!(w.total_erasures, 2);
        assert_eq!(w.max_erase_count, 2);
    }

    #[test]
    fn image_header_layout() {
        let m = small(false);
        let bytes = m.to_image_bytes();
        assert_eq!(&bytes[..8], IMAGE_MAGIC);
        let field = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        assert_eq!([field(0), field(1), field(2), field(3), field(4)], [16, 4, 4, 3, 0]);
        assert_eq!(bytes.len(), 48 + 4 * 4 * (16 + SPARE_SIZE));
    }

    #[test]
    fn corrupt_images_rejected() {
        let m = small(true);
        let bytes = m.to_image_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Medium::read_image(&bad_magic[..]), Err(MediumError::CorruptImage(_))));
        assert!(matches!(Medium::read_image(&bytes[..bytes.len() - 1]), Err(MediumError::CorruptImage(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Medium::read_image(&long[..]), Err(MediumError::CorruptImage(_))));
        let mut zero_geom = bytes.clone();
        zero_geom[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(Medium::read_image(&zero_geom[..]), Err(MediumError::CorruptImage(_))));
    }
}
