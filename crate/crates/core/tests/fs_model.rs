use std::collections::BTreeMap;

use flashlab::fs::{FsConfig, FsError, GcMode};
use flashlab::{FileSystem, Geometry, Medium};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Create(usize),
    Write { file: usize, at: usize, len: usize, fill: u8 },
    Truncate { file: usize, to: usize },
    Delete(usize),
    Gc(bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (1usize..300).prop_map(Op::Create),
        5 => (any::<usize>(), 0usize..400, 1usize..200, any::<u8>()).prop_map(|(file, at, len, fill)| Op::Write { file, at, len, fill }),
        1 => (any::<usize>(), 0usize..400).prop_map(|(file, to)| Op::Truncate { file, to }),
        1 => any::<usize>().prop_map(Op::Delete),
        1 => any::<bool>().prop_map(Op::Gc),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reads_match_shadow_model(ops in prop::collection::vec(op(), 1..80), zero in any::<bool>()) {
        let g = Geometry { chunk_size_bytes: 64, chunks_per_block: 8, block_count: 64, ..Geometry::default() };
        let cfg = FsConfig { zero_overwrite_enabled: zero, ..FsConfig::default() };
        let mut fs = FileSystem::new(Medium::new(g).unwrap(), cfg).unwrap();
        let mut shadow: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
        let mut n = 0;
        for op in ops {
            let ids: Vec<u32> = shadow.keys().copied().collect();
            let pick = |i: usize| (!ids.is_empty()).then(|| ids[i % ids.len()]);
            let r: Result<(), FsError> = match op {
                Op::Create(len) => {
                    n += 1;
                    let id = fs.create_file(&format!("f{n}"), 1).unwrap();
                    let data: Vec<u8> = (0..len).map(|i| (i * 7 + n) as u8).collect();
                    shadow.insert(id, data.clone());
                    fs.write_file(id, 0, &data).map(drop)
                }
                Op::Write { file, at, len, fill } => match pick(file) {
                    Some(id) => {
                        let d = shadow.get_mut(&id).unwrap();
                        let at = at.min(d.len() + 64);
                        if d.len() < at + len {
                            d.resize(at + len, 0);
                        }
                        d[at..at + len].fill(fill);
                        fs.write_file(id, at as u64, &vec![fill; len]).map(drop)
                    }
                    None => Ok(()),
                },
                Op::Truncate { file, to } => match pick(file) {
                    Some(id) => {
                        let d = shadow.get_mut(&id).unwrap();
                        d.resize(to.min(d.len()), 0);
                        fs.truncate_file(id, d.len() as u64)
                    }
                    None => Ok(()),
                },
                Op::Delete(file) => match pick(file) {
                    Some(id) => {
                        shadow.remove(&id);
                        fs.delete_file(id)
                    }
                    None => Ok(()),
                },
                Op::Gc(aggressive) => fs
                    .garbage_collect(if aggressive { GcMode::Aggressive } else { GcMode::Passive })
                    .map(drop),
            };
            // the medium holds about 32 KiB, far more than 80 small operations write
            r.unwrap();
            fs.check_invariants().map_err(TestCaseError::fail)?;
            for (id, d) in &shadow {
                prop_assert_eq!(&fs.read_file(*id).unwrap(), d, "file {}", id);
            }
        }
        let live: u64 = fs.block_infos().iter().map(|b| b.live_chunks as u64).sum();
        prop_assert_eq!(fs.free_space().free_chunks, fs.total_good_chunks() - live);
    }
}
