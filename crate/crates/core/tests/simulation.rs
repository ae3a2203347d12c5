use std::collections::BTreeMap;

use flashlab::fs::FsConfig;
use flashlab::metrics::allocation_rate;
use flashlab::secdel::{self, JunkSource};
use flashlab::workload::{load_profile, run_simulation, Mechanism, SimConfig, Simulation, WorkloadProfile};
use flashlab::{FileSystem, Geometry, Medium};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL_PROFILE: &str = r#"
name = "small"

[[file_type]]
name = "scratch"
lifetime_dist = { kind = "exponential", mean = 1800.0 }
open_period_dist = { kind = "exponential", mean = 300.0 }
chunks_per_open_dist = { kind = "uniform", low = 1.0, high = 3.0 }
write_location_dist = { kind = "uniform", low = 0.0, high = 1.5 }

[[file_type]]
name = "keep"
lifetime_dist = { kind = "exponential", mean = 86400.0 }
open_period_dist = { kind = "constant", value = 1e9 }
chunks_per_open_dist = { kind = "uniform", low = 2.0, high = 6.0 }
write_location_dist = { kind = "constant", value = 1.0 }

[[writer]]
name = "busy"
inter_creation_time_dist = { kind = "exponential", mean = 600.0 }
file_type_dist = [ { file_type = "scratch", weight = 0.8 }, { file_type = "keep", weight = 0.2 } ]
"#;

fn profile() -> WorkloadProfile {
    load_profile(SMALL_PROFILE).unwrap()
}

fn config(blocks: usize, mechanism: Mechanism, seed: u64) -> SimConfig {
    SimConfig {
        geometry: Geometry { chunk_size_bytes: 512, chunks_per_block: 16, block_count: blocks, ..Geometry::default() },
        fs: FsConfig::default(),
        mechanism,
        duration_ticks: 2 * 86400,
        warmup_ticks: 3600,
        seed,
        secret_period_ticks: Some(1200),
        record_chunk_writes: true,
    }
}

#[test]
fn erasure_time_is_first_clean_scan() {
    for seed in 1..=3 {
        let mut sim = Simulation::new(profile(), config(40, Mechanism::None, seed)).unwrap();
        let mut first_clean: BTreeMap<u64, u64> = BTreeMap::new();
        while let Some(now) = sim.step().unwrap() {
            for s in sim.secrets() {
                let on_medium = !sim.medium().raw_scan(&s.pattern).unwrap().is_empty();
                if s.t_deleted.is_none() {
                    assert!(on_medium, "seed {seed}: live secret {} missing from the medium", s.secret_id);
                } else if !first_clean.contains_key(&s.secret_id) && !on_medium {
                    first_clean.insert(s.secret_id, now);
                }
            }
        }
        let result = sim.finish();
        let mut resolved = 0;
        for s in &result.secrets {
            assert_eq!(s.t_erased, first_clean.get(&s.secret_id).copied(), "seed {seed}, secret {}", s.secret_id);
            resolved += usize::from(s.t_erased.is_some());
        }
        assert!(resolved > 0, "seed {seed}: no secret was ever erased");
    }
}

#[test]
fn allocation_log_matches_fs_counters() {
    let r = run_simulation(profile(), config(40, Mechanism::None, 7)).unwrap();
    assert_eq!(r.allocations.len() as u64, r.fs_stats.block_allocations);
    let programmed = r.fs_stats.chunks_programmed - r.fs_stats.chunks_zeroed;
    assert_eq!(r.chunk_writes.len() as u64, programmed);
    let hours = r.window.hours();
    let in_window = r.allocations.iter().filter(|a| r.window.contains(a.time_ticks)).count();
    assert_eq!(allocation_rate(&r.allocations, r.window).unwrap(), in_window as f64 / hours);
    assert!(r.allocations.windows(2).all(|w| w[0].sequence_number < w[1].sequence_number));
}

#[test]
fn roomy_baseline_has_positive_latency_and_stragglers() {
    let r = run_simulation(profile(), config(160, Mechanism::None, 3)).unwrap();
    let rows = r.secret_rows();
    assert!(!rows.is_empty());
    for row in &rows {
        if let Some(lat) = row.latency_ticks() {
            assert!(lat > 0, "secret {} erased at the instant it was deleted", row.secret_id);
        }
    }
    assert!(rows.iter().any(|s| s.censored), "a roomy medium should leave some secrets on it");
}

#[test]
fn purge_after_delete_and_zero_overwrite_give_zero_latency() {
    for mech in [Mechanism::Purge { times: vec![] }, Mechanism::ZeroOverwrite] {
        let r = run_simulation(profile(), config(40, mech.clone(), 5)).unwrap();
        let rows = r.secret_rows();
        assert!(rows.iter().any(|s| s.t_deleted.is_some()), "{mech:?}");
        for s in rows.iter().filter(|s| s.t_deleted.is_some()) {
            assert_eq!(s.latency_ticks(), Some(0), "{mech:?}: secret {}", s.secret_id);
        }
    }
}

#[test]
fn same_seed_same_run() {
    let a = run_simulation(profile(), config(40, Mechanism::None, 11)).unwrap();
    let b = run_simulation(profile(), config(40, Mechanism::None, 11)).unwrap();
    assert_eq!(a.allocations, b.allocations);
    assert_eq!(a.chunk_writes, b.chunk_writes);
    assert_eq!(a.secret_rows(), b.secret_rows());
    let c = run_simulation(profile(), config(40, Mechanism::None, 12)).unwrap();
    assert_ne!(a.allocations, c.allocations);
}

#[test]
fn purge_erases_every_dirty_block() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry { chunk_size_bytes: 128, chunks_per_block: 8, block_count: rng.random_range(16..48), ..Geometry::default() };
        let mut fs = FileSystem::new(Medium::new(g).unwrap(), FsConfig::default()).unwrap();
        let mut ids = Vec::new();
        for i in 0..rng.random_range(3..12) {
            let id = fs.create_file(&format!("f{i}"), 1).unwrap();
            let mut data = vec![0u8; rng.random_range(1..=g.chunk_size_bytes * 6)];
            rng.fill_bytes(&mut data);
            fs.write_file(id, 0, &data).unwrap();
            ids.push(id);
        }
        for id in ids.iter().filter(|_| rng.random_bool(0.5)) {
            fs.delete_file(*id).unwrap();
        }
        let dirty = fs.block_infos().iter().filter(|b| b.deleted_chunks > 0).count() as u64;
        let report = secdel::purge(&mut fs, &JunkSource::new(seed)).unwrap();
        assert!(report.blocks_erased >= dirty, "seed {seed}: erased {} of {dirty} dirty blocks", report.blocks_erased);
        assert_eq!(report.duration_ticks, 0);
        fs.check_invariants().unwrap();
    }
}
