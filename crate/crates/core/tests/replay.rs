//! Log replay against fresh devices.

mod common;

use std::collections::BTreeMap;

use cracsim_core::engine::{replay_log, EngineError};
use cracsim_core::shim::{active_set, LogOp};
use cracsim_core::AllocationRecord;
use proptest::prelude::*;

fn logged_addresses(shim: &cracsim_core::Shim) -> BTreeMap<u64, u64> {
    shim.log()
        .entries()
        .iter()
        .filter(|e| e.op == LogOp::Alloc)
        .map(|e| (e.seq, e.address))
        .collect()
}

#[test]
fn concurrent_logs_replay_exactly() {
    for seed in 0..50 {
        let shim = common::random_log(seed, 200, 8);
        let replayed = replay_log(&common::lower(seed + 1), &shim.log()).unwrap();
        assert_eq!(replayed, logged_addresses(&shim), "seed {seed}");
    }
}

#[test]
fn edited_size_is_reported_at_its_seq() {
    let shim = common::random_log(3, 200, 1);
    let mut log = shim.log();
    let entries = log.entries().to_vec();
    let allocs: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.op == LogOp::Alloc)
        .map(|(i, _)| i)
        .collect();
    // enlarge an early allocation; it or a later one must move
    let target = allocs[allocs.len() / 4];
    let mut edited = entries.clone();
    edited[target].size += 300_000;
    log = cracsim_core::CallLog::from_parts(edited, log.binaries());
    match replay_log(&common::lower(3), &log) {
        Err(EngineError::ReplayDivergence { seq, .. }) => assert!(seq >= entries[target].seq),
        Ok(_) => panic!("enlarged allocation replayed without divergence"),
        Err(e) => panic!("unexpected {e}"),
    }
}

/// Brute force: an allocation is active iff no later entry frees its id.
fn brute_active(entries: &[cracsim_core::CallLogEntry]) -> Vec<AllocationRecord> {
    let mut out = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if e.op != LogOp::Alloc {
            continue;
        }
        if entries[i + 1..].iter().any(|f| f.op == LogOp::Free && f.id == e.id) {
            continue;
        }
        out.push(AllocationRecord {
            id: cracsim_core::AllocId(e.id),
            kind: e.kind.unwrap(),
            size: e.size,
            address: cracsim_core::DevicePtr(e.address),
            freed: false,
        });
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn active_set_matches_brute_force(seed: u64, ops in 1usize..200) {
        let shim = common::random_log(seed, ops, 1);
        let log = shim.log();
        prop_assert_eq!(active_set(log.entries()), brute_active(log.entries()));
        prop_assert_eq!(shim.active_set(), shim.lower().device.live_records());
    }

    #[test]
    fn replay_reproduces_device_state(seed: u64, ops in 1usize..200) {
        let shim = common::random_log(seed, ops, 1);
        let fresh = common::lower(seed.wrapping_add(7));
        replay_log(&fresh, &shim.log()).unwrap();
        prop_assert_eq!(fresh.device.live_records(), shim.lower().device.live_records());
        prop_assert_eq!(fresh.device.stream_ids(), shim.lower().device.stream_ids());
        prop_assert_eq!(
            fresh.device.inspect(|s| s.allocator().clone()),
            shim.lower().device.inspect(|s| s.allocator().clone())
        );
    }
}
