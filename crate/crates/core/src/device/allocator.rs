//! First-fit arena allocator over an address-sorted, coalescing free list.
//!
//! The allocator is a pure function of the call sequence: no randomness, no
//! dependence on the device seed. That is what makes replaying the call log
//! against a fresh arena land every allocation at its original address.

use std::collections::BTreeMap;

use super::{AllocId, DevicePtr};

/// Alignment of every extent handed out by the arena.
pub const ALIGN: u64 = 256;

/// Base address of the simulated arena.
pub const ARENA_BASE: u64 = 0x0D00_0000_0000;

/// Rounds `size` up to the next multiple of [`ALIGN`].
pub fn align_up(size: u64) -> u64 {
    size.div_ceil(ALIGN) * ALIGN
}

/// Free list plus live extents of the arena.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocatorState {
    arena_base: u64,
    arena_limit: u64,
    /// Holes keyed by start address, value is length.
    free_list: BTreeMap<u64, u64>,
    live: BTreeMap<AllocId, (u64, u64)>,
}

impl AllocatorState {
    pub(crate) fn new(arena_bytes: u64) -> Self {
        let mut free_list = BTreeMap::new();
        free_list.insert(ARENA_BASE, arena_bytes);
        Self {
            arena_base: ARENA_BASE,
            arena_limit: ARENA_BASE + arena_bytes,
            free_list,
            live: BTreeMap::new(),
        }
    }

    pub fn arena_base(&self) -> u64 {
        self.arena_base
    }

    pub fn arena_limit(&self) -> u64 {
        self.arena_limit
    }

    /// Holes as `(address, length)` in ascending address order.
    pub fn holes(&self) -> Vec<(u64, u64)> {
        self.free_list.iter().map(|(&a, &l)| (a, l)).collect()
    }

    /// Live extents as `(id, address, length)`; lengths are aligned.
    pub fn live(&self) -> Vec<(AllocId, u64, u64)> {
        self.live.iter().map(|(&id, &(a, l))| (id, a, l)).collect()
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.arena_base && addr < self.arena_limit
    }

    /// First hole (lowest address) that fits the aligned request.
    pub(crate) fn allocate(&mut self, id: AllocId, size: u64) -> Option<DevicePtr> {
        let len = align_up(size);
        let (&addr, &hole) = self.free_list.iter().find(|(_, &l)| l >= len)?;
        self.free_list.remove(&addr);
        if hole > len {
            self.free_list.insert(addr + len, hole - len);
        }
        self.live.insert(id, (addr, len));
        Some(DevicePtr(addr))
    }

    /// Returns the extent of `id` to the free list, merging with neighbors.
    pub(crate) fn release(&mut self, id: AllocId) -> Option<DevicePtr> {
        let (addr, len) = self.live.remove(&id)?;
        let mut start = addr;
        let mut end = addr + len;
        if let Some((&prev, &prev_len)) = self.free_list.range(..addr).next_back() {
            if prev + prev_len == addr {
                self.free_list.remove(&prev);
                start = prev;
            }
        }
        if let Some(next_len) = self.free_list.remove(&end) {
            end += next_len;
        }
        self.free_list.insert(start, end - start);
        Some(DevicePtr(addr))
    }

    /// Checks that holes and live extents tile the arena exactly.
    pub fn check_partition(&self) -> Result<(), String> {
        let mut extents: Vec<(u64, u64, bool)> = self
            .free_list
            .iter()
            .map(|(&a, &l)| (a, l, true))
            .chain(self.live.values().map(|&(a, l)| (a, l, false)))
            .collect();
        extents.sort_unstable();
        let mut cursor = self.arena_base;
        let mut prev_hole = false;
        for (addr, len, hole) in extents {
            if addr != cursor {
                return Err(format!("gap or overlap at {addr:#x}, expected {cursor:#x}"));
            }
            if len == 0 || addr % ALIGN != 0 || len % ALIGN != 0 {
                return Err(format!("bad extent {addr:#x}+{len:#x}"));
            }
            if hole && prev_hole {
                return Err(format!("uncoalesced hole at {addr:#x}"));
            }
            prev_hole = hole;
            cursor = addr + len;
        }
        if cursor != self.arena_limit {
            return Err(format!("arena ends at {cursor:#x}, limit {:#x}", self.arena_limit));
        }
        Ok(())
    }
}
