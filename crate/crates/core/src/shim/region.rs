//! Upper/lower half region tracking.
//!
//! Adjacent regions of the same half and permissions are stored merged, the
//! way the kernel merges adjacent mappings. A merge across halves would make
//! lower-half memory look like application memory, so any overlap with the
//! other half is refused outright.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Half {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Classification {
    Upper,
    Lower,
    Unmapped,
}

impl From<Half> for Classification {
    fn from(h: Half) -> Self {
        match h {
            Half::Upper => Classification::Upper,
            Half::Lower => Classification::Lower,
        }
    }
}

/// `rwx` permission bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Perms(u8);

impl Perms {
    pub const R: Perms = Perms(0b100);
    pub const W: Perms = Perms(0b010);
    pub const X: Perms = Perms(0b001);
    pub const RW: Perms = Perms(0b110);
    pub const RX: Perms = Perms(0b101);

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl std::ops::BitOr for Perms {
    type Output = Perms;
    fn bitor(self, rhs: Perms) -> Perms {
        Perms(self.0 | rhs.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub start: u64,
    pub len: u64,
    pub half: Half,
    pub perms: Perms,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegionError {
    #[error("range {start:#x}..{end:#x} overlaps a {existing:?}-half region")]
    HalfConflict { start: u64, end: u64, existing: Half },
    #[error("empty or overflowing range")]
    BadRange,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionMap {
    regions: BTreeMap<u64, Region>,
}

impl RegionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn regions(&self) -> Vec<Region> {
        self.regions.values().copied().collect()
    }

    fn overlapping(&self, range: &Range<u64>) -> impl Iterator<Item = &Region> + '_ {
        let (start, end) = (range.start, range.end);
        // a region starting before `start` may still reach into the range
        let first = self
            .regions
            .range(..start)
            .next_back()
            .map(|(k, _)| *k)
            .unwrap_or(start);
        self.regions
            .range(first..end)
            .map(|(_, r)| r)
            .filter(move |r| r.start < end && r.end() > start)
    }

    /// Adds `range` to `half`. Same-half overlap takes the new permissions;
    /// other-half overlap is a [`RegionError::HalfConflict`].
    pub fn register(&mut self, range: Range<u64>, half: Half, perms: Perms) -> Result<(), RegionError> {
        if range.start >= range.end {
            return Err(RegionError::BadRange);
        }
        if let Some(r) = self.overlapping(&range).find(|r| r.half != half) {
            return Err(RegionError::HalfConflict {
                start: range.start,
                end: range.end,
                existing: r.half,
            });
        }
        let hits: Vec<Region> = self.overlapping(&range).copied().collect();
        for r in hits {
            self.regions.remove(&r.start);
            if r.start < range.start {
                self.insert_raw(Region {
                    len: range.start - r.start,
                    ..r
                });
            }
            if r.end() > range.end {
                self.insert_raw(Region {
                    start: range.end,
                    len: r.end() - range.end,
                    ..r
                });
            }
        }
        self.insert_raw(Region {
            start: range.start,
            len: range.end - range.start,
            half,
            perms,
        });
        self.coalesce_around(range.start);
        Ok(())
    }

    fn insert_raw(&mut self, r: Region) {
        self.regions.insert(r.start, r);
    }

    fn coalesce_around(&mut self, start: u64) {
        let mut cur = self.regions[&start];
        if let Some((_, prev)) = self.regions.range(..start).next_back() {
            if prev.end() == cur.start && prev.half == cur.half && prev.perms == cur.perms {
                let prev = *prev;
                self.regions.remove(&cur.start);
                cur = Region {
                    len: prev.len + cur.len,
                    ..prev
                };
                self.regions.insert(cur.start, cur);
            }
        }
        if let Some(next) = self.regions.get(&cur.end()).copied() {
            if next.half == cur.half && next.perms == cur.perms {
                self.regions.remove(&next.start);
                cur.len += next.len;
                self.regions.insert(cur.start, cur);
            }
        }
    }

    pub fn classify(&self, address: u64) -> Classification {
        match self.regions.range(..=address).next_back() {
            Some((_, r)) if address < r.end() => r.half.into(),
            _ => Classification::Unmapped,
        }
    }
}
