//! Managed (unified) memory with per-page residence and fault-driven migration.
//!
//! Every page has exactly one authoritative copy, on the side named by its
//! residence. An access from the other side migrates the page first. The
//! stale copy is poisoned on migration so that reading it by mistake cannot
//! go unnoticed in tests.

use serde::{Deserialize, Serialize};

/// Granularity of managed-memory migration.
pub const PAGE_SIZE: usize = 4096;

const POISON: u8 = 0xA5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Host,
    Device,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Host => Side::Device,
            Side::Device => Side::Host,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PageMeta {
    pub residence: Side,
    pub dirty: bool,
}

/// A page's state as captured for a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManagedPage {
    pub index: u64,
    pub residence: Side,
    pub dirty: bool,
    pub content: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ManagedMemory {
    host: Vec<u8>,
    device: Vec<u8>,
    pages: Vec<PageMeta>,
    migrations: u64,
}

impl ManagedMemory {
    /// Zero-filled, host-resident.
    pub fn new(len: usize) -> Self {
        let pages = len.div_ceil(PAGE_SIZE);
        Self {
            host: vec![0; len],
            device: vec![POISON; len],
            pages: vec![
                PageMeta {
                    residence: Side::Host,
                    dirty: false
                };
                pages
            ],
            migrations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.host.len()
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn migrations(&self) -> u64 {
        self.migrations
    }

    fn page_range(&self, index: usize) -> std::ops::Range<usize> {
        let start = index * PAGE_SIZE;
        start..(start + PAGE_SIZE).min(self.len())
    }

    fn touched(&self, start: usize, len: usize) -> std::ops::Range<usize> {
        if len == 0 {
            return 0..0;
        }
        start / PAGE_SIZE..(start + len).div_ceil(PAGE_SIZE)
    }

    /// Moves every page overlapping `[start, start+len)` to `side`. Returns
    /// the number of pages that moved.
    pub fn migrate(&mut self, start: usize, len: usize, side: Side) -> usize {
        let mut moved = 0;
        for index in self.touched(start, len) {
            if self.pages[index].residence == side {
                continue;
            }
            let r = self.page_range(index);
            let (dst, src) = match side {
                Side::Host => (&mut self.host, &mut self.device),
                Side::Device => (&mut self.device, &mut self.host),
            };
            dst[r.clone()].copy_from_slice(&src[r.clone()]);
            src[r].fill(POISON);
            self.pages[index].residence = side;
            moved += 1;
        }
        self.migrations += moved as u64;
        moved
    }

    /// Slice on `side`; caller must have migrated the range there.
    pub fn side_mut(&mut self, side: Side) -> &mut [u8] {
        match side {
            Side::Host => &mut self.host,
            Side::Device => &mut self.device,
        }
    }

    pub fn read(&mut self, start: usize, len: usize, side: Side) -> Vec<u8> {
        self.migrate(start, len, side);
        self.side_mut(side)[start..start + len].to_vec()
    }

    pub fn write(&mut self, start: usize, data: &[u8], side: Side) {
        self.migrate(start, data.len(), side);
        self.side_mut(side)[start..start + data.len()].copy_from_slice(data);
        self.mark_dirty(start, data.len());
    }

    pub fn mark_dirty(&mut self, start: usize, len: usize) {
        for index in self.touched(start, len) {
            self.pages[index].dirty = true;
        }
    }

    /// Pages read from their authoritative side, without migrating anything.
    pub fn pages(&self) -> Vec<ManagedPage> {
        self.pages
            .iter()
            .enumerate()
            .map(|(index, meta)| {
                let r = self.page_range(index);
                let content = match meta.residence {
                    Side::Host => &self.host[r],
                    Side::Device => &self.device[r],
                };
                ManagedPage {
                    index: index as u64,
                    residence: meta.residence,
                    dirty: meta.dirty,
                    content: content.to_vec(),
                }
            })
            .collect()
    }

    pub fn page_meta(&self, index: usize) -> Option<(Side, bool)> {
        self.pages.get(index).map(|m| (m.residence, m.dirty))
    }

    /// Writes `data` over every page on its current residence side.
    pub fn overwrite(&mut self, data: &[u8]) {
        for index in 0..self.pages.len() {
            let r = self.page_range(index);
            let dst = match self.pages[index].residence {
                Side::Host => &mut self.host,
                Side::Device => &mut self.device,
            };
            dst[r.clone()].copy_from_slice(&data[r]);
        }
    }

    /// Installs a captured page on its recorded side.
    pub fn restore_page(&mut self, page: &ManagedPage) -> Result<(), String> {
        let index = page.index as usize;
        if index >= self.pages.len() {
            return Err(format!("page {index} beyond {}", self.pages.len()));
        }
        let r = self.page_range(index);
        if r.len() != page.content.len() {
            return Err(format!(
                "page {index} holds {} bytes, expected {}",
                page.content.len(),
                r.len()
            ));
        }
        let (auth, stale) = match page.residence {
            Side::Host => (&mut self.host, &mut self.device),
            Side::Device => (&mut self.device, &mut self.host),
        };
        auth[r.clone()].copy_from_slice(&page.content);
        stale[r].fill(POISON);
        self.pages[index] = PageMeta {
            residence: page.residence,
            dirty: page.dirty,
        };
        Ok(())
    }
}
