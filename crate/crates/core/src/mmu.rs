// SPDX-License-Identifier: Apache-2.0

//! TLB and EPT dirty-bit model.
//!
//! Only accesses that walk the EPT reach the logging hardware. A walk
//! happens on a TLB miss, and also when a write hits an entry that was cached
//! with a clear dirty bit: the processor must walk again to set the bit.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::trace::{MemAccess, Op};

#[derive(Debug, thiserror::Error)]
pub enum MmuError {
    #[error("invalid TLB geometry: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Lru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbConfig {
    pub entries: usize,
    pub ways: usize,
    pub replacement: Replacement,
}

impl Default for TlbConfig {
    /// 4-way, 64 entries.
    fn default() -> Self {
        Self { entries: 64, ways: 4, replacement: Replacement::Lru }
    }
}

impl TlbConfig {
    pub fn validate(&self) -> Result<(), MmuError> {
        if self.ways < 1 || self.entries < self.ways {
            return Err(MmuError::Geometry(format!(
                "need entries >= ways >= 1, got entries={} ways={}",
                self.entries, self.ways
            )));
        }
        if !self.entries.is_multiple_of(self.ways) {
            return Err(MmuError::Geometry(format!(
                "entries {} is not a multiple of ways {}",
                self.entries, self.ways
            )));
        }
        Ok(())
    }

    pub fn sets(&self) -> usize {
        self.entries / self.ways
    }
}

/// An EPT walk, the only input of the logging hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkEvent {
    pub access: MemAccess,
    /// The walk set the page's EPT dirty bit.
    pub dirty_set: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss(WalkEvent),
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    gppn: u64,
    dirty: bool,
}

/// One set-associative LRU TLB. Each set is kept MRU-first.
#[derive(Debug, Clone)]
pub struct Tlb {
    config: TlbConfig,
    sets: Vec<Vec<Entry>>,
}

impl Tlb {
    pub fn new(config: TlbConfig) -> Result<Self, MmuError> {
        config.validate()?;
        Ok(Self { config, sets: vec![Vec::with_capacity(config.ways); config.sets()] })
    }

    fn set_index(&self, gppn: u64) -> usize {
        (gppn % self.sets.len() as u64) as usize
    }

    /// Moves `gppn` to the MRU position of its set.
    fn touch(&mut self, gppn: u64) -> Option<&mut Entry> {
        let idx = self.set_index(gppn);
        let set = &mut self.sets[idx];
        let pos = set.iter().position(|e| e.gppn == gppn)?;
        set[..=pos].rotate_right(1);
        Some(&mut set[0])
    }

    fn install(&mut self, gppn: u64, dirty: bool) {
        let ways = self.config.ways;
        let idx = self.set_index(gppn);
        let set = &mut self.sets[idx];
        if set.len() == ways {
            set.pop();
        }
        set.insert(0, Entry { gppn, dirty });
    }

    fn invalidate(&mut self, gppn: u64) {
        let idx = self.set_index(gppn);
        self.sets[idx].retain(|e| e.gppn != gppn);
    }

    pub fn contains(&self, gppn: u64) -> bool {
        self.sets[self.set_index(gppn)].iter().any(|e| e.gppn == gppn)
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_set_occupancy(&self) -> usize {
        self.sets.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmuStats {
    pub hits: u64,
    pub misses: u64,
    pub dirty_sets: u64,
}

/// Per-vCPU TLBs over one VM's EPT dirty bits.
#[derive(Debug, Clone)]
pub struct Mmu {
    config: TlbConfig,
    tlbs: Vec<Tlb>,
    dirty: HashSet<u64>,
    stats: MmuStats,
}

impl Mmu {
    pub fn new(config: TlbConfig) -> Result<Self, MmuError> {
        config.validate()?;
        Ok(Self { config, tlbs: Vec::new(), dirty: HashSet::new(), stats: MmuStats::default() })
    }

    fn tlb_mut(&mut self, vcpu: u32) -> &mut Tlb {
        let vcpu = vcpu as usize;
        while self.tlbs.len() <= vcpu {
            // Geometry was validated in `new`.
            self.tlbs.push(Tlb::new(self.config).expect("validated geometry"));
        }
        &mut self.tlbs[vcpu]
    }

    pub fn tlb(&self, vcpu: u32) -> Option<&Tlb> {
        self.tlbs.get(vcpu as usize)
    }

    pub fn lookup(&mut self, access: MemAccess) -> Lookup {
        let gppn = access.gppn;
        let write = access.op == Op::Write;
        let cached = self.tlb_mut(access.vcpu).touch(gppn).map(|e| e.dirty);
        if cached == Some(true) || (cached == Some(false) && !write) {
            self.stats.hits += 1;
            return Lookup::Hit;
        }
        // Miss, or a write through a clean cached translation.
        let dirty_set = write && self.dirty.insert(gppn);
        let now_dirty = write || self.dirty.contains(&gppn);
        let tlb = self.tlb_mut(access.vcpu);
        match cached {
            Some(_) => {
                if let Some(e) = tlb.touch(gppn) {
                    e.dirty = true;
                }
            }
            None => tlb.install(gppn, now_dirty),
        }
        self.stats.misses += 1;
        if dirty_set {
            self.stats.dirty_sets += 1;
        }
        Lookup::Miss(WalkEvent { access, dirty_set })
    }

    /// Clears EPT dirty bits and drops the pages' cached translations.
    pub fn clear_dirty<I: IntoIterator<Item = u64>>(&mut self, pages: I) {
        for gppn in pages {
            self.dirty.remove(&gppn);
            for tlb in &mut self.tlbs {
                tlb.invalidate(gppn);
            }
        }
    }

    pub fn is_dirty(&self, gppn: u64) -> bool {
        self.dirty.contains(&gppn)
    }

    pub fn dirty_pages(&self) -> Vec<u64> {
        let mut pages: Vec<u64> = self.dirty.iter().copied().collect();
        pages.sort_unstable();
        pages
    }

    pub fn stats(&self) -> MmuStats {
        self.stats
    }
}
