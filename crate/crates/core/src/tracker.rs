// SPDX-License-Identifier: Apache-2.0

//! The per-vCPU logging hardware: PML and page access + modification
//! logging (PAML).
//!
//! Both modes write GPAs into a buffer from the top index downwards. They
//! differ in what they log and in how a full buffer is handled:
//!
//! * PML logs only walks that set an EPT dirty bit. The entry that takes the
//!   index below zero is logged, the VM exits, and the index is reset before
//!   the VM resumes. The stall is charged to the VM.
//! * PAML logs every walk. When a walk finds the index at zero, the buffer is
//!   reported full to a pVM CPU and the index drops to -1; that walk is not
//!   logged. Walks seen while the index is negative are dropped and counted
//!   as missed until the handler resets the index. The VM never stalls.

use serde::{Deserialize, Serialize};

use crate::mmu::WalkEvent;

pub const DEFAULT_BUFFER_ENTRIES: usize = 512;
pub const DEFAULT_VMEXIT_COST_NS: u64 = 4000;
pub const DEFAULT_HANDLER_LATENCY_PER_ENTRY_NS: u64 = 20;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TrackerError {
    #[error("tracking is disabled for this vCPU")]
    Disabled,
    #[error("invalid tracking config: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackingMode {
    Off,
    Pml,
    Paml,
}

impl TrackingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrackingMode::Off => "off",
            TrackingMode::Pml => "pml",
            TrackingMode::Paml => "paml",
        }
    }
}

impl std::str::FromStr for TrackingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(TrackingMode::Off),
            "pml" => Ok(TrackingMode::Pml),
            "paml" | "prl" => Ok(TrackingMode::Paml),
            other => Err(format!("unknown tracking mode `{other}` (expected off, pml or paml)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub mode: TrackingMode,
    pub buffer_entries: usize,
    /// Charged to the VM for every PML full-buffer exit.
    pub vmexit_cost_ns: u64,
    /// Time the PAML handler spends per transferred entry.
    pub handler_latency_per_entry_ns: u64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            mode: TrackingMode::Paml,
            buffer_entries: DEFAULT_BUFFER_ENTRIES,
            vmexit_cost_ns: DEFAULT_VMEXIT_COST_NS,
            handler_latency_per_entry_ns: DEFAULT_HANDLER_LATENCY_PER_ENTRY_NS,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.buffer_entries < 2 {
            return Err(TrackerError::Config(format!(
                "buffer_entries must be at least 2, got {}",
                self.buffer_entries
            )));
        }
        if i64::try_from(self.buffer_entries).is_err() {
            return Err(TrackerError::Config("buffer_entries too large".into()));
        }
        Ok(())
    }
}

/// Identifies a VM on the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmId(pub u32);

/// A full buffer handed to the log-full handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullEvent {
    pub vm: VmId,
    pub vcpu: u32,
    /// Sequence number of the buffer round that filled up.
    pub round: u64,
    pub raised_at: u64,
    /// Logged GPAs in logging order.
    pub entries: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observed {
    Logged,
    Dropped,
    FullEventRaised(FullEvent),
    Ignored,
}

/// The hardware buffer and its index register.
#[derive(Debug, Clone)]
pub struct LogBuffer {
    slots: Vec<u64>,
    index: i64,
}

impl LogBuffer {
    fn new(entries: usize) -> Self {
        Self { slots: vec![0; entries], index: entries as i64 - 1 }
    }

    fn top(&self) -> i64 {
        self.slots.len() as i64 - 1
    }

    pub fn index(&self) -> i64 {
        self.index
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    fn push(&mut self, gppn: u64) {
        self.slots[self.index as usize] = gppn;
        self.index -= 1;
    }

    /// Entries written since the last reset, oldest first. `lowest` is the
    /// lowest slot holding a logged entry.
    fn logged_from(&self, lowest: usize) -> Vec<u64> {
        self.slots[lowest..].iter().rev().copied().collect()
    }

    /// Entries resident in a round that has not filled yet.
    fn resident(&self) -> &[u64] {
        if self.index < 0 {
            &[]
        } else {
            &self.slots[(self.index + 1) as usize..]
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerStats {
    pub full_events: u64,
    pub missed_gpas: u64,
    pub logged: u64,
    pub vm_stall_ns: u64,
    /// Walk events presented to the tracker, including ignored ones.
    pub walks: u64,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackingConfig,
    vm: VmId,
    vcpu: u32,
    buffer: LogBuffer,
    round: u64,
    outstanding: Option<u64>,
    last_now: u64,
    stats: TrackerStats,
}

impl Tracker {
    pub fn new(config: TrackingConfig, vm: VmId, vcpu: u32) -> Result<Self, TrackerError> {
        config.validate()?;
        Ok(Self {
            config,
            vm,
            vcpu,
            buffer: LogBuffer::new(config.buffer_entries),
            round: 0,
            outstanding: None,
            last_now: 0,
            stats: TrackerStats::default(),
        })
    }

    pub fn mode(&self) -> TrackingMode {
        self.config.mode
    }

    pub fn vm(&self) -> VmId {
        self.vm
    }

    pub fn vcpu(&self) -> u32 {
        self.vcpu
    }

    pub fn index(&self) -> i64 {
        self.buffer.index()
    }

    pub fn buffer(&self) -> &LogBuffer {
        &self.buffer
    }

    /// The round whose full event is waiting for the handler, if any.
    pub fn outstanding_round(&self) -> Option<u64> {
        self.outstanding
    }

    pub fn observe(&mut self, walk: &WalkEvent, now: u64) -> Result<Observed, TrackerError> {
        if self.config.mode == TrackingMode::Off {
            return Err(TrackerError::Disabled);
        }
        if now < self.last_now {
            return Err(TrackerError::Protocol(format!(
                "walk at {now} ns precedes previous walk at {} ns",
                self.last_now
            )));
        }
        self.last_now = now;
        self.stats.walks += 1;
        let gppn = walk.access.gppn;
        match self.config.mode {
            TrackingMode::Off => unreachable!(),
            TrackingMode::Pml => {
                if !walk.dirty_set {
                    return Ok(Observed::Ignored);
                }
                self.buffer.push(gppn);
                self.stats.logged += 1;
                if self.buffer.index >= 0 {
                    return Ok(Observed::Logged);
                }
                // Synchronous VM exit: the buffer is copied out and the
                // index reset before the guest resumes.
                let event = self.full_event(0, now);
                self.stats.vm_stall_ns += self.config.vmexit_cost_ns;
                self.buffer.index = self.buffer.top();
                self.round += 1;
                Ok(Observed::FullEventRaised(event))
            }
            TrackingMode::Paml => {
                if self.buffer.index == 0 {
                    self.buffer.index = -1;
                    let event = self.full_event(1, now);
                    self.outstanding = Some(self.round);
                    Ok(Observed::FullEventRaised(event))
                } else if self.buffer.index < 0 {
                    self.stats.missed_gpas += 1;
                    Ok(Observed::Dropped)
                } else {
                    self.buffer.push(gppn);
                    self.stats.logged += 1;
                    Ok(Observed::Logged)
                }
            }
        }
    }

    fn full_event(&mut self, lowest: usize, now: u64) -> FullEvent {
        self.stats.full_events += 1;
        FullEvent {
            vm: self.vm,
            vcpu: self.vcpu,
            round: self.round,
            raised_at: now,
            entries: self.buffer.logged_from(lowest),
        }
    }

    /// Restarts logging after the handler has consumed a full buffer.
    pub fn reset_index(&mut self) -> Result<(), TrackerError> {
        if self.buffer.index >= 0 {
            return Err(TrackerError::Protocol(format!(
                "reset_index with index {} (no full event outstanding)",
                self.buffer.index
            )));
        }
        self.buffer.index = self.buffer.top();
        self.outstanding = None;
        self.round += 1;
        Ok(())
    }

    /// Entries of the current, not yet full, round, oldest first.
    pub fn resident(&self) -> impl Iterator<Item = u64> + '_ {
        self.buffer.resident().iter().rev().copied()
    }

    /// Hands out the entries of a partially filled buffer and restarts the
    /// round. Fails while a full event is outstanding.
    pub fn drain_residual(&mut self) -> Result<Vec<u64>, TrackerError> {
        if self.buffer.index < 0 {
            return Err(TrackerError::Protocol("drain while a full event is outstanding".into()));
        }
        let entries: Vec<u64> = self.resident().collect();
        self.buffer.index = self.buffer.top();
        Ok(entries)
    }

    pub fn stats(&self) -> TrackerStats {
        self.stats
    }
}
