// SPDX-License-Identifier: Apache-2.0

//! The pVM-side log-full handler.
//!
//! One invocation drains every pending full buffer, for all VMs, into the
//! owning VM's cumulative log and then restarts each buffer. Counting how
//! often each GPA was seen is what lets the estimator tell hot pages apart.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::tracker::{FullEvent, Tracker, TrackerError, VmId};

/// Per-VM page → times-logged map, shared by all of the VM's vCPUs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CumulativeLog {
    owner_vm: VmId,
    counts: HashMap<u64, u64>,
    total: u64,
    /// Threshold whose crossings are counted as entries arrive.
    tracked_tau: Option<u64>,
    hot: u64,
}

impl CumulativeLog {
    pub fn new(owner_vm: VmId) -> Self {
        Self { owner_vm, counts: HashMap::new(), total: 0, tracked_tau: None, hot: 0 }
    }

    /// A log that keeps `pages_at_least(tau)` up to date incrementally.
    pub fn with_threshold(owner_vm: VmId, tau: u64) -> Self {
        Self { tracked_tau: Some(tau), ..Self::new(owner_vm) }
    }

    pub fn owner_vm(&self) -> VmId {
        self.owner_vm
    }

    pub fn absorb<I: IntoIterator<Item = u64>>(&mut self, entries: I) {
        for gppn in entries {
            let c = self.counts.entry(gppn).or_insert(0);
            *c += 1;
            if self.tracked_tau == Some(*c) {
                self.hot += 1;
            }
            self.total += 1;
        }
    }

    pub fn count(&self, gppn: u64) -> u64 {
        self.counts.get(&gppn).copied().unwrap_or(0)
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Distinct pages logged at least once.
    pub fn distinct_pages(&self) -> u64 {
        self.counts.len() as u64
    }

    /// Pages logged at least `tau` times.
    pub fn pages_at_least(&self, tau: u64) -> u64 {
        if self.tracked_tau == Some(tau) {
            return self.hot;
        }
        self.counts.values().filter(|&&c| c >= tau).count() as u64
    }

    /// `(gppn, count)` pairs sorted by page.
    pub fn sorted_counts(&self) -> Vec<(u64, u64)> {
        let mut v: Vec<(u64, u64)> = self.counts.iter().map(|(&p, &c)| (p, c)).collect();
        v.sort_unstable();
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&p, &c)| (p, c))
    }
}

/// Log contents as seen by an observer: the transferred counts plus entries
/// still sitting in hardware buffers or in flight to the handler.
#[derive(Debug)]
pub struct LiveView<'a> {
    log: &'a CumulativeLog,
    extra: HashMap<u64, u64>,
}

impl<'a> LiveView<'a> {
    pub fn new<I: IntoIterator<Item = u64>>(log: &'a CumulativeLog, pending: I) -> Self {
        let mut extra = HashMap::new();
        for gppn in pending {
            *extra.entry(gppn).or_insert(0) += 1;
        }
        Self { log, extra }
    }

    pub fn pages_at_least(&self, tau: u64) -> u64 {
        let crossing = self
            .extra
            .iter()
            .filter(|(p, c)| {
                let logged = self.log.count(**p);
                logged < tau && logged + **c >= tau
            })
            .count() as u64;
        self.log.pages_at_least(tau) + crossing
    }

    pub fn distinct_pages(&self) -> u64 {
        let new = self.extra.keys().filter(|p| self.log.count(**p) == 0).count() as u64;
        self.log.distinct_pages() + new
    }
}

/// Identifies one vCPU's tracker on the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VcpuRef {
    pub vm: VmId,
    pub vcpu: u32,
}

impl From<&FullEvent> for VcpuRef {
    fn from(ev: &FullEvent) -> Self {
        Self { vm: ev.vm, vcpu: ev.vcpu }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerStats {
    pub invocations: u64,
    pub events: u64,
    pub entries: u64,
    pub busy_ns: u64,
}

#[derive(Debug, Clone)]
pub struct Handler {
    latency_per_entry_ns: u64,
    stats: HandlerStats,
}

impl Handler {
    pub fn new(latency_per_entry_ns: u64) -> Self {
        Self { latency_per_entry_ns, stats: HandlerStats::default() }
    }

    /// Virtual time needed to transfer `events`.
    pub fn batch_cost(&self, events: &[FullEvent]) -> u64 {
        events.iter().map(|e| e.entries.len() as u64).sum::<u64>() * self.latency_per_entry_ns
    }

    /// Transfers every snapshot into its VM's log, then resets the trackers
    /// that reported them. Nothing is applied unless every event matches an
    /// outstanding full buffer.
    pub fn handle_full(
        &mut self,
        events: &[FullEvent],
        logs: &mut BTreeMap<VmId, CumulativeLog>,
        trackers: &mut BTreeMap<VcpuRef, Tracker>,
    ) -> Result<u64, TrackerError> {
        if events.is_empty() {
            return Ok(0);
        }
        let mut seen = HashSet::new();
        for ev in events {
            let key = VcpuRef::from(ev);
            let tracker = trackers.get(&key).ok_or_else(|| {
                TrackerError::Protocol(format!("no tracker for vm {} vcpu {}", ev.vm.0, ev.vcpu))
            })?;
            if tracker.index() >= 0 || tracker.outstanding_round() != Some(ev.round) {
                return Err(TrackerError::Protocol(format!(
                    "snapshot of round {} for vm {} vcpu {} is not outstanding (index {})",
                    ev.round,
                    ev.vm.0,
                    ev.vcpu,
                    tracker.index()
                )));
            }
            if !seen.insert(key) {
                return Err(TrackerError::Protocol(format!(
                    "two snapshots for vm {} vcpu {} in one batch",
                    ev.vm.0, ev.vcpu
                )));
            }
        }
        for ev in events {
            logs.entry(ev.vm)
                .or_insert_with(|| CumulativeLog::new(ev.vm))
                .absorb(ev.entries.iter().copied());
        }
        for ev in events {
            trackers
                .get_mut(&VcpuRef::from(ev))
                .expect("checked above")
                .reset_index()?;
        }
        let cost = self.batch_cost(events);
        self.stats.invocations += 1;
        self.stats.events += events.len() as u64;
        self.stats.entries += events.iter().map(|e| e.entries.len() as u64).sum::<u64>();
        self.stats.busy_ns += cost;
        Ok(cost)
    }

    pub fn stats(&self) -> HandlerStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmu::WalkEvent;
    use crate::trace::{MemAccess, Op};
    use crate::tracker::{Observed, TrackingConfig, TrackingMode};

    const VM: VmId = VmId(0);

    fn paml(entries: usize, vcpu: u32) -> Tracker {
        let config = TrackingConfig { mode: TrackingMode::Paml, buffer_entries: entries, ..TrackingConfig::default() };
        Tracker::new(config, VM, vcpu).unwrap()
    }

    fn feed(t: &mut Tracker, pages: &[u64]) -> Vec<FullEvent> {
        let mut out = Vec::new();
        for &p in pages {
            let w = WalkEvent { access: MemAccess { t: 0, vcpu: t.vcpu(), gppn: p, op: Op::Read }, dirty_set: false };
            if let Observed::FullEventRaised(ev) = t.observe(&w, 0).unwrap() {
                out.push(ev);
            }
        }
        out
    }

    fn registry(ts: Vec<Tracker>) -> BTreeMap<VcpuRef, Tracker> {
        ts.into_iter().map(|t| (VcpuRef { vm: t.vm(), vcpu: t.vcpu() }, t)).collect()
    }

    #[test]
    fn counts_repeated_pages() {
        let mut t = paml(4, 0);
        let events = feed(&mut t, &[5, 5, 9, 1]);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].entries, vec![5, 5, 9]);
        let mut trackers = registry(vec![t]);
        let mut logs = BTreeMap::new();
        let mut h = Handler::new(20);
        let cost = h.handle_full(&events, &mut logs, &mut trackers).unwrap();
        assert_eq!(cost, 60);
        let log = &logs[&VM];
        assert_eq!(log.sorted_counts(), vec![(5, 2), (9, 1)]);
        assert_eq!(trackers.values().next().unwrap().index(), 3);
    }

    #[test]
    fn two_vcpus_one_invocation() {
        let mut a = paml(3, 0);
        let mut b = paml(3, 1);
        let mut events = feed(&mut a, &[1, 2, 0]);
        events.extend(feed(&mut b, &[2, 3, 0]));
        let mut trackers = registry(vec![a, b]);
        let mut logs = BTreeMap::new();
        let mut h = Handler::new(1);
        h.handle_full(&events, &mut logs, &mut trackers).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[&VM].sorted_counts(), vec![(1, 1), (2, 2), (3, 1)]);
        assert_eq!(h.stats().invocations, 1);
        assert_eq!(h.stats().events, 2);
        assert!(trackers.values().all(|t| t.index() == 2));
    }

    #[test]
    fn empty_batch_is_free() {
        let mut trackers = registry(vec![paml(4, 0)]);
        let mut logs = BTreeMap::new();
        let mut h = Handler::new(20);
        assert_eq!(h.handle_full(&[], &mut logs, &mut trackers).unwrap(), 0);
        assert!(logs.is_empty());
        assert_eq!(h.stats(), HandlerStats::default());
    }

    #[test]
    fn snapshot_applied_once() {
        let mut t = paml(3, 0);
        let events = feed(&mut t, &[1, 2, 0]);
        let mut trackers = registry(vec![t]);
        let mut logs = BTreeMap::new();
        let mut h = Handler::new(0);
        h.handle_full(&events, &mut logs, &mut trackers).unwrap();
        let err = h.handle_full(&events, &mut logs, &mut trackers).unwrap_err();
        assert!(matches!(err, TrackerError::Protocol(_)));
        assert_eq!(logs[&VM].total(), 2);
    }

    #[test]
    fn stale_round_rejected_without_side_effects() {
        let mut t = paml(3, 0);
        let first = feed(&mut t, &[1, 2, 0]);
        let mut trackers = registry(vec![t]);
        let mut logs = BTreeMap::new();
        let mut h = Handler::new(0);
        h.handle_full(&first, &mut logs, &mut trackers).unwrap();
        let t = trackers.values_mut().next().unwrap();
        let second = feed(t, &[7, 7, 0]);
        assert_eq!(second.len(), 1);
        // Replaying the old snapshot while a new one is outstanding.
        assert!(h.handle_full(&first, &mut logs, &mut trackers).is_err());
        assert_eq!(logs[&VM].total(), 2);
        h.handle_full(&second, &mut logs, &mut trackers).unwrap();
        assert_eq!(logs[&VM].count(7), 2);
    }

    #[test]
    fn live_view_adds_pending_entries() {
        let mut log = CumulativeLog::new(VM);
        log.absorb([1, 1, 2]);
        let view = LiveView::new(&log, [2, 3, 3]);
        assert_eq!(view.pages_at_least(2), 3);
        assert_eq!(view.pages_at_least(3), 0);
        assert_eq!(view.distinct_pages(), 3);
    }

    #[test]
    fn tracked_threshold_matches_scan() {
        let mut fast = CumulativeLog::with_threshold(VM, 3);
        let mut slow = CumulativeLog::new(VM);
        for batch in [[1, 2, 1], [1, 3, 2], [2, 2, 4]] {
            fast.absorb(batch);
            slow.absorb(batch);
            assert_eq!(fast.pages_at_least(3), slow.pages_at_least(3));
            assert_eq!(fast.pages_at_least(2), slow.pages_at_least(2));
        }
        assert_eq!(fast.pages_at_least(3), 2);
    }
}
