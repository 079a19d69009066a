// SPDX-License-Identifier: Apache-2.0

//! Virtual-time event loop: trace → TLB → tracker → handler → estimators.
//!
//! At any instant, guest accesses are processed before handler actions, and
//! handler actions before estimator observations. Trackers and logs live in
//! ordered maps so that every run of a scenario is reproducible bit for bit.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::estimator::{
    EstimatorError, EstimatorParams, VmwareSampler, WssEstimate, WssLoop, VMWARE_SAMPLE_SIZE,
};
use crate::handler::{CumulativeLog, Handler, HandlerStats, LiveView, VcpuRef};
use crate::mmu::{Lookup, Mmu, MmuError, MmuStats, TlbConfig};
use crate::trace::{read_trace, MemAccess, Trace, TraceError, WorkloadSpec};
use crate::tracker::{FullEvent, Observed, Tracker, TrackerError, TrackerStats, TrackingConfig, TrackingMode, VmId};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Mmu(#[from] MmuError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("cannot open trace {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

impl SimError {
    /// True for failures to read input files, as opposed to bad values.
    pub fn is_io(&self) -> bool {
        matches!(self, SimError::Io { .. } | SimError::Trace(TraceError::Io(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    Prl,
    Pml,
    Vmware,
    Oracle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [Self::Prl, Self::Pml, Self::Vmware, Self::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prl => "PRL",
            Self::Pml => "PML",
            Self::Vmware => "VMware",
            Self::Oracle => "Oracle",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prl" | "paml" => Ok(Self::Prl),
            "pml" => Ok(Self::Pml),
            "vmware" => Ok(Self::Vmware),
            "oracle" => Ok(Self::Oracle),
            other => Err(format!("unknown estimator `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Synthetic(WorkloadSpec),
    File(PathBuf),
    Trace(Arc<Trace>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub workload: Workload,
    pub tracking: TrackingConfig,
    pub tlb: TlbConfig,
    pub estimator: EstimatorParams,
    /// Empty selects the estimators the tracking mode supports, plus Oracle.
    pub estimators: BTreeSet<EstimatorKind>,
    pub vmware_sample_size: u64,
    /// `None` samples once per `mu`.
    pub vmware_period_ns: Option<u64>,
    /// VM memory in pages; synthetic workloads use `n_pages`, traces their
    /// highest page when unset.
    pub vm_pages: Option<u64>,
    /// Seeds the VMware sampler.
    pub seed: u64,
}

impl Scenario {
    pub fn new(workload: Workload) -> Self {
        Self {
            workload,
            tracking: TrackingConfig::default(),
            tlb: TlbConfig::default(),
            estimator: EstimatorParams::default(),
            estimators: BTreeSet::new(),
            vmware_sample_size: VMWARE_SAMPLE_SIZE,
            vmware_period_ns: None,
            vm_pages: None,
            seed: 0,
        }
    }

    pub fn synthetic(spec: WorkloadSpec) -> Self {
        let seed = spec.seed;
        Self { seed, ..Self::new(Workload::Synthetic(spec)) }
    }

    pub fn enabled_estimators(&self) -> BTreeSet<EstimatorKind> {
        if !self.estimators.is_empty() {
            return self.estimators.clone();
        }
        let mut set = BTreeSet::from([EstimatorKind::Oracle]);
        match self.tracking.mode {
            TrackingMode::Paml => {
                set.insert(EstimatorKind::Prl);
            }
            TrackingMode::Pml => {
                set.insert(EstimatorKind::Pml);
            }
            TrackingMode::Off => {}
        }
        set
    }

    fn validate(&self) -> Result<(), SimError> {
        self.tracking.validate()?;
        self.tlb.validate()?;
        self.estimator.validate()?;
        let enabled = self.enabled_estimators();
        if enabled.contains(&EstimatorKind::Prl) && self.tracking.mode != TrackingMode::Paml {
            return Err(SimError::Scenario("the PRL estimator needs mode=paml".into()));
        }
        if enabled.contains(&EstimatorKind::Pml) && self.tracking.mode != TrackingMode::Pml {
            return Err(SimError::Scenario("the PML estimator needs mode=pml".into()));
        }
        if self.vmware_period_ns == Some(0) {
            return Err(SimError::Scenario("vmware period must be positive".into()));
        }
        Ok(())
    }
}

/// One point of the `dist` time series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistPoint {
    pub i: usize,
    pub t_ns: u64,
    pub dist: u64,
    /// Taken at trace end after draining buffers, not on the `mu` grid.
    pub final_drain: bool,
}

/// Outcome of a logging-based estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopRun {
    pub estimate: WssEstimate,
    /// Index into `series` of the converging observation.
    pub converged_index: Option<usize>,
    pub converged_at_ns: Option<u64>,
    /// Every observation of the run, including those after convergence.
    pub series: Vec<DistPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: TrackingMode,
    pub accesses: u64,
    pub vcpus: u32,
    /// Virtual time from first to last access, at least 1 ns.
    pub span_ns: u64,
    pub ground_truth_wss_pages: u64,
    pub vm_pages: u64,
    pub tlb: MmuStats,
    pub tracker: TrackerStats,
    pub handler: HandlerStats,
    /// Sum of all counts in the cumulative log after the final drain.
    pub log_total: u64,
    pub log_distinct_pages: u64,
    pub vm_effective_runtime_ns: u64,
    pub overhead_percent: f64,
    /// pVM CPU time spent in the handler relative to the span.
    pub pvm_utilization: f64,
    pub prl: Option<LoopRun>,
    pub pml: Option<LoopRun>,
    pub vmware: Option<WssEstimate>,
    pub oracle: Option<WssEstimate>,
}

impl SimReport {
    pub fn estimate(&self, kind: EstimatorKind) -> Option<&WssEstimate> {
        match kind {
            EstimatorKind::Prl => self.prl.as_ref().map(|r| &r.estimate),
            EstimatorKind::Pml => self.pml.as_ref().map(|r| &r.estimate),
            EstimatorKind::Vmware => self.vmware.as_ref(),
            EstimatorKind::Oracle => self.oracle.as_ref(),
        }
    }

    /// The logging-based estimator of this run.
    pub fn loop_run(&self) -> Option<&LoopRun> {
        self.prl.as_ref().or(self.pml.as_ref())
    }
}

enum Source {
    Synthetic(WorkloadSpec),
    Trace(Arc<Trace>),
}

impl Source {
    fn resolve(workload: &Workload) -> Result<Self, SimError> {
        Ok(match workload {
            Workload::Synthetic(spec) => {
                spec.validate()?;
                Source::Synthetic(spec.clone())
            }
            Workload::Trace(t) => Source::Trace(Arc::clone(t)),
            Workload::File(path) => {
                let file = File::open(path).map_err(|source| SimError::Io { path: path.clone(), source })?;
                Source::Trace(Arc::new(read_trace(BufReader::new(file))?))
            }
        })
    }

    fn ground_truth(&self) -> u64 {
        match self {
            Source::Synthetic(s) => s.hot_pages,
            Source::Trace(t) => t.ground_truth_wss_pages,
        }
    }

    fn vm_pages(&self, configured: Option<u64>) -> Result<u64, SimError> {
        match self {
            Source::Synthetic(s) => Ok(configured.unwrap_or(s.n_pages)),
            Source::Trace(t) => {
                let highest = t.accesses.iter().map(|a| a.gppn + 1).max().unwrap_or(0);
                match configured {
                    Some(pages) if pages < highest => Err(SimError::Scenario(format!(
                        "trace references page {} beyond vm_pages={pages}",
                        highest - 1
                    ))),
                    Some(pages) => Ok(pages),
                    None => Ok(highest),
                }
            }
        }
    }
}

pub fn run(scenario: &Scenario) -> Result<SimReport, SimError> {
    scenario.validate()?;
    let source = Source::resolve(&scenario.workload)?;
    run_source(scenario, &source)
}

fn run_source(scenario: &Scenario, source: &Source) -> Result<SimReport, SimError> {
    let vm_pages = source.vm_pages(scenario.vm_pages)?;
    let engine = Engine::new(scenario, source.ground_truth(), vm_pages)?;
    match source {
        Source::Synthetic(spec) => engine.run(spec.accesses()?),
        Source::Trace(t) => engine.run(t.accesses.iter().copied()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub estimator: EstimatorKind,
    pub wss_pages: u64,
    /// Absolute difference from the Oracle estimate.
    pub error_pages: u64,
    pub full_events: u64,
    pub missed_gpas: u64,
    pub overhead_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub paml: SimReport,
    pub pml: SimReport,
}

impl Comparison {
    pub fn row(&self, kind: EstimatorKind) -> &ComparisonRow {
        self.rows.iter().find(|r| r.estimator == kind).expect("all estimators present")
    }
}

/// Runs every estimator on the same trace: PRL, VMware and the oracle on a
/// PAML run, PML on a PML run with otherwise identical settings.
pub fn run_paired(scenario: &Scenario) -> Result<Comparison, SimError> {
    let mut paml = scenario.clone();
    paml.tracking.mode = TrackingMode::Paml;
    paml.estimators = BTreeSet::from([EstimatorKind::Prl, EstimatorKind::Vmware, EstimatorKind::Oracle]);
    let mut pml = scenario.clone();
    pml.tracking.mode = TrackingMode::Pml;
    pml.estimators = BTreeSet::from([EstimatorKind::Pml]);
    paml.validate()?;
    pml.validate()?;

    let source = Source::resolve(&scenario.workload)?;
    let paml_report = run_source(&paml, &source)?;
    let pml_report = run_source(&pml, &source)?;

    let oracle = paml_report.oracle.as_ref().expect("oracle enabled").wss_pages;
    let row = |kind: EstimatorKind, report: &SimReport, uses_logging: bool| {
        let wss = report.estimate(kind).expect("estimator enabled").wss_pages;
        let (full_events, missed_gpas, overhead_percent) = if uses_logging {
            (report.tracker.full_events, report.tracker.missed_gpas, report.overhead_percent)
        } else {
            (0, 0, 0.0)
        };
        ComparisonRow {
            estimator: kind,
            wss_pages: wss,
            error_pages: wss.abs_diff(oracle),
            full_events,
            missed_gpas,
            overhead_percent,
        }
    };
    let rows = vec![
        row(EstimatorKind::Prl, &paml_report, true),
        row(EstimatorKind::Pml, &pml_report, true),
        row(EstimatorKind::Vmware, &paml_report, false),
        row(EstimatorKind::Oracle, &paml_report, false),
    ];
    Ok(Comparison { rows, paml: paml_report, pml: pml_report })
}

const VM: VmId = VmId(0);

struct LoopState {
    wss: WssLoop,
    series: Vec<DistPoint>,
    converged_at_ns: Option<u64>,
    converged_index: Option<usize>,
}

impl LoopState {
    fn new(params: EstimatorParams) -> Result<Self, SimError> {
        Ok(Self { wss: WssLoop::new(params)?, series: Vec::new(), converged_at_ns: None, converged_index: None })
    }

    fn observe(&mut self, t_ns: u64, dist: u64, final_drain: bool) -> Result<(), SimError> {
        let i = self.series.len();
        self.series.push(DistPoint { i, t_ns, dist, final_drain });
        if self.wss.state().converged {
            return Ok(());
        }
        if final_drain {
            self.wss.push_final(dist)?;
        } else if self.wss.push(dist)? {
            self.converged_at_ns = Some(t_ns);
            self.converged_index = Some(i);
        }
        Ok(())
    }

    fn finish(self) -> LoopRun {
        LoopRun {
            estimate: self.wss.estimate(),
            converged_index: self.converged_index,
            converged_at_ns: self.converged_at_ns,
            series: self.series,
        }
    }
}

struct InFlight {
    complete_at: u64,
    batch: Vec<FullEvent>,
}

#[derive(Clone, Copy)]
enum Event {
    HandlerStart(u64),
    HandlerComplete(u64),
    Observe(u64),
}

impl Event {
    fn key(self) -> (u64, u8) {
        match self {
            Event::HandlerStart(t) => (t, 0),
            Event::HandlerComplete(t) => (t, 1),
            Event::Observe(t) => (t, 2),
        }
    }
}

struct Engine {
    mode: TrackingMode,
    tracking: TrackingConfig,
    params: EstimatorParams,
    ground_truth: u64,
    vm_pages: u64,
    mmu: Mmu,
    trackers: BTreeMap<VcpuRef, Tracker>,
    logs: BTreeMap<VmId, CumulativeLog>,
    handler: Handler,
    pending: VecDeque<FullEvent>,
    start_at: Option<u64>,
    in_flight: Option<InFlight>,
    next_observation: u64,
    prl: Option<LoopState>,
    pml: Option<LoopState>,
    vmware: Option<VmwareSampler>,
    oracle: Option<HashMap<u64, u64>>,
    accesses: u64,
    vcpus: u32,
    first_t: Option<u64>,
    last_t: u64,
}

impl Engine {
    fn new(scenario: &Scenario, ground_truth: u64, vm_pages: u64) -> Result<Self, SimError> {
        let enabled = scenario.enabled_estimators();
        let params = scenario.estimator;
        let vmware = if enabled.contains(&EstimatorKind::Vmware) {
            let period = scenario.vmware_period_ns.unwrap_or(params.mu_ns);
            Some(VmwareSampler::new(vm_pages, scenario.vmware_sample_size, period, scenario.seed)?)
        } else {
            None
        };
        let prl = enabled.contains(&EstimatorKind::Prl).then(|| LoopState::new(params)).transpose()?;
        let pml = enabled.contains(&EstimatorKind::Pml).then(|| LoopState::new(params)).transpose()?;
        Ok(Self {
            mode: scenario.tracking.mode,
            tracking: scenario.tracking,
            params,
            ground_truth,
            vm_pages,
            mmu: Mmu::new(scenario.tlb)?,
            trackers: BTreeMap::new(),
            logs: BTreeMap::from([(VM, CumulativeLog::with_threshold(VM, params.tau))]),
            handler: Handler::new(scenario.tracking.handler_latency_per_entry_ns),
            pending: VecDeque::new(),
            start_at: None,
            in_flight: None,
            next_observation: 0,
            prl,
            pml,
            vmware,
            oracle: enabled.contains(&EstimatorKind::Oracle).then(HashMap::new),
            accesses: 0,
            vcpus: 0,
            first_t: None,
            last_t: 0,
        })
    }

    fn run<I: Iterator<Item = MemAccess>>(mut self, accesses: I) -> Result<SimReport, SimError> {
        for access in accesses {
            self.step(access)?;
        }
        self.finish()
    }

    fn step(&mut self, access: MemAccess) -> Result<(), SimError> {
        if self.first_t.is_some() && access.t < self.last_t {
            return Err(SimError::Scenario(format!(
                "access {} at {} ns precedes the previous access at {} ns",
                self.accesses, access.t, self.last_t
            )));
        }
        if access.gppn >= self.vm_pages {
            return Err(SimError::Scenario(format!(
                "access {} touches page {} beyond the {} VM pages",
                self.accesses, access.gppn, self.vm_pages
            )));
        }
        self.advance(access.t, false, true)?;
        self.first_t.get_or_insert(access.t);
        self.last_t = access.t;
        self.accesses += 1;
        self.vcpus = self.vcpus.max(access.vcpu + 1);

        if let Some(sampler) = &mut self.vmware {
            sampler.on_access(&access);
        }
        if let Some(counts) = &mut self.oracle {
            *counts.entry(access.gppn).or_insert(0) += 1;
        }
        let Lookup::Miss(walk) = self.mmu.lookup(access) else {
            return Ok(());
        };
        if self.mode == TrackingMode::Off {
            return Ok(());
        }
        let key = VcpuRef { vm: VM, vcpu: access.vcpu };
        let tracker = match self.trackers.entry(key) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(Tracker::new(self.tracking, VM, access.vcpu)?),
        };
        if let Observed::FullEventRaised(event) = tracker.observe(&walk, access.t)? {
            match self.mode {
                // The VM-exit handler copies the buffer out before VM entry.
                TrackingMode::Pml => self.log_mut().absorb(event.entries),
                TrackingMode::Paml => {
                    self.pending.push_back(event);
                    if self.in_flight.is_none() && self.start_at.is_none() {
                        self.start_at = Some(access.t);
                    }
                }
                TrackingMode::Off => unreachable!(),
            }
        }
        Ok(())
    }

    fn log_mut(&mut self) -> &mut CumulativeLog {
        self.logs.get_mut(&VM).expect("VM log exists")
    }

    fn next_event(&self, observe: bool) -> Option<Event> {
        let mut candidates = Vec::with_capacity(3);
        if let Some(t) = self.start_at {
            candidates.push(Event::HandlerStart(t));
        }
        if let Some(f) = &self.in_flight {
            candidates.push(Event::HandlerComplete(f.complete_at));
        }
        if observe && (self.prl.is_some() || self.pml.is_some()) {
            candidates.push(Event::Observe(self.next_observation));
        }
        candidates.into_iter().min_by_key(|e| e.key())
    }

    /// Fires every pending event before `t` (or at `t` when `inclusive`).
    fn advance(&mut self, t: u64, inclusive: bool, observe: bool) -> Result<(), SimError> {
        while let Some(event) = self.next_event(observe) {
            let at = event.key().0;
            if at > t || (at == t && !inclusive) {
                break;
            }
            self.fire(event)?;
        }
        Ok(())
    }

    fn fire(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::HandlerStart(t) => {
                let batch: Vec<FullEvent> = self.pending.drain(..).collect();
                let complete_at = t + self.handler.batch_cost(&batch);
                self.start_at = None;
                self.in_flight = Some(InFlight { complete_at, batch });
            }
            Event::HandlerComplete(t) => {
                let flight = self.in_flight.take().expect("handler in flight");
                self.handler.handle_full(&flight.batch, &mut self.logs, &mut self.trackers)?;
                if !self.pending.is_empty() {
                    self.start_at = Some(t);
                }
            }
            Event::Observe(t) => {
                self.observe(t, false)?;
                self.next_observation = t + self.params.mu_ns;
            }
        }
        Ok(())
    }

    /// Samples the log as the pVM sees it: transferred counts plus entries
    /// still resident in buffers or queued for the handler.
    fn observe(&mut self, t: u64, final_drain: bool) -> Result<(), SimError> {
        let log = &self.logs[&VM];
        let pending = self
            .trackers
            .values()
            .flat_map(Tracker::resident)
            .chain(self.pending.iter().flat_map(|e| e.entries.iter().copied()))
            .chain(self.in_flight.iter().flat_map(|f| f.batch.iter().flat_map(|e| e.entries.iter().copied())));
        let view = LiveView::new(log, pending);
        if let Some(state) = &mut self.prl {
            state.observe(t, view.pages_at_least(self.params.tau), final_drain)?;
        }
        if let Some(state) = &mut self.pml {
            state.observe(t, view.distinct_pages(), final_drain)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimReport, SimError> {
        let end = self.last_t;
        if self.first_t.is_some() {
            self.advance(end, true, true)?;
        }
        // The guest is done; let the handler finish whatever is queued.
        while self.start_at.is_some() || self.in_flight.is_some() {
            self.advance(u64::MAX, true, false)?;
        }
        let residual: Vec<u64> = self
            .trackers
            .values_mut()
            .map(Tracker::drain_residual)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        self.log_mut().absorb(residual);
        if self.first_t.is_some() {
            self.observe(end, true)?;
        }

        let tracker = self.trackers.values().map(Tracker::stats).fold(TrackerStats::default(), |a, s| {
            TrackerStats {
                full_events: a.full_events + s.full_events,
                missed_gpas: a.missed_gpas + s.missed_gpas,
                logged: a.logged + s.logged,
                vm_stall_ns: a.vm_stall_ns + s.vm_stall_ns,
                walks: a.walks + s.walks,
            }
        });
        let span_ns = (end - self.first_t.unwrap_or(end)).max(1);
        let handler = self.handler.stats();
        let prl = self.prl.map(LoopState::finish);
        let pml = self.pml.map(LoopState::finish);
        let cutoff = prl.as_ref().and_then(|r| r.converged_at_ns).unwrap_or(end);
        let vmware = self.vmware.map(|mut s| {
            s.advance(end);
            s.estimate_at(cutoff, &self.params)
        });
        let params = self.params;
        let oracle = self.oracle.map(|counts| {
            let wss = counts.values().filter(|&&c| c >= params.tau).count() as u64;
            WssEstimate { wss_pages: wss, m_bytes: params.m_bytes(wss), observations: vec![wss], converged: true }
        });
        let log = &self.logs[&VM];
        Ok(SimReport {
            mode: self.mode,
            accesses: self.accesses,
            vcpus: self.vcpus,
            span_ns,
            ground_truth_wss_pages: self.ground_truth,
            vm_pages: self.vm_pages,
            tlb: self.mmu.stats(),
            tracker,
            handler,
            log_total: log.total(),
            log_distinct_pages: log.distinct_pages(),
            vm_effective_runtime_ns: span_ns + tracker.vm_stall_ns,
            overhead_percent: tracker.vm_stall_ns as f64 / span_ns as f64 * 100.0,
            pvm_utilization: handler.busy_ns as f64 / span_ns as f64,
            prl,
            pml,
            vmware,
            oracle,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Op, Pattern};

    fn spec(pattern: Pattern, pages: u64, iters: u64) -> WorkloadSpec {
        WorkloadSpec { pattern, n_pages: pages, hot_pages: pages, d_iters: iters, ..WorkloadSpec::default() }
    }

    fn with_mode(mut s: Scenario, mode: TrackingMode) -> Scenario {
        s.tracking.mode = mode;
        s
    }

    #[test]
    fn paml_never_stalls() {
        let r = run(&Scenario::synthetic(spec(Pattern::Rwrw, 3000, 3))).unwrap();
        assert!(r.tracker.full_events > 0);
        assert_eq!(r.overhead_percent, 0.0);
        assert_eq!(r.vm_effective_runtime_ns, r.span_ns);
    }

    #[test]
    fn pml_read_only_has_no_overhead() {
        let s = WorkloadSpec { wi: 0, ..spec(Pattern::WriteIntensity, 5000, 2) };
        let r = run(&with_mode(Scenario::synthetic(s), TrackingMode::Pml)).unwrap();
        assert_eq!(r.tracker.full_events, 0);
        assert_eq!(r.overhead_percent, 0.0);
    }

    #[test]
    fn pml_write_heavy_stalls() {
        let s = WorkloadSpec { wi: 100, ..spec(Pattern::WriteIntensity, 2000, 2) };
        let r = run(&with_mode(Scenario::synthetic(s), TrackingMode::Pml)).unwrap();
        // 2000 dirty-setting walks fill 3 buffers of 512.
        assert_eq!(r.tlb.dirty_sets, 2000);
        assert_eq!(r.tracker.full_events, 3);
        assert!(r.overhead_percent > 0.0);
        assert_eq!(r.log_total, 2000);
    }

    #[test]
    fn off_mode_rejects_logging_estimators() {
        let mut s = with_mode(Scenario::synthetic(spec(Pattern::Rwrw, 200, 1)), TrackingMode::Off);
        s.estimators = BTreeSet::from([EstimatorKind::Prl]);
        assert!(matches!(run(&s), Err(SimError::Scenario(_))));
        s.estimators = BTreeSet::from([EstimatorKind::Oracle, EstimatorKind::Vmware]);
        let r = run(&s).unwrap();
        assert_eq!(r.tracker, TrackerStats::default());
        assert_eq!(r.oracle.unwrap().wss_pages, 0);
    }

    #[test]
    fn missing_trace_file_is_io() {
        let err = run(&Scenario::new(Workload::File("/nonexistent/trace.csv".into()))).unwrap_err();
        assert!(err.is_io(), "{err}");
    }

    #[test]
    fn backwards_time_rejected() {
        let trace = Trace {
            accesses: vec![
                MemAccess { t: 5, vcpu: 0, gppn: 0, op: Op::Read },
                MemAccess { t: 4, vcpu: 0, gppn: 1, op: Op::Read },
            ],
            ground_truth_wss_pages: 2,
        };
        assert!(matches!(run(&Scenario::new(Workload::Trace(Arc::new(trace)))), Err(SimError::Scenario(_))));
    }

    #[test]
    fn page_beyond_vm_memory_rejected() {
        let trace = Trace { accesses: vec![MemAccess { t: 0, vcpu: 0, gppn: 9, op: Op::Read }], ground_truth_wss_pages: 1 };
        let mut s = Scenario::new(Workload::Trace(Arc::new(trace)));
        s.vm_pages = Some(4);
        assert!(matches!(run(&s), Err(SimError::Scenario(_))));
    }

    #[test]
    fn handler_window_drops_walks() {
        // Every access misses; a 4-entry buffer with 10 ns/entry keeps the
        // index negative for 30 ns after each full event.
        let s = WorkloadSpec { inter_access_gap: 10, ..spec(Pattern::Rrww, 200, 1) };
        let mut sc = Scenario::synthetic(s);
        sc.tracking.buffer_entries = 4;
        sc.tracking.handler_latency_per_entry_ns = 10;
        let r = run(&sc).unwrap();
        let t = r.tracker;
        // Round: 3 logged, 1 trigger, 3 dropped (t+10, t+20, t+30).
        assert_eq!(t.walks, 400);
        assert_eq!(t.full_events, 57);
        assert_eq!(t.missed_gpas, 171);
        assert_eq!(t.logged + t.missed_gpas + t.full_events, t.walks);
        assert_eq!(r.log_total, t.logged);
    }

    #[test]
    fn multi_vcpu_trace_shares_one_log() {
        let accesses = (0..4000u64)
            .map(|i| MemAccess { t: i, vcpu: (i % 2) as u32, gppn: (i / 2) % 500, op: Op::Read })
            .collect();
        let trace = Arc::new(Trace { accesses, ground_truth_wss_pages: 500 });
        let mut s = Scenario::new(Workload::Trace(trace));
        s.tracking.handler_latency_per_entry_ns = 0;
        let r = run(&s).unwrap();
        assert_eq!(r.vcpus, 2);
        assert_eq!(r.tracker.logged + r.tracker.missed_gpas + r.tracker.full_events, r.tracker.walks);
        assert_eq!(r.log_total, r.tracker.logged);
        assert!(r.handler.invocations > 0);
    }

    #[test]
    fn runs_are_reproducible() {
        let s = WorkloadSpec { wi: 30, seed: 99, ..spec(Pattern::WriteIntensity, 4000, 4) };
        let mut sc = Scenario::synthetic(s);
        sc.estimator = EstimatorParams { tau: 2, mu_ns: 50_000, omega_ns: 200_000, ..EstimatorParams::default() };
        sc.estimators = EstimatorKind::ALL.into_iter().filter(|k| *k != EstimatorKind::Pml).collect();
        assert_eq!(run(&sc).unwrap(), run(&sc).unwrap());
    }
}
