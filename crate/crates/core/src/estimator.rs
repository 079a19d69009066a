// SPDX-License-Identifier: Apache-2.0

//! Working-set-size estimators.
//!
//! The logging-based estimators share one loop: every `mu` of virtual time
//! the number of hot pages seen so far is appended to `dist`, and the loop
//! stops at the first observation `i >= omega/mu` where
//! `dist[i] == dist[i - omega/mu]`. The total memory need is then
//! `wss * page_size + epsilon`.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::handler::CumulativeLog;
use crate::trace::{MemAccess, PAGE_SIZE};

pub const NS_PER_SEC: u64 = 1_000_000_000;
pub const DEFAULT_TAU: u64 = 50;
pub const DEFAULT_MU_NS: u64 = 30 * NS_PER_SEC;
pub const DEFAULT_OMEGA_NS: u64 = 120 * NS_PER_SEC;
pub const VMWARE_SAMPLE_SIZE: u64 = 100;
pub const VMWARE_PERIOD_NS: u64 = 30 * NS_PER_SEC;
pub const EPSILON_START_BYTES: f64 = 2.0 * 1024.0 * 1024.0 * 1024.0;
pub const EPSILON_SHRINK: f64 = 0.95;
pub const EPSILON_MAX_ITERATIONS: usize = 500;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EstimatorError {
    #[error("invalid estimator parameter {field}: {reason}")]
    Params { field: &'static str, reason: String },
    #[error("dist must be non-decreasing: observation {index} is {value}, previous {previous}")]
    NotMonotone { index: usize, value: u64, previous: u64 },
    #[error("sample size {sample_size} exceeds the {allocated} allocated pages")]
    SampleTooLarge { sample_size: u64, allocated: u64 },
    #[error("the initial memory size {0} bytes does not boot")]
    StartDoesNotBoot(f64),
    #[error("boot predicate is not monotone: {0} bytes booted, then failed when probed again")]
    NonMonotone(f64),
    #[error("no crash after {0} shrink steps")]
    IterationCap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorParams {
    /// A page logged at least this many times is hot.
    pub tau: u64,
    /// Stability window.
    pub omega_ns: u64,
    /// Observation interval.
    pub mu_ns: u64,
    pub page_size: u64,
    /// Guest kernel footprint added to the page total.
    pub epsilon_bytes: u64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            omega_ns: DEFAULT_OMEGA_NS,
            mu_ns: DEFAULT_MU_NS,
            page_size: PAGE_SIZE,
            epsilon_bytes: 0,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |field, reason: String| Err(EstimatorError::Params { field, reason });
        if self.tau < 1 {
            return bad("tau", "must be at least 1".into());
        }
        if self.mu_ns == 0 {
            return bad("mu", "must be positive".into());
        }
        if self.omega_ns == 0 || !self.omega_ns.is_multiple_of(self.mu_ns) {
            return bad(
                "omega",
                format!("{} ns is not a positive multiple of mu ({} ns)", self.omega_ns, self.mu_ns),
            );
        }
        if self.page_size == 0 {
            return bad("page_size", "must be positive".into());
        }
        Ok(())
    }

    /// `omega / mu`, in observations.
    pub fn window(&self) -> usize {
        (self.omega_ns / self.mu_ns) as usize
    }

    pub fn m_bytes(&self, wss_pages: u64) -> u64 {
        wss_pages * self.page_size + self.epsilon_bytes
    }

    fn estimate(&self, wss_pages: u64, observations: Vec<u64>, converged: bool) -> WssEstimate {
        WssEstimate { wss_pages, m_bytes: self.m_bytes(wss_pages), observations, converged }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub dist: Vec<u64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WssEstimate {
    pub wss_pages: u64,
    pub m_bytes: u64,
    pub observations: Vec<u64>,
    pub converged: bool,
}

/// The dist/convergence loop, fed one observation at a time.
#[derive(Debug, Clone)]
pub struct WssLoop {
    params: EstimatorParams,
    window: usize,
    state: EstimatorState,
}

impl WssLoop {
    pub fn new(params: EstimatorParams) -> Result<Self, EstimatorError> {
        params.validate()?;
        Ok(Self { params, window: params.window(), state: EstimatorState::default() })
    }

    /// Records `dist[i]` and reports whether the loop has ended. Observations
    /// after convergence are rejected by returning `true` without recording.
    pub fn push(&mut self, dist: u64) -> Result<bool, EstimatorError> {
        if self.state.converged {
            return Ok(true);
        }
        if let Some(&previous) = self.state.dist.last() {
            if dist < previous {
                return Err(EstimatorError::NotMonotone {
                    index: self.state.dist.len(),
                    value: dist,
                    previous,
                });
            }
        }
        self.state.dist.push(dist);
        let i = self.state.dist.len() - 1;
        if i >= self.window && dist == self.state.dist[i - self.window] {
            self.state.converged = true;
        }
        Ok(self.state.converged)
    }

    /// Records a last sample taken off the `mu` grid (at trace end). It
    /// updates the estimate but never counts towards convergence.
    pub fn push_final(&mut self, dist: u64) -> Result<(), EstimatorError> {
        if self.state.converged {
            return Ok(());
        }
        if let Some(&previous) = self.state.dist.last() {
            if dist < previous {
                return Err(EstimatorError::NotMonotone { index: self.state.dist.len(), value: dist, previous });
            }
        }
        self.state.dist.push(dist);
        Ok(())
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }

    /// Index of the converging observation.
    pub fn converged_at(&self) -> Option<usize> {
        self.state.converged.then(|| self.state.dist.len() - 1)
    }

    pub fn estimate(&self) -> WssEstimate {
        let wss = self.state.dist.last().copied().unwrap_or(0);
        self.params.estimate(wss, self.state.dist.clone(), self.state.converged)
    }
}

fn run_loop<I: IntoIterator<Item = u64>>(
    dists: I,
    params: &EstimatorParams,
) -> Result<WssEstimate, EstimatorError> {
    let mut wss = WssLoop::new(*params)?;
    for d in dists {
        if wss.push(d)? {
            break;
        }
    }
    Ok(wss.estimate())
}

/// PRL estimate from successive views of a cumulative log, one per `mu`.
pub fn estimate_prl<'a, I>(samples: I, params: &EstimatorParams) -> Result<WssEstimate, EstimatorError>
where
    I: IntoIterator<Item = &'a CumulativeLog>,
{
    let tau = params.tau;
    run_loop(samples.into_iter().map(|log| log.pages_at_least(tau)), params)
}

/// PML estimate: the number of distinct logged pages. PML logs a page only
/// when its dirty bit gets set, so repeat counts (and `tau`) carry no
/// information here.
pub fn estimate_pml<'a, I>(samples: I, params: &EstimatorParams) -> Result<WssEstimate, EstimatorError>
where
    I: IntoIterator<Item = &'a CumulativeLog>,
{
    run_loop(samples.into_iter().map(CumulativeLog::distinct_pages), params)
}

/// Number of distinct pages occurring at least `tau` times.
pub fn hot_pages_in<I: IntoIterator<Item = u64>>(pages: I, tau: u64) -> u64 {
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for p in pages {
        *counts.entry(p).or_insert(0) += 1;
    }
    counts.values().filter(|&&c| c >= tau).count() as u64
}

/// Ground truth straight from the accesses: no TLB, no buffers, no drops.
pub fn estimate_oracle<I: IntoIterator<Item = MemAccess>>(accesses: I, params: &EstimatorParams) -> WssEstimate {
    let wss = hot_pages_in(accesses.into_iter().map(|a| a.gppn), params.tau);
    params.estimate(wss, vec![wss], true)
}

/// Sampling baseline: every period a fresh sample of pages has its present
/// bits invalidated; the fraction of them touched during the period, scaled
/// to the allocation, is the estimate.
#[derive(Debug, Clone)]
pub struct VmwareSampler {
    allocated_pages: u64,
    sample_size: u64,
    period_ns: u64,
    rng: ChaCha8Rng,
    period: u64,
    sampled: HashSet<u64>,
    faulted: HashSet<u64>,
    /// `(period end, wss_pages)` for each completed period.
    estimates: Vec<(u64, u64)>,
}

impl VmwareSampler {
    pub fn new(allocated_pages: u64, sample_size: u64, period_ns: u64, seed: u64) -> Result<Self, EstimatorError> {
        if sample_size > allocated_pages {
            return Err(EstimatorError::SampleTooLarge { sample_size, allocated: allocated_pages });
        }
        if sample_size == 0 {
            return Err(EstimatorError::Params { field: "sample_size", reason: "must be positive".into() });
        }
        if period_ns == 0 {
            return Err(EstimatorError::Params { field: "period", reason: "must be positive".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut s = Self {
            allocated_pages,
            sample_size,
            period_ns,
            rng,
            period: 0,
            sampled: HashSet::new(),
            faulted: HashSet::new(),
            estimates: Vec::new(),
        };
        s.resample();
        Ok(s)
    }

    fn resample(&mut self) {
        self.sampled = sample(&mut self.rng, self.allocated_pages as usize, self.sample_size as usize)
            .into_iter()
            .map(|p| p as u64)
            .collect();
        self.faulted.clear();
    }

    fn current_estimate(&self) -> u64 {
        let fraction = self.faulted.len() as f64 / self.sample_size as f64;
        (fraction * self.allocated_pages as f64).round() as u64
    }

    /// Closes every period that ends at or before `now`.
    pub fn advance(&mut self, now: u64) {
        while (self.period + 1) * self.period_ns <= now {
            self.period += 1;
            self.estimates.push((self.period * self.period_ns, self.current_estimate()));
            self.resample();
        }
    }

    pub fn on_access(&mut self, access: &MemAccess) {
        self.advance(access.t);
        if self.sampled.contains(&access.gppn) {
            self.faulted.insert(access.gppn);
        }
    }

    pub fn period_estimates(&self) -> &[(u64, u64)] {
        &self.estimates
    }

    /// The last estimate completed by `cutoff`, or the running period's
    /// partial figure when none has completed.
    pub fn estimate_at(&self, cutoff: u64, params: &EstimatorParams) -> WssEstimate {
        let done: Vec<u64> = self.estimates.iter().take_while(|(end, _)| *end <= cutoff).map(|e| e.1).collect();
        match done.last() {
            Some(&wss) => params.estimate(wss, done, true),
            None => {
                let wss = self.current_estimate();
                params.estimate(wss, vec![wss], false)
            }
        }
    }
}

/// Finds the guest kernel footprint by shrinking the VM memory by 5% until
/// it no longer boots, returning the last size that did.
pub fn estimate_epsilon<F: FnMut(f64) -> bool>(
    mut boots_ok: F,
    start: f64,
    max_iterations: usize,
) -> Result<f64, EstimatorError> {
    if !boots_ok(start) {
        return Err(EstimatorError::StartDoesNotBoot(start));
    }
    let mut epsilon = start;
    for _ in 0..max_iterations {
        let cur_mem = EPSILON_SHRINK * epsilon;
        if !boots_ok(cur_mem) {
            if !boots_ok(epsilon) {
                return Err(EstimatorError::NonMonotone(epsilon));
            }
            return Ok(epsilon);
        }
        epsilon = cur_mem;
    }
    Err(EstimatorError::IterationCap(max_iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::VmId;
    use proptest::prelude::*;

    const MB: f64 = 1024.0 * 1024.0;

    fn params(tau: u64, window: u64) -> EstimatorParams {
        EstimatorParams { tau, mu_ns: 10, omega_ns: 10 * window, ..EstimatorParams::default() }
    }

    #[test]
    fn default_params() {
        let p = EstimatorParams::default();
        assert_eq!((p.tau, p.mu_ns, p.omega_ns), (50, 30 * NS_PER_SEC, 120 * NS_PER_SEC));
        assert_eq!(p.window(), 4);
    }

    #[test]
    fn omega_must_be_multiple_of_mu() {
        let p = EstimatorParams { omega_ns: 25, mu_ns: 10, ..EstimatorParams::default() };
        assert!(matches!(p.validate(), Err(EstimatorError::Params { field: "omega", .. })));
        assert!(estimate_prl(std::iter::empty(), &p).is_err());
        let p = EstimatorParams { tau: 0, ..EstimatorParams::default() };
        assert!(matches!(p.validate(), Err(EstimatorError::Params { field: "tau", .. })));
    }

    #[test]
    fn single_hot_page() {
        let p = EstimatorParams { epsilon_bytes: 1234, ..params(3, 2) };
        let mut snaps = Vec::new();
        let mut log = CumulativeLog::new(VmId(0));
        for _ in 0..6 {
            log.absorb([42, 42]);
            snaps.push(log.clone());
        }
        let est = estimate_prl(&snaps, &p).unwrap();
        assert!(est.converged);
        assert_eq!(est.wss_pages, 1);
        assert_eq!(est.m_bytes, 4096 + 1234);
        // [0, 1, 1, 1]: flat over two observations at index 3.
        assert_eq!(est.observations, vec![0, 1, 1, 1]);
    }

    #[test]
    fn loop_stops_at_first_flat_window() {
        let p = params(1, 2);
        let est = run_loop([0, 3, 5, 5, 6, 6, 6, 9], &p).unwrap();
        assert_eq!(est.observations, vec![0, 3, 5, 5, 6, 6, 6]);
        assert_eq!(est.wss_pages, 6);
    }

    #[test]
    fn unconverged_returns_last() {
        let est = run_loop([1, 2, 3], &params(1, 4)).unwrap();
        assert!(!est.converged);
        assert_eq!(est.wss_pages, 3);
    }

    #[test]
    fn decreasing_dist_rejected() {
        assert!(matches!(run_loop([2, 1], &params(1, 4)), Err(EstimatorError::NotMonotone { index: 1, .. })));
    }

    #[test]
    fn pml_counts_distinct_pages_only() {
        let mut log = CumulativeLog::new(VmId(0));
        log.absorb([1, 2, 3]);
        let est = estimate_pml([&log, &log], &params(50, 1)).unwrap();
        assert_eq!(est.wss_pages, 3);
        assert!(est.converged);
    }

    #[test]
    fn oracle_threshold_boundary() {
        let p = params(5, 1);
        let acc = |gppn| MemAccess { t: 0, vcpu: 0, gppn, op: crate::trace::Op::Read };
        assert_eq!(estimate_oracle(std::iter::empty(), &p).wss_pages, 0);
        assert_eq!(estimate_oracle((0..5).map(|_| acc(3)), &p).wss_pages, 1);
        assert_eq!(estimate_oracle((0..4).map(|_| acc(3)), &p).wss_pages, 0);
    }

    #[test]
    fn vmware_full_and_empty_coverage() {
        let p = EstimatorParams::default();
        let mut s = VmwareSampler::new(500, 100, 1000, 1).unwrap();
        for t in 0..500 {
            s.on_access(&MemAccess { t, vcpu: 0, gppn: t, op: crate::trace::Op::Read });
        }
        s.advance(1000);
        assert_eq!(s.estimate_at(1000, &p).wss_pages, 500);

        let mut idle = VmwareSampler::new(500, 100, 1000, 1).unwrap();
        idle.advance(5000);
        let est = idle.estimate_at(5000, &p);
        assert_eq!(est.wss_pages, 0);
        assert_eq!(est.observations.len(), 5);
    }

    #[test]
    fn vmware_sample_larger_than_memory() {
        assert!(matches!(
            VmwareSampler::new(99, 100, 10, 0),
            Err(EstimatorError::SampleTooLarge { sample_size: 100, allocated: 99 })
        ));
    }

    #[test]
    fn vmware_partial_period_when_nothing_completed() {
        let p = EstimatorParams::default();
        let mut s = VmwareSampler::new(100, 100, 1000, 3).unwrap();
        for g in 0..50 {
            s.on_access(&MemAccess { t: g, vcpu: 0, gppn: g, op: crate::trace::Op::Write });
        }
        let est = s.estimate_at(50, &p);
        assert!(!est.converged);
        assert_eq!(est.wss_pages, 50);
    }

    #[test]
    fn epsilon_threshold_at_start() {
        let start = 2048.0 * MB;
        assert_eq!(estimate_epsilon(|m| m >= start, start, EPSILON_MAX_ITERATIONS).unwrap(), start);
    }

    #[test]
    fn epsilon_iteration_cap() {
        assert_eq!(estimate_epsilon(|_| true, 2048.0 * MB, 1), Err(EstimatorError::IterationCap(1)));
        assert_eq!(
            estimate_epsilon(|_| true, EPSILON_START_BYTES, EPSILON_MAX_ITERATIONS),
            Err(EstimatorError::IterationCap(500))
        );
    }

    #[test]
    fn epsilon_300mb_floor() {
        // Independent recurrence: shrink while the next value stays >= 300.
        let mut expected = 2048.0_f64;
        let mut steps = 0;
        while expected * 0.95 >= 300.0 {
            expected *= 0.95;
            steps += 1;
        }
        assert_eq!(steps, 37);
        let got = estimate_epsilon(|m| m >= 300.0 * MB, 2048.0 * MB, EPSILON_MAX_ITERATIONS).unwrap() / MB;
        assert!((got - expected).abs() < 0.01, "{got} vs {expected}");
        assert!((got - 2048.0 * 0.95_f64.powi(37)).abs() < 0.01);
    }

    #[test]
    fn epsilon_start_must_boot() {
        assert!(matches!(estimate_epsilon(|_| false, 10.0, 5), Err(EstimatorError::StartDoesNotBoot(_))));
    }

    #[test]
    fn epsilon_flaky_predicate() {
        let mut calls = 0;
        let flaky = |m: f64| {
            calls += 1;
            // Boots on the first two probes only.
            m > 0.0 && calls <= 2
        };
        assert!(matches!(estimate_epsilon(flaky, 100.0, 50), Err(EstimatorError::NonMonotone(_))));
    }

    proptest! {
        #[test]
        fn epsilon_brackets_threshold(threshold in 1.0f64..2000.0) {
            let start = 2048.0;
            let r = estimate_epsilon(|m| m >= threshold, start, EPSILON_MAX_ITERATIONS).unwrap();
            prop_assert!(r >= threshold);
            prop_assert!(EPSILON_SHRINK * r < threshold);
        }

        #[test]
        fn m_bytes_consistent(wss in 0u64..1_000_000, eps in 0u64..1 << 30) {
            let p = EstimatorParams { epsilon_bytes: eps, ..EstimatorParams::default() };
            let e = p.estimate(wss, vec![], true);
            prop_assert_eq!((e.m_bytes - eps) % p.page_size, 0);
            prop_assert_eq!((e.m_bytes - eps) / p.page_size, wss);
        }

        #[test]
        fn loop_converges_at_first_flat_index(
            steps in prop::collection::vec(0u64..3, 1..60),
            window in 1u64..6,
        ) {
            let dists: Vec<u64> = steps.iter().scan(0, |acc, s| { *acc += s; Some(*acc) }).collect();
            let w = window as usize;
            let first = (w..dists.len()).find(|&i| dists[i] == dists[i - w]);
            let est = run_loop(dists.clone(), &params(1, window)).unwrap();
            match first {
                Some(i) => {
                    prop_assert!(est.converged);
                    prop_assert_eq!(est.observations.len(), i + 1);
                    prop_assert_eq!(est.wss_pages, dists[i]);
                }
                None => {
                    prop_assert!(!est.converged);
                    prop_assert_eq!(est.observations, dists);
                }
            }
        }
    }
}
