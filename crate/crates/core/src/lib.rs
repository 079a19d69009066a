// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulation of hardware page-tracking for VMs.
//!
//! The pipeline replays a guest memory trace through a set-associative TLB;
//! EPT walks feed either Intel PML style dirty logging or page access and
//! modification logging (PAML), whose full buffers are drained by a pVM
//! handler into per-VM counts. Working-set estimators then run over those
//! counts in virtual time.

pub mod cli;
pub mod estimator;
pub mod handler;
pub mod mmu;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod tracker;

pub use estimator::{estimate_epsilon, EstimatorParams, WssEstimate, WssLoop};
pub use handler::{CumulativeLog, Handler};
pub use mmu::{Mmu, TlbConfig};
pub use sim::{run, run_paired, Comparison, EstimatorKind, Scenario, SimError, SimReport, Workload};
pub use trace::{generate, read_trace, write_trace, MemAccess, Op, Pattern, Trace, WorkloadSpec, PAGE_SIZE};
pub use tracker::{Tracker, TrackingConfig, TrackingMode};
