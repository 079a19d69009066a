// SPDX-License-Identifier: Apache-2.0

//! Scenario files: one `key = value` per line, `#` starts a comment.
//!
//! Durations take a unit suffix (`ns`, `us`, `ms`, `s`); a bare number is
//! nanoseconds. A relative `trace` path is resolved against the scenario
//! file's directory. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::sim::{EstimatorKind, Scenario, Workload};
use crate::trace::WorkloadSpec;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_owned(), source })?;
    parse(&text, path.parent())
}

/// Parses a duration such as `30s`, `2.5ms`, `100ns` or `100`.
pub fn parse_duration_ns(value: &str) -> Result<u64, String> {
    let v = value.trim();
    let split = v.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(v.len());
    let (number, unit) = v.split_at(split);
    let scale = match unit {
        "" | "ns" => 1.0,
        "us" => 1e3,
        "ms" => 1e6,
        "s" => 1e9,
        other => return Err(format!("unknown time unit `{other}`")),
    };
    let n: f64 = number.trim().parse().map_err(|_| format!("bad duration `{value}`"))?;
    if !n.is_finite() || n < 0.0 {
        return Err(format!("bad duration `{value}`"));
    }
    let ns = (n * scale).round();
    if ns > u64::MAX as f64 {
        return Err(format!("duration `{value}` too large"));
    }
    Ok(ns as u64)
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("expected a boolean, found `{other}`")),
    }
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad number `{value}`: {e}"))
}

pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    let mut spec = WorkloadSpec::default();
    let mut hot_pages: Option<u64> = None;
    let mut trace: Option<PathBuf> = None;
    let mut scenario = Scenario::new(Workload::Synthetic(WorkloadSpec::default()));
    let mut seed_set = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |reason: String| ScenarioError::Parse { line, reason };
        let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected key = value, found `{content}`")))?;
        let key = key.trim();
        let value = value.trim();
        let applied: Result<(), String> = (|| {
            match key {
                "pattern" => spec.pattern = value.parse()?,
                "pages" | "n_pages" => spec.n_pages = num(value)?,
                "iters" | "d_iters" => spec.d_iters = num(value)?,
                "wi" => spec.wi = num(value)?,
                "hot_pages" => hot_pages = Some(num(value)?),
                "cold_prefix" => spec.cold_prefix = parse_bool(value)?,
                "seed" => {
                    spec.seed = num(value)?;
                    seed_set = true;
                }
                "gap" | "inter_access_gap" => spec.inter_access_gap = parse_duration_ns(value)?,
                "trace" => trace = Some(PathBuf::from(value)),
                "vm_pages" => scenario.vm_pages = Some(num(value)?),
                "mode" => scenario.tracking.mode = value.parse()?,
                "buffer_entries" => scenario.tracking.buffer_entries = num(value)?,
                "vmexit_cost" => scenario.tracking.vmexit_cost_ns = parse_duration_ns(value)?,
                "handler_latency" => scenario.tracking.handler_latency_per_entry_ns = parse_duration_ns(value)?,
                "tlb_entries" => scenario.tlb.entries = num(value)?,
                "tlb_ways" => scenario.tlb.ways = num(value)?,
                "tau" => scenario.estimator.tau = num(value)?,
                "mu" => scenario.estimator.mu_ns = parse_duration_ns(value)?,
                "omega" => scenario.estimator.omega_ns = parse_duration_ns(value)?,
                "page_size" => scenario.estimator.page_size = num(value)?,
                "epsilon" => scenario.estimator.epsilon_bytes = num(value)?,
                "estimators" => {
                    scenario.estimators = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(str::parse)
                        .collect::<Result<BTreeSet<EstimatorKind>, _>>()?;
                }
                "vmware_sample" => scenario.vmware_sample_size = num(value)?,
                "vmware_period" => scenario.vmware_period_ns = Some(parse_duration_ns(value)?),
                other => return Err(format!("unknown key `{other}`")),
            }
            Ok(())
        })();
        applied.map_err(err)?;
    }

    spec.hot_pages = hot_pages.unwrap_or(spec.n_pages);
    if seed_set {
        scenario.seed = spec.seed;
    }
    scenario.workload = match trace {
        Some(path) => {
            let path = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path,
            };
            Workload::File(path)
        }
        None => Workload::Synthetic(spec),
    };
    Ok(scenario)
}

/// Writes a scenario back in the file format. In-memory traces cannot be
/// represented and are rendered without a workload.
pub fn render(scenario: &Scenario) -> String {
    let mut out = String::new();
    match &scenario.workload {
        Workload::Synthetic(s) => {
            let _ = writeln!(out, "pattern = {}", s.pattern.name());
            let _ = writeln!(out, "pages = {}", s.n_pages);
            let _ = writeln!(out, "hot_pages = {}", s.hot_pages);
            let _ = writeln!(out, "iters = {}", s.d_iters);
            let _ = writeln!(out, "wi = {}", s.wi);
            let _ = writeln!(out, "cold_prefix = {}", s.cold_prefix);
            let _ = writeln!(out, "gap = {}ns", s.inter_access_gap);
        }
        Workload::File(p) => {
            let _ = writeln!(out, "trace = {}", p.display());
        }
        Workload::Trace(_) => {}
    }
    let _ = writeln!(out, "seed = {}", scenario.seed);
    if let Some(pages) = scenario.vm_pages {
        let _ = writeln!(out, "vm_pages = {pages}");
    }
    let t = &scenario.tracking;
    let _ = writeln!(out, "mode = {}", t.mode.name());
    let _ = writeln!(out, "buffer_entries = {}", t.buffer_entries);
    let _ = writeln!(out, "vmexit_cost = {}ns", t.vmexit_cost_ns);
    let _ = writeln!(out, "handler_latency = {}ns", t.handler_latency_per_entry_ns);
    let _ = writeln!(out, "tlb_entries = {}", scenario.tlb.entries);
    let _ = writeln!(out, "tlb_ways = {}", scenario.tlb.ways);
    let e = &scenario.estimator;
    let _ = writeln!(out, "tau = {}", e.tau);
    let _ = writeln!(out, "mu = {}ns", e.mu_ns);
    let _ = writeln!(out, "omega = {}ns", e.omega_ns);
    let _ = writeln!(out, "page_size = {}", e.page_size);
    let _ = writeln!(out, "epsilon = {}", e.epsilon_bytes);
    if !scenario.estimators.is_empty() {
        let names: Vec<&str> = scenario.estimators.iter().map(|k| k.name()).collect();
        let _ = writeln!(out, "estimators = {}", names.join(","));
    }
    let _ = writeln!(out, "vmware_sample = {}", scenario.vmware_sample_size);
    if let Some(p) = scenario.vmware_period_ns {
        let _ = writeln!(out, "vmware_period = {p}ns");
    }
    out
}
