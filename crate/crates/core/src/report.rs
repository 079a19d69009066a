// SPDX-License-Identifier: Apache-2.0

//! Plot-ready CSV and text renderings of simulation results.

use std::fmt::Write as _;

use crate::estimator::WssEstimate;
use crate::sim::{Comparison, EstimatorKind, LoopRun, SimReport};

pub const COMPARISON_HEADER: &str = "estimator,wss_pages,error_pages,full_events,missed_gpas,overhead_percent";

/// A run report as `key,value` rows.
pub fn report_csv(r: &SimReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("mode".into(), r.mode.name().into()),
        ("accesses".into(), r.accesses.to_string()),
        ("vcpus".into(), r.vcpus.to_string()),
        ("span_ns".into(), r.span_ns.to_string()),
        ("vm_pages".into(), r.vm_pages.to_string()),
        ("ground_truth_wss_pages".into(), r.ground_truth_wss_pages.to_string()),
        ("tlb_hits".into(), r.tlb.hits.to_string()),
        ("tlb_misses".into(), r.tlb.misses.to_string()),
        ("dirty_sets".into(), r.tlb.dirty_sets.to_string()),
        ("walks".into(), r.tracker.walks.to_string()),
        ("logged".into(), r.tracker.logged.to_string()),
        ("full_events".into(), r.tracker.full_events.to_string()),
        ("missed_gpas".into(), r.tracker.missed_gpas.to_string()),
        ("vm_stall_ns".into(), r.tracker.vm_stall_ns.to_string()),
        ("handler_invocations".into(), r.handler.invocations.to_string()),
        ("handler_busy_ns".into(), r.handler.busy_ns.to_string()),
        ("log_total".into(), r.log_total.to_string()),
        ("log_distinct_pages".into(), r.log_distinct_pages.to_string()),
        ("vm_effective_runtime_ns".into(), r.vm_effective_runtime_ns.to_string()),
        ("overhead_percent".into(), r.overhead_percent.to_string()),
        ("pvm_utilization".into(), r.pvm_utilization.to_string()),
    ];
    for kind in EstimatorKind::ALL {
        let Some(est) = r.estimate(kind) else { continue };
        let prefix = kind.name().to_ascii_lowercase();
        rows.push((format!("{prefix}.wss_pages"), est.wss_pages.to_string()));
        rows.push((format!("{prefix}.m_bytes"), est.m_bytes.to_string()));
        rows.push((format!("{prefix}.converged"), est.converged.to_string()));
        rows.push((format!("{prefix}.observations"), est.observations.len().to_string()));
    }
    if let Some(run) = r.loop_run() {
        let at = run.converged_at_ns.map(|t| t.to_string()).unwrap_or_default();
        rows.push(("converged_at_ns".into(), at));
    }
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

fn describe(est: &WssEstimate) -> String {
    format!(
        "{} pages ({:.1} MiB), M = {} bytes{}",
        est.wss_pages,
        est.wss_pages as f64 * 4096.0 / (1024.0 * 1024.0),
        est.m_bytes,
        if est.converged { "" } else { ", not converged" }
    )
}

pub fn summary(r: &SimReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode {}: {} accesses over {} ns, {} vCPU(s)", r.mode.name(), r.accesses, r.span_ns, r.vcpus);
    let _ = writeln!(out, "  TLB: {} hits, {} misses ({} dirty-bit sets)", r.tlb.hits, r.tlb.misses, r.tlb.dirty_sets);
    let _ = writeln!(
        out,
        "  logging: {} logged, {} full events, {} missed GPAs",
        r.tracker.logged, r.tracker.full_events, r.tracker.missed_gpas
    );
    let _ = writeln!(
        out,
        "  VM stall {} ns, overhead {:.4}%, pVM utilization {:.4}%",
        r.tracker.vm_stall_ns,
        r.overhead_percent,
        r.pvm_utilization * 100.0
    );
    let _ = writeln!(out, "  ground truth WSS: {} pages", r.ground_truth_wss_pages);
    for kind in EstimatorKind::ALL {
        if let Some(est) = r.estimate(kind) {
            let _ = writeln!(out, "  {:<7} {}", kind.name(), describe(est));
        }
    }
    out
}

/// Comparison rows. With more than one scenario a leading `scenario`
/// column tells them apart.
pub fn comparison_csv(results: &[(String, Comparison)]) -> String {
    let multi = results.len() > 1;
    let mut out = String::new();
    if multi {
        out.push_str("scenario,");
    }
    out.push_str(COMPARISON_HEADER);
    out.push('\n');
    for (name, cmp) in results {
        for row in &cmp.rows {
            if multi {
                let _ = write!(out, "{name},");
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.estimator.name(),
                row.wss_pages,
                row.error_pages,
                row.full_events,
                row.missed_gpas,
                row.overhead_percent
            );
        }
    }
    out
}

/// The `dist[i]` series. `delta_window` is `dist[i] - dist[i - omega/mu]`
/// (empty before a full window); `converged` marks the row that ended the
/// loop and `final_drain` the off-grid sample taken at trace end.
pub fn dist_csv(run: &LoopRun, window: usize) -> String {
    let mut out = String::from("i,t_ns,dist,delta_window,converged,final_drain\n");
    for p in &run.series {
        let delta = if p.i >= window && !p.final_drain {
            (p.dist - run.series[p.i - window].dist).to_string()
        } else {
            String::new()
        };
        let converged = run.converged_index == Some(p.i);
        let _ = writeln!(out, "{},{},{},{},{},{}", p.i, p.t_ns, p.dist, delta, converged as u8, p.final_drain as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run, Scenario};
    use crate::trace::{Pattern, WorkloadSpec};

    fn small_report() -> SimReport {
        let spec = WorkloadSpec { pattern: Pattern::Rwrw, n_pages: 300, hot_pages: 300, d_iters: 20, ..WorkloadSpec::default() };
        let mut s = Scenario::synthetic(spec);
        s.estimator.tau = 3;
        s.estimator.mu_ns = 50_000;
        s.estimator.omega_ns = 200_000;
        run(&s).unwrap()
    }

    #[test]
    fn report_has_key_value_rows() {
        let csv = report_csv(&small_report());
        assert!(csv.starts_with("key,value\nmode,paml\n"));
        assert!(csv.contains("\noverhead_percent,0\n"));
        assert!(csv.contains("\nprl.wss_pages,300\n"));
        assert!(csv.lines().all(|l| l.split(',').count() == 2));
    }

    #[test]
    fn dist_rows_mark_convergence_once() {
        let r = small_report();
        let run = r.prl.as_ref().unwrap();
        let csv = dist_csv(run, 4);
        let flagged: Vec<&str> = csv.lines().skip(1).filter(|l| l.split(',').nth(4) == Some("1")).collect();
        assert_eq!(flagged.len(), 1);
        let cols: Vec<&str> = flagged[0].split(',').collect();
        assert_eq!(cols[3], "0");
    }

    #[test]
    fn summary_lists_estimators() {
        let text = summary(&small_report());
        assert!(text.contains("PRL"));
        assert!(text.contains("Oracle"));
    }
}
