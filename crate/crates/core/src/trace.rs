// SPDX-License-Identifier: Apache-2.0

//! Synthetic workload generation and the trace CSV format.
//!
//! A trace line is `t,vcpu,gppn,R|W`, one access per line, LF terminated.
//! An optional first line `#wss=<pages>` carries the ground-truth working
//! set size of the generator that produced it.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Size of a guest page in bytes.
pub const PAGE_SIZE: u64 = 4096;

/// Default virtual spacing between two consecutive generated accesses.
pub const DEFAULT_INTER_ACCESS_GAP_NS: u64 = 100;

/// Errors raised while building or parsing traces.
#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("invalid workload spec: {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

impl Op {
    pub fn code(self) -> char {
        match self {
            Op::Read => 'R',
            Op::Write => 'W',
        }
    }
}

/// One guest memory reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemAccess {
    /// Virtual time in nanoseconds.
    pub t: u64,
    pub vcpu: u32,
    /// Guest physical page number (address >> 12).
    pub gppn: u64,
    pub op: Op,
}

impl fmt::Display for MemAccess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.t, self.vcpu, self.gppn, self.op.code())
    }
}

/// Access pattern applied to every array entry in the main loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    /// Each entry is written with probability `wi`% and read otherwise.
    WriteIntensity,
    /// Every read is followed by a write to the same entry.
    Rwrw,
    /// A full read pass, then a full write pass, per iteration.
    Rrww,
    /// A full write pass, then a full read pass, per iteration.
    Wwrr,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::WriteIntensity => "wi",
            Pattern::Rwrw => "rwrw",
            Pattern::Rrww => "rrww",
            Pattern::Wwrr => "wwrr",
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wi" | "write-intensity" | "writeintensity" => Ok(Pattern::WriteIntensity),
            "rwrw" => Ok(Pattern::Rwrw),
            "rrww" => Ok(Pattern::Rrww),
            "wwrr" => Ok(Pattern::Wwrr),
            other => Err(format!("unknown pattern `{other}` (expected wi, rwrw, rrww or wwrr)")),
        }
    }
}

/// Parameters of the synthetic array-walking application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Total array pages; also the VM memory size in pages.
    pub n_pages: u64,
    /// Number of passes of the main loop.
    pub d_iters: u64,
    /// Write intensity in percent, used by [`Pattern::WriteIntensity`].
    pub wi: u32,
    /// Pages touched by the main loop (the first `hot_pages` of the array).
    pub hot_pages: u64,
    pub pattern: Pattern,
    /// Emit one write pass over all `n_pages` before the main loop.
    pub cold_prefix: bool,
    pub seed: u64,
    pub inter_access_gap: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            n_pages: 1024,
            d_iters: 1,
            wi: 50,
            hot_pages: 1024,
            pattern: Pattern::WriteIntensity,
            cold_prefix: false,
            seed: 0,
            inter_access_gap: DEFAULT_INTER_ACCESS_GAP_NS,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let invalid = |field, reason: String| Err(TraceError::InvalidSpec { field, reason });
        if self.wi > 100 {
            return invalid("wi", format!("{} is outside 0..=100", self.wi));
        }
        if self.hot_pages < 1 {
            return invalid("hot_pages", "must be at least 1".into());
        }
        if self.n_pages < self.hot_pages {
            return invalid(
                "n_pages",
                format!("{} is smaller than hot_pages {}", self.n_pages, self.hot_pages),
            );
        }
        if self.d_iters < 1 {
            return invalid("d_iters", "must be at least 1".into());
        }
        Ok(())
    }

    /// Accesses per main-loop iteration.
    pub fn accesses_per_iteration(&self) -> u64 {
        match self.pattern {
            Pattern::WriteIntensity => self.hot_pages,
            _ => 2 * self.hot_pages,
        }
    }

    /// Total number of accesses the generator emits.
    pub fn total_accesses(&self) -> u64 {
        let prefix = if self.cold_prefix { self.n_pages } else { 0 };
        prefix + self.d_iters * self.accesses_per_iteration()
    }

    /// Lazily generated accesses; [`generate`] collects them.
    pub fn accesses(&self) -> Result<Accesses, TraceError> {
        self.validate()?;
        Ok(Accesses {
            spec: self.clone(),
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            in_prefix: self.cold_prefix,
            iteration: 0,
            step: 0,
            emitted: 0,
        })
    }
}

/// Streaming generator over a [`WorkloadSpec`].
#[derive(Debug, Clone)]
pub struct Accesses {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    in_prefix: bool,
    iteration: u64,
    step: u64,
    emitted: u64,
}

impl Accesses {
    fn next_main(&mut self) -> Option<(u64, Op)> {
        if self.iteration >= self.spec.d_iters {
            return None;
        }
        let hot = self.spec.hot_pages;
        let s = self.step;
        let item = match self.spec.pattern {
            Pattern::WriteIntensity => {
                // Uniform over 0..100, compared against the write intensity.
                let draw: u32 = self.rng.random_range(0..100);
                (s, if draw < self.spec.wi { Op::Write } else { Op::Read })
            }
            Pattern::Rwrw => (s / 2, if s.is_multiple_of(2) { Op::Read } else { Op::Write }),
            Pattern::Rrww => (s % hot, if s < hot { Op::Read } else { Op::Write }),
            Pattern::Wwrr => (s % hot, if s < hot { Op::Write } else { Op::Read }),
        };
        self.step += 1;
        if self.step == self.spec.accesses_per_iteration() {
            self.step = 0;
            self.iteration += 1;
        }
        Some(item)
    }
}

impl Iterator for Accesses {
    type Item = MemAccess;

    fn next(&mut self) -> Option<MemAccess> {
        let (gppn, op) = if self.in_prefix {
            let page = self.step;
            self.step += 1;
            if self.step == self.spec.n_pages {
                self.step = 0;
                self.in_prefix = false;
            }
            (page, Op::Write)
        } else {
            self.next_main()?
        };
        let t = self.emitted * self.spec.inter_access_gap;
        self.emitted += 1;
        Some(MemAccess { t, vcpu: 0, gppn, op })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.spec.total_accesses() - self.emitted) as usize;
        (left, Some(left))
    }
}

/// An ordered access sequence with its known working set size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub accesses: Vec<MemAccess>,
    pub ground_truth_wss_pages: u64,
}

impl Trace {
    pub fn distinct_pages(&self) -> u64 {
        self.accesses.iter().map(|a| a.gppn).collect::<HashSet<_>>().len() as u64
    }

    /// Virtual time between the first and last access.
    pub fn span_ns(&self) -> u64 {
        match (self.accesses.first(), self.accesses.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }
}

pub fn generate(spec: &WorkloadSpec) -> Result<Trace, TraceError> {
    let accesses: Vec<MemAccess> = spec.accesses()?.collect();
    Ok(Trace { accesses, ground_truth_wss_pages: spec.hot_pages })
}

pub fn write_trace<W: Write>(trace: &Trace, mut sink: W) -> Result<(), TraceError> {
    writeln!(sink, "#wss={}", trace.ground_truth_wss_pages)?;
    for a in &trace.accesses {
        writeln!(sink, "{a}")?;
    }
    sink.flush()?;
    Ok(())
}

/// Parses a trace. Without a `#wss=` header the ground truth falls back to
/// the number of distinct pages referenced.
pub fn read_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    let mut accesses = Vec::new();
    let mut wss = None;
    let mut last_t = 0;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.strip_prefix("wss=") {
                let pages = v.trim().parse::<u64>().map_err(|e| TraceError::Parse {
                    line: line_no,
                    reason: format!("bad #wss value `{v}`: {e}"),
                })?;
                wss = Some(pages);
            }
            continue;
        }
        let access = parse_line(line).map_err(|reason| TraceError::Parse { line: line_no, reason })?;
        if access.t < last_t {
            return Err(TraceError::Parse {
                line: line_no,
                reason: format!("time {} goes backwards (previous {last_t})", access.t),
            });
        }
        last_t = access.t;
        accesses.push(access);
    }
    let mut trace = Trace { accesses, ground_truth_wss_pages: 0 };
    trace.ground_truth_wss_pages = match wss {
        Some(w) => w,
        None => trace.distinct_pages(),
    };
    Ok(trace)
}

fn parse_line(line: &str) -> Result<MemAccess, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let num = |name: &str, s: &str| -> Result<u64, String> {
        s.trim().parse::<u64>().map_err(|e| format!("bad {name} `{s}`: {e}"))
    };
    let t = num("time", fields[0])?;
    let vcpu = u32::try_from(num("vcpu", fields[1])?).map_err(|e| format!("bad vcpu: {e}"))?;
    let gppn = num("gppn", fields[2])?;
    let op = match fields[3].trim() {
        "R" => Op::Read,
        "W" => Op::Write,
        other => return Err(format!("invalid op code `{other}` (expected R or W)")),
    };
    Ok(MemAccess { t, vcpu, gppn, op })
}
