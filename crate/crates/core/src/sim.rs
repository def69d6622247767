//! Two-stream execution of a [`Schedule`].
//!
//! The compute stream runs its nodes serially in program order; a wait holds
//! it until the referenced collective finishes. The communication stream is
//! a FIFO of collectives in program order; a collective starts once the
//! previous collective is done, its dependencies are done, and every
//! compute-stream node issued before it has finished. Time blocked inside
//! waits is the exposed communication.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde_json::json;

use crate::cost::{memory_events, CostModel, When};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Stream};
use crate::model::{sharded_param_bytes, ModelSpec};
use crate::passes::Schedule;
use crate::units::Nanos;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimEvent {
    pub node: NodeId,
    pub label: String,
    pub stream: Stream,
    pub start: Nanos,
    pub end: Nanos,
}

impl SimEvent {
    pub fn duration(&self) -> Nanos {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimReport {
    pub label: String,
    pub total_time: Nanos,
    pub exposed_comm: Nanos,
    pub comm_busy: Nanos,
    pub compute_busy: Nanos,
    pub peak_memory: u64,
    pub final_memory: u64,
    /// One entry per node, in program order. Wait entries span the time the
    /// compute stream was blocked.
    pub events: Vec<SimEvent>,
    /// Memory after each allocation or free, starting from the resident
    /// sharded parameters at time zero.
    pub memory_curve: Vec<(Nanos, u64)>,
}

pub fn simulate(schedule: &Schedule, graph: &Graph, model: &CostModel, spec: &ModelSpec) -> Result<SimReport> {
    schedule.check_covers(graph)?;
    let adj = graph.adjacency();
    let mut end_of: BTreeMap<NodeId, Nanos> = BTreeMap::new();
    let mut events = Vec::with_capacity(schedule.len());
    let (mut compute_free, mut comm_free) = (Nanos::ZERO, Nanos::ZERO);
    let (mut compute_busy, mut comm_busy, mut exposed) = (Nanos::ZERO, Nanos::ZERO, Nanos::ZERO);

    for &id in schedule.order() {
        let node = graph.node(id);
        let mut ready = Nanos::ZERO;
        let mut blocked_on = Vec::new();
        for &dep in adj.preds(id) {
            match end_of.get(&dep) {
                Some(&t) => ready = ready.max(t),
                None => blocked_on.push(dep),
            }
        }
        if !blocked_on.is_empty() {
            return Err(Error::Deadlock { node: id, blocked_on });
        }
        let dur = model.node_duration(node)?;
        let (start, end) = match node.stream {
            Stream::Compute if node.kind.is_wait() => {
                let end = compute_free.max(ready);
                exposed += end - compute_free;
                (compute_free, end)
            }
            Stream::Compute => {
                let start = compute_free.max(ready);
                exposed += start - compute_free;
                compute_busy += dur;
                (start, start + dur)
            }
            Stream::Communication => {
                let start = comm_free.max(ready).max(compute_free);
                comm_busy += dur;
                comm_free = start + dur;
                (start, start + dur)
            }
        };
        if node.stream == Stream::Compute {
            compute_free = end;
        }
        end_of.insert(id, end);
        events.push(SimEvent { node: id, label: node.label(), stream: node.stream, start, end });
    }

    let total_time = compute_free.max(comm_free);
    let (memory_curve, peak_memory, final_memory) = memory_timeline(&events, graph, spec);
    Ok(SimReport {
        label: String::new(),
        total_time,
        exposed_comm: exposed,
        comm_busy,
        compute_busy,
        peak_memory,
        final_memory,
        events,
        memory_curve,
    })
}

/// Applies every node's memory events at its start or end instant. At equal
/// instants frees-at-end come before allocations-at-start; ties beyond that
/// follow program order.
pub(crate) fn memory_timeline(events: &[SimEvent], graph: &Graph, spec: &ModelSpec) -> (Vec<(Nanos, u64)>, u64, u64) {
    let mut deltas: Vec<(Nanos, u8, usize, i64)> = Vec::new();
    for (pos, ev) in events.iter().enumerate() {
        for (i, m) in memory_events(graph, ev.node, spec).into_iter().enumerate() {
            let (t, rank) = match m.when {
                When::AtEnd => (ev.end, 0),
                When::AtStart => (ev.start, 1),
            };
            deltas.push((t, rank, pos * 16 + i, m.delta));
        }
    }
    deltas.sort();
    let mut current = sharded_param_bytes(spec) as i64;
    let mut peak = current;
    let mut curve = Vec::with_capacity(deltas.len() + 1);
    curve.push((Nanos::ZERO, current as u64));
    for (t, _, _, d) in deltas {
        current += d;
        peak = peak.max(current);
        curve.push((t, current.max(0) as u64));
    }
    (curve, peak.max(0) as u64, current.max(0) as u64)
}

impl SimReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn event(&self, node: NodeId) -> Option<&SimEvent> {
        self.events.iter().find(|e| e.node == node)
    }

    /// Chrome trace-event document: one complete (`"X"`) event per node,
    /// microsecond timestamps, compute on tid 0 and communication on tid 1.
    pub fn chrome_trace(&self) -> String {
        let events: Vec<serde_json::Value> = self
            .events
            .iter()
            .map(|e| {
                json!({
                    "name": e.label,
                    "ph": "X",
                    "ts": e.start.as_micros_f64(),
                    "dur": e.duration().as_micros_f64(),
                    "pid": 0,
                    "tid": e.stream.tid(),
                })
            })
            .collect();
        let doc = json!({ "traceEvents": events, "displayTimeUnit": "ns" });
        let mut s = serde_json::to_string_pretty(&doc).expect("trace serializes");
        s.push('\n');
        s
    }

    /// Line-oriented report; see `docs/formats.md`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "fsdpsim-report v1").unwrap();
        writeln!(s, "label {}", self.label).unwrap();
        writeln!(s, "total_time_ns {}", self.total_time.0).unwrap();
        writeln!(s, "exposed_comm_ns {}", self.exposed_comm.0).unwrap();
        writeln!(s, "comm_busy_ns {}", self.comm_busy.0).unwrap();
        writeln!(s, "compute_busy_ns {}", self.compute_busy.0).unwrap();
        writeln!(s, "peak_memory_bytes {}", self.peak_memory).unwrap();
        writeln!(s, "final_memory_bytes {}", self.final_memory).unwrap();
        writeln!(s, "events {}", self.events.len()).unwrap();
        for e in &self.events {
            let stream = match e.stream {
                Stream::Compute => "compute",
                Stream::Communication => "comm",
            };
            writeln!(s, "event {} {stream} {} {} {}", e.node.0, e.start.0, e.end.0, e.label).unwrap();
        }
        writeln!(s, "memory {}", self.memory_curve.len()).unwrap();
        for (t, b) in &self.memory_curve {
            writeln!(s, "mem {} {b}", t.0).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = SimReport {
            label: String::new(),
            total_time: Nanos::ZERO,
            exposed_comm: Nanos::ZERO,
            comm_busy: Nanos::ZERO,
            compute_busy: Nanos::ZERO,
            peak_memory: 0,
            final_memory: 0,
            events: Vec::new(),
            memory_curve: Vec::new(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "fsdpsim-report v1")) => {}
            _ => return Err(Error::Report { line: 1, message: "missing report header".into() }),
        }
        for (i, line) in lines {
            let bad = |message: &str| Error::Report { line: i + 1, message: message.into() };
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = || rest.trim().parse::<u64>().map_err(|_| bad("expected an integer"));
            match key {
                "label" => report.label = rest.to_string(),
                "total_time_ns" => report.total_time = Nanos(num()?),
                "exposed_comm_ns" => report.exposed_comm = Nanos(num()?),
                "comm_busy_ns" => report.comm_busy = Nanos(num()?),
                "compute_busy_ns" => report.compute_busy = Nanos(num()?),
                "peak_memory_bytes" => report.peak_memory = num()?,
                "final_memory_bytes" => report.final_memory = num()?,
                "events" | "memory" | "" => {}
                "event" => {
                    let f: Vec<&str> = rest.splitn(5, ' ').collect();
                    if f.len() != 5 {
                        return Err(bad("event needs id, stream, start, end, label"));
                    }
                    let n = |s: &str| s.parse::<u64>().map_err(|_| bad("expected an integer"));
                    let stream = match f[1] {
                        "compute" => Stream::Compute,
                        "comm" => Stream::Communication,
                        _ => return Err(bad("stream must be compute or comm")),
                    };
                    report.events.push(SimEvent {
                        node: NodeId(n(f[0])? as u32),
                        stream,
                        start: Nanos(n(f[2])?),
                        end: Nanos(n(f[3])?),
                        label: f[4].to_string(),
                    });
                }
                "mem" => {
                    let (t, b) = rest.split_once(' ').ok_or_else(|| bad("mem needs time and bytes"))?;
                    let t = t.parse().map_err(|_| bad("expected an integer"))?;
                    let b = b.parse().map_err(|_| bad("expected an integer"))?;
                    report.memory_curve.push((Nanos(t), b));
                }
                _ => return Err(bad(&format!("unknown record `{key}`"))),
            }
        }
        Ok(report)
    }
}

/// One row of a [`Comparison`]; deltas are against the first report.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub total_time: Nanos,
    pub exposed_comm: Nanos,
    pub peak_memory: u64,
    pub total_delta: f64,
    pub exposed_delta: f64,
    pub peak_delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

fn relative(value: u64, base: u64) -> f64 {
    if base == 0 {
        if value == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (value as f64 - base as f64) / base as f64
    }
}

pub fn compare(reports: &[SimReport]) -> Result<Comparison> {
    let Some(base) = reports.first() else {
        return Err(Error::invalid("reports", "nothing to compare"));
    };
    if reports.len() < 2 {
        return Err(Error::invalid("reports", "need at least two reports to compare"));
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            total_time: r.total_time,
            exposed_comm: r.exposed_comm,
            peak_memory: r.peak_memory,
            total_delta: relative(r.total_time.0, base.total_time.0),
            exposed_delta: relative(r.exposed_comm.0, base.exposed_comm.0),
            peak_delta: relative(r.peak_memory, base.peak_memory),
        })
        .collect();
    Ok(Comparison { rows })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>9}  {:>14}  {:>9}  {:>16}  {:>9}",
            "scenario", "total_us", "d_total", "exposed_us", "d_exposed", "peak_bytes", "d_peak"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>14.3}  {:>+8.2}%  {:>14.3}  {:>+8.2}%  {:>16}  {:>+8.2}%",
                r.label,
                r.total_time.as_micros_f64(),
                r.total_delta * 100.0,
                r.exposed_comm.as_micros_f64(),
                r.exposed_delta * 100.0,
                r.peak_memory,
                r.peak_delta * 100.0,
            )?;
        }
        Ok(())
    }
}
