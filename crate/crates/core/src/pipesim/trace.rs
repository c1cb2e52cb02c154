//! Simulation results: timed events, derived metrics, validity checks,
//! memory accounting and timeline export.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memmodel::mem_model_states;
use crate::model::{Direction, ModelSpec, Stream};

use super::dag::{Dag, MemoryCategory, OpId, OpKind, Residency};

/// Constant-rate stretch of an op's work phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateSegment {
    pub start: f64,
    pub end: f64,
    /// Work units per second.
    pub rate: f64,
    /// Work units processed, as accounted by the engine.
    pub work: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub op: OpId,
    pub label: String,
    pub kind: OpKind,
    pub partition: usize,
    pub stream: Stream,
    pub direction: Direction,
    /// Time the op took its stream, including launch overhead.
    pub start: f64,
    /// Time the launch overhead ended.
    pub work_start: f64,
    pub end: f64,
    pub segments: Vec<RateSegment>,
}

impl TraceEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Timed execution of a [`Dag`]. Events are indexed by op id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTrace {
    dag: Dag,
    events: Vec<TraceEvent>,
    orders: [Vec<OpId>; 3],
}

impl ScheduleTrace {
    pub(crate) fn new(dag: Dag, events: Vec<TraceEvent>, orders: [Vec<OpId>; 3]) -> Self {
        Self { dag, events, orders }
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn event(&self, op: OpId) -> &TraceEvent {
        &self.events[op]
    }

    /// Issue order the trace was produced with.
    pub fn stream_order(&self, stream: Stream) -> &[OpId] {
        &self.orders[stream.index()]
    }

    /// Events of `stream` in issue order.
    pub fn stream_events(&self, stream: Stream) -> impl Iterator<Item = &TraceEvent> {
        self.orders[stream.index()].iter().map(|&id| &self.events[id])
    }

    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    /// Time `stream` is occupied, launch overhead included.
    pub fn busy_time(&self, stream: Stream) -> f64 {
        self.stream_events(stream).map(TraceEvent::duration).sum()
    }

    /// Replays the trace and reports every broken invariant: stream overlap
    /// or reordering, early starts, buffer slot conflicts, pool over-capacity
    /// and work not matching the integrated rate.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.check_streams(&mut problems);
        self.check_dependencies(&mut problems);
        self.check_buffers(&mut problems);
        self.check_work(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            let total = problems.len();
            problems.truncate(5);
            Err(Error::InvalidTrace(format!("{total} violations: {}", problems.join("; "))))
        }
    }

    fn tol(&self) -> f64 {
        1e-12 * self.makespan().max(1e-300)
    }

    fn check_streams(&self, problems: &mut Vec<String>) {
        let mut seen = vec![false; self.events.len()];
        for stream in Stream::ALL {
            let mut prev: Option<&TraceEvent> = None;
            for e in self.stream_events(stream) {
                seen[e.op] = true;
                if e.stream != stream {
                    problems.push(format!("{} issued on {stream} but belongs to {}", e.label, e.stream));
                }
                if e.start > e.work_start || e.work_start > e.end {
                    problems.push(format!("{} has inverted timestamps", e.label));
                }
                if let Some(p) = prev {
                    if e.start < p.end - self.tol() {
                        problems.push(format!("{} overlaps {} on {stream}", e.label, p.label));
                    }
                }
                prev = Some(e);
            }
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            problems.push(format!("{} missing from issue order", self.events[id].label));
        }
    }

    fn check_dependencies(&self, problems: &mut Vec<String>) {
        for op in self.dag.ops() {
            let e = &self.events[op.id];
            for &d in &op.deps {
                if e.start < self.events[d].end - self.tol() {
                    problems.push(format!("{} starts before {} ends", e.label, self.events[d].label));
                }
            }
        }
    }

    fn check_buffers(&self, problems: &mut Vec<String>) {
        let gens = self.dag.generations();
        let hold = |g: &super::dag::Generation| {
            let from = g.writer.map_or(0.0, |w| self.events[w].start);
            let to = g
                .readers
                .iter()
                .map(|&r| self.events[r].end)
                .chain(g.writer.map(|w| self.events[w].end))
                .fold(from, f64::max);
            (from, to)
        };
        // Consecutive generations of a slot must not overlap.
        let mut last: std::collections::HashMap<(usize, usize), (f64, &str)> = Default::default();
        for g in &gens {
            let (from, to) = hold(g);
            let name = g.writer.map_or("preload", |w| self.events[w].label.as_str());
            if let Some((prev_to, prev)) = last.insert((g.pool, g.slot), (to, name)) {
                if from < prev_to - self.tol() {
                    let pool = &self.dag.pools()[g.pool].name;
                    problems.push(format!("{name} overwrites {pool}[{}] still held by {prev}", g.slot));
                }
            }
        }
        // Live generations per pool never exceed its capacity.
        for pool in self.dag.pools() {
            let mut marks: Vec<(f64, i32)> = Vec::new();
            for g in gens.iter().filter(|g| g.pool == pool.id) {
                let (from, to) = hold(g);
                if to > from {
                    marks.push((from, 1));
                    marks.push((to, -1));
                }
            }
            marks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut live = 0;
            for (t, delta) in marks {
                live += delta;
                if live > pool.capacity() as i32 {
                    problems.push(format!("{} holds {live} slots at t={t}, capacity {}", pool.name, pool.capacity()));
                    break;
                }
            }
        }
    }

    fn check_work(&self, problems: &mut Vec<String>) {
        for op in self.dag.ops() {
            let e = &self.events[op.id];
            let done: f64 = e.segments.iter().map(|s| s.work).sum();
            if (done - op.work).abs() > 1e-9 * op.work {
                problems.push(format!("{} processed {done} of {} work units", e.label, op.work));
            }
            for s in &e.segments {
                // timestamps carry absolute rounding error, so a short segment
                // late in the run can only be checked to a few ulps of `end`
                let slack = 1e-9 * op.work + s.rate * 4.0 * f64::EPSILON * s.end.abs();
                if (s.rate * (s.end - s.start) - s.work).abs() > slack {
                    problems.push(format!(
                        "{} segment [{}, {}] at rate {} does not account for {} work units",
                        e.label, s.start, s.end, s.rate, s.work
                    ));
                }
            }
        }
    }

    /// One JSON object per line: op, kind, partition, stream, start_us, end_us.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            op: &'a str,
            kind: OpKind,
            partition: usize,
            stream: Stream,
            start_us: u64,
            end_us: u64,
        }
        let mut out = String::new();
        for e in self.sorted_events() {
            let line = Line {
                op: &e.label,
                kind: e.kind,
                partition: e.partition,
                stream: e.stream,
                start_us: to_micros(e.start),
                end_us: to_micros(e.end),
            };
            out.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
            out.push('\n');
        }
        out
    }

    /// Trace-event JSON for browser timeline viewers, one thread per stream.
    pub fn to_trace_event_json(&self) -> String {
        #[derive(Serialize)]
        struct Meta {
            name: &'static str,
            ph: &'static str,
            pid: u32,
            tid: usize,
            args: serde_json::Value,
        }
        #[derive(Serialize)]
        struct Complete<'a> {
            name: &'a str,
            cat: OpKind,
            ph: &'static str,
            ts: u64,
            dur: u64,
            pid: u32,
            tid: usize,
        }
        let mut events: Vec<serde_json::Value> = Stream::ALL
            .into_iter()
            .map(|s| {
                let meta = Meta {
                    name: "thread_name",
                    ph: "M",
                    pid: 1,
                    tid: s.index(),
                    args: serde_json::json!({ "name": s.name() }),
                };
                serde_json::to_value(meta).expect("plain struct serializes")
            })
            .collect();
        for e in self.sorted_events() {
            let ts = to_micros(e.start);
            let x = Complete {
                name: &e.label,
                cat: e.kind,
                ph: "X",
                ts,
                dur: to_micros(e.end) - ts,
                pid: 1,
                tid: e.stream.index(),
            };
            events.push(serde_json::to_value(x).expect("plain struct serializes"));
        }
        serde_json::to_string(&serde_json::json!({ "traceEvents": events })).expect("json value serializes")
    }

    fn sorted_events(&self) -> Vec<&TraceEvent> {
        let mut events: Vec<&TraceEvent> = self.events.iter().collect();
        events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.stream.cmp(&b.stream)).then(a.op.cmp(&b.op)));
        events
    }
}

/// Seconds to integer microseconds, rounding halves up.
pub fn to_micros(seconds: f64) -> u64 {
    (seconds * 1e6 + 0.5).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryPoint {
    /// Seconds.
    pub time: f64,
    pub activations: u64,
    pub buffers: u64,
}

/// Device memory measured by replaying a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasuredMemory {
    pub model_states: u64,
    /// Peak of the activation pools on their own.
    pub activations: u64,
    /// Peak of the gradient pools on their own.
    pub buffers: u64,
    /// Peak of model states plus everything live at once.
    pub total: u64,
    /// Elements copied to host memory, excluded from the device figures.
    pub host_offload: u64,
    /// Occupancy after each change.
    pub curve: Vec<MemoryPoint>,
}

/// Replays slot allocations over the trace's timeline. Persistent slots
/// are allocated at their first write (or at time zero when preloaded) and
/// kept; transient slots live from each write to the end of its last read.
/// At equal timestamps frees apply before allocations.
pub fn peak_memory(trace: &ScheduleTrace, spec: &ModelSpec) -> MeasuredMemory {
    let dag = trace.dag();
    let events = trace.events();
    // (time, is_alloc, category, elements)
    let mut changes: Vec<(f64, bool, MemoryCategory, u64)> = Vec::new();
    let mut first_alloc: std::collections::HashMap<(usize, usize), f64> = Default::default();
    for g in dag.generations() {
        let pool = &dag.pools()[g.pool];
        let size = pool.slot_elements[g.slot];
        let from = g.writer.map_or(0.0, |w| events[w].start);
        match pool.residency {
            Residency::Persistent => {
                let t = first_alloc.entry((g.pool, g.slot)).or_insert(from);
                *t = t.min(from);
            }
            Residency::Transient => {
                changes.push((from, true, pool.category, size));
                if !g.readers.is_empty() {
                    let to = g.readers.iter().map(|&r| events[r].end).fold(from, f64::max);
                    changes.push((to, false, pool.category, size));
                }
            }
        }
    }
    for ((pool, slot), t) in first_alloc {
        let pool = &dag.pools()[pool];
        changes.push((t, true, pool.category, pool.slot_elements[slot]));
    }
    changes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let model_states = mem_model_states(spec);
    let (mut act, mut buf) = (0u64, 0u64);
    let (mut peak_act, mut peak_buf, mut peak_joint) = (0u64, 0u64, 0u64);
    let mut curve: Vec<MemoryPoint> = Vec::new();
    for (time, alloc, category, size) in changes {
        let slot = match category {
            MemoryCategory::Activation => &mut act,
            MemoryCategory::Buffer => &mut buf,
        };
        if alloc {
            *slot += size;
        } else {
            *slot -= size;
        }
        peak_act = peak_act.max(act);
        peak_buf = peak_buf.max(buf);
        peak_joint = peak_joint.max(act + buf);
        let point = MemoryPoint {
            time,
            activations: act,
            buffers: buf,
        };
        match curve.last_mut() {
            Some(last) if last.time == time => *last = point,
            _ => curve.push(point),
        }
    }

    let host_offload = dag
        .ops()
        .iter()
        .filter(|op| op.kind == OpKind::OffloadCopy)
        .flat_map(|op| op.buffers.iter().map(move |a| dag.pools()[a.pool].role.width(spec) * op.tokens))
        .sum();

    MeasuredMemory {
        model_states,
        activations: peak_act,
        buffers: peak_buf,
        total: model_states + peak_joint,
        host_offload,
        curve,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memmodel::{mem_activations_baseline, mem_buffers_baseline, mem_pipeline, mem_reuse_savings};
    use crate::model::{BatchSpec, HardwareProfile, Preset, ReuseStrategy, SlowdownTable};
    use crate::pipesim::builder::{build_schedule, build_training_step};
    use crate::pipesim::engine::simulate;

    fn hw() -> HardwareProfile {
        HardwareProfile::new(1e12, 1e10, 5e9)
            .unwrap()
            .with_slowdown(SlowdownTable::uniform(0.8, 0.7, 0.9).unwrap())
            .with_launch_overhead(1e-5)
            .unwrap()
    }

    #[test]
    fn micros_round_half_up() {
        assert_eq!(to_micros(0.0), 0);
        assert_eq!(to_micros(1.5e-6), 2);
        assert_eq!(to_micros(2.4999e-6), 2);
        assert_eq!(to_micros(1.0), 1_000_000);
    }

    #[test]
    fn empty_trace() {
        let trace = simulate(&Dag::empty(), &hw());
        assert_eq!(trace.makespan(), 0.0);
        trace.validate().unwrap();
        assert_eq!(trace.to_jsonl(), "");
    }

    #[test]
    fn traces_validate() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let batch = BatchSpec::new(4096, 4).unwrap();
        for s in ReuseStrategy::ALL {
            let dag = build_training_step(&spec, &batch, s, s.reuses_memory()).unwrap();
            let trace = simulate(&dag, &hw());
            trace.validate().unwrap();
            let busy = Stream::ALL.map(|s| trace.busy_time(s));
            assert!(busy.iter().all(|&b| b <= trace.makespan() + 1e-15));
        }
    }

    #[test]
    fn tampered_trace_is_rejected() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let batch = BatchSpec::new(4096, 2).unwrap();
        let dag = build_schedule(&spec, &batch, ReuseStrategy::S4, true, Direction::Forward).unwrap();
        let mut trace = simulate(&dag, &hw());
        trace.events[2].start = 0.0;
        let err = trace.validate().unwrap_err().to_string();
        assert!(err.contains("starts before"), "{err}");
    }

    #[test]
    fn memory_matches_closed_forms() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let tokens = 4096;
        let one = BatchSpec::new(tokens, 1).unwrap();
        let dag = build_training_step(&spec, &one, ReuseStrategy::NoReuse, false).unwrap();
        let m = peak_memory(&simulate(&dag, &hw()), &spec);
        assert_eq!(m.activations, mem_activations_baseline(&spec, tokens).unwrap());
        assert_eq!(m.buffers, mem_buffers_baseline(&spec, tokens).unwrap());
        assert_eq!(m.model_states, 19_070_976);

        let (act, buf) = mem_pipeline(&spec, tokens).unwrap();
        for n in [2, 4, 8] {
            let batch = BatchSpec::new(tokens, n).unwrap();
            let dag = build_training_step(&spec, &batch, ReuseStrategy::NoReuse, false).unwrap();
            let m = peak_memory(&simulate(&dag, &hw()), &spec);
            assert_eq!((m.activations, m.buffers), (act, buf));
            let saved = mem_reuse_savings(&spec, tokens, n).unwrap();
            for s in ReuseStrategy::REUSING {
                let dag = build_training_step(&spec, &batch, s, true).unwrap();
                let m = peak_memory(&simulate(&dag, &hw()), &spec);
                assert_eq!((m.activations, m.buffers), (act - saved, buf - saved), "{s} n={n}");
            }
        }
    }

    #[test]
    fn offloaded_elements() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let batch = BatchSpec::new(4096, 4).unwrap();
        let count = |s: ReuseStrategy| {
            let dag = build_schedule(&spec, &batch, s, true, Direction::Forward).unwrap();
            peak_memory(&simulate(&dag, &hw()), &spec).host_offload
        };
        assert_eq!(count(ReuseStrategy::S1), 4096 * (768 + 3072));
        assert_eq!(count(ReuseStrategy::S2), 4096 * 3072);
        assert_eq!(count(ReuseStrategy::S3), 4096 * 768);
        assert_eq!(count(ReuseStrategy::S4), 0);
    }

    #[test]
    fn exports() {
        let spec = ModelSpec::new(8, 32, 2, 2).unwrap();
        let batch = BatchSpec::new(64, 1).unwrap();
        let dag = build_schedule(&spec, &batch, ReuseStrategy::NoReuse, false, Direction::Forward).unwrap();
        let hw = HardwareProfile::new(1e4, 1e3, 1e3).unwrap();
        let trace = simulate(&dag, &hw);
        let jsonl = trace.to_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(
            lines,
            [
                r#"{"op":"S0","kind":"dispatch","partition":0,"stream":"collective","start_us":0,"end_us":512000}"#,
                r#"{"op":"C0","kind":"expert_compute","partition":0,"stream":"compute","start_us":512000,"end_us":3788800}"#,
                r#"{"op":"R0","kind":"combine","partition":0,"stream":"collective","start_us":3788800,"end_us":4300800}"#,
            ]
        );
        let v: serde_json::Value = serde_json::from_str(&trace.to_trace_event_json()).unwrap();
        let events = v["traceEvents"].as_array().unwrap();
        assert_eq!(events.len(), 6);
        assert_eq!(events[4]["name"], "C0");
        assert_eq!(events[4]["dur"], 3276800);
        assert_eq!(events[4]["tid"], 0);
    }
}
