//! Event-driven execution of a [`Dag`] on three FIFO streams.
//!
//! Between events every running op progresses at a constant rate. An op
//! first spends the stream's launch overhead (which occupies the stream but
//! does not interfere with others), then processes its work at
//! `speed * slowdown(busy streams) * saturation`.

use crate::error::{Error, Result};
use crate::model::{HardwareProfile, Stream, StreamSet};

use super::dag::{Dag, OpId};
use super::trace::{RateSegment, ScheduleTrace, TraceEvent};

/// Largest DAG the exhaustive oracle accepts.
pub const ORACLE_LIMIT: usize = 12;

const FINISH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
enum Phase {
    Launch { remaining: f64 },
    Work { remaining: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Running {
    op: OpId,
    phase: Phase,
}

/// Runs `dag` with its own stream issue order.
pub fn simulate(dag: &Dag, hw: &HardwareProfile) -> ScheduleTrace {
    run(dag, hw, dag.stream_orders()).expect("issue order was checked for deadlock at construction")
}

/// Runs `dag` with the given per-stream issue order.
pub fn simulate_with_orders(dag: &Dag, hw: &HardwareProfile, orders: &[Vec<OpId>; 3]) -> Result<ScheduleTrace> {
    dag.check_deadlock_free(orders)?;
    run(dag, hw, orders)
}

fn run(dag: &Dag, hw: &HardwareProfile, orders: &[Vec<OpId>; 3]) -> Result<ScheduleTrace> {
    let n = dag.len();
    let mut done = vec![false; n];
    let mut start = vec![0.0; n];
    let mut work_start = vec![0.0; n];
    let mut end = vec![0.0; n];
    let mut segments: Vec<Vec<RateSegment>> = vec![Vec::new(); n];
    let mut head = [0usize; 3];
    let mut running: [Option<Running>; 3] = [None; 3];
    let mut finished = 0;
    let mut now = 0.0_f64;

    loop {
        // Start every stream head whose dependencies are complete.
        for stream in Stream::ALL {
            let s = stream.index();
            if running[s].is_some() || head[s] == orders[s].len() {
                continue;
            }
            let id = orders[s][head[s]];
            if dag.op(id).deps.iter().all(|&d| done[d]) {
                head[s] += 1;
                start[id] = now;
                let launch = hw.launch_overhead_for(stream);
                let phase = if launch > 0.0 {
                    Phase::Launch { remaining: launch }
                } else {
                    work_start[id] = now;
                    Phase::Work {
                        remaining: dag.op(id).work,
                    }
                };
                running[s] = Some(Running { op: id, phase });
            }
        }
        if finished == n {
            break;
        }
        if running.iter().all(Option::is_none) {
            let waiting: Vec<&str> = (0..3)
                .filter(|&s| head[s] < orders[s].len())
                .map(|s| dag.op(orders[s][head[s]]).label.as_str())
                .collect();
            return Err(Error::Deadlock {
                diagnostic: format!("no stream can progress; heads waiting: {}", waiting.join(", ")),
            });
        }

        let busy = Stream::ALL
            .into_iter()
            .filter(|s| matches!(running[s.index()], Some(Running { phase: Phase::Work { .. }, .. })))
            .fold(StreamSet::EMPTY, StreamSet::with);
        let mut rates = [0.0; 3];
        let mut dt = f64::INFINITY;
        let mut first = 0;
        for stream in Stream::ALL {
            let s = stream.index();
            let Some(r) = running[s] else { continue };
            let t = match r.phase {
                Phase::Launch { remaining } => remaining,
                Phase::Work { remaining } => {
                    rates[s] = rate(dag, hw, r.op, stream, busy);
                    remaining / rates[s]
                }
            };
            if t < dt {
                dt = t;
                first = s;
            }
        }

        let next = now + dt;
        for stream in Stream::ALL {
            let s = stream.index();
            let Some(mut r) = running[s] else { continue };
            match &mut r.phase {
                Phase::Launch { remaining } => {
                    *remaining -= dt;
                    if s == first || *remaining <= FINISH_TOL * hw.launch_overhead_for(stream) {
                        work_start[r.op] = next;
                        r.phase = Phase::Work {
                            remaining: dag.op(r.op).work,
                        };
                    }
                    running[s] = Some(r);
                }
                Phase::Work { remaining } => {
                    let op = r.op;
                    let finishing = s == first || *remaining - rates[s] * dt <= FINISH_TOL * dag.op(op).work;
                    let work = if finishing { *remaining } else { rates[s] * dt };
                    if dt > 0.0 {
                        segments[op].push(RateSegment {
                            start: now,
                            end: next,
                            rate: rates[s],
                            work,
                        });
                    }
                    *remaining -= work;
                    if finishing {
                        end[op] = next;
                        done[op] = true;
                        finished += 1;
                        running[s] = None;
                    } else {
                        running[s] = Some(r);
                    }
                }
            }
        }
        now = next;
    }

    let events = dag
        .ops()
        .iter()
        .map(|op| TraceEvent {
            op: op.id,
            label: op.label.clone(),
            kind: op.kind,
            partition: op.partition,
            stream: op.stream,
            direction: op.direction,
            start: start[op.id],
            work_start: work_start[op.id],
            end: end[op.id],
            segments: std::mem::take(&mut segments[op.id]),
        })
        .collect();
    Ok(ScheduleTrace::new(dag.clone(), events, orders.clone()))
}

fn rate(dag: &Dag, hw: &HardwareProfile, op: OpId, stream: Stream, busy: StreamSet) -> f64 {
    let base = hw.speed(stream) * hw.slowdown().get(stream, busy);
    match stream {
        Stream::Compute => base * hw.saturation_factor(dag.op(op).tokens),
        _ => base,
    }
}

/// Minimum makespan over every per-stream issue order that respects the
/// dependency graph, skipping orders that deadlock.
pub fn brute_force_makespan(dag: &Dag, hw: &HardwareProfile) -> Result<f64> {
    if dag.len() > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            ops: dag.len(),
            limit: ORACLE_LIMIT,
        });
    }
    let reach = reachability(dag);
    let per_stream: Vec<Vec<Vec<OpId>>> = Stream::ALL
        .into_iter()
        .map(|s| linear_extensions(dag.stream_order(s), &reach))
        .collect();
    let mut best = f64::INFINITY;
    for a in &per_stream[0] {
        for b in &per_stream[1] {
            for c in &per_stream[2] {
                let orders = [a.clone(), b.clone(), c.clone()];
                if dag.check_deadlock_free(&orders).is_err() {
                    continue;
                }
                best = best.min(run(dag, hw, &orders)?.makespan());
            }
        }
    }
    Ok(if dag.is_empty() { 0.0 } else { best })
}

/// `reach[a][b]` when `b` transitively depends on `a`.
fn reachability(dag: &Dag) -> Vec<Vec<bool>> {
    let n = dag.len();
    let mut reach = vec![vec![false; n]; n];
    // Dependencies always point to smaller ids in built DAGs, but do not
    // rely on it: iterate to a fixed point.
    let mut changed = true;
    while changed {
        changed = false;
        for op in dag.ops() {
            for &d in &op.deps {
                if !reach[d][op.id] {
                    reach[d][op.id] = true;
                    changed = true;
                }
                for row in reach.iter_mut() {
                    if row[d] && !row[op.id] {
                        row[op.id] = true;
                        changed = true;
                    }
                }
            }
        }
    }
    reach
}

fn linear_extensions(ops: &[OpId], reach: &[Vec<bool>]) -> Vec<Vec<OpId>> {
    fn extend(rest: &mut Vec<OpId>, prefix: &mut Vec<OpId>, reach: &[Vec<bool>], out: &mut Vec<Vec<OpId>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let cand = rest[i];
            if rest.iter().any(|&o| o != cand && reach[o][cand]) {
                continue;
            }
            rest.remove(i);
            prefix.push(cand);
            extend(rest, prefix, reach, out);
            prefix.pop();
            rest.insert(i, cand);
        }
    }
    let mut out = Vec::new();
    extend(&mut ops.to_vec(), &mut Vec::new(), reach, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BatchSpec, Direction, ModelSpec, Preset, ReuseStrategy, SlowdownTable};
    use crate::pipesim::builder::build_schedule;
    use crate::pipesim::dag::{OpKind, OpNode};

    fn single(stream: Stream, work: f64) -> OpNode {
        OpNode {
            id: 0,
            label: "X".into(),
            partition: 0,
            tokens: 1 << 20,
            kind: OpKind::Dispatch,
            stream,
            direction: Direction::Forward,
            work,
            deps: vec![],
            buffers: vec![],
        }
    }

    fn pair(slow: f64) -> (Dag, HardwareProfile) {
        let mut b = single(Stream::Collective, 100.0);
        b.id = 1;
        b.label = "Y".into();
        let ops = vec![single(Stream::Compute, 100.0), b];
        let dag = Dag::from_parts(ops, vec![], [vec![0], vec![1], vec![]]).unwrap();
        let table = SlowdownTable::uniform(slow, slow, 1.0).unwrap();
        let hw = HardwareProfile::new(10.0, 10.0, 10.0).unwrap().with_slowdown(table);
        (dag, hw)
    }

    #[test]
    fn single_op_duration() {
        let dag = Dag::from_parts(vec![single(Stream::Copy, 6.0)], vec![], [vec![], vec![], vec![0]]).unwrap();
        let hw = HardwareProfile::new(1.0, 1.0, 4.0).unwrap();
        let trace = simulate(&dag, &hw);
        assert_eq!(trace.makespan(), 1.5);
        let hw = hw.with_launch_overhead(0.25).unwrap();
        assert_eq!(simulate(&dag, &hw).makespan(), 1.75);
    }

    #[test]
    fn overlapped_pair_with_half_speed() {
        let (dag, hw) = pair(0.5);
        let trace = simulate(&dag, &hw);
        // solo duration 10, both at half speed
        assert_eq!(trace.events()[0].end, 20.0);
        assert_eq!(trace.events()[1].end, 20.0);
    }

    #[test]
    fn rate_changes_when_partner_finishes() {
        let (mut dag, hw) = pair(0.5);
        let mut ops = dag.ops().to_vec();
        ops[1].work = 50.0;
        dag = Dag::from_parts(ops, vec![], dag.stream_orders().clone()).unwrap();
        let trace = simulate(&dag, &hw);
        // both at 5/s until Y is done at 10; X then has 50 left at 10/s
        assert_eq!(trace.events()[1].end, 10.0);
        assert_eq!(trace.events()[0].end, 15.0);
        assert_eq!(trace.events()[0].segments.len(), 2);
    }

    #[test]
    fn launch_phase_does_not_interfere() {
        let (dag, hw) = pair(0.5);
        let hw = hw.with_launch_override(Stream::Collective, 10.0).unwrap();
        let trace = simulate(&dag, &hw);
        // X runs alone at full speed during Y's launch
        assert_eq!(trace.events()[0].end, 10.0);
        assert_eq!(trace.events()[1].work_start, 10.0);
        assert_eq!(trace.events()[1].end, 20.0);
    }

    #[test]
    fn sequential_chain_sums_durations() {
        let spec = ModelSpec::new(8, 32, 2, 2).unwrap();
        let batch = BatchSpec::new(64, 1).unwrap();
        let dag = build_schedule(&spec, &batch, ReuseStrategy::NoReuse, false, Direction::Forward).unwrap();
        let eps = 1e-3;
        let hw = HardwareProfile::new(1e4, 1e3, 1e3).unwrap().with_launch_overhead(eps).unwrap();
        let trace = simulate(&dag, &hw);
        let comm = 64.0 * 8.0 / 1e3;
        let comp = 2.0 * 64.0 * 32.0 * 8.0 / 1e4;
        assert!((trace.makespan() - (2.0 * comm + comp + 3.0 * eps)).abs() < 1e-12);
        assert_eq!(brute_force_makespan(&dag, &hw).unwrap(), trace.makespan());
    }

    #[test]
    fn deterministic() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let batch = BatchSpec::new(4096, 4).unwrap();
        let dag = build_schedule(&spec, &batch, ReuseStrategy::S1, true, Direction::Backward).unwrap();
        let hw = HardwareProfile::new(1e12, 1e10, 5e9)
            .unwrap()
            .with_slowdown(SlowdownTable::uniform(0.8, 0.7, 0.9).unwrap());
        assert_eq!(simulate(&dag, &hw), simulate(&dag, &hw));
    }

    #[test]
    fn oracle_limits() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let batch = BatchSpec::new(4096, 8).unwrap();
        let dag = build_schedule(&spec, &batch, ReuseStrategy::NoReuse, false, Direction::Forward).unwrap();
        let hw = HardwareProfile::new(1e12, 1e10, 5e9).unwrap();
        assert!(matches!(
            brute_force_makespan(&dag, &hw),
            Err(Error::OracleTooLarge { ops: 24, limit: 12 })
        ));
        assert_eq!(brute_force_makespan(&Dag::empty(), &hw).unwrap(), 0.0);
    }

    #[test]
    fn bad_orders_are_reported() {
        let spec = Preset::Gpt3Small.spec(8).unwrap();
        let batch = BatchSpec::new(4096, 2).unwrap();
        let dag = build_schedule(&spec, &batch, ReuseStrategy::NoReuse, false, Direction::Forward).unwrap();
        let hw = HardwareProfile::new(1e12, 1e10, 5e9).unwrap();
        let mut orders = dag.stream_orders().clone();
        orders[Stream::Collective.index()].reverse();
        assert!(matches!(simulate_with_orders(&dag, &hw, &orders), Err(Error::Deadlock { .. })));
    }

    #[test]
    fn extensions_respect_reachability() {
        // 0 -> 1, 2 free: 3 orders of {0,1,2} keep 0 before 1
        let reach = vec![
            vec![false, true, false],
            vec![false, false, false],
            vec![false, false, false],
        ];
        let ext = linear_extensions(&[0, 1, 2], &reach);
        assert_eq!(ext.len(), 3);
        assert!(ext.iter().all(|o| o.iter().position(|&x| x == 0) < o.iter().position(|&x| x == 1)));
    }
}
