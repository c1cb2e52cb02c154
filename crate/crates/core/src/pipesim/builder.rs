//! Lowers a (spec, batch, strategy) plan to an operation DAG.
//!
//! Ops are created partition by partition. Buffer reuse shows up as extra
//! dependencies: a write to a slot waits for every reader of the slot's
//! previous contents.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{BatchSpec, Direction, ModelSpec, Restore, ReuseStrategy, Stream, TensorRole};

use super::dag::{
    Access, BufferAccess, BufferPool, Dag, MemoryCategory, OpId, OpKind, OpNode, PoolId, Residency,
};

/// Issue order on the collective stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CollectiveOrder {
    /// First and second all-to-alls alternate: S0 S1 R0 S2 R1 ... R(n-1).
    #[default]
    Alternating,
    /// All first-stage all-to-alls, then all second-stage ones. Deadlocks
    /// with buffer reuse once n >= 5.
    DispatchFirst,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScheduleOptions {
    pub collective_order: CollectiveOrder,
}

/// One pass of one MoE layer.
pub fn build_schedule(
    spec: &ModelSpec,
    batch: &BatchSpec,
    strategy: ReuseStrategy,
    reuse_enabled: bool,
    direction: Direction,
) -> Result<Dag> {
    build_schedule_with(spec, batch, strategy, reuse_enabled, direction, ScheduleOptions::default())
}

pub fn build_schedule_with(
    spec: &ModelSpec,
    batch: &BatchSpec,
    strategy: ReuseStrategy,
    reuse_enabled: bool,
    direction: Direction,
    options: ScheduleOptions,
) -> Result<Dag> {
    let mut b = Builder::new(spec, batch, strategy, reuse_enabled, options)?;
    match direction {
        Direction::Forward => {
            b.activation_pools(false);
            b.forward();
        }
        Direction::Backward => {
            b.activation_pools(true);
            b.gradient_pools();
            b.backward(None);
        }
    }
    b.finish()
}

/// Forward pass followed by the backward pass. Backward ops start only once
/// the whole forward pass has finished.
pub fn build_training_step(
    spec: &ModelSpec,
    batch: &BatchSpec,
    strategy: ReuseStrategy,
    reuse_enabled: bool,
) -> Result<Dag> {
    build_training_step_with(spec, batch, strategy, reuse_enabled, ScheduleOptions::default())
}

pub fn build_training_step_with(
    spec: &ModelSpec,
    batch: &BatchSpec,
    strategy: ReuseStrategy,
    reuse_enabled: bool,
    options: ScheduleOptions,
) -> Result<Dag> {
    let mut b = Builder::new(spec, batch, strategy, reuse_enabled, options)?;
    b.activation_pools(false);
    b.forward();
    let barrier: Vec<OpId> = b.orders.iter().filter_map(|o| o.last().copied()).collect();
    b.gradient_pools();
    b.backward(Some(barrier));
    b.finish()
}

#[derive(Default)]
struct SlotState {
    writer: Option<OpId>,
    readers: Vec<OpId>,
}

struct Pools {
    input: PoolId,
    dispatched: PoolId,
    hidden: PoolId,
    expert_out: PoolId,
    output: PoolId,
}

struct GradPools {
    output: PoolId,
    expert_out: PoolId,
    hidden: PoolId,
    dispatched: PoolId,
    input: PoolId,
}

struct Builder {
    spec: ModelSpec,
    sizes: Vec<u64>,
    micro: u64,
    strategy: ReuseStrategy,
    reuse: bool,
    options: ScheduleOptions,
    ops: Vec<OpNode>,
    pools: Vec<BufferPool>,
    orders: [Vec<OpId>; 3],
    slots: HashMap<(PoolId, usize), SlotState>,
    act: Option<Pools>,
    grad: Option<GradPools>,
}

impl Builder {
    fn new(
        spec: &ModelSpec,
        batch: &BatchSpec,
        strategy: ReuseStrategy,
        reuse: bool,
        options: ScheduleOptions,
    ) -> Result<Self> {
        if reuse && batch.partitions() < 2 {
            return Err(Error::ReuseNotApplicable {
                partitions: batch.partitions(),
            });
        }
        if reuse != strategy.reuses_memory() {
            return Err(Error::ConflictingReuse {
                strategy: strategy.name(),
                reuse_enabled: reuse,
            });
        }
        Ok(Self {
            spec: *spec,
            sizes: batch.partition_sizes(),
            micro: batch.micro_batch_size(),
            strategy,
            reuse,
            options,
            ops: Vec::new(),
            pools: Vec::new(),
            orders: Default::default(),
            slots: HashMap::new(),
            act: None,
            grad: None,
        })
    }

    fn n(&self) -> usize {
        self.sizes.len()
    }

    fn pool(
        &mut self,
        name: &str,
        role: TensorRole,
        category: MemoryCategory,
        shared: Option<usize>,
        residency: Residency,
        preloaded: bool,
    ) -> PoolId {
        let width = role.width(&self.spec);
        let slot_elements = match shared {
            Some(capacity) if self.reuse => vec![self.micro * width; capacity],
            _ => self.sizes.iter().map(|t| t * width).collect(),
        };
        let id = self.pools.len();
        self.pools.push(BufferPool {
            id,
            name: name.to_string(),
            role,
            category,
            residency,
            preloaded,
            slot_elements,
        });
        id
    }

    fn activation_pools(&mut self, preloaded: bool) {
        use MemoryCategory::Activation;
        use Residency::Persistent;
        let input = self.pool("T_I", TensorRole::Input, Activation, None, Persistent, true);
        let dispatched = self.pool("T_DI", TensorRole::Dispatched, Activation, Some(2), Persistent, preloaded);
        let hidden = self.pool("T_M", TensorRole::Hidden, Activation, Some(1), Persistent, preloaded);
        let expert_out = self.pool("T_DO", TensorRole::ExpertOut, Activation, Some(2), Persistent, preloaded);
        let output = self.pool("T_O", TensorRole::Output, Activation, None, Persistent, preloaded);
        self.act = Some(Pools {
            input,
            dispatched,
            hidden,
            expert_out,
            output,
        });
    }

    fn gradient_pools(&mut self) {
        use MemoryCategory::Buffer;
        // Without pipelining gradients are freed as soon as they are consumed;
        // with partitions in flight every gradient tensor stays allocated.
        let r = if self.n() == 1 {
            Residency::Transient
        } else {
            Residency::Persistent
        };
        let output = self.pool("dT_O", TensorRole::Output, Buffer, None, r, true);
        let expert_out = self.pool("dT_DO", TensorRole::ExpertOut, Buffer, Some(2), r, false);
        let hidden = self.pool("dT_M", TensorRole::Hidden, Buffer, Some(1), r, false);
        let dispatched = self.pool("dT_DI", TensorRole::Dispatched, Buffer, Some(2), r, false);
        let input = self.pool("dT_I", TensorRole::Input, Buffer, None, Residency::Persistent, false);
        self.grad = Some(GradPools {
            output,
            expert_out,
            hidden,
            dispatched,
            input,
        });
    }

    fn slot(&self, pool: PoolId, partition: usize) -> usize {
        partition % self.pools[pool].capacity()
    }

    fn access(&self, pool: PoolId, partition: usize, access: Access) -> BufferAccess {
        BufferAccess {
            pool,
            slot: self.slot(pool, partition),
            access,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        label: String,
        kind: OpKind,
        stream: Stream,
        direction: Direction,
        partition: usize,
        work: u64,
        extra_deps: &[OpId],
        buffers: Vec<BufferAccess>,
    ) -> OpId {
        let id = self.ops.len();
        let mut deps: Vec<OpId> = extra_deps.to_vec();
        for a in &buffers {
            let state = self.slots.entry((a.pool, a.slot)).or_default();
            match a.access {
                Access::Read => {
                    deps.extend(state.writer);
                    state.readers.push(id);
                }
                Access::Write => {
                    deps.extend(state.writer);
                    deps.extend(state.readers.iter().copied().filter(|&r| r != id));
                    state.writer = Some(id);
                    state.readers.clear();
                }
            }
        }
        deps.sort_unstable();
        deps.dedup();
        self.ops.push(OpNode {
            id,
            label,
            partition,
            tokens: self.sizes[partition],
            kind,
            stream,
            direction,
            work: work as f64,
            deps,
            buffers,
        });
        id
    }

    fn forward(&mut self) {
        let p = self.act.as_ref().map(|p| (p.input, p.dispatched, p.hidden, p.expert_out, p.output));
        let (input, dispatched, hidden, expert_out, output) = p.expect("activation pools");
        let (m, h) = (self.spec.model_dim(), self.spec.hidden_dim());
        let offload_di = self.strategy.restore_dispatched() == Restore::Offload;
        let offload_m = self.strategy.restore_hidden() == Restore::Offload;
        let fw = Direction::Forward;
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut compute = Vec::new();
        let mut copies = Vec::new();
        for i in 0..self.n() {
            let t = self.sizes[i];
            let bufs = vec![
                self.access(input, i, Access::Read),
                self.access(dispatched, i, Access::Write),
            ];
            let s = self.add(format!("S{i}"), OpKind::Dispatch, Stream::Collective, fw, i, t * m, &[], bufs);
            first.push(vec![s]);
            if offload_di {
                let bufs = vec![self.access(dispatched, i, Access::Read)];
                let d = self.add(format!("D{i}:T_DI"), OpKind::OffloadCopy, Stream::Copy, fw, i, t * m, &[], bufs);
                copies.push(d);
            }
            let bufs = vec![
                self.access(dispatched, i, Access::Read),
                self.access(hidden, i, Access::Write),
                self.access(expert_out, i, Access::Write),
            ];
            let c = self.add(format!("C{i}"), OpKind::ExpertCompute, Stream::Compute, fw, i, 2 * t * h * m, &[], bufs);
            compute.push(c);
            if offload_m {
                let bufs = vec![self.access(hidden, i, Access::Read)];
                let d = self.add(format!("D{i}:T_M"), OpKind::OffloadCopy, Stream::Copy, fw, i, 4 * t * m, &[], bufs);
                copies.push(d);
            }
            let bufs = vec![
                self.access(expert_out, i, Access::Read),
                self.access(output, i, Access::Write),
            ];
            let r = self.add(format!("R{i}"), OpKind::Combine, Stream::Collective, fw, i, t * m, &[], bufs);
            second.push(vec![r]);
        }
        let collective = self.interleave(first, second);
        self.issue(Stream::Collective, collective);
        self.issue(Stream::Compute, compute);
        self.issue(Stream::Copy, copies);
    }

    fn backward(&mut self, barrier: Option<Vec<OpId>>) {
        let p = self.act.as_ref().map(|p| (p.input, p.dispatched, p.hidden));
        let (input, dispatched, hidden) = p.expect("activation pools");
        let g = self.grad.as_ref().map(|g| (g.output, g.expert_out, g.hidden, g.dispatched, g.input));
        let (d_out, d_eout, d_hidden, d_disp, d_in) = g.expect("gradient pools");
        let (m, h) = (self.spec.model_dim(), self.spec.hidden_dim());
        let restore_di = self.strategy.restore_dispatched();
        let restore_m = self.strategy.restore_hidden();
        let bw = Direction::Backward;
        let start = self.ops.len();

        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut compute = Vec::new();
        let mut copies = Vec::new();
        for i in 0..self.n() {
            let t = self.sizes[i];
            let mut stage = Vec::new();
            match restore_di {
                Restore::Communicate => {
                    let bufs = vec![
                        self.access(input, i, Access::Read),
                        self.access(dispatched, i, Access::Write),
                    ];
                    let op = self.add(format!("RS{i}"), OpKind::Recommunicate, Stream::Collective, bw, i, t * m, &[], bufs);
                    stage.push(op);
                }
                Restore::Offload => {
                    let bufs = vec![self.access(dispatched, i, Access::Write)];
                    let op = self.add(format!("H{i}:T_DI"), OpKind::PrefetchCopy, Stream::Copy, bw, i, t * m, &[], bufs);
                    copies.push(op);
                }
                _ => {}
            }
            if restore_m == Restore::Offload {
                let bufs = vec![self.access(hidden, i, Access::Write)];
                let op = self.add(format!("H{i}:T_M"), OpKind::PrefetchCopy, Stream::Copy, bw, i, 4 * t * m, &[], bufs);
                copies.push(op);
            }
            let bufs = vec![
                self.access(d_out, i, Access::Read),
                self.access(d_eout, i, Access::Write),
            ];
            let r = self.add(format!("R'{i}"), OpKind::Combine, Stream::Collective, bw, i, t * m, &[], bufs);
            stage.push(r);
            first.push(stage);
            if restore_m == Restore::Recompute {
                let bufs = vec![
                    self.access(dispatched, i, Access::Read),
                    self.access(hidden, i, Access::Write),
                ];
                let op = self.add(format!("RC{i}"), OpKind::Recompute, Stream::Compute, bw, i, t * h * m, &[], bufs);
                compute.push(op);
            }
            let bufs = vec![
                self.access(d_eout, i, Access::Read),
                self.access(hidden, i, Access::Read),
                self.access(d_hidden, i, Access::Write),
            ];
            let g1 = self.add(format!("G{i}a"), OpKind::GradCompute, Stream::Compute, bw, i, 2 * t * h * m, &[], bufs);
            let bufs = vec![
                self.access(d_hidden, i, Access::Read),
                self.access(dispatched, i, Access::Read),
                self.access(d_disp, i, Access::Write),
            ];
            let g2 = self.add(format!("G{i}b"), OpKind::GradCompute, Stream::Compute, bw, i, 2 * t * h * m, &[], bufs);
            compute.extend([g1, g2]);
            let bufs = vec![
                self.access(d_disp, i, Access::Read),
                self.access(d_in, i, Access::Write),
            ];
            let s = self.add(format!("S'{i}"), OpKind::Dispatch, Stream::Collective, bw, i, t * m, &[], bufs);
            second.push(vec![s]);
        }
        let collective = self.interleave(first, second);
        let heads: Vec<OpId> = [&collective, &compute, &copies]
            .into_iter()
            .filter_map(|o| o.first().copied())
            .collect();
        if let Some(barrier) = barrier {
            for id in heads {
                debug_assert!(id >= start);
                let deps = &mut self.ops[id].deps;
                deps.extend(barrier.iter().copied());
                deps.sort_unstable();
                deps.dedup();
            }
        }
        self.issue(Stream::Collective, collective);
        self.issue(Stream::Compute, compute);
        self.issue(Stream::Copy, copies);
    }

    /// Collective issue order from per-partition first-stage and
    /// second-stage groups.
    fn interleave(&self, first: Vec<Vec<OpId>>, second: Vec<Vec<OpId>>) -> Vec<OpId> {
        match self.options.collective_order {
            CollectiveOrder::Alternating => {
                let mut order = Vec::new();
                let mut firsts = first.into_iter();
                order.extend(firsts.next().into_iter().flatten());
                for last in second {
                    order.extend(firsts.next().into_iter().flatten());
                    order.extend(last);
                }
                order
            }
            CollectiveOrder::DispatchFirst => first.into_iter().chain(second).flatten().collect(),
        }
    }

    fn issue(&mut self, stream: Stream, ops: Vec<OpId>) {
        self.orders[stream.index()].extend(ops);
    }

    fn finish(self) -> Result<Dag> {
        Dag::from_parts(self.ops, self.pools, self.orders)
    }
}
