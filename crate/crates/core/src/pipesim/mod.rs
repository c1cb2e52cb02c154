//! Discrete-event simulation of one MoE layer on compute, collective and
//! host-copy streams.

mod builder;
mod dag;
mod engine;
mod trace;

pub use builder::{
    build_schedule, build_schedule_with, build_training_step, build_training_step_with, CollectiveOrder,
    ScheduleOptions,
};
pub use dag::{
    Access, BufferAccess, BufferPool, Dag, Generation, MemoryCategory, OpId, OpKind, OpNode, PoolId, Residency,
};
pub use engine::{brute_force_makespan, simulate, simulate_with_orders, ORACLE_LIMIT};
pub use trace::{peak_memory, to_micros, MeasuredMemory, MemoryPoint, RateSegment, ScheduleTrace, TraceEvent};
