use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Direction, Stream, TensorRole};

pub type OpId = usize;
pub type PoolId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// First all-to-all (S); in backward, the all-to-all returning input gradients.
    Dispatch,
    /// Both expert GeMMs of the forward pass (C).
    ExpertCompute,
    /// Second all-to-all (R); in backward, the all-to-all distributing output gradients.
    Combine,
    /// Device-to-host copy (D).
    OffloadCopy,
    /// Host-to-device copy (H).
    PrefetchCopy,
    Recompute,
    Recommunicate,
    GradCompute,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Dispatch => "dispatch",
            OpKind::ExpertCompute => "expert_compute",
            OpKind::Combine => "combine",
            OpKind::OffloadCopy => "offload_copy",
            OpKind::PrefetchCopy => "prefetch_copy",
            OpKind::Recompute => "recompute",
            OpKind::Recommunicate => "recommunicate",
            OpKind::GradCompute => "grad_compute",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct BufferAccess {
    pub pool: PoolId,
    pub slot: usize,
    pub access: Access,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpNode {
    pub id: OpId,
    pub label: String,
    pub partition: usize,
    /// Tokens in this op's partition.
    pub tokens: u64,
    pub kind: OpKind,
    pub stream: Stream,
    pub direction: Direction,
    /// Elements (or element-operations for compute) to process.
    pub work: f64,
    pub deps: Vec<OpId>,
    pub buffers: Vec<BufferAccess>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryCategory {
    Activation,
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Residency {
    /// A slot stays allocated from first use until the end of the run.
    Persistent,
    /// Each write allocates and the last reader frees.
    Transient,
}

/// A set of partition-sized slots backing one tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferPool {
    pub id: PoolId,
    pub name: String,
    pub role: TensorRole,
    pub category: MemoryCategory,
    pub residency: Residency,
    /// Slots hold data before the first op runs.
    pub preloaded: bool,
    /// Elements per slot; its length is the pool capacity.
    pub slot_elements: Vec<u64>,
}

impl BufferPool {
    pub fn capacity(&self) -> usize {
        self.slot_elements.len()
    }
}

/// One write to a slot together with the reads it serves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub pool: PoolId,
    pub slot: usize,
    /// `None` for data present at the start of the run.
    pub writer: Option<OpId>,
    pub readers: Vec<OpId>,
}

/// Operation graph plus per-stream issue order. Construction rejects graphs
/// whose dependencies and stream FIFO order together form a cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dag {
    ops: Vec<OpNode>,
    pools: Vec<BufferPool>,
    stream_orders: [Vec<OpId>; 3],
}

impl Dag {
    pub fn from_parts(ops: Vec<OpNode>, pools: Vec<BufferPool>, stream_orders: [Vec<OpId>; 3]) -> Result<Self> {
        let dag = Self {
            ops,
            pools,
            stream_orders,
        };
        dag.check_structure()?;
        dag.check_deadlock_free(&dag.stream_orders)?;
        Ok(dag)
    }

    pub fn empty() -> Self {
        Self {
            ops: Vec::new(),
            pools: Vec::new(),
            stream_orders: Default::default(),
        }
    }

    pub fn ops(&self) -> &[OpNode] {
        &self.ops
    }

    pub fn op(&self, id: OpId) -> &OpNode {
        &self.ops[id]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn pools(&self) -> &[BufferPool] {
        &self.pools
    }

    pub fn stream_order(&self, stream: Stream) -> &[OpId] {
        &self.stream_orders[stream.index()]
    }

    pub fn stream_orders(&self) -> &[Vec<OpId>; 3] {
        &self.stream_orders
    }

    fn check_structure(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Deadlock { diagnostic: msg });
        let mut seen = vec![false; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            if op.id != i {
                return bad(format!("op at index {i} carries id {}", op.id));
            }
            if let Some(d) = op.deps.iter().find(|&&d| d >= self.ops.len() || d == i) {
                return bad(format!("{} has invalid dependency {d}", op.label));
            }
            if let Some(a) = op
                .buffers
                .iter()
                .find(|a| a.pool >= self.pools.len() || a.slot >= self.pools[a.pool].capacity())
            {
                return bad(format!("{} accesses missing slot {}:{}", op.label, a.pool, a.slot));
            }
        }
        for stream in Stream::ALL {
            for &id in &self.stream_orders[stream.index()] {
                if id >= self.ops.len() || self.ops[id].stream != stream || seen[id] {
                    return bad(format!("stream {stream} order lists op {id} incorrectly"));
                }
                seen[id] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return bad(format!("{} is not issued on any stream", self.ops[missing].label));
        }
        Ok(())
    }

    /// Kahn's algorithm over dependency edges plus stream-order edges.
    pub(crate) fn check_deadlock_free(&self, orders: &[Vec<OpId>; 3]) -> Result<()> {
        let n = self.ops.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<OpId>> = vec![Vec::new(); n];
        for op in &self.ops {
            for &d in &op.deps {
                succ[d].push(op.id);
                indegree[op.id] += 1;
            }
        }
        for order in orders {
            for w in order.windows(2) {
                succ[w[0]].push(w[1]);
                indegree[w[1]] += 1;
            }
        }
        let mut ready: Vec<OpId> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut visited = 0;
        while let Some(u) = ready.pop() {
            visited += 1;
            for &v in &succ[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    ready.push(v);
                }
            }
        }
        if visited == n {
            return Ok(());
        }
        let mut stuck: Vec<&str> = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| self.ops[i].label.as_str())
            .collect();
        let total = stuck.len();
        stuck.truncate(8);
        Err(Error::Deadlock {
            diagnostic: format!(
                "{total} ops wait on a cycle of dependencies, buffer reuse and stream order (e.g. {})",
                stuck.join(", ")
            ),
        })
    }

    /// Writes and the reads they serve, per slot, in op-id order.
    pub fn generations(&self) -> Vec<Generation> {
        let mut current: HashMap<(PoolId, usize), usize> = HashMap::new();
        let mut gens: Vec<Generation> = Vec::new();
        for pool in self.pools.iter().filter(|p| p.preloaded) {
            for slot in 0..pool.capacity() {
                current.insert((pool.id, slot), gens.len());
                gens.push(Generation {
                    pool: pool.id,
                    slot,
                    writer: None,
                    readers: Vec::new(),
                });
            }
        }
        for op in &self.ops {
            for a in op.buffers.iter().filter(|a| a.access == Access::Read) {
                if let Some(&g) = current.get(&(a.pool, a.slot)) {
                    if !gens[g].readers.contains(&op.id) {
                        gens[g].readers.push(op.id);
                    }
                }
            }
            for a in op.buffers.iter().filter(|a| a.access == Access::Write) {
                current.insert((a.pool, a.slot), gens.len());
                gens.push(Generation {
                    pool: a.pool,
                    slot: a.slot,
                    writer: Some(op.id),
                    readers: Vec::new(),
                });
            }
        }
        gens
    }
}
