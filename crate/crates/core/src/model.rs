//! Domain types shared by the memory model, cost model, simulator and tuner.
//!
//! Everything here is an immutable value type once constructed. Constructors
//! validate their invariants, so downstream code never re-checks them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of one MoE layer and the expert-parallel cluster it runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ModelSpec {
    model_dim: u64,
    hidden_dim: u64,
    num_experts: u64,
    num_nodes: u64,
    element_bytes: u64,
}

impl ModelSpec {
    /// Half-precision spec (2 bytes per element).
    pub fn new(model_dim: u64, hidden_dim: u64, num_experts: u64, num_nodes: u64) -> Result<Self> {
        Self::with_element_bytes(model_dim, hidden_dim, num_experts, num_nodes, 2)
    }

    pub fn with_element_bytes(
        model_dim: u64,
        hidden_dim: u64,
        num_experts: u64,
        num_nodes: u64,
        element_bytes: u64,
    ) -> Result<Self> {
        for (field, value) in [
            ("model_dim", model_dim),
            ("hidden_dim", hidden_dim),
            ("num_experts", num_experts),
            ("num_nodes", num_nodes),
        ] {
            if value == 0 {
                return Err(Error::param(field, "must be at least 1"));
            }
        }
        if !num_experts.is_multiple_of(num_nodes) {
            return Err(Error::param(
                "num_experts",
                format!("{num_experts} experts cannot be spread evenly over {num_nodes} nodes"),
            ));
        }
        if !matches!(element_bytes, 1 | 2 | 4 | 8) {
            return Err(Error::param("element_bytes", "must be one of 1, 2, 4, 8"));
        }
        Ok(Self {
            model_dim,
            hidden_dim,
            num_experts,
            num_nodes,
            element_bytes,
        })
    }

    pub fn model_dim(&self) -> u64 {
        self.model_dim
    }

    pub fn hidden_dim(&self) -> u64 {
        self.hidden_dim
    }

    pub fn num_experts(&self) -> u64 {
        self.num_experts
    }

    pub fn num_nodes(&self) -> u64 {
        self.num_nodes
    }

    pub fn element_bytes(&self) -> u64 {
        self.element_bytes
    }

    /// Element count of `tokens` rows of a tensor with the given role.
    pub fn tensor_elements(&self, role: TensorRole, tokens: u64) -> u64 {
        tokens * role.width(self)
    }
}

/// Named layer configurations used throughout the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Gpt3Small,
    Gpt3Xl,
    BertLarge,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Gpt3Small, Preset::Gpt3Xl, Preset::BertLarge];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Gpt3Small => "moe-gpt3-s",
            Preset::Gpt3Xl => "moe-gpt3-xl",
            Preset::BertLarge => "moe-bert-l",
        }
    }

    /// (d_model, d_hidden, experts)
    pub fn dims(self) -> (u64, u64, u64) {
        match self {
            Preset::Gpt3Small => (768, 3072, 64),
            Preset::Gpt3Xl => (2048, 8192, 64),
            Preset::BertLarge => (1024, 4096, 64),
        }
    }

    pub fn spec(self, num_nodes: u64) -> Result<ModelSpec> {
        let (m, h, e) = self.dims();
        ModelSpec::new(m, h, e, num_nodes)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::param(
                    "preset",
                    format!("unknown preset `{s}` (expected moe-gpt3-s, moe-gpt3-xl or moe-bert-l)"),
                )
            })
    }
}

/// Ceiling of `tokens / partitions`.
pub fn micro_batch_size(tokens: u64, partitions: u64) -> Result<u64> {
    if tokens == 0 || partitions == 0 || partitions > tokens {
        return Err(Error::InvalidPartitioning { tokens, partitions });
    }
    Ok(tokens.div_ceil(partitions))
}

/// A batch of tokens split into `partitions` micro-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct BatchSpec {
    tokens: u64,
    partitions: u64,
}

impl BatchSpec {
    pub fn new(tokens: u64, partitions: u64) -> Result<Self> {
        micro_batch_size(tokens, partitions)?;
        Ok(Self { tokens, partitions })
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn partitions(&self) -> u64 {
        self.partitions
    }

    pub fn micro_batch_size(&self) -> u64 {
        self.tokens.div_ceil(self.partitions)
    }

    pub fn is_uniform(&self) -> bool {
        self.tokens.is_multiple_of(self.partitions)
    }

    /// Token count of each partition. Sizes differ by at most one and the
    /// larger partitions come first, so every partition is non-empty and
    /// none exceeds [`micro_batch_size`](Self::micro_batch_size).
    pub fn partition_sizes(&self) -> Vec<u64> {
        let base = self.tokens / self.partitions;
        let extra = self.tokens % self.partitions;
        (0..self.partitions)
            .map(|i| if i < extra { base + 1 } else { base })
            .collect()
    }
}

/// The three hardware resources a device overlaps: GeMM compute, the
/// all-to-all collective, and host-device copies. Each runs on its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Compute,
    Collective,
    Copy,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Compute, Stream::Collective, Stream::Copy];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short resource name used in configs: comp, comm, mem.
    pub fn resource(self) -> &'static str {
        match self {
            Stream::Compute => "comp",
            Stream::Collective => "comm",
            Stream::Copy => "mem",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Compute => "compute",
            Stream::Collective => "collective",
            Stream::Copy => "copy",
        }
    }

    fn others(self) -> [Stream; 2] {
        match self {
            Stream::Compute => [Stream::Collective, Stream::Copy],
            Stream::Collective => [Stream::Compute, Stream::Copy],
            Stream::Copy => [Stream::Compute, Stream::Collective],
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small bitset over [`Stream`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct StreamSet(u8);

impl StreamSet {
    pub const EMPTY: StreamSet = StreamSet(0);

    pub fn of(streams: &[Stream]) -> Self {
        streams.iter().fold(Self::EMPTY, |set, s| set.with(*s))
    }

    pub fn with(self, s: Stream) -> Self {
        StreamSet(self.0 | (1 << s.index()))
    }

    pub fn without(self, s: Stream) -> Self {
        StreamSet(self.0 & !(1 << s.index()))
    }

    pub fn contains(self, s: Stream) -> bool {
        self.0 & (1 << s.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Relative speed of each resource given which other resources are busy at
/// the same time. The entry for "nothing else running" is fixed at 1.
///
/// In the usual notation, `get(Collective, {Compute})` is mu_comp,
/// `get(Collective, all)` is mu_all, `get(Copy, all)` is eta_all and the
/// compute row holds sigma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlowdownTable {
    // [stream][code], code bit 0 = first other stream busy, bit 1 = second.
    factors: [[f64; 4]; 3],
}

impl Default for SlowdownTable {
    fn default() -> Self {
        Self::none()
    }
}

impl SlowdownTable {
    /// No interference at all.
    pub fn none() -> Self {
        Self {
            factors: [[1.0; 4]; 3],
        }
    }

    /// Each resource runs at a single fixed factor whenever anything else is
    /// busy.
    pub fn uniform(comp: f64, comm: f64, mem: f64) -> Result<Self> {
        let mut table = Self::none();
        for (stream, value) in Stream::ALL.into_iter().zip([comp, comm, mem]) {
            for code in 1..4 {
                check_factor(stream, code, value)?;
                table.factors[stream.index()][code] = value;
            }
        }
        Ok(table)
    }

    fn code(stream: Stream, others: StreamSet) -> usize {
        let [a, b] = stream.others();
        usize::from(others.contains(a)) | (usize::from(others.contains(b)) << 1)
    }

    /// Multiplier applied to `stream` while the streams in `others` are busy.
    /// `stream` itself is ignored if present in `others`.
    pub fn get(&self, stream: Stream, others: StreamSet) -> f64 {
        self.factors[stream.index()][Self::code(stream, others.without(stream))]
    }

    pub fn set(mut self, stream: Stream, others: StreamSet, value: f64) -> Result<Self> {
        let code = Self::code(stream, others.without(stream));
        if code == 0 {
            if value != 1.0 {
                return Err(Error::param(
                    format!("slowdown.{}", stream.resource()),
                    "the factor with no concurrent streams is fixed at 1",
                ));
            }
            return Ok(self);
        }
        check_factor(stream, code, value)?;
        self.factors[stream.index()][code] = value;
        Ok(self)
    }

    pub fn mu_comp(&self) -> f64 {
        self.get(Stream::Collective, StreamSet::of(&[Stream::Compute]))
    }

    pub fn mu_all(&self) -> f64 {
        self.get(Stream::Collective, StreamSet::of(&Stream::ALL))
    }

    pub fn eta_all(&self) -> f64 {
        self.get(Stream::Copy, StreamSet::of(&Stream::ALL))
    }

    pub fn sigma_comm(&self) -> f64 {
        self.get(Stream::Compute, StreamSet::of(&[Stream::Collective]))
    }

    pub fn sigma_all(&self) -> f64 {
        self.get(Stream::Compute, StreamSet::of(&Stream::ALL))
    }
}

fn code_label(stream: Stream, code: usize) -> String {
    let [a, b] = stream.others();
    match code {
        1 => a.resource().to_string(),
        2 => b.resource().to_string(),
        _ => "all".to_string(),
    }
}

fn check_factor(stream: Stream, code: usize, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(
            format!("slowdown.{}.{}", stream.resource(), code_label(stream, code)),
            format!("must be in (0, 1], got {value}"),
        ))
    }
}

/// Config-file shape of one slowdown row; absent entries default to 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowdownRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all: Option<f64>,
}

/// Config-file shape of a [`SlowdownTable`]: `{comp: {comm, mem, all}, comm: {...}, mem: {...}}`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowdownConfig {
    #[serde(default)]
    pub comp: SlowdownRow,
    #[serde(default)]
    pub comm: SlowdownRow,
    #[serde(default)]
    pub mem: SlowdownRow,
}

impl TryFrom<SlowdownConfig> for SlowdownTable {
    type Error = Error;

    fn try_from(cfg: SlowdownConfig) -> Result<Self> {
        let mut table = SlowdownTable::none();
        for (stream, row) in Stream::ALL.into_iter().zip([cfg.comp, cfg.comm, cfg.mem]) {
            let entries = [
                (Stream::Compute, row.comp),
                (Stream::Collective, row.comm),
                (Stream::Copy, row.mem),
            ];
            for (other, value) in entries {
                let Some(value) = value else { continue };
                if other == stream {
                    return Err(Error::param(
                        format!("slowdown.{}.{}", stream.resource(), other.resource()),
                        "a stream does not interfere with itself",
                    ));
                }
                table = table.set(stream, StreamSet::of(&[other]), value)?;
            }
            if let Some(value) = row.all {
                table = table.set(stream, StreamSet::of(&Stream::ALL), value)?;
            }
        }
        Ok(table)
    }
}

impl From<SlowdownTable> for SlowdownConfig {
    fn from(table: SlowdownTable) -> Self {
        let row = |stream: Stream| {
            let mut row = SlowdownRow {
                all: Some(table.get(stream, StreamSet::of(&Stream::ALL))),
                ..SlowdownRow::default()
            };
            for other in stream.others() {
                let value = Some(table.get(stream, StreamSet::of(&[other])));
                match other {
                    Stream::Compute => row.comp = value,
                    Stream::Collective => row.comm = value,
                    Stream::Copy => row.mem = value,
                }
            }
            row
        };
        SlowdownConfig {
            comp: row(Stream::Compute),
            comm: row(Stream::Collective),
            mem: row(Stream::Copy),
        }
    }
}

impl Serialize for SlowdownTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SlowdownConfig::from(*self).serialize(serializer)
    }
}

/// Stream speeds, interference and per-launch overheads of one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HardwareProfile {
    w_comp: f64,
    w_comm: f64,
    w_mem: f64,
    slowdown: SlowdownTable,
    launch_overhead: f64,
    launch_overrides: [Option<f64>; 3],
    compute_saturation: f64,
}

impl HardwareProfile {
    /// Profile with no interference, no launch overhead and compute saturated
    /// from a single token.
    pub fn new(w_comp: f64, w_comm: f64, w_mem: f64) -> Result<Self> {
        for (field, value) in [("w_comp", w_comp), ("w_comm", w_comm), ("w_mem", w_mem)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::param(field, format!("must be positive, got {value}")));
            }
        }
        Ok(Self {
            w_comp,
            w_comm,
            w_mem,
            slowdown: SlowdownTable::none(),
            launch_overhead: 0.0,
            launch_overrides: [None; 3],
            compute_saturation: 1.0,
        })
    }

    pub fn with_slowdown(mut self, slowdown: SlowdownTable) -> Self {
        self.slowdown = slowdown;
        self
    }

    pub fn with_launch_overhead(mut self, seconds: f64) -> Result<Self> {
        check_overhead("launch_overhead", seconds)?;
        self.launch_overhead = seconds;
        Ok(self)
    }

    /// Overrides the launch overhead for ops on one stream.
    pub fn with_launch_override(mut self, stream: Stream, seconds: f64) -> Result<Self> {
        check_overhead(&format!("launch_overrides.{}", stream.resource()), seconds)?;
        self.launch_overrides[stream.index()] = Some(seconds);
        Ok(self)
    }

    pub fn with_compute_saturation(mut self, tokens: f64) -> Result<Self> {
        if !(tokens.is_finite() && tokens >= 1.0) {
            return Err(Error::param(
                "compute_saturation",
                format!("must be at least 1, got {tokens}"),
            ));
        }
        self.compute_saturation = tokens;
        Ok(self)
    }

    /// Same profile with every base speed multiplied by `k`.
    pub fn scaled(mut self, k: f64) -> Result<Self> {
        Self::new(self.w_comp * k, self.w_comm * k, self.w_mem * k)?;
        self.w_comp *= k;
        self.w_comm *= k;
        self.w_mem *= k;
        Ok(self)
    }

    pub fn w_comp(&self) -> f64 {
        self.w_comp
    }

    pub fn w_comm(&self) -> f64 {
        self.w_comm
    }

    pub fn w_mem(&self) -> f64 {
        self.w_mem
    }

    pub fn speed(&self, stream: Stream) -> f64 {
        match stream {
            Stream::Compute => self.w_comp,
            Stream::Collective => self.w_comm,
            Stream::Copy => self.w_mem,
        }
    }

    pub fn slowdown(&self) -> &SlowdownTable {
        &self.slowdown
    }

    pub fn launch_overhead(&self) -> f64 {
        self.launch_overhead
    }

    pub fn launch_overhead_for(&self, stream: Stream) -> f64 {
        self.launch_overrides[stream.index()].unwrap_or(self.launch_overhead)
    }

    pub fn compute_saturation(&self) -> f64 {
        self.compute_saturation
    }

    /// Fraction of full compute rate reached with micro-batches of `tokens`.
    pub fn saturation_factor(&self, tokens: u64) -> f64 {
        (tokens as f64 / self.compute_saturation).min(1.0)
    }

    /// W_comp / W_comm.
    pub fn alpha(&self) -> f64 {
        self.w_comp / self.w_comm
    }

    /// W_comp / W_mem.
    pub fn beta(&self) -> f64 {
        self.w_comp / self.w_mem
    }
}

fn check_overhead(field: &str, seconds: f64) -> Result<()> {
    if seconds.is_finite() && seconds >= 0.0 {
        Ok(())
    } else {
        Err(Error::param(field, format!("must be non-negative, got {seconds}")))
    }
}

/// How an overwritten tensor is brought back for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Restore {
    Kept,
    Offload,
    Communicate,
    Recompute,
}

/// Which concurrency set the cost model assumes for the collective stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CommMode {
    /// Only compute overlaps communication.
    WithCompute,
    /// Compute and copies overlap communication.
    WithAll,
}

/// Memory reuse strategy. `NoReuse` keeps every partition resident; S1-S4
/// share partition buffers and differ in how T_DI and T_M are restored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ReuseStrategy {
    #[serde(rename = "none")]
    NoReuse,
    S1,
    S2,
    S3,
    S4,
}

impl ReuseStrategy {
    pub const ALL: [ReuseStrategy; 5] = [
        ReuseStrategy::NoReuse,
        ReuseStrategy::S1,
        ReuseStrategy::S2,
        ReuseStrategy::S3,
        ReuseStrategy::S4,
    ];

    pub const REUSING: [ReuseStrategy; 4] = [
        ReuseStrategy::S1,
        ReuseStrategy::S2,
        ReuseStrategy::S3,
        ReuseStrategy::S4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReuseStrategy::NoReuse => "none",
            ReuseStrategy::S1 => "S1",
            ReuseStrategy::S2 => "S2",
            ReuseStrategy::S3 => "S3",
            ReuseStrategy::S4 => "S4",
        }
    }

    pub fn reuses_memory(self) -> bool {
        self != ReuseStrategy::NoReuse
    }

    pub fn restore_dispatched(self) -> Restore {
        match self {
            ReuseStrategy::NoReuse => Restore::Kept,
            ReuseStrategy::S1 | ReuseStrategy::S3 => Restore::Offload,
            ReuseStrategy::S2 | ReuseStrategy::S4 => Restore::Communicate,
        }
    }

    pub fn restore_hidden(self) -> Restore {
        match self {
            ReuseStrategy::NoReuse => Restore::Kept,
            ReuseStrategy::S1 | ReuseStrategy::S2 => Restore::Offload,
            ReuseStrategy::S3 | ReuseStrategy::S4 => Restore::Recompute,
        }
    }

    /// Forward workload in (GeMM, all-to-all, copy) base units.
    pub fn q_fw(self) -> [u32; 3] {
        match self {
            ReuseStrategy::NoReuse => [2, 2, 0],
            ReuseStrategy::S1 => [2, 2, 5],
            ReuseStrategy::S2 => [2, 2, 4],
            ReuseStrategy::S3 => [2, 2, 1],
            ReuseStrategy::S4 => [2, 2, 0],
        }
    }

    /// Backward workload in (GeMM, all-to-all, copy) base units.
    pub fn q_bw(self) -> [u32; 3] {
        match self {
            ReuseStrategy::NoReuse => [4, 2, 0],
            ReuseStrategy::S1 => [4, 2, 5],
            ReuseStrategy::S2 => [4, 3, 4],
            ReuseStrategy::S3 => [5, 2, 1],
            ReuseStrategy::S4 => [5, 3, 0],
        }
    }

    pub fn q(self, direction: Direction) -> [u32; 3] {
        match direction {
            Direction::Forward => self.q_fw(),
            Direction::Backward => self.q_bw(),
        }
    }

    pub fn comm_mode(self) -> CommMode {
        match self {
            ReuseStrategy::NoReuse | ReuseStrategy::S4 => CommMode::WithCompute,
            _ => CommMode::WithAll,
        }
    }

    /// Whether the copy stream is used, so eta_all applies.
    pub fn uses_copy_stream(self) -> bool {
        self.comm_mode() == CommMode::WithAll
    }
}

impl fmt::Display for ReuseStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReuseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "noreuse" => Ok(ReuseStrategy::NoReuse),
            "s1" => Ok(ReuseStrategy::S1),
            "s2" => Ok(ReuseStrategy::S2),
            "s3" => Ok(ReuseStrategy::S3),
            "s4" => Ok(ReuseStrategy::S4),
            _ => Err(Error::param(
                "strategy",
                format!("unknown strategy `{s}` (expected none, S1, S2, S3 or S4)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// The five tensors flowing through an MoE layer: input, dispatched input,
/// hidden, expert output before combine, and output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TensorRole {
    #[serde(rename = "T_I")]
    Input,
    #[serde(rename = "T_DI")]
    Dispatched,
    #[serde(rename = "T_M")]
    Hidden,
    #[serde(rename = "T_DO")]
    ExpertOut,
    #[serde(rename = "T_O")]
    Output,
}

impl TensorRole {
    pub const ALL: [TensorRole; 5] = [
        TensorRole::Input,
        TensorRole::Dispatched,
        TensorRole::Hidden,
        TensorRole::ExpertOut,
        TensorRole::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorRole::Input => "T_I",
            TensorRole::Dispatched => "T_DI",
            TensorRole::Hidden => "T_M",
            TensorRole::ExpertOut => "T_DO",
            TensorRole::Output => "T_O",
        }
    }

    /// Row width: H for the hidden tensor, M for everything else.
    pub fn width(self, spec: &ModelSpec) -> u64 {
        match self {
            TensorRole::Hidden => spec.hidden_dim(),
            _ => spec.model_dim(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_batch_examples() {
        assert_eq!(micro_batch_size(8192, 4).unwrap(), 2048);
        assert_eq!(micro_batch_size(10, 3).unwrap(), 4);
        assert_eq!(micro_batch_size(4096, 1).unwrap(), 4096);
    }

    #[test]
    fn micro_batch_rejects_bad_partitioning() {
        assert!(matches!(
            micro_batch_size(4, 5),
            Err(Error::InvalidPartitioning { tokens: 4, partitions: 5 })
        ));
        assert!(micro_batch_size(4, 0).is_err());
        assert!(micro_batch_size(0, 1).is_err());
    }

    #[test]
    fn partition_sizes_cover_batch() {
        let b = BatchSpec::new(10, 6).unwrap();
        let sizes = b.partition_sizes();
        assert_eq!(sizes, vec![2, 2, 2, 2, 1, 1]);
        assert_eq!(sizes.iter().sum::<u64>(), 10);
        assert!(sizes.iter().all(|&s| s >= 1 && s <= b.micro_batch_size()));
        assert_eq!(BatchSpec::new(8192, 4).unwrap().partition_sizes(), vec![2048; 4]);
    }

    #[test]
    fn model_spec_invariants() {
        assert!(ModelSpec::new(768, 3072, 64, 8).is_ok());
        assert!(ModelSpec::new(0, 3072, 64, 8).is_err());
        assert!(ModelSpec::new(768, 3072, 64, 5).is_err());
        assert!(ModelSpec::with_element_bytes(768, 3072, 64, 8, 3).is_err());
    }

    #[test]
    fn presets_match_layer_table() {
        let s = Preset::from_str("moe-gpt3-s").unwrap().spec(8).unwrap();
        assert_eq!((s.model_dim(), s.hidden_dim(), s.num_experts()), (768, 3072, 64));
        let xl = Preset::Gpt3Xl.spec(8).unwrap();
        assert_eq!((xl.model_dim(), xl.hidden_dim(), xl.num_experts()), (2048, 8192, 64));
        let bert = Preset::from_str("moe-bert-l").unwrap().spec(64).unwrap();
        assert_eq!((bert.model_dim(), bert.hidden_dim(), bert.num_experts()), (1024, 4096, 64));
        assert!(Preset::from_str("moe-gpt4").is_err());
    }

    #[test]
    fn strategy_table_is_exact() {
        let expected: [(ReuseStrategy, [u32; 3], [u32; 3]); 5] = [
            (ReuseStrategy::NoReuse, [2, 2, 0], [4, 2, 0]),
            (ReuseStrategy::S1, [2, 2, 5], [4, 2, 5]),
            (ReuseStrategy::S2, [2, 2, 4], [4, 3, 4]),
            (ReuseStrategy::S3, [2, 2, 1], [5, 2, 1]),
            (ReuseStrategy::S4, [2, 2, 0], [5, 3, 0]),
        ];
        for (s, fw, bw) in expected {
            assert_eq!(s.q_fw(), fw, "{s} forward");
            assert_eq!(s.q_bw(), bw, "{s} backward");
        }
    }

    #[test]
    fn copy_units_decompose_into_restored_tensors() {
        // one unit per offloaded T_DI, four per offloaded T_M
        for s in ReuseStrategy::ALL {
            let di = u32::from(s.restore_dispatched() == Restore::Offload);
            let m = 4 * u32::from(s.restore_hidden() == Restore::Offload);
            assert_eq!(s.q_fw()[2], di + m, "{s}");
            assert_eq!(s.q_bw()[2], di + m, "{s}");
            let recomm = u32::from(s.restore_dispatched() == Restore::Communicate);
            let recomp = u32::from(s.restore_hidden() == Restore::Recompute);
            assert_eq!(s.q_bw()[1], 2 + recomm, "{s}");
            assert_eq!(s.q_bw()[0], 4 + recomp, "{s}");
        }
    }

    #[test]
    fn slowdown_lookup_and_bounds() {
        let t = SlowdownTable::none()
            .set(Stream::Collective, StreamSet::of(&[Stream::Compute]), 0.8)
            .unwrap()
            .set(Stream::Collective, StreamSet::of(&Stream::ALL), 0.6)
            .unwrap();
        assert_eq!(t.mu_comp(), 0.8);
        assert_eq!(t.mu_all(), 0.6);
        assert_eq!(t.get(Stream::Collective, StreamSet::EMPTY), 1.0);
        assert_eq!(t.get(Stream::Collective, StreamSet::of(&[Stream::Collective])), 1.0);
        assert_eq!(t.get(Stream::Collective, StreamSet::of(&[Stream::Copy])), 1.0);
        assert!(t.set(Stream::Copy, StreamSet::of(&[Stream::Compute]), 1.5).is_err());
        assert!(t.set(Stream::Copy, StreamSet::of(&[Stream::Compute]), 0.0).is_err());
        assert!(t.set(Stream::Copy, StreamSet::EMPTY, 0.9).is_err());
    }

    #[test]
    fn slowdown_config_round_trip() {
        let t = SlowdownTable::uniform(1.0, 0.7, 0.5).unwrap();
        let back = SlowdownTable::try_from(SlowdownConfig::from(t)).unwrap();
        assert_eq!(t, back);
        let bad = SlowdownConfig {
            comm: SlowdownRow {
                comm: Some(0.5),
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(SlowdownTable::try_from(bad).is_err());
    }

    #[test]
    fn hardware_validation() {
        let err = HardwareProfile::new(-1.0, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { ref field, .. } if field == "w_comp"));
        let hw = HardwareProfile::new(1e12, 1e10, 2e10).unwrap();
        assert!(hw.with_launch_overhead(-1.0).is_err());
        assert!(hw.with_compute_saturation(0.5).is_err());
        assert_eq!(hw.alpha(), 100.0);
        assert_eq!(hw.beta(), 50.0);
        let hw = hw.with_compute_saturation(1024.0).unwrap();
        assert_eq!(hw.saturation_factor(512), 0.5);
        assert_eq!(hw.saturation_factor(4096), 1.0);
    }

    #[test]
    fn tensor_shapes() {
        let spec = ModelSpec::new(768, 3072, 64, 8).unwrap();
        assert_eq!(spec.tensor_elements(TensorRole::Hidden, 10), 30720);
        for role in [TensorRole::Input, TensorRole::Dispatched, TensorRole::ExpertOut, TensorRole::Output] {
            assert_eq!(spec.tensor_elements(role, 10), 7680);
        }
    }
}
