//! Closed-form memory footprint of one MoE layer.
//!
//! All quantities are element counts; bytes only appear in [`MemoryReport`].
//! Gating/routing tensors are ignored, they are one to two orders of
//! magnitude smaller than the activations.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{micro_batch_size, ModelSpec};

/// Parameters, gradients and the two Adam moments of the gate and one expert.
pub fn mem_model_states(spec: &ModelSpec) -> u64 {
    let m = spec.model_dim();
    4 * (spec.num_experts() * m + 2 * spec.hidden_dim() * m)
}

fn check_tokens(tokens: u64) -> Result<()> {
    if tokens == 0 {
        return Err(Error::InvalidPartitioning {
            tokens,
            partitions: 1,
        });
    }
    Ok(())
}

/// Activations kept for backward without pipelining: four (B, M) tensors and
/// one (B, H).
pub fn mem_activations_baseline(spec: &ModelSpec, tokens: u64) -> Result<u64> {
    check_tokens(tokens)?;
    Ok(4 * tokens * spec.model_dim() + tokens * spec.hidden_dim())
}

/// Peak gradient buffers when ops run in sequence: two adjacent tensors.
pub fn mem_buffers_baseline(spec: &ModelSpec, tokens: u64) -> Result<u64> {
    check_tokens(tokens)?;
    Ok(tokens * spec.model_dim() + tokens * spec.hidden_dim())
}

/// (activations, buffers) under micro-batch pipelining. With partitions in
/// flight all five gradient tensors are live, so buffers match activations.
pub fn mem_pipeline(spec: &ModelSpec, tokens: u64) -> Result<(u64, u64)> {
    let act = mem_activations_baseline(spec, tokens)?;
    Ok((act, act))
}

/// Per-category saving (activations, and separately buffers) from sharing
/// partition buffers: `B * (2M (n-2)/n + H (n-1)/n)`, floored.
pub fn mem_reuse_savings(spec: &ModelSpec, tokens: u64, partitions: u64) -> Result<u64> {
    if partitions < 2 {
        return Err(Error::ReuseNotApplicable { partitions });
    }
    micro_batch_size(tokens, partitions)?;
    let (b, m, h, n) = (
        u128::from(tokens),
        u128::from(spec.model_dim()),
        u128::from(spec.hidden_dim()),
        u128::from(partitions),
    );
    let numerator = b * (2 * m * (n - 2) + h * (n - 1));
    Ok((numerator / n) as u64)
}

/// Fraction of the pipelined footprint removed by memory reuse.
pub fn mem_saving_ratio(spec: &ModelSpec, tokens: u64, partitions: u64) -> Result<f64> {
    let saved = mem_reuse_savings(spec, tokens, partitions)?;
    let (act, buf) = mem_pipeline(spec, tokens)?;
    let total = mem_model_states(spec) + act + buf;
    Ok((2 * saved) as f64 / total as f64)
}

/// Footprint split into its three categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub model_states: u64,
    pub activations: u64,
    pub buffers: u64,
    pub total: u64,
    pub model_states_bytes: u64,
    pub activations_bytes: u64,
    pub buffers_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    pub fn new(spec: &ModelSpec, model_states: u64, activations: u64, buffers: u64) -> Self {
        let bytes = spec.element_bytes();
        let total = model_states + activations + buffers;
        Self {
            model_states,
            activations,
            buffers,
            total,
            model_states_bytes: model_states * bytes,
            activations_bytes: activations * bytes,
            buffers_bytes: buffers * bytes,
            total_bytes: total * bytes,
        }
    }

    /// Sequential execution, no partitions.
    pub fn baseline(spec: &ModelSpec, tokens: u64) -> Result<Self> {
        Ok(Self::new(
            spec,
            mem_model_states(spec),
            mem_activations_baseline(spec, tokens)?,
            mem_buffers_baseline(spec, tokens)?,
        ))
    }

    pub fn pipelined(spec: &ModelSpec, tokens: u64) -> Result<Self> {
        let (act, buf) = mem_pipeline(spec, tokens)?;
        Ok(Self::new(spec, mem_model_states(spec), act, buf))
    }

    pub fn reusing(spec: &ModelSpec, tokens: u64, partitions: u64) -> Result<Self> {
        let saved = mem_reuse_savings(spec, tokens, partitions)?;
        let (act, buf) = mem_pipeline(spec, tokens)?;
        Ok(Self::new(spec, mem_model_states(spec), act - saved, buf - saved))
    }
}
