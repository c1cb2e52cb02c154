use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a generated batch-size sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchDistribution {
    /// Uniform over `b_min, b_min + step, ...` up to `b_max`.
    Uniform { step: u64 },
    /// Pareto with scale `b_min` and the given shape, truncated at `b_max`
    /// and rounded down onto the same grid as `Uniform`.
    HeavyTailed { shape: f64, step: u64 },
}

impl BatchDistribution {
    fn step(&self) -> u64 {
        match *self {
            BatchDistribution::Uniform { step } | BatchDistribution::HeavyTailed { step, .. } => step,
        }
    }
}

/// Deterministic sequence of `iterations` batch sizes in `[b_min, b_max]`.
pub fn generate_workload(
    seed: u64,
    iterations: usize,
    b_min: u64,
    b_max: u64,
    distribution: BatchDistribution,
) -> Result<Vec<u64>> {
    if b_min == 0 || b_min > b_max {
        return Err(Error::InvalidWorkload(format!(
            "need 1 <= b_min <= b_max, got b_min = {b_min}, b_max = {b_max}"
        )));
    }
    if iterations == 0 {
        return Err(Error::InvalidWorkload("iterations must be at least 1".into()));
    }
    let step = distribution.step();
    if step == 0 {
        return Err(Error::InvalidWorkload("grid step must be positive".into()));
    }
    let points = (b_max - b_min) / step + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match distribution {
        BatchDistribution::Uniform { .. } => Ok((0..iterations)
            .map(|_| b_min + step * rng.random_range(0..points))
            .collect()),
        BatchDistribution::HeavyTailed { shape, .. } => {
            let pareto = Pareto::new(b_min as f64, shape)
                .map_err(|e| Error::InvalidWorkload(format!("heavy-tailed shape {shape}: {e}")))?;
            Ok((0..iterations)
                .map(|_| {
                    let x = pareto.sample(&mut rng).min(b_max as f64);
                    let k = ((x - b_min as f64) / step as f64).floor() as u64;
                    b_min + step * k.min(points - 1)
                })
                .collect())
        }
    }
}
