//! Online choice of the partition count for dynamic batch sizes.
//!
//! The optimal count is assumed to grow with the batch size, so batch sizes
//! seen so far are grouped into disjoint ranges that share a count. A new
//! batch size triggers a search only when no range covers it.

mod index;
mod workload;

pub use index::{GranRange, GranularityIndex, RecordOutcome};
pub use workload::{generate_workload, BatchDistribution};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{micro_batch_size, BatchSpec, HardwareProfile, ModelSpec, ReuseStrategy};
use crate::pipesim::{build_training_step, simulate};

/// Produces one timing sample for a configuration.
pub trait Measure {
    fn measure(&mut self, spec: &ModelSpec, hw: &HardwareProfile, batch: &BatchSpec, strategy: ReuseStrategy)
        -> Result<f64>;
}

/// Makespan of a simulated forward plus backward step.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatorMeasure;

impl Measure for SimulatorMeasure {
    fn measure(
        &mut self,
        spec: &ModelSpec,
        hw: &HardwareProfile,
        batch: &BatchSpec,
        strategy: ReuseStrategy,
    ) -> Result<f64> {
        let dag = build_training_step(spec, batch, strategy, strategy.reuses_memory())?;
        Ok(simulate(&dag, hw).makespan())
    }
}

/// Simulator timings scaled by `1 + N(0, rel_sd)`, seeded.
#[derive(Debug, Clone)]
pub struct NoisyMeasure {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl NoisyMeasure {
    pub fn new(seed: u64, rel_sd: f64) -> Result<Self> {
        if !(rel_sd.is_finite() && rel_sd >= 0.0) {
            return Err(Error::param("noise", format!("relative deviation must be >= 0, got {rel_sd}")));
        }
        let noise = Normal::new(0.0, rel_sd).map_err(|e| Error::param("noise", e.to_string()))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
        })
    }
}

impl Measure for NoisyMeasure {
    fn measure(
        &mut self,
        spec: &ModelSpec,
        hw: &HardwareProfile,
        batch: &BatchSpec,
        strategy: ReuseStrategy,
    ) -> Result<f64> {
        let clean = SimulatorMeasure.measure(spec, hw, batch, strategy)?;
        Ok(clean * (1.0 + self.noise.sample(&mut self.rng)).max(0.0))
    }
}

/// Candidate partition counts and how often each is timed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialBudget {
    candidates: Vec<u64>,
    trials: usize,
    min_micro_batch: u64,
}

impl Default for TrialBudget {
    fn default() -> Self {
        Self {
            candidates: vec![1, 2, 4, 8, 16],
            trials: 1,
            min_micro_batch: 1,
        }
    }
}

impl TrialBudget {
    pub fn new(mut candidates: Vec<u64>, trials: usize) -> Result<Self> {
        candidates.sort_unstable();
        candidates.dedup();
        if candidates.is_empty() || candidates[0] == 0 {
            return Err(Error::param("candidates", "need at least one count, all >= 1"));
        }
        if trials == 0 {
            return Err(Error::param("trials", "must be at least 1"));
        }
        Ok(Self {
            candidates,
            trials,
            min_micro_batch: 1,
        })
    }

    /// Skip counts whose micro-batches would hold fewer than `tokens` tokens.
    pub fn with_min_micro_batch(mut self, tokens: u64) -> Self {
        self.min_micro_batch = tokens.max(1);
        self
    }

    pub fn candidates(&self) -> &[u64] {
        &self.candidates
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    pub fn min_micro_batch(&self) -> u64 {
        self.min_micro_batch
    }

    /// Counts that can be timed for a batch of `tokens` under `strategy`.
    pub fn feasible(&self, tokens: u64, strategy: ReuseStrategy) -> Vec<u64> {
        self.candidates
            .iter()
            .copied()
            .filter(|&n| n <= tokens)
            .filter(|&n| !(strategy.reuses_memory() && n < 2))
            .filter(|&n| n == 1 || micro_batch_size(tokens, n).is_ok_and(|b| b >= self.min_micro_batch))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub n: u64,
    /// Mean time of the chosen count.
    pub makespan: f64,
    /// (count, mean time) for every feasible candidate.
    pub timings: Vec<(u64, f64)>,
    pub trials: usize,
}

/// Times every feasible candidate and returns the fastest on average,
/// preferring the smaller count on ties.
pub fn search_best_gran(
    tokens: u64,
    spec: &ModelSpec,
    hw: &HardwareProfile,
    strategy: ReuseStrategy,
    budget: &TrialBudget,
    measure: &mut dyn Measure,
) -> Result<SearchOutcome> {
    if tokens == 0 {
        return Err(Error::NoCandidate { tokens });
    }
    let mut timings = Vec::new();
    let mut trials = 0;
    for n in budget.feasible(tokens, strategy) {
        let batch = BatchSpec::new(tokens, n)?;
        let mut sum = 0.0;
        for _ in 0..budget.trials {
            sum += measure.measure(spec, hw, &batch, strategy)?;
            trials += 1;
        }
        timings.push((n, sum / budget.trials as f64));
    }
    // strict comparison keeps the first (smallest) count on ties
    let (n, makespan) = timings
        .iter()
        .copied()
        .fold(None, |best: Option<(u64, f64)>, (n, t)| match best {
            Some((_, bt)) if bt <= t => best,
            _ => Some((n, t)),
        })
        .ok_or(Error::NoCandidate { tokens })?;
    Ok(SearchOutcome {
        n,
        makespan,
        timings,
        trials,
    })
}

/// How a partition count was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Cache,
    Range,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub tokens: u64,
    pub n: u64,
    pub source: DecisionSource,
    pub trials: usize,
    pub record: Option<RecordOutcome>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TunerStats {
    pub calls: u64,
    pub cache_hits: u64,
    pub range_hits: u64,
    pub searches: u64,
    pub trials: u64,
    pub extensions: u64,
}

impl TunerStats {
    pub fn hit_rate(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            (self.cache_hits + self.range_hits) as f64 / self.calls as f64
        }
    }
}

/// Index plus everything a search needs. Calls must be serialized.
pub struct Tuner<M: Measure = SimulatorMeasure> {
    index: GranularityIndex,
    spec: ModelSpec,
    hw: HardwareProfile,
    strategy: ReuseStrategy,
    budget: TrialBudget,
    measure: M,
    stats: TunerStats,
}

impl Tuner<SimulatorMeasure> {
    pub fn new(spec: ModelSpec, hw: HardwareProfile, strategy: ReuseStrategy, budget: TrialBudget) -> Self {
        Self::with_measure(spec, hw, strategy, budget, SimulatorMeasure)
    }
}

impl<M: Measure> Tuner<M> {
    pub fn with_measure(
        spec: ModelSpec,
        hw: HardwareProfile,
        strategy: ReuseStrategy,
        budget: TrialBudget,
        measure: M,
    ) -> Self {
        Self {
            index: GranularityIndex::new(),
            spec,
            hw,
            strategy,
            budget,
            measure,
            stats: TunerStats::default(),
        }
    }

    pub fn index(&self) -> &GranularityIndex {
        &self.index
    }

    pub fn stats(&self) -> TunerStats {
        self.stats
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn hardware(&self) -> &HardwareProfile {
        &self.hw
    }

    pub fn strategy(&self) -> ReuseStrategy {
        self.strategy
    }

    /// Partition count for a batch of `tokens`: exact cache, then covering
    /// range, else a search whose result extends or adds a range. Every
    /// answer not served from the cache is cached.
    pub fn adaptive_granularity(&mut self, tokens: u64) -> Result<Decision> {
        self.stats.calls += 1;
        if let Some(n) = self.index.cached(tokens) {
            self.stats.cache_hits += 1;
            return Ok(self.decision(tokens, n, DecisionSource::Cache, 0, None));
        }
        if let Some(range) = self.index.find(tokens) {
            self.stats.range_hits += 1;
            self.index.remember(tokens, range.n);
            return Ok(self.decision(tokens, range.n, DecisionSource::Range, 0, None));
        }
        let found = search_best_gran(tokens, &self.spec, &self.hw, self.strategy, &self.budget, &mut self.measure)?;
        self.stats.searches += 1;
        self.stats.trials += found.trials as u64;
        let record = self.index.record(tokens, found.n);
        if matches!(record, RecordOutcome::Extended { .. }) {
            self.stats.extensions += 1;
        }
        Ok(self.decision(tokens, found.n, DecisionSource::Search, found.trials, Some(record)))
    }

    fn decision(
        &self,
        tokens: u64,
        n: u64,
        source: DecisionSource,
        trials: usize,
        record: Option<RecordOutcome>,
    ) -> Decision {
        Decision {
            tokens,
            n,
            source,
            trials,
            record,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// (batch size, best count) in ascending batch order.
    pub optimal: Vec<(u64, u64)>,
    pub monotone: bool,
}

/// Searches every batch size independently and checks that the best count
/// never decreases as batches grow.
pub fn monotonicity_probe(
    batches: &[u64],
    spec: &ModelSpec,
    hw: &HardwareProfile,
    strategy: ReuseStrategy,
    budget: &TrialBudget,
    measure: &mut dyn Measure,
) -> Result<MonotonicityReport> {
    let mut sorted = batches.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let optimal = sorted
        .into_iter()
        .map(|b| Ok((b, search_best_gran(b, spec, hw, strategy, budget, measure)?.n)))
        .collect::<Result<Vec<_>>>()?;
    let monotone = optimal.windows(2).all(|w| w[0].1 <= w[1].1);
    Ok(MonotonicityReport { optimal, monotone })
}
