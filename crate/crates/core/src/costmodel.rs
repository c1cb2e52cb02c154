//! Analytical per-micro-batch cost of one pipeline stage and the choice of
//! memory reuse strategy.
//!
//! A stage costs as much as its slowest stream: each stream's time is its
//! workload (strategy Q vector times base volume) over its effective speed.

use serde::Serialize;

use crate::model::{CommMode, Direction, HardwareProfile, ModelSpec, ReuseStrategy, Stream};

/// Work of one micro-batch of `b` tokens per unit of the Q vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BaseVolumes {
    /// One GeMM, b*H*M element-operations.
    pub comp: u64,
    /// One all-to-all, b*M elements.
    pub comm: u64,
    /// One T_DI-sized copy, b*M elements.
    pub mem: u64,
}

pub fn base_volumes(spec: &ModelSpec, b: u64) -> BaseVolumes {
    let m = spec.model_dim();
    BaseVolumes {
        comp: b * spec.hidden_dim() * m,
        comm: b * m,
        mem: b * m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub direction: Direction,
    pub t_comp: f64,
    pub t_comm: f64,
    pub t_mem: f64,
    pub c_total: f64,
}

impl CostBreakdown {
    pub fn time(&self, stream: Stream) -> f64 {
        match stream {
            Stream::Compute => self.t_comp,
            Stream::Collective => self.t_comm,
            Stream::Copy => self.t_mem,
        }
    }

    /// Stream that determines the stage time (first one on ties).
    pub fn bottleneck(&self) -> Stream {
        Stream::ALL
            .into_iter()
            .fold(Stream::Compute, |best, s| if self.time(s) > self.time(best) { s } else { best })
    }
}

/// Effective (sigma, mu, eta) the strategy runs under.
pub fn interference_factors(hw: &HardwareProfile, strategy: ReuseStrategy) -> (f64, f64, f64) {
    let table = hw.slowdown();
    match strategy.comm_mode() {
        CommMode::WithCompute => (table.sigma_comm(), table.mu_comp(), 1.0),
        CommMode::WithAll => (table.sigma_all(), table.mu_all(), table.eta_all()),
    }
}

/// Per-partition cost of one direction of one MoE layer. Uses the exact
/// three-way max rather than the alpha/beta approximation, which drops the
/// H factor of the compute volume.
pub fn stage_cost(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    b: u64,
    strategy: ReuseStrategy,
    direction: Direction,
) -> CostBreakdown {
    let v = base_volumes(spec, b);
    let [q1, q2, q3] = strategy.q(direction).map(f64::from);
    let (sigma, mu, eta) = interference_factors(hw, strategy);
    let t_comp = q1 * v.comp as f64 / (sigma * hw.w_comp() * hw.saturation_factor(b));
    let t_comm = q2 * v.comm as f64 / (mu * hw.w_comm());
    let t_mem = q3 * v.mem as f64 / (eta * hw.w_mem());
    CostBreakdown {
        direction,
        t_comp,
        t_comm,
        t_mem,
        c_total: t_comp.max(t_comm).max(t_mem),
    }
}

/// Relative weight of the two passes in the selection objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PassWeights {
    pub forward: f64,
    pub backward: f64,
}

impl Default for PassWeights {
    fn default() -> Self {
        Self {
            forward: 1.0,
            backward: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategyCost {
    pub strategy: ReuseStrategy,
    pub forward: CostBreakdown,
    pub backward: CostBreakdown,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyPlan {
    pub chosen: ReuseStrategy,
    pub alpha: f64,
    pub beta: f64,
    /// Every strategy including `NoReuse`, which is listed for comparison
    /// only and never chosen.
    pub candidates: Vec<StrategyCost>,
}

impl StrategyPlan {
    pub fn cost_of(&self, strategy: ReuseStrategy) -> &StrategyCost {
        self.candidates
            .iter()
            .find(|c| c.strategy == strategy)
            .expect("plan covers every strategy")
    }

    pub fn chosen_cost(&self) -> &StrategyCost {
        self.cost_of(self.chosen)
    }
}

pub fn strategy_cost(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    b: u64,
    strategy: ReuseStrategy,
    weights: PassWeights,
) -> StrategyCost {
    let forward = stage_cost(spec, hw, b, strategy, Direction::Forward);
    let backward = stage_cost(spec, hw, b, strategy, Direction::Backward);
    StrategyCost {
        strategy,
        forward,
        backward,
        total: weights.forward * forward.c_total + weights.backward * backward.c_total,
    }
}

/// Cheapest reusing strategy with forward and backward weighted equally.
pub fn select_strategy(spec: &ModelSpec, hw: &HardwareProfile, b: u64) -> StrategyPlan {
    select_strategy_weighted(spec, hw, b, PassWeights::default())
}

pub fn select_strategy_weighted(
    spec: &ModelSpec,
    hw: &HardwareProfile,
    b: u64,
    weights: PassWeights,
) -> StrategyPlan {
    let candidates: Vec<StrategyCost> = ReuseStrategy::ALL
        .into_iter()
        .map(|s| strategy_cost(spec, hw, b, s, weights))
        .collect();
    let reusing: Vec<(ReuseStrategy, f64)> = candidates
        .iter()
        .filter(|c| c.strategy.reuses_memory())
        .map(|c| (c.strategy, c.total))
        .collect();
    StrategyPlan {
        chosen: cheapest(&reusing),
        alpha: hw.alpha(),
        beta: hw.beta(),
        candidates,
    }
}

const TIE_ORDER: [ReuseStrategy; 4] = [
    ReuseStrategy::S4,
    ReuseStrategy::S3,
    ReuseStrategy::S2,
    ReuseStrategy::S1,
];

/// Argmin with ties going to the strategy with the least host-copy traffic:
/// S4, then S3, S2, S1.
pub(crate) fn cheapest(costs: &[(ReuseStrategy, f64)]) -> ReuseStrategy {
    let min = costs.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min);
    let tol = min.abs() * 1e-12;
    TIE_ORDER
        .into_iter()
        .find(|s| costs.iter().any(|(cs, c)| cs == s && *c <= min + tol))
        .expect("at least one reusing strategy")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Preset, SlowdownTable, StreamSet};

    fn gpt3_s() -> ModelSpec {
        Preset::Gpt3Small.spec(8).unwrap()
    }

    fn synthetic() -> HardwareProfile {
        let slow = SlowdownTable::none()
            .set(Stream::Collective, StreamSet::of(&[Stream::Compute]), 0.9)
            .unwrap();
        HardwareProfile::new(1e12, 1e10, 2e10)
            .unwrap()
            .with_slowdown(slow)
            .with_compute_saturation(1024.0)
            .unwrap()
    }

    #[test]
    fn volumes() {
        let v = base_volumes(&gpt3_s(), 1024);
        assert_eq!((v.comp, v.comm, v.mem), (2_415_919_104, 786_432, 786_432));
        let unit = ModelSpec::new(1, 1, 1, 1).unwrap();
        let v = base_volumes(&unit, 1);
        assert_eq!((v.comp, v.comm, v.mem), (1, 1, 1));
        let v = base_volumes(&Preset::Gpt3Xl.spec(8).unwrap(), 2048);
        assert_eq!((v.comp, v.comm, v.mem), (34_359_738_368, 4_194_304, 4_194_304));
    }

    #[test]
    fn stage_cost_hand_evaluated() {
        let c = stage_cost(&gpt3_s(), &synthetic(), 1024, ReuseStrategy::NoReuse, Direction::Forward);
        // 2 * 2,415,919,104 / 1e12 and 2 * 786,432 / (0.9 * 1e10)
        assert!((c.t_comp - 4.831_838_208e-3).abs() < 1e-15);
        assert!((c.t_comm - 1.747_626_666_666_667e-4).abs() < 1e-15);
        assert_eq!(c.t_mem, 0.0);
        assert_eq!(c.c_total, c.t_comp);
        assert_eq!(c.bottleneck(), Stream::Compute);
    }

    #[test]
    fn no_copy_time_without_copies() {
        for dir in [Direction::Forward, Direction::Backward] {
            for s in [ReuseStrategy::NoReuse, ReuseStrategy::S4] {
                assert_eq!(stage_cost(&gpt3_s(), &synthetic(), 512, s, dir).t_mem, 0.0);
            }
        }
    }

    #[test]
    fn saturation_slows_small_micro_batches() {
        let hw = synthetic();
        let full = stage_cost(&gpt3_s(), &hw, 1024, ReuseStrategy::NoReuse, Direction::Forward);
        let half = stage_cost(&gpt3_s(), &hw, 512, ReuseStrategy::NoReuse, Direction::Forward);
        // half the work at half the rate
        assert!((half.t_comp - full.t_comp).abs() < 1e-15);
    }

    #[test]
    fn tie_break_prefers_fewer_copies() {
        let all_equal: Vec<_> = ReuseStrategy::REUSING.iter().map(|s| (*s, 1.0)).collect();
        assert_eq!(cheapest(&all_equal), ReuseStrategy::S4);
        let s12 = [
            (ReuseStrategy::S1, 1.0),
            (ReuseStrategy::S2, 1.0),
            (ReuseStrategy::S3, 2.0),
            (ReuseStrategy::S4, 2.0),
        ];
        assert_eq!(cheapest(&s12), ReuseStrategy::S2);
        let s1 = [
            (ReuseStrategy::S1, 0.5),
            (ReuseStrategy::S2, 1.0),
            (ReuseStrategy::S3, 2.0),
            (ReuseStrategy::S4, 2.0),
        ];
        assert_eq!(cheapest(&s1), ReuseStrategy::S1);
    }

    #[test]
    fn plan_never_picks_no_reuse() {
        let plan = select_strategy(&gpt3_s(), &synthetic(), 1024);
        assert!(plan.chosen.reuses_memory());
        assert_eq!(plan.candidates.len(), 5);
        assert_eq!(plan.alpha, 100.0);
        assert_eq!(plan.beta, 50.0);
        // none is cheapest overall here but only reported
        let none = plan.cost_of(ReuseStrategy::NoReuse).total;
        assert!(none <= plan.chosen_cost().total);
    }

    #[test]
    fn pass_weights_change_objective() {
        let w = PassWeights {
            forward: 1.0,
            backward: 0.0,
        };
        let c = strategy_cost(&gpt3_s(), &synthetic(), 1024, ReuseStrategy::S3, w);
        assert_eq!(c.total, c.forward.c_total);
    }
}
