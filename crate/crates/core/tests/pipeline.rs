use moesim_core::costmodel::stage_cost;
use moesim_core::memmodel::{mem_reuse_savings, MemoryReport};
use moesim_core::pipesim::{
    brute_force_makespan, build_schedule, build_training_step, peak_memory, simulate, OpKind,
};
use moesim_core::{BatchSpec, Direction, HardwareProfile, ModelSpec, Preset, ReuseStrategy, SlowdownTable, Stream};

fn profile() -> HardwareProfile {
    HardwareProfile::new(1.2e14, 2.5e10, 1.2e10)
        .unwrap()
        .with_slowdown(SlowdownTable::uniform(0.8, 0.7, 0.9).unwrap())
}

#[test]
fn pipelining_overlaps_collectives_with_compute() {
    let spec = Preset::Gpt3Small.spec(8).unwrap();
    let one = simulate(
        &build_training_step(&spec, &BatchSpec::new(16384, 1).unwrap(), ReuseStrategy::NoReuse, false).unwrap(),
        &profile(),
    );
    let four = simulate(
        &build_training_step(&spec, &BatchSpec::new(16384, 4).unwrap(), ReuseStrategy::NoReuse, false).unwrap(),
        &profile(),
    );
    assert!(four.makespan() < one.makespan());
    // with one partition nothing overlaps, so the makespan is the sum of busy times
    let serial: f64 = Stream::ALL.into_iter().map(|s| one.busy_time(s)).sum();
    assert!((one.makespan() - serial).abs() <= 1e-12 * serial);
}

#[test]
fn reuse_trades_time_for_memory() {
    let spec = Preset::BertLarge.spec(8).unwrap();
    let batch = BatchSpec::new(8192, 4).unwrap();
    let base = build_training_step(&spec, &batch, ReuseStrategy::NoReuse, false).unwrap();
    let base_trace = simulate(&base, &profile());
    let base_mem = peak_memory(&base_trace, &spec);
    for strategy in [ReuseStrategy::S1, ReuseStrategy::S2, ReuseStrategy::S3, ReuseStrategy::S4] {
        let trace = simulate(&build_training_step(&spec, &batch, strategy, true).unwrap(), &profile());
        trace.validate().unwrap();
        let mem = peak_memory(&trace, &spec);
        assert_eq!(
            base_mem.activations + base_mem.buffers - mem.activations - mem.buffers,
            2 * mem_reuse_savings(&spec, 8192, 4).unwrap(),
            "{strategy}"
        );
        assert!(trace.makespan() >= base_trace.makespan() * (1.0 - 1e-12), "{strategy}");
    }
}

#[test]
fn offload_strategies_report_host_memory() {
    let spec = Preset::Gpt3Small.spec(8).unwrap();
    let batch = BatchSpec::new(4096, 4).unwrap();
    let trace = simulate(&build_training_step(&spec, &batch, ReuseStrategy::S1, true).unwrap(), &profile());
    let offloaded = trace.events().iter().filter(|e| e.kind == OpKind::OffloadCopy).count();
    assert!(offloaded > 0);
    assert!(peak_memory(&trace, &spec).host_offload > 0);
    let trace = simulate(&build_training_step(&spec, &batch, ReuseStrategy::S4, true).unwrap(), &profile());
    assert_eq!(peak_memory(&trace, &spec).host_offload, 0);
}

#[test]
fn measured_footprint_matches_closed_forms_for_every_preset() {
    let hw = profile();
    for preset in Preset::ALL {
        let spec = preset.spec(8).unwrap();
        let batch = BatchSpec::new(8192, 8).unwrap();
        let closed = MemoryReport::reusing(&spec, 8192, 8).unwrap();
        let m = peak_memory(&simulate(&build_training_step(&spec, &batch, ReuseStrategy::S3, true).unwrap(), &hw), &spec);
        assert_eq!((m.activations, m.buffers), (closed.activations, closed.buffers), "{}", preset.name());
        assert_eq!(m.model_states, closed.model_states);
    }
}

#[test]
fn compute_bound_busy_time_matches_cost_model() {
    let spec = Preset::Gpt3Xl.spec(16).unwrap();
    let hw = HardwareProfile::new(1e13, 1e12, 1e12).unwrap();
    for n in [2, 4] {
        let batch = BatchSpec::new(16384, n).unwrap();
        let cost = stage_cost(&spec, &hw, batch.micro_batch_size(), ReuseStrategy::S2, Direction::Backward);
        assert_eq!(cost.bottleneck(), Stream::Compute);
        let dag = build_schedule(&spec, &batch, ReuseStrategy::S2, true, Direction::Backward).unwrap();
        let busy = simulate(&dag, &hw).busy_time(Stream::Compute);
        assert!((busy - n as f64 * cost.c_total).abs() <= 1e-9 * busy);
    }
}

#[test]
fn simulation_is_never_better_than_the_oracle() {
    let spec = ModelSpec::new(8, 32, 2, 2).unwrap();
    let hw = HardwareProfile::new(1e5, 1e3, 2e3)
        .unwrap()
        .with_slowdown(SlowdownTable::uniform(0.5, 0.6, 0.7).unwrap())
        .with_launch_overhead(1e-3)
        .unwrap();
    let batch = BatchSpec::new(48, 2).unwrap();
    for strategy in ReuseStrategy::ALL {
        let dag = build_schedule(&spec, &batch, strategy, strategy.reuses_memory(), Direction::Forward).unwrap();
        let sim = simulate(&dag, &hw).makespan();
        let oracle = brute_force_makespan(&dag, &hw).unwrap();
        assert!(sim >= oracle * (1.0 - 1e-12), "{strategy}: {sim} < {oracle}");
    }
}
