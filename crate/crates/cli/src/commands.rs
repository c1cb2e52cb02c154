use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use moesim_core::autotune::{
    generate_workload, BatchDistribution, DecisionSource, GranRange, Measure, NoisyMeasure, SimulatorMeasure, Tuner,
    TunerStats,
};
use moesim_core::costmodel::{select_strategy, CostBreakdown, StrategyPlan};
use moesim_core::memmodel::{mem_saving_ratio, MemoryReport};
use moesim_core::pipesim::{build_schedule, build_training_step, peak_memory, simulate, to_micros, MeasuredMemory};
use moesim_core::{BatchSpec, Direction, HardwareProfile, ModelSpec, ReuseStrategy, Stream};

use crate::config::{load_config, ExperimentConfig, PipelineConfig, PipelineMode, StrategyChoice, TraceFormat, WorkloadConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "moesim", version, about = "Plan and simulate pipelined MoE layer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form memory footprint, plus the simulator's measurement.
    Memory {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
    },
    /// Cost-model strategy selection for one micro-batch.
    Plan(Common),
    /// One simulation with optional trace export.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Scope::Step)]
        direction: Scope,
    },
    /// Adaptive partition-count search over a generated workload.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        b_min: Option<u64>,
        #[arg(long)]
        b_max: Option<u64>,
        #[arg(long)]
        step: Option<u64>,
    },
    /// Grid of simulations written as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Partition counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 4, 8])]
        ns: Vec<u64>,
        /// Batch sizes; defaults to the configured batch.
        #[arg(long, value_delimiter = ',')]
        batches: Vec<u64>,
        /// Strategies; defaults to the configured strategy.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyChoice>,
    },
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Model preset: moe-gpt3-s, moe-gpt3-xl or moe-bert-l.
    #[arg(long)]
    preset: Option<String>,
    /// JSON experiment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tokens per batch.
    #[arg(long)]
    batch: Option<u64>,
    /// Partition count or `adaptive`.
    #[arg(long)]
    n: Option<PipelineConfig>,
    /// none, S1, S2, S3, S4 or auto.
    #[arg(long)]
    strategy: Option<StrategyChoice>,
    /// Enable buffer reuse (picks a strategy with the cost model unless given).
    #[arg(long)]
    reuse: bool,
    /// Seed for generated workloads and measurement noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    trace_format: Option<TraceFormatArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TraceFormatArg {
    Jsonl,
    TraceEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Scope {
    Forward,
    Backward,
    Step,
}

/// Resolved inputs shared by every subcommand.
struct Context {
    config: ExperimentConfig,
    spec: ModelSpec,
    hw: HardwareProfile,
    reuse: bool,
    strategy_flag: Option<StrategyChoice>,
    seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut config = match &common.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(preset) = &common.preset {
            config.model.preset = Some(preset.clone());
            config.model.model_dim = None;
            config.model.hidden_dim = None;
            config.model.num_experts = None;
        }
        if let Some(b) = common.batch {
            config.batch.tokens = b;
        }
        if let Some(n) = common.n {
            config.pipeline = n;
        }
        if let Some(s) = common.strategy {
            config.strategy = s;
        }
        if let Some(f) = common.trace_format {
            config.output.trace_format = match f {
                TraceFormatArg::Jsonl => TraceFormat::Jsonl,
                TraceFormatArg::TraceEvent => TraceFormat::TraceEvent,
            };
        }
        if let Some(out) = &common.out {
            config.output.path = Some(out.clone());
        }
        if common.reuse && common.strategy == Some(StrategyChoice::None) {
            return Err(CliError::Conflict("--reuse with --strategy none".into()));
        }
        if common.reuse && config.strategy == StrategyChoice::None {
            config.strategy = StrategyChoice::Auto;
        }
        config.validate()?;
        Ok(Self {
            spec: config.model_spec()?,
            hw: config.hardware_profile()?,
            reuse: common.reuse,
            strategy_flag: common.strategy,
            seed: common.seed.unwrap_or(0),
            out: config.output.path.clone(),
            config,
        })
    }

    fn tokens(&self) -> u64 {
        self.config.batch.tokens
    }

    /// Fixed partition count, or one chosen by a single adaptive search.
    fn partitions(&self, strategy: StrategyChoice) -> Result<u64, CliError> {
        match self.config.pipeline {
            PipelineConfig::Fixed(n) => Ok(n),
            PipelineConfig::Mode(PipelineMode::Adaptive) => {
                let strategy = match strategy {
                    StrategyChoice::None => ReuseStrategy::NoReuse,
                    StrategyChoice::Fixed(s) => s,
                    StrategyChoice::Auto => {
                        return Err(CliError::Conflict(
                            "an adaptive partition count needs an explicit strategy".into(),
                        ))
                    }
                };
                let mut tuner = Tuner::new(self.spec, self.hw, strategy, self.config.budget()?);
                Ok(tuner.adaptive_granularity(self.tokens())?.n)
            }
        }
    }

    fn resolve(&self, choice: StrategyChoice, tokens: u64, n: u64) -> Result<ReuseStrategy, CliError> {
        match choice {
            StrategyChoice::None => Ok(ReuseStrategy::NoReuse),
            StrategyChoice::Fixed(s) => Ok(s),
            // nothing to reuse with a single partition
            StrategyChoice::Auto if n == 1 => Ok(ReuseStrategy::NoReuse),
            StrategyChoice::Auto => {
                let b = BatchSpec::new(tokens, n)?.micro_batch_size();
                Ok(select_strategy(&self.spec, &self.hw, b).chosen)
            }
        }
    }

    fn emit(&self, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
        match &self.out {
            Some(path) => write_file(path, text),
            None => stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Io {
                    path: "<stdout>".into(),
                    message: e.to_string(),
                }),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Parses `argv` (program name first), runs the subcommand and writes its
/// output to `stdout` or the configured file.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            return stdout
                .write_all(e.render().to_string().as_bytes())
                .map_err(|err| CliError::Io {
                    path: "<stdout>".into(),
                    message: err.to_string(),
                });
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
    };
    match cli.command {
        Command::Memory { common, format } => memory(&Context::new(&common)?, format, stdout),
        Command::Plan(common) => plan(&Context::new(&common)?, stdout),
        Command::Simulate { common, direction } => simulate_cmd(&Context::new(&common)?, direction, stdout),
        Command::Search {
            common,
            iterations,
            b_min,
            b_max,
            step,
        } => {
            let ctx = Context::new(&common)?;
            let mut workload = ctx.config.batch.workload.clone().unwrap_or(WorkloadConfig {
                seed: 0,
                iterations: 100,
                b_min: 1024,
                b_max: 32768,
                distribution: BatchDistribution::Uniform { step: 1024 },
            });
            if let Some(seed) = common.seed {
                workload.seed = seed;
            }
            workload.iterations = iterations.unwrap_or(workload.iterations);
            workload.b_min = b_min.unwrap_or(workload.b_min);
            workload.b_max = b_max.unwrap_or(workload.b_max);
            if let Some(step) = step {
                workload.distribution = match workload.distribution {
                    BatchDistribution::Uniform { .. } => BatchDistribution::Uniform { step },
                    BatchDistribution::HeavyTailed { shape, .. } => BatchDistribution::HeavyTailed { shape, step },
                };
            }
            search(&ctx, &workload, stdout)
        }
        Command::Sweep {
            common,
            ns,
            batches,
            strategies,
        } => sweep(&Context::new(&common)?, &ns, &batches, &strategies, stdout),
    }
}

/// Runs the command line and returns the process exit status. Errors are
/// printed to stderr as one JSON object.
pub fn run_subcommand<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(argv, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

#[derive(Serialize)]
struct MemoryOutput {
    model: ModelSpec,
    tokens: u64,
    partitions: u64,
    baseline: MemoryReport,
    pipelined: MemoryReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    reusing: Option<MemoryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    saving_ratio: Option<f64>,
    measured: MeasuredOutput,
}

#[derive(Serialize)]
struct MeasuredOutput {
    pipelined: MemoryUsage,
    #[serde(skip_serializing_if = "Option::is_none")]
    reusing: Option<MemoryUsage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    saving_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct MemoryUsage {
    model_states: u64,
    activations: u64,
    buffers: u64,
    /// Model states plus both category peaks.
    total: u64,
    /// Peak of everything live at once.
    joint_peak: u64,
    host_offload: u64,
    total_bytes: u64,
}

impl MemoryUsage {
    fn new(m: &MeasuredMemory, spec: &ModelSpec) -> Self {
        let total = m.model_states + m.activations + m.buffers;
        Self {
            model_states: m.model_states,
            activations: m.activations,
            buffers: m.buffers,
            total,
            joint_peak: m.total,
            host_offload: m.host_offload,
            total_bytes: total * spec.element_bytes(),
        }
    }
}

fn measure_memory(ctx: &Context, batch: &BatchSpec, strategy: ReuseStrategy) -> Result<MemoryUsage, CliError> {
    let dag = build_training_step(&ctx.spec, batch, strategy, strategy.reuses_memory())?;
    Ok(MemoryUsage::new(&peak_memory(&simulate(&dag, &ctx.hw), &ctx.spec), &ctx.spec))
}

fn memory(ctx: &Context, format: ReportFormat, stdout: &mut dyn Write) -> Result<(), CliError> {
    let tokens = ctx.tokens();
    let n = ctx.partitions(ctx.config.strategy)?;
    let batch = BatchSpec::new(tokens, n)?;
    let reuse = ctx.config.strategy != StrategyChoice::None;
    let pipelined = measure_memory(ctx, &batch, ReuseStrategy::NoReuse)?;
    let (reusing, saving_ratio, measured_reuse, measured_ratio) = if reuse {
        // footprint does not depend on which reusing strategy runs
        let strategy = match ctx.resolve(ctx.config.strategy, tokens, n)? {
            ReuseStrategy::NoReuse => ReuseStrategy::S4,
            s => s,
        };
        let measured = measure_memory(ctx, &batch, strategy)?;
        let ratio = (pipelined.total - measured.total) as f64 / pipelined.total as f64;
        (
            Some(MemoryReport::reusing(&ctx.spec, tokens, n)?),
            Some(mem_saving_ratio(&ctx.spec, tokens, n)?),
            Some(measured),
            Some(ratio),
        )
    } else {
        (None, None, None, None)
    };
    let out = MemoryOutput {
        model: ctx.spec,
        tokens,
        partitions: n,
        baseline: MemoryReport::baseline(&ctx.spec, tokens)?,
        pipelined: MemoryReport::pipelined(&ctx.spec, tokens)?,
        reusing,
        saving_ratio,
        measured: MeasuredOutput {
            pipelined,
            reusing: measured_reuse,
            saving_ratio: measured_ratio,
        },
    };
    let text = match format {
        ReportFormat::Json => to_json(&out),
        ReportFormat::Table => memory_table(&out),
    };
    ctx.emit(&text, stdout)
}

fn memory_table(out: &MemoryOutput) -> String {
    let mut rows: Vec<(&str, [u64; 5])> = vec![];
    let closed = |r: &MemoryReport| [r.model_states, r.activations, r.buffers, r.total, r.total_bytes];
    let measured = |m: &MemoryUsage| [m.model_states, m.activations, m.buffers, m.total, m.total_bytes];
    rows.push(("baseline", closed(&out.baseline)));
    rows.push(("pipelined", closed(&out.pipelined)));
    if let Some(r) = &out.reusing {
        rows.push(("reusing", closed(r)));
    }
    rows.push(("measured pipelined", measured(&out.measured.pipelined)));
    if let Some(m) = &out.measured.reusing {
        rows.push(("measured reusing", measured(m)));
    }
    let header = ["", "model_states", "activations", "buffers", "total", "total_bytes"];
    let mut widths = header.map(str::len);
    for (name, values) in &rows {
        widths[0] = widths[0].max(name.len());
        for (w, v) in widths[1..].iter_mut().zip(values) {
            *w = (*w).max(v.to_string().len());
        }
    }
    let mut text = format!("{:<w$}", header[0], w = widths[0]);
    for (h, w) in header[1..].iter().zip(&widths[1..]) {
        text.push_str(&format!("  {h:>w$}"));
    }
    text.push('\n');
    for (name, values) in &rows {
        text.push_str(&format!("{name:<w$}", w = widths[0]));
        for (v, w) in values.iter().zip(&widths[1..]) {
            text.push_str(&format!("  {v:>w$}"));
        }
        text.push('\n');
    }
    if let Some(phi) = out.saving_ratio {
        text.push_str(&format!("saving ratio {phi:.4}"));
        if let Some(m) = out.measured.saving_ratio {
            text.push_str(&format!(", measured {m:.4}"));
        }
        text.push('\n');
    }
    text
}

#[derive(Serialize)]
struct StageOutput {
    t_comp_us: u64,
    t_comm_us: u64,
    t_mem_us: u64,
    c_total_us: u64,
    bottleneck: Stream,
}

impl From<&CostBreakdown> for StageOutput {
    fn from(c: &CostBreakdown) -> Self {
        Self {
            t_comp_us: to_micros(c.t_comp),
            t_comm_us: to_micros(c.t_comm),
            t_mem_us: to_micros(c.t_mem),
            c_total_us: to_micros(c.c_total),
            bottleneck: c.bottleneck(),
        }
    }
}

#[derive(Serialize)]
struct CandidateOutput {
    strategy: ReuseStrategy,
    forward: StageOutput,
    backward: StageOutput,
    total_us: u64,
    /// Estimated layer time, `n` partitions of forward plus backward.
    estimated_step_us: u64,
}

#[derive(Serialize)]
struct PlanOutput {
    tokens: u64,
    partitions: u64,
    micro_batch: u64,
    alpha: f64,
    beta: f64,
    chosen: ReuseStrategy,
    candidates: Vec<CandidateOutput>,
}

fn plan(ctx: &Context, stdout: &mut dyn Write) -> Result<(), CliError> {
    let tokens = ctx.tokens();
    let n = ctx.partitions(StrategyChoice::None)?;
    let micro = BatchSpec::new(tokens, n)?.micro_batch_size();
    let StrategyPlan {
        chosen,
        alpha,
        beta,
        candidates,
    } = select_strategy(&ctx.spec, &ctx.hw, micro);
    let out = PlanOutput {
        tokens,
        partitions: n,
        micro_batch: micro,
        alpha,
        beta,
        chosen,
        candidates: candidates
            .iter()
            .map(|c| CandidateOutput {
                strategy: c.strategy,
                forward: (&c.forward).into(),
                backward: (&c.backward).into(),
                total_us: to_micros(c.total),
                estimated_step_us: to_micros(n as f64 * c.total),
            })
            .collect(),
    };
    ctx.emit(&to_json(&out), stdout)
}

#[derive(Serialize)]
struct BusyOutput {
    compute_us: u64,
    collective_us: u64,
    copy_us: u64,
}

#[derive(Serialize)]
struct SimulateOutput {
    tokens: u64,
    partitions: u64,
    strategy: ReuseStrategy,
    scope: Scope,
    ops: usize,
    makespan_us: u64,
    busy: BusyOutput,
    memory: MemoryUsage,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<String>,
}

fn simulate_cmd(ctx: &Context, scope: Scope, stdout: &mut dyn Write) -> Result<(), CliError> {
    let tokens = ctx.tokens();
    let n = ctx.partitions(ctx.config.strategy)?;
    let strategy = ctx.resolve(ctx.config.strategy, tokens, n)?;
    let batch = BatchSpec::new(tokens, n)?;
    let reuse = strategy.reuses_memory();
    let dag = match scope {
        Scope::Step => build_training_step(&ctx.spec, &batch, strategy, reuse)?,
        Scope::Forward => build_schedule(&ctx.spec, &batch, strategy, reuse, Direction::Forward)?,
        Scope::Backward => build_schedule(&ctx.spec, &batch, strategy, reuse, Direction::Backward)?,
    };
    let trace = simulate(&dag, &ctx.hw);
    if let Some(path) = &ctx.out {
        let text = match ctx.config.output.trace_format {
            TraceFormat::Jsonl => trace.to_jsonl(),
            TraceFormat::TraceEvent => trace.to_trace_event_json(),
        };
        write_file(path, &text)?;
    }
    let out = SimulateOutput {
        tokens,
        partitions: n,
        strategy,
        scope,
        ops: dag.len(),
        makespan_us: to_micros(trace.makespan()),
        busy: BusyOutput {
            compute_us: to_micros(trace.busy_time(Stream::Compute)),
            collective_us: to_micros(trace.busy_time(Stream::Collective)),
            copy_us: to_micros(trace.busy_time(Stream::Copy)),
        },
        memory: MemoryUsage::new(&peak_memory(&trace, &ctx.spec), &ctx.spec),
        trace: ctx.out.as_ref().map(|p| p.display().to_string()),
    };
    stdout
        .write_all(to_json(&out).as_bytes())
        .map_err(|e| CliError::Io {
            path: "<stdout>".into(),
            message: e.to_string(),
        })
}

#[derive(Serialize)]
struct IterationOutput {
    iter: usize,
    #[serde(rename = "B")]
    tokens: u64,
    n: u64,
    source: DecisionSource,
    trials_run: usize,
    /// Microseconds.
    makespan: u64,
}

#[derive(Serialize)]
struct SearchSummary {
    iterations: usize,
    strategy: ReuseStrategy,
    total_trials: u64,
    searches: u64,
    cache_hits: u64,
    range_hits: u64,
    cache_hit_rate: f64,
    conflicts: u64,
    ranges: Vec<GranRange>,
}

fn search(ctx: &Context, workload: &WorkloadConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let strategy = match ctx.config.strategy {
        StrategyChoice::None => ReuseStrategy::NoReuse,
        StrategyChoice::Fixed(s) => s,
        StrategyChoice::Auto => {
            return Err(CliError::Conflict(
                "search needs an explicit strategy (none or S1-S4), not auto".into(),
            ))
        }
    };
    let batches = generate_workload(
        workload.seed,
        workload.iterations,
        workload.b_min,
        workload.b_max,
        workload.distribution,
    )?;
    let budget = ctx.config.budget()?;
    let lines = if ctx.config.search.noise > 0.0 {
        let noisy = NoisyMeasure::new(ctx.seed, ctx.config.search.noise)?;
        run_workload(Tuner::with_measure(ctx.spec, ctx.hw, strategy, budget, noisy), &batches)?
    } else {
        run_workload(Tuner::new(ctx.spec, ctx.hw, strategy, budget), &batches)?
    };
    ctx.emit(&lines, stdout)
}

fn run_workload<M: Measure>(mut tuner: Tuner<M>, batches: &[u64]) -> Result<String, CliError> {
    let mut out = String::new();
    let mut makespans: std::collections::HashMap<(u64, u64), u64> = Default::default();
    for (iter, &b) in batches.iter().enumerate() {
        let d = tuner.adaptive_granularity(b)?;
        let makespan = match makespans.get(&(b, d.n)) {
            Some(&m) => m,
            None => {
                let batch = BatchSpec::new(b, d.n)?;
                let m = to_micros(SimulatorMeasure.measure(tuner.spec(), tuner.hardware(), &batch, tuner.strategy())?);
                makespans.insert((b, d.n), m);
                m
            }
        };
        let line = IterationOutput {
            iter,
            tokens: b,
            n: d.n,
            source: d.source,
            trials_run: d.trials,
            makespan,
        };
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    let TunerStats {
        trials,
        searches,
        cache_hits,
        range_hits,
        ..
    } = tuner.stats();
    let summary = SearchSummary {
        iterations: batches.len(),
        strategy: tuner.strategy(),
        total_trials: trials,
        searches,
        cache_hits,
        range_hits,
        cache_hit_rate: tuner.stats().hit_rate(),
        conflicts: tuner.index().conflicts(),
        ranges: tuner.index().ranges().to_vec(),
    };
    out.push_str(&serde_json::to_string(&serde_json::json!({ "summary": summary })).expect("summary serializes"));
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    tokens: u64,
    partitions: u64,
    strategy: String,
    status: String,
    makespan_us: Option<u64>,
    compute_busy_us: Option<u64>,
    collective_busy_us: Option<u64>,
    copy_busy_us: Option<u64>,
    activations: Option<u64>,
    buffers: Option<u64>,
    total_elements: Option<u64>,
    total_bytes: Option<u64>,
}

fn sweep_cell(ctx: &Context, tokens: u64, n: u64, choice: StrategyChoice) -> SweepRow {
    let mut row = SweepRow {
        tokens,
        partitions: n,
        strategy: choice.to_string(),
        status: "ok".into(),
        makespan_us: None,
        compute_busy_us: None,
        collective_busy_us: None,
        copy_busy_us: None,
        activations: None,
        buffers: None,
        total_elements: None,
        total_bytes: None,
    };
    let result = (|| -> Result<(), CliError> {
        let strategy = ctx.resolve(choice, tokens, n)?;
        row.strategy = strategy.name().to_string();
        let batch = BatchSpec::new(tokens, n)?;
        let dag = build_training_step(&ctx.spec, &batch, strategy, strategy.reuses_memory())?;
        let trace = simulate(&dag, &ctx.hw);
        let mem = MemoryUsage::new(&peak_memory(&trace, &ctx.spec), &ctx.spec);
        row.makespan_us = Some(to_micros(trace.makespan()));
        row.compute_busy_us = Some(to_micros(trace.busy_time(Stream::Compute)));
        row.collective_busy_us = Some(to_micros(trace.busy_time(Stream::Collective)));
        row.copy_busy_us = Some(to_micros(trace.busy_time(Stream::Copy)));
        row.activations = Some(mem.activations);
        row.buffers = Some(mem.buffers);
        row.total_elements = Some(mem.total);
        row.total_bytes = Some(mem.total_bytes);
        Ok(())
    })();
    if let Err(e) = result {
        row.status = format!("infeasible: {e}");
    }
    row
}

fn sweep(
    ctx: &Context,
    ns: &[u64],
    batches: &[u64],
    strategies: &[StrategyChoice],
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    if ns.contains(&0) {
        return Err(CliError::validation("--ns", "partition counts must be at least 1"));
    }
    let batches = if batches.is_empty() { vec![ctx.tokens()] } else { batches.to_vec() };
    let strategies = if strategies.is_empty() {
        vec![ctx.strategy_flag.unwrap_or(ctx.config.strategy)]
    } else {
        if ctx.reuse && strategies.contains(&StrategyChoice::None) {
            return Err(CliError::Conflict("--reuse with strategy none in --strategies".into()));
        }
        strategies.to_vec()
    };
    let mut cells = Vec::with_capacity(batches.len() * ns.len() * strategies.len());
    for &b in &batches {
        for &n in ns {
            cells.extend(strategies.iter().map(|&s| (b, n, s)));
        }
    }
    let rows: Vec<SweepRow> = cells.par_iter().map(|&(b, n, s)| sweep_cell(ctx, b, n, s)).collect();
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::Usage(format!("csv: {e}")))?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))?;
    ctx.emit(&String::from_utf8(bytes).expect("csv is utf-8"), stdout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_ok(args: &[&str]) -> String {
        let mut out = Vec::new();
        run(std::iter::once("moesim").chain(args.iter().copied()), &mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn memory_reports_ratio() {
        let out = run_ok(&["memory", "--preset", "moe-gpt3-s", "--batch", "16384", "--n", "8", "--reuse"]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let phi = v["saving_ratio"].as_f64().unwrap();
        assert!((phi - 0.5709).abs() < 1e-4, "{phi}");
        assert!(v["reusing"]["total"].as_u64().unwrap() < v["pipelined"]["total"].as_u64().unwrap());
    }

    #[test]
    fn memory_table_is_aligned() {
        let out = run_ok(&["memory", "--batch", "16384", "--n", "8", "--reuse", "--format", "table"]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[..6].iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[6].starts_with("saving ratio 0.5709"), "{}", lines[6]);
    }

    #[test]
    fn auto_with_one_partition_is_none() {
        let csv = run_ok(&["sweep", "--ns", "1", "--strategies", "auto"]);
        assert!(csv.lines().nth(1).unwrap().starts_with("16384,1,none,ok"));
    }

    #[test]
    fn reuse_conflicts_with_none() {
        let mut out = Vec::new();
        let err = run(["moesim", "memory", "--reuse", "--strategy", "none"], &mut out).unwrap_err();
        assert_eq!(err.kind(), "conflict");
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let mut out = Vec::new();
        let err = run(["moesim", "frobnicate"], &mut out).unwrap_err();
        assert_eq!(err.kind(), "usage");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn plan_lists_all_strategies() {
        let v: serde_json::Value = serde_json::from_str(&run_ok(&["plan", "--batch", "8192", "--n", "4"])).unwrap();
        assert_eq!(v["candidates"].as_array().unwrap().len(), 5);
        assert_eq!(v["micro_batch"], 2048);
        assert_ne!(v["chosen"], "none");
    }

    #[test]
    fn sweep_has_one_row_per_cell() {
        let csv = run_ok(&["sweep", "--ns", "1,2", "--batches", "4096,8192", "--strategies", "none,S4"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 8);
        assert!(lines[0].starts_with("tokens,partitions,strategy,status,makespan_us"));
        // S4 cannot run with a single partition
        assert!(lines[2].contains("infeasible"), "{}", lines[2]);
    }
}
