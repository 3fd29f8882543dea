//! `dabs`: estimate, evaluate, gradient-check and compare station discount
//! policies on the builtin or user-supplied scenarios.
//!
//! Every command writes CSV files and a `manifest.json` into `--out`. The
//! manifest embeds the fully resolved scenario and job, and
//! `dabs replay <manifest>` reruns it.
//!
//! CSV schemas:
//!
//! * `loss_history.csv`: `update,sim_count,loss,best_loss`
//! * `policy.csv`, `best_policy.csv`: `block,station,value`
//! * `trips.csv`: `t,origin,destination,trips` (mean over evaluation runs,
//!   non-zero entries only)
//! * `inventory_error.csv`: `station,row,col,final_inventory,target,error`
//! * `gradcheck.csv`: `index,block,station,ad,fd,abs_err,rel_err,pass`
//! * `traces.csv`: `method,init_pattern,update,sim_count,loss,best_loss`
//! * `summary.csv`: `method,init_pattern,updates,sim_count,final_loss,best_loss,eval_loss,cost,note`

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dabs_core::choice::SimMode;
use dabs_core::gradcheck::{gradcheck, sample_params, GradcheckConfig, GradcheckReport};
use dabs_core::network::PricingPolicy;
use dabs_core::noise::{NoiseKey, Purpose};
use dabs_core::optim::{Method, OptTrace, OptimizerConfig};
use dabs_core::scenarios::{DemandSet, InitPattern, ScenarioSpec};
use dabs_core::simulator::{write_inventory_error_csv, write_trips_csv, CountSampling, EvaluationReport};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] dabs_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed on {failed} of {total} parameters")]
    GradcheckFailed { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(dabs_core::Error::Diverged { .. }) => 2,
            CliError::GradcheckFailed { .. } => 3,
            CliError::Usage(_) => 64,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "dabs", version, about = "Differentiable bike-sharing simulation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a discount policy with one optimizer.
    Estimate(EstimateArgs),
    /// Run hard simulations of a policy on the held-out demand.
    Evaluate(EvaluateArgs),
    /// Compare AD gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Run several optimizers at an equal simulation budget.
    Compare(CompareArgs),
    /// Rerun the job recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Builtin id (s1, s2, s3) or path of a scenario file.
    #[arg(long = "scenario", value_name = "ID|PATH")]
    scenario_flag: Option<String>,
    #[arg(long)]
    seed_demand_est: Option<u64>,
    #[arg(long)]
    seed_demand_test: Option<u64>,
    #[arg(long)]
    seed_sim: Option<u64>,
    /// Seed of the initial policy draw.
    #[arg(long)]
    seed_init: Option<u64>,
    /// Softmax temperature of the relaxed samplers.
    #[arg(long)]
    tau: Option<f64>,
    /// Simulation replicas per loss evaluation.
    #[arg(long)]
    batch: Option<usize>,
    /// Departure and duration draws in estimation mode.
    #[arg(long, value_parser = ["exact", "relaxed"])]
    counts: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self, positional: Option<&str>) -> CliResult<ScenarioSpec> {
        let id = match (self.scenario_flag.as_deref(), positional) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::Usage(format!("scenario given twice: `{a}` and `{b}`")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(CliError::Usage("no scenario given (use --scenario)".into())),
        };
        let mut spec = ScenarioSpec::load(id)?;
        if let Some(v) = self.seed_demand_est {
            spec.seeds.demand_est = v;
        }
        if let Some(v) = self.seed_demand_test {
            spec.seeds.demand_test = v;
        }
        if let Some(v) = self.seed_sim {
            spec.seeds.sim = v;
        }
        if let Some(v) = self.seed_init {
            spec.seeds.init = v;
        }
        if let Some(v) = self.tau {
            spec.sim.tau = v;
        }
        if let Some(v) = self.batch {
            spec.sim.batch = v;
        }
        match self.counts.as_deref() {
            Some("exact") => spec.sim.counts = CountSampling::Exact,
            Some("relaxed") => spec.sim.counts = CountSampling::Relaxed,
            _ => {}
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct EstimateArgs {
    scenario: Option<String>,
    /// ad-sgd, fd-gd or de.
    #[arg(value_name = "METHOD")]
    method_pos: Option<Method>,
    #[arg(long)]
    method: Option<Method>,
    /// 1, 2 or `a,b` for U(a, b).
    #[arg(long, default_value = "1")]
    init_pattern: InitPattern,
    /// Simulation-run budget (scenario default when omitted).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvaluateArgs {
    scenario: Option<String>,
    /// Policy CSV (`block,station,value`); the zero policy when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradcheckArgs {
    scenario: Option<String>,
    /// Parameters to check (all when larger than the parameter count).
    #[arg(long, default_value_t = 20)]
    params: usize,
    /// Seed of the U(0, 3) policy and the parameter sample.
    #[arg(long, default_value_t = 0)]
    seed_policy: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CompareArgs {
    scenario: Option<String>,
    /// Comma-separated methods.
    #[arg(
        long = "method",
        alias = "methods",
        value_delimiter = ',',
        default_value = "ad-sgd,fd-gd,de"
    )]
    methods: Vec<Method>,
    /// Init patterns: `1`, `2`, `1,2` or `a,b` for U(a, b); repeatable.
    #[arg(long = "init-pattern", alias = "init-patterns", default_value = "1")]
    init_patterns: Vec<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Evaluation runs per estimated policy.
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[command(flatten)]
    common: Common,
}

/// A fully resolved job.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
enum Job {
    Estimate {
        init_pattern: InitPattern,
        optimizer: OptimizerConfig,
    },
    Evaluate {
        runs: usize,
        policy_file: Option<PathBuf>,
        policy: Vec<f64>,
    },
    Gradcheck {
        params: usize,
        seed_policy: u64,
        config: GradcheckConfig,
    },
    Compare {
        methods: Vec<Method>,
        init_patterns: Vec<InitPattern>,
        budget: usize,
        runs: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    scenario: ScenarioSpec,
    #[serde(flatten)]
    job: Job,
    out: PathBuf,
    outputs: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    let (spec, job, out) = match command {
        Command::Estimate(mut a) => {
            // `estimate --scenario s2 de` puts the method in the first slot.
            if a.common.scenario_flag.is_some() && a.method_pos.is_none() {
                if let Some(m) = a.scenario.as_deref().and_then(|s| s.parse::<Method>().ok()) {
                    a.method_pos = Some(m);
                    a.scenario = None;
                }
            }
            let spec = a.common.resolve(a.scenario.as_deref())?;
            let method = match (a.method, a.method_pos) {
                (Some(x), Some(y)) if x != y => {
                    return Err(CliError::Usage(format!("method given twice: `{x}` and `{y}`")))
                }
                (Some(m), _) | (None, Some(m)) => m,
                (None, None) => Method::AdSgd,
            };
            let mut optimizer = spec.optimizer_config(method, a.budget.unwrap_or(spec.optimizer.budget));
            if let Some(lr) = a.lr {
                optimizer.lr = lr;
            }
            optimizer.max_updates = a.max_updates;
            optimizer.validate()?;
            let job = Job::Estimate {
                init_pattern: a.init_pattern,
                optimizer,
            };
            (spec, job, a.common.out)
        }
        Command::Evaluate(a) => {
            let spec = a.common.resolve(a.scenario.as_deref())?;
            let policy = match &a.policy {
                Some(path) => read_policy(&spec, path)?,
                None => spec.zero_policy(),
            };
            let job = Job::Evaluate {
                runs: a.runs,
                policy_file: a.policy,
                policy: policy.values().to_vec(),
            };
            (spec, job, a.common.out)
        }
        Command::Gradcheck(a) => {
            let spec = a.common.resolve(a.scenario.as_deref())?;
            let config = GradcheckConfig {
                step: a.step,
                batch: spec.sim.batch,
                ..GradcheckConfig::default()
            };
            let job = Job::Gradcheck {
                params: a.params,
                seed_policy: a.seed_policy,
                config,
            };
            (spec, job, a.common.out)
        }
        Command::Compare(a) => {
            let spec = a.common.resolve(a.scenario.as_deref())?;
            let mut init_patterns = Vec::new();
            for p in &a.init_patterns {
                init_patterns.extend(parse_patterns(p)?);
            }
            if a.methods.is_empty() || init_patterns.is_empty() {
                return Err(CliError::Usage("compare needs at least one method and pattern".into()));
            }
            let job = Job::Compare {
                budget: a.budget.unwrap_or(spec.optimizer.budget),
                methods: a.methods,
                init_patterns,
                runs: a.runs,
            };
            (spec, job, a.common.out)
        }
        Command::Replay { manifest, out } => {
            let text = fs::read_to_string(&manifest).map_err(|source| CliError::Io {
                path: manifest.clone(),
                source,
            })?;
            let m: RunManifest = serde_json::from_str(&text).map_err(dabs_core::Error::from)?;
            m.scenario.validate()?;
            (m.scenario, m.job, out)
        }
    };
    execute(spec, job, &out)
}

fn execute(spec: ScenarioSpec, job: Job, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut outputs = Vec::new();
    let result = match &job {
        Job::Estimate {
            init_pattern,
            optimizer,
        } => estimate(&spec, *init_pattern, optimizer, out, &mut outputs),
        Job::Evaluate { runs, policy, .. } => {
            let policy = spec.policy_from(policy.clone())?;
            evaluate(&spec, &policy, *runs, out, &mut outputs).map(|_| ())
        }
        Job::Gradcheck {
            params,
            seed_policy,
            config,
        } => run_gradcheck(&spec, *params, *seed_policy, *config, out, &mut outputs),
        Job::Compare {
            methods,
            init_patterns,
            budget,
            runs,
        } => compare(&spec, methods, init_patterns, *budget, *runs, out, &mut outputs),
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: spec,
        job,
        out: out.to_path_buf(),
        outputs,
    };
    write_json(out, "manifest.json", &manifest)?;
    result
}

fn create(out: &Path, name: &str, outputs: &mut Vec<String>) -> CliResult<BufWriter<File>> {
    let path = out.join(name);
    let f = File::create(&path).map_err(|source| CliError::Io { path, source })?;
    outputs.push(name.to_string());
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> CliResult<()> {
    let path = out.join(name);
    let text = serde_json::to_string_pretty(value).map_err(dabs_core::Error::from)?;
    fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })
}

fn read_policy(spec: &ScenarioSpec, path: &Path) -> CliResult<PricingPolicy> {
    let f = File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(PricingPolicy::read_csv(
        f,
        spec.horizon,
        spec.block_len,
        spec.n_stations(),
    )?)
}

#[derive(Serialize)]
struct EstimateSummary {
    method: Method,
    init_pattern: InitPattern,
    updates: usize,
    sim_count: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    best_loss: f64,
    diverged: bool,
    cost: f64,
    parameter_sum: f64,
    negative_count: usize,
}

fn estimate(
    spec: &ScenarioSpec,
    pattern: InitPattern,
    cfg: &OptimizerConfig,
    out: &Path,
    outputs: &mut Vec<String>,
) -> CliResult<()> {
    let init = spec.initial_policy(pattern, spec.seeds.init)?;
    let (trace, err) = match spec.estimate(cfg, pattern) {
        Ok(e) => (e.trace, None),
        Err(dabs_core::Error::Diverged {
            update,
            loss,
            initial,
            trace,
        }) => {
            let trace = *trace;
            let err = dabs_core::Error::Diverged {
                update,
                loss,
                initial,
                trace: Box::new(OptTrace::clone(&trace)),
            };
            (trace, Some(err))
        }
        Err(e) => return Err(e.into()),
    };
    trace.write_csv(create(out, "loss_history.csv", outputs)?)?;
    let policy = init.with_values(trace.final_params.clone())?;
    policy.write_csv(create(out, "policy.csv", outputs)?)?;
    init.with_values(trace.best_params.clone())?
        .write_csv(create(out, "best_policy.csv", outputs)?)?;
    let summary = EstimateSummary {
        method: cfg.method,
        init_pattern: pattern,
        updates: trace.updates,
        sim_count: trace.sim_count,
        initial_loss: trace.initial_loss(),
        final_loss: trace.final_loss(),
        best_loss: trace.best_loss,
        diverged: err.is_some(),
        cost: policy.cost(),
        parameter_sum: policy.parameter_sum(),
        negative_count: policy.negative_count(),
    };
    write_json(out, "summary.json", &summary)?;
    outputs.push("summary.json".into());
    println!(
        "{} {}: {} updates, {} simulations, final loss {}, best loss {:.4}, cost {:.4}",
        spec.id,
        cfg.method,
        trace.updates,
        trace.sim_count,
        fmt_opt(trace.final_loss()),
        trace.best_loss,
        summary.cost
    );
    match err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn evaluate(
    spec: &ScenarioSpec,
    policy: &PricingPolicy,
    runs: usize,
    out: &Path,
    outputs: &mut Vec<String>,
) -> CliResult<EvaluationReport> {
    let report = spec.evaluate(policy, runs)?;
    let network = spec.build_network()?;
    write_trips_csv(
        &report.mean_trips,
        report.horizon,
        report.n_stations,
        create(out, "trips.csv", outputs)?,
    )?;
    write_inventory_error_csv(
        &network,
        &report.mean_final_inventory,
        create(out, "inventory_error.csv", outputs)?,
    )?;
    write_json(out, "summary.json", &report)?;
    outputs.push("summary.json".into());
    println!(
        "{}: {} runs, loss {:.4} (mean per-run {:.4}), cost {:.4}, in transit at end {:.2}",
        spec.id, runs, report.loss, report.mean_run_loss, report.cost, report.mean_in_transit_at_end
    );
    Ok(report)
}

fn run_gradcheck(
    spec: &ScenarioSpec,
    params: usize,
    seed_policy: u64,
    cfg: GradcheckConfig,
    out: &Path,
    outputs: &mut Vec<String>,
) -> CliResult<()> {
    let report = scenario_gradcheck(spec, params, seed_policy, cfg)?;
    report.write_csv(create(out, "gradcheck.csv", outputs)?)?;
    write_json(out, "summary.json", &report)?;
    outputs.push("summary.json".into());
    let failed = report.failures().count();
    println!(
        "{}: {} parameters checked, {} failed, worst relative error {:.3e}",
        spec.id,
        report.checks.len(),
        failed,
        report.worst(1).first().map_or(0.0, |c| c.rel_err)
    );
    if failed > 0 {
        for c in report.worst(5).iter().filter(|c| !c.pass) {
            eprintln!(
                "  param {} (block {}, station {}): ad {:.6e} fd {:.6e} rel {:.3e}",
                c.index, c.block, c.station, c.ad, c.fd, c.rel_err
            );
        }
        return Err(CliError::GradcheckFailed {
            failed,
            total: report.checks.len(),
        });
    }
    Ok(())
}

fn scenario_gradcheck(
    spec: &ScenarioSpec,
    params: usize,
    seed_policy: u64,
    cfg: GradcheckConfig,
) -> CliResult<GradcheckReport> {
    let sim = spec.simulator(DemandSet::Estimation, SimMode::Estimation)?;
    let policy = spec.initial_policy(InitPattern::Custom(0.0, 3.0), seed_policy)?;
    let indices = sample_params(&policy, params, cfg.step, seed_policy);
    let key = NoiseKey::new(spec.seeds.sim).derive(Purpose::Optimizer, &[seed_policy]);
    Ok(gradcheck(&sim, &policy, &indices, key, cfg)?)
}

#[derive(Serialize)]
struct CompareRow {
    method: Method,
    init_pattern: String,
    updates: usize,
    sim_count: usize,
    final_loss: Option<f64>,
    best_loss: Option<f64>,
    eval_loss: Option<f64>,
    cost: f64,
    note: String,
}

fn compare(
    spec: &ScenarioSpec,
    methods: &[Method],
    patterns: &[InitPattern],
    budget: usize,
    runs: usize,
    out: &Path,
    outputs: &mut Vec<String>,
) -> CliResult<()> {
    let mut traces = csv::Writer::from_writer(create(out, "traces.csv", outputs)?);
    traces
        .write_record(["method", "init_pattern", "update", "sim_count", "loss", "best_loss"])
        .map_err(dabs_core::Error::from)?;
    let mut rows = Vec::new();
    for &pattern in patterns {
        for &method in methods {
            let cfg = spec.optimizer_config(method, budget);
            let (trace, mut note) = match spec.estimate(&cfg, pattern) {
                Ok(e) => (e.trace, String::new()),
                Err(dabs_core::Error::Diverged { update, trace, .. }) => {
                    (*trace, format!("diverged at update {update}"))
                }
                Err(e) => return Err(e.into()),
            };
            for r in &trace.records {
                traces
                    .write_record([
                        method.to_string(),
                        pattern.to_string(),
                        r.update.to_string(),
                        r.sim_count.to_string(),
                        r.loss.to_string(),
                        r.best_loss.to_string(),
                    ])
                    .map_err(dabs_core::Error::from)?;
            }
            let init = spec.initial_policy(pattern, spec.seeds.init)?;
            let policy = init.with_values(trace.final_params.clone())?;
            let eval_loss = if trace.updates == 0 {
                if note.is_empty() {
                    note = "no update completed".into();
                }
                None
            } else {
                Some(spec.evaluate(&policy, runs)?.loss)
            };
            rows.push(CompareRow {
                method,
                init_pattern: pattern.to_string(),
                updates: trace.updates,
                sim_count: trace.sim_count,
                final_loss: trace.final_loss(),
                best_loss: trace.best_loss.is_finite().then_some(trace.best_loss),
                eval_loss,
                cost: policy.cost(),
                note,
            });
        }
    }
    traces.flush().map_err(dabs_core::Error::Io)?;
    drop(traces);

    let mut w = csv::Writer::from_writer(create(out, "summary.csv", outputs)?);
    w.write_record([
        "method",
        "init_pattern",
        "updates",
        "sim_count",
        "final_loss",
        "best_loss",
        "eval_loss",
        "cost",
        "note",
    ])
    .map_err(dabs_core::Error::from)?;
    println!(
        "{:<8} {:>7} {:>8} {:>9} {:>12} {:>12} {:>12} {:>10}  note",
        "method", "pattern", "updates", "sims", "final_loss", "best_loss", "eval_loss", "cost"
    );
    for r in &rows {
        w.write_record([
            r.method.to_string(),
            r.init_pattern.clone(),
            r.updates.to_string(),
            r.sim_count.to_string(),
            opt_field(r.final_loss),
            opt_field(r.best_loss),
            opt_field(r.eval_loss),
            r.cost.to_string(),
            r.note.clone(),
        ])
        .map_err(dabs_core::Error::from)?;
        println!(
            "{:<8} {:>7} {:>8} {:>9} {:>12} {:>12} {:>12} {:>10.4}  {}",
            r.method.name(),
            r.init_pattern,
            r.updates,
            r.sim_count,
            fmt_opt(r.final_loss),
            fmt_opt(r.best_loss),
            fmt_opt(r.eval_loss),
            r.cost,
            r.note
        );
    }
    w.flush().map_err(dabs_core::Error::Io)?;
    write_json(out, "summary.json", &rows)?;
    outputs.push("summary.json".into());
    Ok(())
}

/// `1,2` lists patterns; anything else is one pattern.
fn parse_patterns(s: &str) -> CliResult<Vec<InitPattern>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.iter().all(|p| *p == "1" || *p == "2") {
        parts.iter().map(|p| p.parse().map_err(CliError::from)).collect()
    } else {
        Ok(vec![s.parse()?])
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}
