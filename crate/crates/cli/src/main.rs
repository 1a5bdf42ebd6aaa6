use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ctrlbench::bench::{
    compare_to_reference, emit_report, run_benchmark, BenchError, BenchmarkResult, ColumnStatus,
    ReferenceTable, ReportFormat, RunOptions, ScenarioSpec, PRESET_REFERENCES, PRESET_SCENARIOS,
};
use ctrlbench::bridge::BridgeConfig;
use ctrlbench::controllers::{ControllerSpec, PRESET_NAMES};
use ctrlbench::metrics::{compute_all, MetricOptions};
use ctrlbench::sim::TrajectoryLog;

const EXIT_CONFIG: u8 = 1;
const EXIT_UNSTABLE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ctrlbench",
    version,
    about = "Closed-loop controller benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate controllers on a scenario and report the criteria table.
    Run(RunArgs),
    /// Empirical gain and delay margins only.
    Margins(RunArgs),
    /// Compute metrics from a recorded trajectory CSV.
    Score(ScoreArgs),
    /// Check a result against a reference table.
    Compare(CompareArgs),
    /// List built-in scenarios, controllers and reference tables.
    List,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Preset name (t1, t2) or path to a scenario JSON file.
    #[arg(long, short)]
    scenario: String,
    /// Comma-separated controller names. Defaults to the scenario's list.
    #[arg(long, short, value_delimiter = ',')]
    controllers: Vec<String>,
    /// Command line of an external controller to add as a column.
    #[arg(long)]
    bridge: Option<String>,
    #[arg(long, default_value = "external")]
    bridge_name: String,
    /// Step timeout for the external controller, seconds.
    #[arg(long)]
    bridge_timeout: Option<f64>,
    /// Output directory for reports and trajectories.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, short, default_value = "md")]
    format: ReportFormat,
    /// Seed for every noise injector.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    tf: Option<f64>,
    /// Worker threads.
    #[arg(long, short)]
    jobs: Option<usize>,
    /// Add classical margins for controllers with a linear form.
    #[arg(long)]
    analytic: bool,
    /// Skip the gain and delay margin probes.
    #[arg(long, conflicts_with = "analytic")]
    no_margins: bool,
    /// End of the step-response window, seconds.
    #[arg(long)]
    window_end: Option<f64>,
    /// Record the wall-clock time in the report.
    #[arg(long)]
    timestamp: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trajectory CSV as written by `run`.
    log: PathBuf,
    #[arg(long)]
    band: Option<f64>,
    #[arg(long)]
    window_end: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Reference table: preset name (t1, t2) or path.
    #[arg(long, short)]
    reference: String,
    /// A JSON report from `run --format json`.
    #[arg(long, conflicts_with = "scenario")]
    result: Option<PathBuf>,
    /// Run this scenario instead of reading a saved result.
    #[arg(long, short)]
    scenario: Option<String>,
    #[arg(long, short)]
    jobs: Option<usize>,
    /// Print the comparison as JSON.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run(a) => cmd_run(&a),
        Command::Margins(a) => cmd_margins(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::List => {
            println!("scenarios: {}", PRESET_SCENARIOS.join(", "));
            println!("controllers: {}", PRESET_NAMES.join(", "));
            println!("references: {}", PRESET_REFERENCES.join(", "));
            Ok(0)
        }
    }
}

fn load_scenario(a: &RunArgs) -> Result<(ScenarioSpec, Vec<String>)> {
    let mut spec = ScenarioSpec::resolve(&a.scenario)?;
    let mut overrides = Vec::new();
    if let Some(seed) = a.seed {
        spec.override_seed(seed);
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dt) = a.dt {
        spec.dt = dt;
        overrides.push(format!("dt={dt}"));
    }
    if let Some(tf) = a.tf {
        spec.tf = tf;
        overrides.push(format!("tf={tf}"));
    }
    if a.analytic {
        spec.margin_probes.analytic = true;
        overrides.push("analytic".into());
    }
    if a.no_margins {
        spec.margin_probes.enabled = false;
        spec.margin_probes.analytic = false;
        overrides.push("no_margins".into());
    }
    if let Some(w) = a.window_end {
        spec.metrics
            .get_or_insert_with(MetricOptions::default)
            .step_window_end = Some(w);
        overrides.push(format!("window_end={w}"));
    }
    spec.validate()?;
    Ok((spec, overrides))
}

fn controller_list(spec: &ScenarioSpec, a: &RunArgs) -> Result<Vec<(String, ControllerSpec)>> {
    let mut names = if a.controllers.is_empty() {
        spec.default_controllers.clone()
    } else {
        a.controllers.clone()
    };
    names.retain(|n| !n.trim().is_empty());
    let mut list = Vec::new();
    for n in names {
        let cs = spec
            .controller(n.trim())
            .with_context(|| format!("controller `{n}`"))?;
        list.push((n.trim().to_string(), cs));
    }
    if let Some(cmd) = &a.bridge {
        let mut cfg = BridgeConfig::from_command_line(cmd, spec.controller_dt);
        if let Some(t) = a.bridge_timeout {
            cfg.step_timeout = t;
        }
        cfg.validate()?;
        list.push((
            a.bridge_name.clone(),
            ControllerSpec::External { config: cfg },
        ));
    }
    if list.is_empty() {
        bail!("no controllers selected");
    }
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _)) = list.iter().find(|(n, _)| !seen.insert(n.clone())) {
        bail!("controller `{dup}` listed twice");
    }
    Ok(list)
}

fn execute(a: &RunArgs) -> Result<BenchmarkResult> {
    let (spec, overrides) = load_scenario(a)?;
    let controllers = controller_list(&spec, a)?;
    let opts = RunOptions {
        jobs: a.jobs,
        keep_trajectories: a.out.is_some(),
        timestamp: a.timestamp,
        overrides,
    };
    Ok(run_benchmark(&spec, &controllers, &opts)?)
}

fn write_outputs(out: &Path, result: &BenchmarkResult, format: ReportFormat) -> Result<()> {
    let dir = out.join(&result.scenario);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for col in &result.columns {
        if let Some(log) = &col.trajectory {
            let cdir = dir.join(&col.controller);
            fs::create_dir_all(&cdir)?;
            let f = fs::File::create(cdir.join("trajectory.csv"))?;
            log.write_csv(std::io::BufWriter::new(f))?;
        }
    }
    fs::write(
        dir.join(format!("report.{}", format.extension())),
        emit_report(result, format),
    )?;
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<u8> {
    let result = execute(a)?;
    print!("{}", emit_report(&result, a.format));
    if let Some(out) = &a.out {
        write_outputs(out, &result, a.format)?;
    }
    for col in result
        .columns
        .iter()
        .filter(|c| c.status != ColumnStatus::Ok)
    {
        eprintln!(
            "{}: {:?}{}",
            col.controller,
            col.status,
            col.error
                .as_deref()
                .map(|e| format!(": {e}"))
                .unwrap_or_default()
        );
    }
    Ok(if result.any_unstable() {
        EXIT_UNSTABLE
    } else {
        0
    })
}

fn cmd_margins(a: &RunArgs) -> Result<u8> {
    let mut a = a.clone();
    a.no_margins = false;
    let (mut spec, overrides) = load_scenario(&a)?;
    spec.margin_probes.enabled = true;
    let controllers = controller_list(&spec, &a)?;
    let opts = RunOptions {
        jobs: a.jobs,
        overrides,
        ..RunOptions::default()
    };
    let result = run_benchmark(&spec, &controllers, &opts)?;
    let fmt = |v: Option<f64>, bound: Option<bool>, sign: &str| match v {
        Some(v) if bound == Some(true) => format!("{sign} {v:.3}"),
        Some(v) => format!("{v:.3}"),
        None => "n/a".into(),
    };
    if a.format == ReportFormat::Json {
        let rows: Vec<_> = result
            .columns
            .iter()
            .map(|c| {
                serde_json::json!({
                    "controller": c.controller,
                    "status": c.status,
                    "gm_db_upper": c.report.gm_db_upper,
                    "gm_db_lower": c.report.gm_db_lower,
                    "gm_linear_upper": c.report.gm_linear_upper,
                    "dm_s": c.report.dm_s,
                    "analytic": c.report.analytic,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!(
            "{:<12} {:>12} {:>12} {:>10}",
            "controller", "GM+ (dB)", "GM- (dB)", "DM (s)"
        );
        for c in &result.columns {
            if c.status != ColumnStatus::Ok {
                println!("{:<12} nominal loop unstable", c.controller);
                continue;
            }
            let r = &c.report;
            println!(
                "{:<12} {:>12} {:>12} {:>10}",
                c.controller,
                fmt(r.gm_db_upper, r.gm_upper_at_bound, ">="),
                fmt(r.gm_db_lower, r.gm_lower_at_bound, "<="),
                fmt(r.dm_s, r.dm_at_bound, ">=")
            );
        }
    }
    Ok(if result.any_unstable() {
        EXIT_UNSTABLE
    } else {
        0
    })
}

fn cmd_score(a: &ScoreArgs) -> Result<u8> {
    let f = fs::File::open(&a.log).with_context(|| format!("opening {}", a.log.display()))?;
    let log = TrajectoryLog::read_csv(f).with_context(|| format!("reading {}", a.log.display()))?;
    let mut opts = MetricOptions::default();
    if let Some(b) = a.band {
        opts.band = b;
    }
    opts.step_window_end = a.window_end;
    let report = compute_all(&log, &opts);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn cmd_compare(a: &CompareArgs) -> Result<u8> {
    let table = ReferenceTable::resolve(&a.reference)?;
    let result: BenchmarkResult = match (&a.result, &a.scenario) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(s)) => {
            let spec = ScenarioSpec::resolve(s)?;
            let names: Vec<String> = if spec.default_controllers.is_empty() {
                table.controllers.clone()
            } else {
                spec.default_controllers.clone()
            };
            let controllers = names
                .into_iter()
                .map(|n| spec.controller(&n).map(|c| (n, c)))
                .collect::<Result<Vec<_>, _>>()?;
            run_benchmark(
                &spec,
                &controllers,
                &RunOptions {
                    jobs: a.jobs,
                    ..RunOptions::default()
                },
            )?
        }
        (None, None) => bail!("give --result or --scenario"),
    };
    let conf = match compare_to_reference(&result, &table) {
        Ok(c) => c,
        Err(e @ BenchError::ShapeMismatch(_)) => {
            eprintln!("error: {e}");
            return Ok(EXIT_CONFIG);
        }
        Err(e) => return Err(e.into()),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&conf)?);
    } else {
        print!("{}", conf.to_text());
    }
    Ok(if conf.claims_pass() { 0 } else { EXIT_UNSTABLE })
}
