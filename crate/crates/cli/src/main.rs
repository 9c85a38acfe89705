use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seir_ident::config::{CaseSpec, ConfigError, ExperimentConfig};
use seir_ident::observation::{build_case, observe, CaseKey, DataType, Frequency, SamplingSchedule};
use seir_ident::plot::{emit_plot_data, PlotKind, PlotRequest};
use seir_ident::report::{run_cases, write_outputs, IdentReport, RunStatus, Stages};
use seir_ident::seir::{daily_grid, integrate, PARAM_NAMES};

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "seir-ident", version, about = "Practical identifiability of SEIR model parameters")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario at its true parameters and print the trajectory.
    Simulate(SimulateArgs),
    /// Monte Carlo ARE tables and verdicts.
    Mc(GridArgs),
    /// Correlation-matrix verdicts at the true parameters.
    Cm(GridArgs),
    /// Monte Carlo, correlation matrix, and the cross-method analytics.
    ///
    /// Without a configuration or case selection, runs the four comparison
    /// cases: S1 daily prevalence, S3 weekly prevalence, S1 daily incidence
    /// and S1 daily cumulative incidence.
    Compare(GridArgs),
    /// Everything, for every case the configuration selects.
    Run(GridArgs),
    /// Long-format CSV for plotting, from a finished run.
    PlotData(PlotArgs),
}

#[derive(Args, Clone, Default)]
struct Selection {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario 1-4.
    #[arg(long)]
    scenario: Option<u8>,
    /// prevalence, incidence or cumulative.
    #[arg(long = "data-type")]
    data_type: Option<DataType>,
    /// daily, weekly or monthly.
    #[arg(long)]
    freq: Option<Frequency>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    select: Selection,
    /// Noise levels as fractions, comma separated; 0 is always included.
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Replicates per noise level.
    #[arg(long)]
    replicates: Option<usize>,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    select: Selection,
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    select: Selection,
    /// violin, scatter-pairs or are-vs-noise.
    #[arg(long)]
    kind: PlotKind,
    /// Results directory of an earlier run (defaults to the configured output directory).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Restrict a violin extract to one parameter.
    #[arg(long)]
    param: Option<String>,
    /// Noise level for scatter-pairs (largest when omitted).
    #[arg(long)]
    sigma: Option<f64>,
    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Failed(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Validation(e.to_string())
    }
}

fn load_config(sel: &Selection) -> Result<ExperimentConfig, CliError> {
    let mut config = match &sel.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match (sel.scenario, sel.data_type, sel.freq) {
        (Some(scenario), Some(data_type), Some(frequency)) => {
            config.cases = vec![CaseSpec {
                scenario,
                data_type,
                frequency,
            }];
        }
        (scenario, data_type, freq) => {
            if scenario.is_some() || data_type.is_some() || freq.is_some() {
                config.cases.clear();
            }
            if let Some(s) = scenario {
                config.scenarios = vec![s];
            }
            if let Some(d) = data_type {
                config.data_types = vec![d];
            }
            if let Some(f) = freq {
                config.frequencies = vec![f];
            }
        }
    }
    Ok(config)
}

const COMPARISON_CASES: [(u8, DataType, Frequency); 4] = [
    (1, DataType::Prevalence, Frequency::Daily),
    (3, DataType::Prevalence, Frequency::Weekly),
    (1, DataType::Incidence, Frequency::Daily),
    (1, DataType::CumulativeIncidence, Frequency::Daily),
];

fn is_unselected(sel: &Selection) -> bool {
    sel.config.is_none() && sel.scenario.is_none() && sel.data_type.is_none() && sel.freq.is_none()
}

fn grid_config(args: &GridArgs, comparison: bool) -> Result<ExperimentConfig, CliError> {
    let mut config = load_config(&args.select)?;
    if comparison && is_unselected(&args.select) {
        config.cases = COMPARISON_CASES
            .iter()
            .map(|&(scenario, data_type, frequency)| CaseSpec {
                scenario,
                data_type,
                frequency,
            })
            .collect();
    }
    if !args.sigma.is_empty() {
        let mut sigmas = args.sigma.clone();
        sigmas.push(0.0);
        sigmas.sort_by(f64::total_cmp);
        sigmas.dedup();
        config.sigmas = sigmas;
    }
    if let Some(m) = args.replicates {
        config.replicates = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(j) = args.jobs {
        config.jobs = j;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run_grid(args: &GridArgs, stages: Stages, comparison: bool) -> Result<RunStatus, CliError> {
    let config = grid_config(args, comparison)?;
    let report: IdentReport = run_cases(&config, stages).map_err(|e| CliError::Failed(e.to_string()))?;
    write_outputs(&report, &config.output_dir).map_err(|e| CliError::Failed(e.to_string()))?;
    print!("{}", seir_ident::report::render_markdown(&report));
    eprintln!("results written to {}", config.output_dir.display());
    Ok(report.status())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn simulate(args: &SimulateArgs) -> Result<RunStatus, CliError> {
    let config = load_config(&args.select)?;
    let id = args.select.scenario.unwrap_or(1);
    let scenario = config.scenario(id)?;
    let io_err = |e: io::Error| CliError::Failed(e.to_string());
    let mut out = output(args.out.as_deref())?;
    if let Some(data_type) = args.select.data_type {
        let frequency = args.select.freq.unwrap_or(Frequency::Daily);
        let case = build_case(&scenario, data_type, frequency).map_err(|e| CliError::Validation(e.to_string()))?;
        let series = case.clean_series(&config.integrator).map_err(|e| CliError::Failed(e.to_string()))?;
        writeln!(out, "time,{data_type}").map_err(io_err)?;
        for (t, v) in series.times().iter().zip(&series.values) {
            writeln!(out, "{t},{v}").map_err(io_err)?;
        }
        return Ok(RunStatus::Complete);
    }
    let traj = integrate(&scenario.true_params, &scenario.init, &daily_grid(scenario.span), false, &config.integrator)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    // Incidence is included for convenience; it is the daily difference of c.
    let daily = SamplingSchedule::new(Frequency::Daily, scenario.span);
    let inc = observe(&traj, DataType::Incidence, &daily).map_err(|e| CliError::Failed(e.to_string()))?;
    writeln!(out, "time,s,e,i,r,c,incidence").map_err(io_err)?;
    for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let incidence = if k == 0 { 0.0 } else { inc.values[k - 1] };
        writeln!(out, "{t},{},{},{},{},{},{incidence}", x.s, x.e, x.i, x.r, x.c).map_err(io_err)?;
    }
    Ok(RunStatus::Complete)
}

fn plot_data(args: &PlotArgs) -> Result<RunStatus, CliError> {
    let config = load_config(&args.select)?;
    let case = match (args.select.scenario, args.select.data_type, args.select.freq) {
        (Some(scenario), Some(data_type), Some(frequency)) => Some(CaseKey {
            scenario,
            data_type,
            frequency,
        }),
        (None, None, None) => None,
        _ => {
            return Err(CliError::Validation(
                "select a case with all of --scenario, --data-type and --freq".into(),
            ))
        }
    };
    let parameter = match &args.param {
        Some(p) => Some(
            PARAM_NAMES
                .iter()
                .position(|n| n == p)
                .ok_or_else(|| CliError::Validation(format!("unknown parameter {p:?}")))?,
        ),
        None => None,
    };
    let req = PlotRequest {
        kind: args.kind,
        case,
        parameter,
        sigma: args.sigma,
    };
    let from = args.from.clone().unwrap_or(config.output_dir);
    let out = output(args.out.as_deref())?;
    let rows = emit_plot_data(&from, &req, out).map_err(|e| match e {
        seir_ident::plot::PlotError::CaseRequired(_) => CliError::Validation(e.to_string()),
        _ => CliError::Failed(e.to_string()),
    })?;
    log::info!("{rows} rows written");
    Ok(RunStatus::Complete)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Mc(a) => run_grid(a, Stages::MC_ONLY, false),
        Command::Cm(a) => run_grid(a, Stages::CM_ONLY, false),
        Command::Compare(a) => run_grid(a, Stages::ALL, true),
        Command::Run(a) => run_grid(a, Stages::ALL, false),
        Command::PlotData(a) => plot_data(a),
    };
    match result {
        Ok(RunStatus::Complete) => ExitCode::SUCCESS,
        Ok(RunStatus::Partial) => ExitCode::from(EXIT_PARTIAL),
        Ok(RunStatus::Failed) => ExitCode::from(EXIT_FAILED),
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
