//! `mir`: fit, select, test and simulate mutual influence regressions.

mod commands;
mod error;
mod invocation;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mir_core::estimate::ModelKind;
use mir_core::gof::{VarianceMethod, VarianceScope};
use mir_core::select::Strategy;
use mir_core::simlab::{presets, ErrorDist, SimConfig};
use mir_core::{FitOptions, GofOptions, SelectOptions};
use serde::Deserialize;

use error::{exit, CliError};
use invocation::{DataSpec, GenerateSpec, Invocation, WeightSource};
use manifest::{digest_bytes, FileDigest, RunKey, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "mir", version, about = "Mutual influence regression: estimation, selection, testing and simulation")]
struct Cli {
    /// Seed for stochastic traces (fit, select, test) or the base seed of
    /// simulated data (simulate, generate).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 or unset uses every logical core.
    #[arg(long, global = true, env = "MIR_THREADS")]
    threads: Option<usize>,

    /// TOML or JSON file with options; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a model and write estimates.json and residuals.csv.
    Fit(FitArgs),
    /// Choose weight matrices by EBIC and write selection.csv.
    Select(SelectArgs),
    /// Test the fitted covariance structure and write gof.json.
    Test(TestArgs),
    /// Run a Monte Carlo study from a config file or a table preset.
    Simulate(SimulateArgs),
    /// Write a synthetic data set in the input formats.
    Generate(GenerateArgs),
    /// Re-run the invocation recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Responses, one row per period and one column per actor.
    #[arg(long = "y", value_name = "Y.csv")]
    y: PathBuf,

    /// Directory of W_k{k}_t{t}.csv weight matrices.
    #[arg(long, conflicts_with = "attributes", required_unless_present = "attributes")]
    weights: Option<PathBuf>,

    /// Long-format attributes (k,t,i,value) to build weights from.
    #[arg(long)]
    attributes: Option<PathBuf>,

    /// Target density of the similarity matrices (default 10/n).
    #[arg(long, requires = "attributes")]
    density: Option<f64>,

    /// 1-based indices of discrete attributes, comma separated.
    #[arg(long, value_delimiter = ',', requires = "attributes")]
    discrete: Vec<usize>,

    /// Long-format covariates (j,t,i,value).
    #[arg(long, value_name = "X.csv")]
    x: Option<PathBuf>,

    /// Output directory.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Base,
    Covariates,
    Interactions,
    Individual,
    Time,
    Endogenous,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Base => ModelKind::Base,
            ModelArg::Covariates => ModelKind::Covariates,
            ModelArg::Interactions => ModelKind::Interactions,
            ModelArg::Individual => ModelKind::Individual,
            ModelArg::Time => ModelKind::Time,
            ModelArg::Endogenous => ModelKind::Endogenous,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "base")]
    model: ModelArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Auto,
    Exhaustive,
    BranchAndBound,
    Greedy,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Auto => Strategy::Auto,
            StrategyArg::Exhaustive => Strategy::Exhaustive,
            StrategyArg::BranchAndBound => Strategy::BranchAndBound,
            StrategyArg::Greedy => Strategy::Greedy,
        }
    }
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// EBIC penalty on the number of candidate subsets (default 2).
    #[arg(long)]
    gamma: Option<f64>,
    /// Largest subset size considered (default min(d, 6)).
    #[arg(long)]
    qmax: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VarianceArg {
    /// Variance of the pairwise-product form.
    UStatistic,
    /// Three-term plug-in over lambda and sigma^2.
    PlugIn,
    /// Three-term plug-in over lambda only.
    PlugInLambda,
}

impl From<VarianceArg> for VarianceMethod {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::UStatistic => VarianceMethod::UStatistic,
            VarianceArg::PlugIn => VarianceMethod::PlugIn(VarianceScope::Full),
            VarianceArg::PlugInLambda => VarianceMethod::PlugIn(VarianceScope::LambdaOnly),
        }
    }
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Significance level (default 0.05).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    variance: Option<VarianceArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ErrorArg {
    Normal,
    Mixture,
    StdExponential,
}

impl From<ErrorArg> for ErrorDist {
    fn from(e: ErrorArg) -> Self {
        match e {
            ErrorArg::Normal => ErrorDist::Normal,
            ErrorArg::Mixture => ErrorDist::Mixture,
            ErrorArg::StdExponential => ErrorDist::StdExponential,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Preset simulation grid (1 to 4); otherwise --config is used.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    table: Option<u8>,
    /// Restrict the preset to matching cells, e.g. n=25,T=25,d=2.
    #[arg(long, requires = "table")]
    cell: Option<String>,
    /// Error law for preset cells.
    #[arg(long, value_enum, default_value = "normal")]
    errors: ErrorArg,
    /// Replications per cell.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long = "periods", visible_alias = "T", default_value_t = 50)]
    periods: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// True coefficients, comma separated (default 0.2 each).
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_enum, default_value = "normal")]
    errors: ErrorArg,
    /// Target similarity density (default 10/n).
    #[arg(long)]
    density: Option<f64>,
    /// Also write X.csv with this many standard normal covariates that do
    /// not enter the responses.
    #[arg(long, default_value_t = 0)]
    covariates: usize,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

/// Options accepted by `--config` for fit, select and test.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    fit: FitOptions,
    select: SelectFile,
    gof: Option<GofOptions>,
    weights: WeightsFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelectFile {
    gamma: Option<f64>,
    q_max: Option<usize>,
    strategy: Option<Strategy>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WeightsFile {
    density: Option<f64>,
    discrete: Vec<usize>,
}

fn parse_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn data_spec(args: &DataArgs, file: &WeightsFile) -> DataSpec {
    let weights = match (&args.weights, &args.attributes) {
        (Some(dir), _) => WeightSource::Dir { path: dir.clone() },
        (None, Some(path)) => WeightSource::Attributes {
            path: path.clone(),
            density: args.density.or(file.density),
            discrete: if args.discrete.is_empty() { file.discrete.clone() } else { args.discrete.clone() },
        },
        (None, None) => unreachable!("clap requires one weight source"),
    };
    DataSpec { y: args.y.clone(), weights, x: args.x.clone() }
}

/// Merge flags and config file into a replayable invocation and output dir.
fn resolve(cli: &Cli) -> Result<(Invocation, PathBuf), CliError> {
    let file = || -> Result<FileConfig, CliError> { cli.config.as_deref().map(parse_config).transpose().map(Option::unwrap_or_default) };
    let seed = cli.seed;
    let resolved = match &cli.command {
        Command::Fit(a) => {
            let f = file()?;
            let inv = Invocation::Fit { data: data_spec(&a.data, &f.weights), model: a.model.into(), fit: f.fit, seed };
            (inv, a.data.out.clone())
        }
        Command::Select(a) => {
            let f = file()?;
            let defaults = SelectOptions::default();
            let select = SelectOptions {
                gamma: a.gamma.or(f.select.gamma).unwrap_or(defaults.gamma),
                q_max: a.qmax.or(f.select.q_max),
                strategy: a.strategy.map(Strategy::from).or(f.select.strategy).unwrap_or(defaults.strategy),
                fit: f.fit,
            };
            (Invocation::Select { data: data_spec(&a.data, &f.weights), select, seed }, a.data.out.clone())
        }
        Command::Test(a) => {
            let f = file()?;
            let mut gof = f.gof.unwrap_or_default();
            if let Some(alpha) = a.alpha {
                gof.alpha = alpha;
            }
            if let Some(v) = a.variance {
                gof.variance = v.into();
            }
            (Invocation::Test { data: data_spec(&a.data, &f.weights), fit: f.fit, gof, seed }, a.data.out.clone())
        }
        Command::Simulate(a) => {
            let error_dist = a.errors.into();
            let mut cells = match (a.table, &cli.config) {
                (Some(_), Some(_)) => return Err(CliError::Input("use either --table or --config, not both".into())),
                (Some(table), None) => {
                    let cells = presets::table(table, error_dist)?;
                    match &a.cell {
                        Some(spec) => presets::filter_cells(cells, spec)?,
                        None => cells,
                    }
                }
                (None, Some(path)) => vec![parse_config::<SimConfig>(path)?],
                (None, None) => return Err(CliError::Input("simulate needs --table or --config".into())),
            };
            for c in &mut cells {
                if let Some(r) = a.reps {
                    c.replications = r;
                }
                if let Some(s) = seed {
                    c.base_seed = s;
                }
                c.validate()?;
            }
            (Invocation::Simulate { table: a.table, error_dist, cells }, a.out.clone())
        }
        Command::Generate(a) => {
            let mut config = SimConfig {
                n: a.n,
                periods: a.periods,
                d: a.d,
                lambda_true: a.lambda.clone(),
                error_dist: a.errors.into(),
                density: a.density,
                replications: 1,
                ..SimConfig::default()
            };
            if let Some(s) = seed {
                config.base_seed = s;
            }
            config.validate()?;
            (Invocation::Generate(GenerateSpec { config, covariates: a.covariates }), a.out.clone())
        }
        Command::Replay(a) => {
            let recorded = manifest::read_manifest(&a.manifest)?;
            manifest::verify_inputs(&recorded.key)?;
            (recorded.key.config, a.out.clone())
        }
    };
    Ok(resolved)
}

fn write_outputs(out_dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<FileDigest>, CliError> {
    let internal = |p: &Path, e: std::io::Error| CliError::Internal(format!("{}: {e}", p.display()));
    let mut digests = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| internal(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| internal(&path, e))?;
        digests.push(FileDigest { path: PathBuf::from(name), sha256: digest_bytes(bytes) });
    }
    Ok(digests)
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let (invocation, out_dir) = resolve(&cli)?;
    let key = RunKey::new(invocation)?;
    let id = key.id();
    let output = commands::execute(&key.config, &id)?;
    for line in &output.messages {
        println!("{line}");
    }
    let outputs = write_outputs(&out_dir, &output.files)?;
    let manifest = RunManifest {
        manifest_id: id,
        key,
        threads: rayon::current_num_threads(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    write_outputs(&out_dir, &[(MANIFEST_FILE.to_string(), bytes)])?;
    if output.not_converged {
        return Ok(exit::NON_CONVERGENCE);
    }
    Ok(exit::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
        Err(_) => ExitCode::from(exit::INTERNAL),
    }
}
