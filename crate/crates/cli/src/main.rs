use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use qrstream::inference::critical::{
    build_cache, CriticalValues, CvCache, SimSettings, StatForm, DEFAULT_GRID, DEFAULT_REPS, DEFAULT_SEED,
    DEFAULT_T_PROBS, DEFAULT_WALD_PROBS, TABLE_PROBS, TABLE_VALUES,
};
use qrstream::ingest::{ColumnRef, Dataset, DatasetSchema, IndexedCsv};
use qrstream::init::{Gamma0Spec, InitSpec, DEFAULT_SUBSAMPLE_FRACTION};
use qrstream::mc::{coverage_experiment, generate_dgp_with, write_records_csv, McDesign, Noise};
use qrstream::pipeline::{fit, test_homogeneity, FitConfig, HomogeneityConfig, Source};
use qrstream::scaling::ScalingMode;
use qrstream::sgd::DEFAULT_EXPONENT;
use qrstream::{Error, ErrorCategory};

/// Simulated draws (`reps * grid * sum(ell)`) allowed without `--force`.
const CV_BUDGET: f64 = 1e10;

#[derive(Parser)]
#[command(name = "qrstream", version, about = "Streaming quantile regression with online random-scaling inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate quantile coefficients from a CSV file and report inference.
    Fit(FitArgs),
    /// Monte Carlo coverage study on the simulated location model.
    Simulate(SimulateArgs),
    /// Regenerate the critical-value cache by simulation.
    Cv(CvArgs),
    /// Test equality of coefficients at two quantile levels.
    TestHomogeneity(HomogeneityArgs),
    /// Write a CSV drawn from the simulated location model.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file (header required; `.gz` accepted).
    #[arg(long)]
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: String,
    /// Regressor columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    /// Do not prepend an intercept.
    #[arg(long)]
    no_intercept: bool,
}

#[derive(Args)]
struct EstimationArgs {
    /// Learning-rate exponent `a` in (0.5, 1).
    #[arg(long, default_value_t = DEFAULT_EXPONENT)]
    a: f64,
    /// `auto` (rule of thumb) or a positive number.
    #[arg(long, default_value = "1")]
    gamma0: String,
    /// `smoothed[:FRACTION]`, `burnin:K`, `zero` or `user:b1,b2,...`.
    #[arg(long, default_value = "smoothed:0.1")]
    init: String,
    /// Bandwidth of the smoothed initializer.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Alternative critical-value cache file.
    #[arg(long)]
    cv_cache: Option<PathBuf>,
    /// Simulate critical values missing from the cache.
    #[arg(long)]
    simulate_cv: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Quantile level.
    #[arg(long)]
    tau: Option<f64>,
    /// Several quantile levels, fitted in one pass.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// One-based coordinates to report (intercept is 1 when present).
    #[arg(long, value_delimiter = ',')]
    coords: Vec<usize>,
    /// Diagonal scaling over every coordinate.
    #[arg(long, conflicts_with = "coords")]
    all_diagonal: bool,
    /// Diagonal scaling over the selected coordinates.
    #[arg(long)]
    diagonal: bool,
    /// Hypothesized values, one per reported coordinate.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    hypothesis: Vec<f64>,
    /// Track the selection path with this threshold.
    #[arg(long)]
    selection: Option<f64>,
    #[command(flatten)]
    est: EstimationArgs,
}

#[derive(Args)]
struct HomogeneityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    tau1: f64,
    #[arg(long)]
    tau2: f64,
    /// One-based coordinates to compare; defaults to every slope.
    #[arg(long, value_delimiter = ',')]
    coords: Vec<usize>,
    #[command(flatten)]
    est: EstimationArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    /// Number of non-constant regressors.
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One-based target coordinate (2 is the first slope).
    #[arg(long, default_value_t = 2)]
    coord: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = DEFAULT_EXPONENT)]
    a: f64,
    #[arg(long, default_value = "1")]
    gamma0: String,
    #[arg(long, default_value = "smoothed:0.1")]
    init: String,
    /// Scale errors by `exp(z1 / 2)`.
    #[arg(long)]
    heteroskedastic: bool,
    /// Per-replication CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Summary JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    /// Restriction counts to simulate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    ell: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value = "cv_cache.txt")]
    out: PathBuf,
    /// Run even when the simulation exceeds the default budget.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    heteroskedastic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    category: &'a str,
    exit_code: i32,
    message: String,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

fn report_error(category: ErrorCategory, message: String) -> ExitCode {
    let code = category.exit_code();
    let body = ErrorReport {
        error: ErrorBody {
            category: category.as_str(),
            exit_code: code,
            message,
        },
    };
    eprintln!("{}", serde_json::to_string(&body).expect("serializable"));
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error(ErrorCategory::Usage, e.render().to_string().trim().to_string()),
    };
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Cv(args) => cmd_cv(args),
        Command::TestHomogeneity(args) => cmd_test_homogeneity(args),
        Command::Generate(args) => cmd_generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(e.category(), e.to_string()),
    }
}

type Result<T> = std::result::Result<T, Error>;

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn parse_gamma0(s: &str) -> Result<Gamma0Spec> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Gamma0Spec::Auto);
    }
    let g: f64 = s.parse().map_err(|_| usage(format!("--gamma0 must be `auto` or a number, got {s:?}")))?;
    if !(g > 0.0 && g.is_finite()) {
        return Err(usage(format!("--gamma0 must be positive, got {g}")));
    }
    Ok(Gamma0Spec::Fixed(g))
}

fn parse_init(s: &str, bandwidth: Option<f64>) -> Result<InitSpec> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let bad = || usage(format!("cannot parse --init {s:?}"));
    let spec = match (kind, arg) {
        ("zero", None) => InitSpec::Zero,
        ("smoothed", None) => InitSpec::SmoothedQr {
            fraction: DEFAULT_SUBSAMPLE_FRACTION,
            bandwidth,
        },
        ("smoothed", Some(f)) => InitSpec::SmoothedQr {
            fraction: f.parse().map_err(|_| bad())?,
            bandwidth,
        },
        ("burnin", Some(k)) => InitSpec::BurnIn {
            count: k.parse().map_err(|_| bad())?,
        },
        ("user", Some(v)) => InitSpec::User {
            beta: v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    if bandwidth.is_some() && !matches!(spec, InitSpec::SmoothedQr { .. }) {
        return Err(usage("--bandwidth only applies to --init smoothed"));
    }
    Ok(spec)
}

fn zero_based(coords: &[usize], what: &str) -> Result<Vec<usize>> {
    coords
        .iter()
        .map(|&c| {
            c.checked_sub(1)
                .ok_or_else(|| usage(format!("{what} are one-based; got 0")))
        })
        .collect()
}

fn critical_values(est: &EstimationArgs) -> Result<CriticalValues> {
    let cvs = match &est.cv_cache {
        Some(p) => CriticalValues::new(CvCache::load(p)?),
        None => CriticalValues::bundled(),
    };
    Ok(if est.simulate_cv {
        cvs.with_simulation(SimSettings::default())
    } else {
        cvs
    })
}

fn schema(data: &DataArgs) -> DatasetSchema {
    DatasetSchema::new(
        data.response.as_str(),
        data.features.iter().map(|f| ColumnRef::Name(f.clone())).collect(),
        !data.no_intercept,
    )
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let mut taus = args.taus.clone();
    if let Some(t) = args.tau {
        taus.insert(0, t);
    }
    if taus.is_empty() {
        return Err(usage("give --tau or --taus"));
    }
    let (mode, coords) = if args.all_diagonal {
        (ScalingMode::Diagonal, Vec::new())
    } else {
        let coords = zero_based(&args.coords, "--coords")?;
        let mode = if args.diagonal {
            ScalingMode::Diagonal
        } else if coords.is_empty() {
            ScalingMode::Full
        } else {
            ScalingMode::Subvector
        };
        (mode, coords)
    };
    let config = FitConfig {
        taus,
        a: args.est.a,
        gamma0: parse_gamma0(&args.est.gamma0)?,
        init: parse_init(&args.est.init, args.est.bandwidth)?,
        seed: args.est.seed,
        mode,
        coords,
        level: args.est.level,
        hypothesis: (!args.hypothesis.is_empty()).then(|| args.hypothesis.clone()),
        selection_lambda: args.selection,
    };
    config.precheck()?;
    let cvs = critical_values(&args.est)?;
    cvs.two_sided(config.level)?;

    let index = IndexedCsv::build(&args.data.data, &schema(&args.data))?;
    let names = index.schema().names.clone();
    let report = fit(
        Source::Indexed(&index),
        &names,
        Some(args.data.data.display().to_string()),
        &config,
        &cvs,
    )?;
    emit(&report, args.est.out.as_deref())
}

fn cmd_test_homogeneity(args: HomogeneityArgs) -> Result<()> {
    let explicit = zero_based(&args.coords, "--coords")?;
    let mut config = HomogeneityConfig {
        taus: [args.tau1, args.tau2],
        a: args.est.a,
        gamma0: parse_gamma0(&args.est.gamma0)?,
        init: parse_init(&args.est.init, args.est.bandwidth)?,
        seed: args.est.seed,
        coords: if explicit.is_empty() { vec![usize::MAX] } else { explicit.clone() },
        level: args.est.level,
    };
    config.precheck()?;
    let cvs = critical_values(&args.est)?;

    let index = IndexedCsv::build(&args.data.data, &schema(&args.data))?;
    let d = index.schema().dim();
    if explicit.is_empty() {
        let first = usize::from(!args.data.no_intercept);
        config.coords = (first..d).collect();
    }
    let names = index.schema().names.clone();
    let report = test_homogeneity(
        Source::Indexed(&index),
        &names,
        Some(args.data.data.display().to_string()),
        &config,
        &cvs,
    )?;
    emit(&report, args.est.out.as_deref())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    if args.d == 0 {
        return Err(usage("--d must be at least 1"));
    }
    if args.coord == 0 || args.coord > args.d + 1 {
        return Err(usage(format!("--coord must lie in 1..={}", args.d + 1)));
    }
    let mut design = McDesign::new(args.n, args.d, args.tau, args.reps, args.seed);
    design.coord = args.coord - 1;
    design.level = args.level;
    design.a = args.a;
    design.gamma0 = parse_gamma0(&args.gamma0)?;
    design.init = parse_init(&args.init, None)?;
    design.noise = if args.heteroskedastic {
        Noise::Heteroskedastic
    } else {
        Noise::Homoskedastic
    };
    FitConfig {
        taus: vec![design.tau],
        a: design.a,
        gamma0: design.gamma0,
        init: design.init.clone(),
        seed: 0,
        mode: ScalingMode::Diagonal,
        coords: Vec::new(),
        level: design.level,
        hypothesis: None,
        selection_lambda: None,
    }
    .precheck()?;
    design.validate()?;
    let outcome = coverage_experiment(&design)?;
    if let Some(p) = &args.out_csv {
        write_records_csv(p, &outcome.records)?;
    }
    emit(&outcome.summary, args.out.as_deref())
}

#[derive(Serialize)]
struct CvCheck {
    prob: f64,
    table: f64,
    simulated: f64,
    relative_error: f64,
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    if args.ell.is_empty() || args.ell.contains(&0) {
        return Err(usage("--ell needs positive values"));
    }
    if args.grid < 2 || args.reps == 0 {
        return Err(usage("--grid must be at least 2 and --reps at least 1"));
    }
    let cost = args.reps as f64 * args.grid as f64 * args.ell.iter().sum::<usize>() as f64;
    if cost > CV_BUDGET && !args.force {
        return Err(usage(format!(
            "simulation needs {cost:.3e} normal draws, above the budget of {CV_BUDGET:.0e}; pass --force to run anyway"
        )));
    }
    let cache = build_cache(&args.ell, &DEFAULT_T_PROBS, &DEFAULT_WALD_PROBS, args.grid, args.reps, args.seed)?;
    cache.save(&args.out)?;
    let checks: Vec<CvCheck> = TABLE_PROBS
        .iter()
        .zip(TABLE_VALUES)
        .filter_map(|(&p, v)| {
            cache.find(StatForm::T, 1, p).map(|e| CvCheck {
                prob: p,
                table: v,
                simulated: e.value,
                relative_error: e.value / v - 1.0,
            })
        })
        .collect();
    #[derive(Serialize)]
    struct Out {
        path: String,
        cache_id: String,
        rows: usize,
        table_check: Vec<CvCheck>,
    }
    emit(
        &Out {
            path: args.out.display().to_string(),
            cache_id: cache.id(),
            rows: cache.entries().len(),
            table_check: checks,
        },
        None,
    )
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let noise = if args.heteroskedastic {
        Noise::Heteroskedastic
    } else {
        Noise::Homoskedastic
    };
    let full = generate_dgp_with(args.n, args.d, args.seed, noise)?;
    // Drop the constant column; `fit` adds its own intercept.
    let mut out = Dataset::with_capacity(args.d, args.n)?;
    for (x, y) in full.rows() {
        out.push(&x[1..], y)?;
    }
    let names: Vec<String> = (1..=args.d).map(|j| format!("z{j}")).collect();
    out.write_csv(&args.out, &names)
}
