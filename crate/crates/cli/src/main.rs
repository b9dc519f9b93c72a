mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use beacon_core::bernoulli::{binary_decide, reservation_cost, BetaState};
use beacon_core::evalbench::{sweep_cost, write_csv, BenchReport, PolicySpec, RunManifest, TableRef};
use beacon_core::hindex::{
    build_table, cost_grid, zhat_grid, GridSpacing, HTable, HTableSpec, TableRegistry, DEFAULT_COST_MAX,
    DEFAULT_COST_MIN, DEFAULT_COST_POINTS, DEFAULT_GRID_SIZE, DEFAULT_SINH_SCALE, ZHAT_BOUND,
};
use beacon_core::numerics::DEFAULT_QUAD_NODES;
use beacon_core::posterior::NigPrior;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig};
use error::CliError;

/// Environment variable naming the table cache directory.
const CACHE_ENV: &str = "BEACON_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "beacon", version, about = "Bayesian optimal stopping for sequential sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an index table and write it to a file.
    BuildTable(BuildArgs),
    /// Print index values of one stage of a table.
    Inspect(InspectArgs),
    /// Evaluate the configured policies and write results.csv and manifest.json.
    Simulate(RunArgs),
    /// Same as simulate, over a grid of costs.
    SweepCost(RunArgs),
    /// Reservation costs and decisions for binary rewards with a Beta prior.
    BernoulliIndex(BernoulliArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Spacing {
    Sinh,
    Uniform,
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Horizon n (maximum number of draws).
    #[arg(short = 'n', long)]
    horizon: usize,
    /// Prior as "mu0,nu0,alpha0,beta0"; Jeffreys when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    prior: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid_size: usize,
    #[arg(long, value_enum, default_value = "sinh")]
    spacing: Spacing,
    #[arg(long, default_value_t = DEFAULT_SINH_SCALE)]
    sinh_scale: f64,
    #[arg(long, default_value_t = DEFAULT_QUAD_NODES)]
    quad_nodes: usize,
    #[arg(long, default_value_t = DEFAULT_COST_POINTS)]
    cost_points: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    table: PathBuf,
    #[arg(short = 'k', long)]
    stage: usize,
    /// Standardized best rewards to evaluate.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-3,-2,-1,0,1,2,3,5,10,30"
    )]
    zhat: Vec<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Single cost.
    #[arg(long, conflicts_with = "costs")]
    cost: Option<f64>,
    /// Comma-separated cost grid.
    #[arg(long, value_delimiter = ',')]
    costs: Option<Vec<f64>>,
    /// Robust updates for every index policy.
    #[arg(long, conflicts_with = "plain")]
    robust: bool,
    /// Plain conjugate updates for every index policy.
    #[arg(long)]
    plain: bool,
    /// Draws per decision for every index policy.
    #[arg(long)]
    batch: Option<usize>,
    /// Common random numbers across policies.
    #[arg(long)]
    crn: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            episodes: self.episodes,
            horizon: self.horizon,
            costs: self.costs.clone().or(self.cost.map(|c| vec![c])),
            robust: if self.robust {
                Some(true)
            } else if self.plain {
                Some(false)
            } else {
                None
            },
            batch_size: self.batch,
            crn: self.crn.then_some(true),
            workers: self.workers,
            out_dir: self.out_dir.clone(),
        }
    }
}

#[derive(Debug, Args)]
struct BernoulliArgs {
    #[arg(short = 'n', long)]
    horizon: usize,
    #[arg(long, default_value_t = 1.0)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    b0: f64,
    #[arg(short, long)]
    cost: f64,
}

fn registry() -> TableRegistry {
    let dir = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("XDG_CACHE_HOME").map(|d| PathBuf::from(d).join("beacon")))
        .or_else(|| std::env::var_os("HOME").map(|d| PathBuf::from(d).join(".cache").join("beacon")));
    match dir {
        Some(d) => TableRegistry::with_cache_dir(d),
        None => TableRegistry::new(),
    }
}

fn build(args: &BuildArgs) -> Result<(), CliError> {
    let prior = match &args.prior {
        Some(p) if p.len() != 4 => {
            return Err(CliError::Config(format!("--prior needs 4 values, got {}", p.len())));
        }
        Some(p) => NigPrior::new(p[0], p[1], p[2], p[3]).map_err(|e| CliError::Config(e.to_string()))?,
        None => NigPrior::jeffreys(),
    };
    let spacing = match args.spacing {
        Spacing::Sinh => GridSpacing::Sinh {
            scale: args.sinh_scale,
        },
        Spacing::Uniform => GridSpacing::Uniform,
    };
    let mut spec = HTableSpec::with_resolution(args.horizon, prior, args.grid_size, args.quad_nodes)?;
    spec.spacing = spacing;
    spec.zhat_grid = zhat_grid(args.grid_size, ZHAT_BOUND, spacing);
    spec.cost_grid = cost_grid(args.cost_points, DEFAULT_COST_MIN, DEFAULT_COST_MAX);
    spec.validate()?;
    let start = Instant::now();
    let table = build_table(&spec)?;
    let secs = start.elapsed().as_secs_f64();
    table.save(&args.out)?;
    println!("wrote {}", args.out.display());
    println!("stages      {}..{} (k0 = {})", spec.k0(), spec.horizon, spec.k0());
    println!("zhat grid   {} points on [-{ZHAT_BOUND}, {ZHAT_BOUND}]", spec.grid_size());
    println!("cost grid   {} points", spec.cost_grid.len());
    println!("quadrature  {} nodes", spec.quad_nodes);
    println!("build time  {secs:.2}s");
    println!("checksum    {}", table.checksum());
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    let table = HTable::load(&args.table).map_err(|e| match CliError::from(e) {
        CliError::Io(msg) => CliError::Io(format!("{}: {msg}", args.table.display())),
        other => other,
    })?;
    let row = table.stage_values(args.stage)?;
    println!("stage {} of horizon {} ({})", args.stage, table.horizon(), args.table.display());
    println!("{:>12} {:>24}", "zhat", "h");
    for &z in &args.zhat {
        println!("{z:>12.4} {:>24.16e}", table.lookup(args.stage, z)?);
    }
    let decreasing = row.windows(2).all(|w| w[1] < w[0]);
    println!(
        "monotonicity: h is {}strictly decreasing across the {} grid points",
        if decreasing { "" } else { "NOT " },
        row.len()
    );
    Ok(())
}

fn print_reports(reports: &[BenchReport]) {
    println!(
        "{:<16} {:>8} {:>9} {:>10} {:>10} {:>9} {:>10}",
        "policy", "cost", "mean K", "mean best", "value", "+/-", "std value"
    );
    for b in reports {
        for p in &b.policies {
            println!(
                "{:<16} {:>8.4} {:>9.3} {:>10.4} {:>10.4} {:>9.4} {:>10.4}",
                p.policy, p.cost, p.mean_samples, p.mean_best, p.value, p.hw_value, p.std_value
            );
        }
    }
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?.apply(&args.overrides())?;
    let tables = registry();
    let reports = sweep_cost(&cfg.policies, &cfg.stream, &cfg.eval_options(), &cfg.cost_grid(), &tables)?;
    print_reports(&reports);

    let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io(&cfg.out_dir, e))?;
    let csv_path = cfg.out_dir.join("results.csv");
    write_csv(&reports, &csv_path)?;
    let mut manifest = RunManifest::new(&cfg, cfg.seed)?;
    if cfg.policies.iter().any(|p| matches!(p, PolicySpec::Beacon { .. })) {
        let table = tables.get_or_build(&HTableSpec::new(cfg.horizon, cfg.prior)?)?;
        manifest.tables.push(TableRef {
            horizon: table.horizon(),
            checksum: table.checksum().to_string(),
        });
    }
    manifest.outputs.push(csv_path.display().to_string());
    let manifest_path = cfg.out_dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    println!("wrote {} and {}", csv_path.display(), manifest_path.display());
    Ok(())
}

fn bernoulli(args: &BernoulliArgs) -> Result<(), CliError> {
    let config = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
    if args.horizon == 0 {
        return Err(CliError::Config("horizon must be at least 1".into()));
    }
    let start = BetaState::new(args.a0, args.b0).map_err(|e| config(&e))?;
    println!(
        "Beta({}, {}) prior, horizon {}, cost {}; rows assume no success so far",
        args.a0, args.b0, args.horizon, args.cost
    );
    println!("{:>4} {:>6} {:>8} {:>8} {:>14} {:>9}", "k", "left", "a", "b", "reservation", "decision");
    for k in 0..args.horizon {
        let state = BetaState {
            b: start.b + k as f64,
            ..start
        };
        let t = args.horizon - k;
        let reservation = reservation_cost(args.horizon, k, state.a, state.b).map_err(|e| config(&e))?;
        let d = binary_decide(&state, t, args.cost).map_err(|e| config(&e))?;
        let verdict = if d.is_stop() { "stop" } else { "continue" };
        println!(
            "{k:>4} {t:>6} {:>8.3} {:>8.3} {reservation:>14.10} {verdict:>9}",
            state.a, state.b
        );
    }
    println!("after any success: stop");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildTable(a) => build(a),
        Command::Inspect(a) => inspect(a),
        Command::Simulate(a) | Command::SweepCost(a) => run(a),
        Command::BernoulliIndex(a) => bernoulli(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
