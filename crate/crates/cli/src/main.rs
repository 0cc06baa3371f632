use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pfqn::experiments::{self, ExperimentError, ExperimentKind, ExperimentSpec, Params};

#[derive(Parser)]
#[command(
    name = "pfqn",
    version,
    about = "Product-form queueing network experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network file and report per-queue loads.
    Validate(Common),
    /// Normalizing constant, spinning allocation, pmf and Little residuals at n.
    Exact(Common),
    /// Proportionally fair allocation, prices and KKT residuals at n.
    Pf(Common),
    /// Primal and dual rate functions at n.
    Rates(Common),
    /// Spinning allocation at floor(hn) against the PF allocation at n.
    Converge(Common),
    /// Concentration of packet states on the invariant manifold.
    Collapse(Common),
    /// Packet-level pmf across scales c.
    Scaling(Common),
    /// Pmf under several document size distributions.
    Insensitivity(Common),
    /// Flow-level run with trajectory export.
    Simulate(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Args)]
struct Common {
    /// Network description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Document counts, e.g. "1,1,1".
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<f64>>,
    /// Scale factors, e.g. "1,2,4".
    #[arg(long, value_delimiter = ',')]
    h: Option<Vec<u64>>,
    /// Packet-level scales, e.g. "1,4,16".
    #[arg(long, value_delimiter = ',')]
    c: Option<Vec<u32>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    replicas: Option<u32>,
    /// Monte Carlo draws per h in collapse runs.
    #[arg(long)]
    samples: Option<usize>,
}

impl Common {
    fn params(&self) -> Params {
        Params {
            n: self.n.clone(),
            h: self.h.clone(),
            c: self.c.clone(),
            epsilon: self.epsilon,
            seed: self.seed,
            horizon: self.horizon,
            replicas: self.replicas,
            samples: self.samples,
        }
    }
}

fn execute(kind: ExperimentKind, args: &Common) -> Result<Vec<PathBuf>, ExperimentError> {
    let Format::Csv = args.format;
    let spec = ExperimentSpec::from_file(kind, &args.config, args.params())?;
    if kind == ExperimentKind::Simulate {
        let (table, traj) = experiments::run_simulate(&spec)?;
        let mut written = experiments::write_outputs(&table, &args.out)?;
        let path = args.out.join("trajectory.csv");
        let file = fs::File::create(&path)?;
        traj.write_csv(file)?;
        written.push(path);
        return Ok(written);
    }
    let table = experiments::run(&spec)?;
    experiments::write_outputs(&table, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Validate(a) => (ExperimentKind::Validate, a),
        Command::Exact(a) => (ExperimentKind::Exact, a),
        Command::Pf(a) => (ExperimentKind::Pf, a),
        Command::Rates(a) => (ExperimentKind::Rates, a),
        Command::Converge(a) => (ExperimentKind::Converge, a),
        Command::Collapse(a) => (ExperimentKind::Collapse, a),
        Command::Scaling(a) => (ExperimentKind::Scaling, a),
        Command::Insensitivity(a) => (ExperimentKind::Insensitivity, a),
        Command::Simulate(a) => (ExperimentKind::Simulate, a),
    };
    match execute(kind, args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pfqn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
