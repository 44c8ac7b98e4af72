mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "smw", version, about = "Scaled MaxWeight dispatch experiments")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Lower bound on every entry of an optimized alpha.
    #[arg(long, global = true, default_value_t = smw_core::exponent::DEFAULT_EPS_FLOOR)]
    pub eps_floor: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a network file and report Hall's gap and CRP status.
    Validate { network: PathBuf },
    /// Demand-drop exponent table for a given or optimized alpha.
    Gamma {
        network: PathBuf,
        /// Comma-separated scaling vector.
        #[arg(long, value_delimiter = ',', conflicts_with = "optimal")]
        alpha: Option<Vec<f64>>,
        /// Solve for the exponent-optimal alpha.
        #[arg(long)]
        optimal: bool,
    },
    /// Policies x fleet sizes x seeds through the simulators.
    Sweep { config: PathBuf },
    /// Write a network instance as JSON.
    Generate {
        kind: GenerateKind,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 0.35)]
        edge_prob: f64,
        #[arg(long, default_value_t = 0.2)]
        sparsity: f64,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
    },
    /// Finite-horizon runs from chosen initial states.
    Transient { config: PathBuf },
    /// Cross-entropy search for alpha (and beta).
    Tune {
        network: PathBuf,
        /// Tuner settings as JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tune_beta: bool,
        /// Where to write the evaluation trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fleet needed to carry the fluid workload.
    Fleet {
        network: PathBuf,
        /// Arrivals per minute.
        #[arg(long)]
        rate: f64,
    },
    /// Exact stationary drop probabilities from the jump-chain oracle.
    Exact {
        network: PathBuf,
        /// Policy name (vanilla, smw-uniform, smw-optimal, fluid, fluid-pickup)
        /// or inline JSON.
        #[arg(long, default_value = "smw-optimal")]
        policy: String,
        #[arg(long = "k", value_delimiter = ',', required = true)]
        ks: Vec<u32>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenerateKind {
    Example1,
    SymmetricRing,
    RandomCrp,
    SyntheticCity,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
