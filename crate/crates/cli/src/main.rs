//! `mpoe` command-line tool.
//!
//! Exit codes: 0 success, 1 property violation, 2 usage or configuration
//! error, 3 I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpoe::analysis::Kernel;
use mpoe::io::Dtype;
use mpoe::mpo::Normalization;

#[derive(Parser)]
#[command(name = "mpoe", version, about = "MPO-factorized mixture-of-experts toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KernelArg {
    Rbf,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a matrix tensor file into MPO local tensors
    Decompose {
        #[arg(long)]
        input: PathBuf,
        /// Number of local tensors when --plan is absent
        #[arg(long, default_value_t = 5)]
        m: usize,
        /// Explicit plan, e.g. "i=3,4,4,4,4;j=4,4,8,6,4"
        #[arg(long)]
        plan: Option<String>,
        /// Comma-separated bond caps, one per inner bond
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<usize>>,
        #[arg(long, default_value = "none")]
        normalize: Normalization,
        #[arg(long, default_value = "f64")]
        dtype: Dtype,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the matrix from a decomposition directory
    Reconstruct {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f64")]
        dtype: Dtype,
    },
    /// Check the truncation error bound on random decompositions
    VerifyBound {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep full bond dimensions instead of truncating
        #[arg(long)]
        exact: bool,
        /// Write per-trial rows to this CSV file
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train an expert bank on the synthetic teacher task
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for outputs not named in the config
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per factorization size and tabulate the results
    SweepM {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,9")]
        m_list: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Redundancy report for a saved bank
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "rbf")]
        kernel: KernelArg,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default experiment configuration
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decompose {
            input,
            m,
            plan,
            caps,
            normalize,
            dtype,
            out,
        } => commands::decompose(&input, m, plan.as_deref(), caps, normalize, dtype, &out),
        Command::Reconstruct { dir, out, dtype } => commands::reconstruct(&dir, &out, dtype),
        Command::VerifyBound {
            trials,
            max_dim,
            seed,
            exact,
            csv,
        } => commands::verify_bound(trials, max_dim, seed, exact, csv.as_deref()),
        Command::Train { config, out } => commands::train(&config, out.as_deref()),
        Command::SweepM { config, m_list, csv } => commands::sweep_m(&config, &m_list, csv.as_deref()),
        Command::Analyze {
            checkpoint,
            probes,
            seed,
            kernel,
            alpha,
            out,
        } => {
            let kernel = match kernel {
                KernelArg::Rbf => Kernel::Rbf { bandwidth: None },
                KernelArg::Linear => Kernel::Linear,
            };
            commands::analyze(&checkpoint, probes, seed, kernel, alpha, out.as_deref())
        }
        Command::DefaultConfig => commands::default_config(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
