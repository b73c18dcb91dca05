//! Command-line driver: `equiv`, `diagnose`, `bench` and `demo`.
//!
//! Every command reads a [`RunConfig`] assembled from defaults, the
//! `MIXLAB_OUT` environment variable (output directory only), an optional
//! `key = value` config file and `--key value` flags, in increasing order of
//! precedence.

pub mod commands;
pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mixlab", version, about = "Sequence-mixer equivalence checks, diagnostics, scaling benchmarks and block demos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check linear-time operators against their materialized mixers.
    Equiv,
    /// Rank, distance and locality reports for attention and scan mixers.
    Diagnose,
    /// Runtime scaling sweep with log-log slope fits.
    Bench,
    /// Run a seeded block stack and save its weights.
    Demo,
}

/// Per-key overrides. Each flag has the same name as its config key.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long = "seed", global = true, value_name = "U64")]
    seed: Option<String>,
    #[arg(long = "T", global = true, value_name = "INT")]
    t: Option<String>,
    #[arg(long = "d_model", alias = "d-model", global = true, value_name = "INT")]
    d_model: Option<String>,
    #[arg(long = "num_heads", alias = "num-heads", global = true, value_name = "INT")]
    num_heads: Option<String>,
    #[arg(long = "d_head", alias = "d-head", global = true, value_name = "INT")]
    d_head: Option<String>,
    #[arg(long = "r", global = true, value_name = "INT")]
    r: Option<String>,
    #[arg(long = "N", global = true, value_name = "INT")]
    n: Option<String>,
    #[arg(long = "kernel_size", alias = "kernel-size", global = true, value_name = "INT")]
    kernel_size: Option<String>,
    #[arg(long = "dilation_period", alias = "dilation-period", global = true, value_name = "INT")]
    dilation_period: Option<String>,
    #[arg(long = "num_blocks", alias = "num-blocks", global = true, value_name = "INT")]
    num_blocks: Option<String>,
    #[arg(long = "mixer_kind", alias = "mixer-kind", global = true, value_name = "KIND")]
    mixer_kind: Option<String>,
    /// Output directory; defaults to $MIXLAB_OUT, then `mixlab-out`.
    #[arg(long = "out", aliases = ["output_dir", "output-dir"], global = true, value_name = "DIR")]
    output_dir: Option<String>,
    #[arg(long = "preset", global = true, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long = "tolerance", global = true, value_name = "FLOAT", allow_hyphen_values = true)]
    tolerance: Option<String>,
    #[arg(long = "cases", global = true, value_name = "INT")]
    cases: Option<String>,
    #[arg(long = "bins", global = true, value_name = "INT")]
    bins: Option<String>,
    #[arg(long = "r_values", alias = "r-values", global = true, value_name = "LIST")]
    r_values: Option<String>,
    #[arg(long = "approx_seeds", alias = "approx-seeds", global = true, value_name = "INT")]
    approx_seeds: Option<String>,
    /// Stem of a tensor container holding `q` and `k`.
    #[arg(long = "qk_dump", alias = "qk-dump", global = true, value_name = "PATH")]
    qk_dump: Option<String>,
    #[arg(long = "t_values", alias = "t-values", global = true, value_name = "LIST")]
    t_values: Option<String>,
    #[arg(long = "repeats", global = true, value_name = "INT")]
    repeats: Option<String>,
    #[arg(long = "bench_d", alias = "bench-d", global = true, value_name = "INT")]
    bench_d: Option<String>,
    #[arg(long = "bench_r", alias = "bench-r", global = true, value_name = "INT")]
    bench_r: Option<String>,
    #[arg(long = "bench_ops", alias = "bench-ops", global = true, value_name = "LIST")]
    bench_ops: Option<String>,
    /// Zero every block projection so each block reduces to layer_norm.
    #[arg(
        long = "zero-weights",
        alias = "zero_weights",
        global = true,
        value_name = "BOOL",
        num_args = 0..=1,
        default_missing_value = "true"
    )]
    zero_weights: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("T", &self.t),
            ("d_model", &self.d_model),
            ("num_heads", &self.num_heads),
            ("d_head", &self.d_head),
            ("r", &self.r),
            ("N", &self.n),
            ("kernel_size", &self.kernel_size),
            ("dilation_period", &self.dilation_period),
            ("num_blocks", &self.num_blocks),
            ("mixer_kind", &self.mixer_kind),
            ("output_dir", &self.output_dir),
            ("preset", &self.preset),
            ("tolerance", &self.tolerance),
            ("cases", &self.cases),
            ("bins", &self.bins),
            ("r_values", &self.r_values),
            ("approx_seeds", &self.approx_seeds),
            ("qk_dump", &self.qk_dump),
            ("t_values", &self.t_values),
            ("repeats", &self.repeats),
            ("bench_d", &self.bench_d),
            ("bench_r", &self.bench_r),
            ("bench_ops", &self.bench_ops),
            ("zero_weights", &self.zero_weights),
        ]
    }
}

impl Cli {
    /// Merges defaults, `env_out`, the config file and the flags.
    pub fn run_config(&self, env_out: Option<PathBuf>) -> Result<RunConfig, CliError> {
        let mut values: BTreeMap<String, String> = match &self.config {
            Some(path) => config::read_config_file(path)?,
            None => BTreeMap::new(),
        };
        for (key, value) in self.overrides.pairs() {
            if let Some(v) = value {
                values.insert(key.to_string(), v.clone());
            }
        }
        RunConfig::from_pairs(&values, env_out)
    }
}

/// `println!` that tolerates a closed stdout (for example `mixlab ... | head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Runs one parsed invocation and prints a short summary to stdout.
pub fn execute(cli: &Cli, env_out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = cli.run_config(env_out)?;
    match cli.command {
        Command::Equiv => {
            let report = commands::cmd_equiv(&cfg)?;
            for c in &report.cases {
                say!("{:<20} max_abs_err {:<12.3e} {}", c.case, c.max_abs_err, if c.pass { "pass" } else { "FAIL" });
            }
            say!("wrote {}", report.path.display());
            if !report.all_pass() {
                let failing: Vec<&str> = report.cases.iter().filter(|c| !c.pass).map(|c| c.case).collect();
                return Err(CliError::Failed(format!(
                    "{} exceeded tolerance {:e}",
                    failing.join(", "),
                    cfg.tolerance
                )));
            }
        }
        Command::Diagnose => {
            let report = commands::cmd_diagnose(&cfg)?;
            for row in &report.rank_rows {
                say!("{:<8} T={} rank {}", row.mixer_kind, row.t, row.rank);
            }
            report.paths.iter().for_each(|p| say!("wrote {}", p.display()));
        }
        Command::Bench => {
            let report = commands::cmd_bench(&cfg)?;
            for r in &report.reports {
                say!("{:<18} slope {:.3} R^2 {:.4}", r.op_label, r.fitted_slope, r.r_squared);
            }
            report.paths.iter().for_each(|p| say!("wrote {}", p.display()));
        }
        Command::Demo => {
            let report = commands::cmd_demo(&cfg)?;
            say!("dilations {:?}", report.dilations);
            say!("checksum {:016x}", report.checksum);
            report.paths.iter().for_each(|p| say!("wrote {}", p.display()));
        }
    }
    Ok(())
}

/// Parses `args` and runs. Returns the process exit code.
pub fn main_with<I, T>(args: I, env_out: Option<PathBuf>) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_USAGE } else { error::EXIT_OK };
        }
    };
    match execute(&cli, env_out) {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            eprintln!("mixlab: {e}");
            e.exit_code()
        }
    }
}
