use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use roved::harness::{emit_plots, run_experiment, run_suite, run_transfer, RunConfig};
use roved::verify::{formula_oracles, gradient_checks};
use roved::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "roved", version, about = "Preference-based RL with filtered vision-language feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment per seed listed in the config (or the given seed).
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override a config key, e.g. `--set oracle_budget=300`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every (config, seed) pair of several config files and write a summary.
    Suite {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Run with adapters initialised from a saved checkpoint.
    Transfer {
        adapter: PathBuf,
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render learning curves from metrics files to an SVG.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(short, long, default_value = "curves.svg")]
        output: PathBuf,
    },
    /// Finite-difference checks of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the labelling and selection formulas against brute-force versions.
    Selftest {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Ok(false) means the command ran but a check failed.
fn execute(command: Command) -> roved::Result<bool> {
    match command {
        Command::Run { config, seed, out, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            for s in seeds(&cfg, seed) {
                let outcome = run_experiment(&cfg, s, &out)?;
                println!("{} final success {:.3} oracle {}", outcome.metrics_path.display(), outcome.final_success(), outcome.oracle_calls);
            }
            Ok(true)
        }
        Command::Suite { configs, out, sequential } => {
            let cfgs = configs.iter().map(|c| load_config(c, &[])).collect::<roved::Result<Vec<_>>>()?;
            let summary = run_suite(&cfgs, &out, !sequential)?;
            print!("{}", std::fs::read_to_string(&summary.summary_table)?);
            Ok(summary.failures() == 0)
        }
        Command::Transfer { adapter, config, seed, out, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            for s in seeds(&cfg, seed) {
                let outcome = run_transfer(&adapter, &cfg, s, &out)?;
                println!("{} final success {:.3} oracle {}", outcome.metrics_path.display(), outcome.final_success(), outcome.oracle_calls);
            }
            Ok(true)
        }
        Command::Plot { metrics, output } => {
            emit_plots(&metrics, &output)?;
            println!("{}", output.display());
            Ok(true)
        }
        Command::Gradcheck { seed } => {
            let start = std::time::Instant::now();
            let mut ok = true;
            for r in gradient_checks(seed)? {
                ok &= r.passed();
                println!("{:<34} params {:>4}  max rel err {:.2e}  {}", r.name, r.max_network_params, r.max_rel_error, verdict(r.passed()));
            }
            println!("{:.2}s", start.elapsed().as_secs_f64());
            Ok(ok)
        }
        Command::Selftest { cases, seed } => {
            let start = std::time::Instant::now();
            let mut ok = true;
            for r in formula_oracles(cases, seed)? {
                ok &= r.passed();
                println!(
                    "{:<16} cases {:>5}  max abs err {:.2e}  mismatches {}  {}",
                    r.name,
                    r.cases,
                    r.max_abs_error,
                    r.mismatches,
                    verdict(r.passed())
                );
            }
            println!("{:.2}s", start.elapsed().as_secs_f64());
            Ok(ok)
        }
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAILED"
    }
}

fn seeds(cfg: &RunConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

/// Reads a config file and applies `KEY=VALUE` overrides, each value parsed
/// as a TOML value. Any failure here is a config error.
fn load_config(path: &Path, overrides: &[String]) -> roved::Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if overrides.is_empty() {
        return RunConfig::from_toml_str(&text);
    }
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            return Err(Error::Config(format!("override {o:?} is not KEY=VALUE")));
        };
        // bare words such as `task=reach` are taken as strings
        let value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(value.trim().to_string()),
        };
        table.insert(key.trim().to_string(), value);
    }
    RunConfig::from_toml_str(&table.to_string())
}
