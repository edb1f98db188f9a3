use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};
use splitprune_core::metrics::{self, RoundMetrics};
use splitprune_core::{run_experiment, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "splitprune",
    version,
    about = "Split-learning simulator with adaptive channel pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every scheme in a config under every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run every `*.toml` in a directory, several at a time.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        /// Parent output directory; each config writes to `<out>/<config stem>`.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Concurrent runs; defaults to the available cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.65)]
        target: f64,
    },
    /// Parse and check a config without training.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn print_round(r: &RoundMetrics) {
    eprintln!(
        "{} seed {} round {:>3}: train loss {:.4}, test acc {:.4}, up {} B, P_t {:.3}",
        r.scheme, r.seed, r.round, r.train_loss, r.test_accuracy, r.uplink_total_bytes, r.mean_p_t
    );
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.training.seeds = vec![s];
    }
    let out = out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/latest"));
    let report = if quiet {
        run_experiment(&cfg, Some(&out), &mut |_| {})?
    } else {
        run_experiment(&cfg, Some(&out), &mut print_round)?
    };
    print!("{}", metrics::format_report(&report.summaries));
    println!("outputs written to {}", out.display());
    Ok(())
}

fn sweep(dir: &Path, out: &Path, jobs: Option<usize>) -> Result<bool> {
    let mut configs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    for c in &configs {
        RunConfig::from_file(c)?.validate()?;
    }
    let jobs = jobs
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let mut ok = true;
    for chunk in configs.chunks(jobs) {
        let results: Vec<(PathBuf, Result<()>)> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| {
                    s.spawn(move || {
                        let stem = c.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
                        let target = out.join(stem);
                        let r = RunConfig::from_file(c).and_then(|cfg| {
                            run_experiment(&cfg, Some(&target), &mut |_| {}).map(|_| ())
                        });
                        (c.clone(), r)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for (c, r) in results {
            match r {
                Ok(()) => println!("ok     {}", c.display()),
                Err(e) => {
                    ok = false;
                    println!("failed {}: {e}", c.display());
                }
            }
        }
    }
    Ok(ok)
}

fn report(dir: &Path, target: f64) -> Result<()> {
    let rows = metrics::read_metrics_csv(dir.join("metrics.csv"))?;
    print!(
        "{}",
        metrics::format_report(&metrics::summarize(&rows, target))
    );
    Ok(())
}

fn validate(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    cfg.validate()?;
    println!(
        "{}: ok ({} schemes, {} seeds, {} clients, T = {})",
        config.display(),
        cfg.schemes.len(),
        cfg.training.seeds.len(),
        cfg.partition.num_clients,
        cfg.training.total_iterations()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            quiet,
        } => run(&config, seed, out, quiet),
        Command::Sweep { configs, out, jobs } => match sweep(&configs, &out, jobs) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Report { input, target } => report(&input, target),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
