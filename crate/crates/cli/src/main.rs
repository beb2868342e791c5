use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pspinv::pipeline::{self, Problem, RunConfig};
use pspinv::Error;

#[derive(Parser, Debug)]
#[command(name = "pspinv", version, about = "Stochastic inversion of process-structure-property links")]
struct Cli {
    /// JSON run configuration; omitted keys fall back to the named preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Continue from the run's last checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    #[arg(long, global = true, hide = true)]
    stop_after: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Label the initial data set and resolve the target.
    GenerateData,
    /// Active-learning optimization.
    Optimize,
    /// Random-acquisition baseline at the same label budget.
    Baseline,
    /// Oracle Monte Carlo evaluation of a process parameter vector.
    Evaluate {
        /// JSON array of process parameters; defaults to the active optimum.
        #[arg(long)]
        phi: Option<PathBuf>,
        /// Number of microstructures, defaults to the config's evaluation size.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Plot-ready CSV series for every finished run under the output directory.
    ExportPlots,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut p = Problem::new(cfg)?;
    p.stop_after = cli.stop_after;
    let checkpoint = |sub: &str| -> Result<Option<PathBuf>, Error> {
        if !cli.resume {
            return Ok(None);
        }
        let path = p.cfg.out.join(sub).join("checkpoint.json");
        if !path.exists() {
            return Err(Error::Config(format!("--resume given but {} does not exist", path.display())));
        }
        Ok(Some(path))
    };
    match cli.cmd {
        Cmd::GenerateData => {
            let (store, _) = pipeline::generate_data(&p)?;
            println!("labeled {} samples into {}", store.len(), p.cfg.out.join("data").display());
        }
        Cmd::Optimize => {
            let r = pipeline::optimize(&p, checkpoint("active")?.as_deref())?;
            println!("initial {:.4} ± {:.4}, final {:.4} ± {:.4}", r.initial.value, r.initial.stderr, r.fin.value, r.fin.stderr);
        }
        Cmd::Baseline => {
            let r = pipeline::baseline(&p, checkpoint("baseline")?.as_deref())?;
            println!("initial {:.4} ± {:.4}, final {:.4} ± {:.4}", r.initial.value, r.initial.stderr, r.fin.value, r.fin.stderr);
        }
        Cmd::Evaluate { phi, samples } => {
            let phi = match phi {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)
                }
                None => None,
            };
            let ev = pipeline::evaluate(&p, phi, samples.unwrap_or(p.cfg.eval_samples))?;
            println!("{:.6} ± {:.6} over {} samples", ev.value, ev.stderr, ev.n);
        }
        Cmd::ExportPlots => {
            let runs: Vec<PathBuf> =
                ["active", "baseline"].iter().map(|d| p.cfg.out.join(d)).filter(|d| d.join("report.json").exists()).collect();
            if runs.is_empty() {
                return Err(Error::Config(format!("no finished run under {}", p.cfg.out.display())));
            }
            for r in runs {
                for f in pipeline::export_plots(&r)? {
                    println!("{}", f.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
