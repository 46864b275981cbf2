use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use footprint_uq::config::PipelineConfig;
use footprint_uq::error::Error;
use footprint_uq::formats::read_met;
use footprint_uq::pipeline::{self, RunLayout, THREADS_ENV};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "footprint-uq", version, about = "Ensemble graph-network emulation of particle-dispersion footprints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic meteorology.
    GenMet {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate footprints and extract features for every release.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        met: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one ensemble member.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the test split with an ensemble and write statistic grids.
    Ensemble {
        #[arg(long, num_args = 2.., required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convolve truth and member footprints with the synthetic fluxes.
    Molefrac {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics, maps, roses and series for a run directory.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Markdown report from a run's analysis summary.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time the particle oracle against one emulator member.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        met: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report as JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage into an empty output directory.
    Reproduce {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Members trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } | Error::Json { .. } | Error::Incompatible(_) | Error::Diverged { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) if !p.exists() => Err(usage(format!("config file not found: {}", p.display()))),
        Some(p) => PipelineConfig::load(p).map_err(|e| usage(e.to_string())),
    }
}

/// Explicit config, else the run's own `config.json`, else defaults.
fn run_config(run: &Path, path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let stored = run.join("config.json");
    match path {
        Some(p) => load_config(Some(p)),
        None if stored.exists() => load_config(Some(&stored)),
        None => Ok(PipelineConfig::default()),
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::GenMet { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let met = pipeline::gen_met(&cfg, &out)?;
            println!("wrote {} ({} times, {} levels)", out.display(), met.times.len(), met.levels.len());
        }
        Command::GenData { config, met, out } => {
            let cfg = load_config(config.as_deref())?;
            let met = read_met(&met)?;
            let m = pipeline::gen_data(&cfg, &met, &out)?;
            println!(
                "wrote {} ({} train, {} validation, {} test)",
                out.join("manifest.json").display(),
                m.train.len(),
                m.validation.len(),
                m.test.len()
            );
        }
        Command::Train {
            manifest,
            seed,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = pipeline::load_training_data(&cfg, &manifest)?;
            let logs = pipeline::train_member(&cfg, &data, seed, &out)?;
            let best = logs.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
            println!("wrote {} ({} epochs, best validation loss {best:.4})", out.display(), logs.len());
        }
        Command::Ensemble {
            ckpts,
            manifest,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let n = pipeline::run_ensemble(&ckpts, &manifest, &out, &cfg.postprocess, cfg.hash())?;
            println!("wrote statistics for {n} test releases to {}", out.display());
        }
        Command::Molefrac {
            manifest,
            ensemble,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let records = pipeline::run_molefrac(&cfg, &manifest, &ensemble, &out)?;
            println!("wrote {} records to {}", records.len(), out.join("records.csv").display());
        }
        Command::Analyze { run, config } => {
            let cfg = run_config(&run, config.as_deref())?;
            let s = pipeline::run_analysis(&RunLayout::new(&run, cfg))?;
            println!(
                "ensemble mean: R2 {:.4}, IoU {:.4}; spread-error rho {:.4}",
                s.ensemble_log.r2, s.ensemble_log.iou, s.spread_error_map.rho
            );
        }
        Command::Report { run, config } => {
            let cfg = run_config(&run, config.as_deref())?;
            let layout = RunLayout::new(&run, cfg);
            pipeline::run_report(&layout)?;
            println!("wrote {}", layout.report_dir().join("report.md").display());
        }
        Command::Bench {
            manifest,
            ckpt,
            met,
            n,
            config,
            out,
        } => {
            if n < 10 {
                return Err(usage(format!("bench needs --n >= 10, got {n}")));
            }
            let cfg = load_config(config.as_deref())?;
            let report = pipeline::bench(&cfg, &manifest, &met, &ckpt, n)?;
            println!(
                "oracle median {:.4} s, emulator median {:.4} s, ratio {:.1}x over {} runs",
                report.oracle_median_s, report.emulator_median_s, report.ratio, report.runs
            );
            println!("{}", report.reference_scale);
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&report).expect("bench report serializes");
                std::fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            }
        }
        Command::Reproduce { config, out, jobs } => {
            let cfg = load_config(config.as_deref())?;
            if jobs == 0 {
                return Err(usage("--jobs must be >= 1"));
            }
            let start = Instant::now();
            let s = pipeline::reproduce(&cfg, &out, jobs, |stage| {
                eprintln!("[{:>7.1}s] {stage}", start.elapsed().as_secs_f64());
            })?;
            eprintln!("[{:>7.1}s] done", start.elapsed().as_secs_f64());
            println!(
                "ensemble mean: R2 {:.4}, IoU {:.4}; spread-error rho {:.4}",
                s.ensemble_log.r2, s.ensemble_log.iou, s.spread_error_map.rho
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
