//! `robustgs`: degrade images, train GenDeg and the enhancer, enhance,
//! evaluate, and benchmark the scan.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on data
//! errors (missing or malformed inputs, checkpoints, I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustgs::harness::bench::{bench_scan, format_bench};
use robustgs::harness::pipeline;
use robustgs::harness::{RunConfig, Stage};
use robustgs::Error;

#[derive(Parser, Debug)]
#[command(
    name = "robustgs",
    version,
    about = "Degradation-aware multi-view feature enhancement"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade every .ppm in a directory and write a labels file.
    Degrade {
        /// Clean images (defaults to `data_dir`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the degradation learner.
    TrainGendeg {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the enhancer against a frozen GenDeg checkpoint.
    TrainEnhancer {
        /// GenDeg checkpoint (overrides `gendeg_checkpoint`).
        #[arg(long)]
        gendeg: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance images; consecutive files form the views of one scene.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        gendeg: Option<PathBuf>,
        /// Write per-block token statistics to features.txt.
        #[arg(long)]
        dump_features: bool,
    },
    /// Evaluate an enhancer checkpoint on held-out pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        gendeg: Option<PathBuf>,
    },
    /// Time the sequential and parallel scans.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16])]
        states: Vec<usize>,
        /// Tokens processed per timing (repetitions = tokens / length).
        #[arg(long, default_value_t = 65536)]
        tokens: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Degrade { input } => {
            let input = input
                .or_else(|| cfg.data_dir.clone())
                .ok_or_else(|| Error::Config("degrade needs --input or data_dir".into()))?;
            let specs = pipeline::degrade_dir(&cfg, &input, &out)?;
            println!("degraded {} images into {}", specs.len(), out.display());
        }
        Command::TrainGendeg { resume } => {
            cfg.stage = Stage::GenDeg;
            let s = pipeline::train_gendeg(&cfg, &out, resume.as_deref())?;
            println!("steps {}", s.steps);
            if let (Some(a), Some(b)) = (s.first_loss, s.last_loss) {
                println!("loss {a:.6} -> {b:.6}");
            }
            println!("held-out accuracy {:.4}", s.holdout_accuracy);
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::TrainEnhancer { gendeg, resume } => {
            cfg.stage = Stage::Enhancer;
            if gendeg.is_some() {
                cfg.gendeg_checkpoint = gendeg;
            }
            let s = pipeline::train_enhancer(&cfg, &out, resume.as_deref())?;
            println!("steps {}", s.steps);
            println!(
                "validation l1 {:.6} (degraded baseline {:.6})",
                s.validation_loss, s.baseline_loss
            );
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Enhance {
            checkpoint,
            input,
            gendeg,
            dump_features,
        } => {
            if gendeg.is_some() {
                cfg.gendeg_checkpoint = gendeg;
            }
            let n = pipeline::enhance_dir(&cfg, &checkpoint, &input, &out, dump_features)?;
            println!("enhanced {n} images into {}", out.display());
        }
        Command::Eval { checkpoint, gendeg } => {
            if gendeg.is_some() {
                cfg.gendeg_checkpoint = gendeg;
            }
            let report = pipeline::eval(&cfg, &checkpoint, &out)?;
            print!("{}", report.to_text());
        }
        Command::BenchScan {
            lengths,
            states,
            tokens,
        } => {
            if lengths.is_empty()
                || states.is_empty()
                || lengths.contains(&0)
                || states.contains(&0)
            {
                return Err(Error::Config(
                    "bench-scan needs positive lengths and states".into(),
                ));
            }
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            let rows = bench_scan(&lengths, &states, tokens, cfg.seed)?;
            print!("{}", format_bench(&rows, threads));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
