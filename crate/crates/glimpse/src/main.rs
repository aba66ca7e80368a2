//! Command-line entry point.
//!
//! Configuration layering, lowest to highest precedence: built-in defaults,
//! `--config` file, GLIMPSE_DATA_DIR / GLIMPSE_RUNS_DIR environment
//! variables, then CLI flags (generic `--set key=value` plus the first-class
//! flags below). Exit codes: 0 ok, 1 bad input, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glimpse::config::RunConfig;
use glimpse::runner::{
    cmd_attack, cmd_dataset_gen, cmd_eval, cmd_glimpse_viz, cmd_train, RunError,
};

#[derive(Parser)]
#[command(
    name = "glimpse",
    about = "Recurrent hard-attention classifier with a log-polar field of view",
    version
)]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key: --set key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Worker-thread cap; 1 guarantees bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    #[arg(long, global = true, value_name = "DIR")]
    runs_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics under the run dir.
    Train {
        /// Continue from a checkpoint (keeps the epoch counter).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Accuracy over a glimpse-count x MC-sample grid.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// PGD and SPSA robustness reports over a test sample.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Synthesize the perturbed train/test splits as IDX files.
    DatasetGen,
    /// Render the log-polar glimpse and the fixation trajectory.
    GlimpseViz {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path).map_err(|e| RunError::Input(e.to_string()))?;
    }
    cfg.apply_env();
    for pair in &cli.sets {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(RunError::Input(format!("--set expects key=value, got `{pair}`")));
        };
        cfg.set(k.trim(), v.trim()).map_err(|e| RunError::Input(e.to_string()))?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t.max(1);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &cli.runs_dir {
        cfg.runs_dir = d.clone();
    }
    match &cli.command {
        Command::Train { resume, epochs, batch_size } => {
            if let Some(r) = resume {
                cfg.resume = Some(r.clone());
            }
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = *b;
            }
        }
        Command::Eval { checkpoint } | Command::Attack { checkpoint, .. } => {
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
        }
        Command::GlimpseViz { image, checkpoint } => {
            if let Some(i) = image {
                cfg.image = Some(i.clone());
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
        }
        Command::DatasetGen => {}
    }
    if let Command::Attack { sample: Some(s), .. } = &cli.command {
        cfg.attack_sample = *s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Train { .. } => {
            let out = cmd_train(&cfg)?;
            println!(
                "trained {} epochs; test error {:.4}; checkpoint {}",
                out.epochs_run,
                out.final_test_error,
                out.checkpoint.display()
            );
            println!("run dir: {}", out.run_dir.display());
        }
        Command::Eval { .. } => {
            let out = cmd_eval(&cfg)?;
            print!("glimpses");
            for m in &out.mc_samples {
                print!("  mc{m}");
            }
            println!();
            for (gi, g) in out.glimpse_nums.iter().enumerate() {
                print!("{g:8}");
                for mi in 0..out.mc_samples.len() {
                    print!("  {:.4}", out.accuracy[gi][mi]);
                }
                println!();
            }
            println!("run dir: {}", out.run_dir.display());
        }
        Command::Attack { .. } => {
            let out = cmd_attack(&cfg)?;
            for (name, report, path) in &out.reports {
                println!(
                    "{name}: Success : Failure : Incorrect = {} : {} : {} ({})",
                    report.success,
                    report.failure,
                    report.incorrect,
                    path.display()
                );
            }
            println!("run dir: {}", out.run_dir.display());
        }
        Command::DatasetGen => {
            let paths = cmd_dataset_gen(&cfg)?;
            println!("wrote {}", paths.train_images.display());
            println!("wrote {}", paths.test_images.display());
        }
        Command::GlimpseViz { .. } => {
            let out = cmd_glimpse_viz(&cfg)?;
            println!("glimpse (first fixation): {}", out.glimpse_first.display());
            println!("glimpse (final fixation): {}", out.glimpse_final.display());
            println!("trajectory ({} fixations): {}", out.fixations, out.trajectory.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(RunError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
