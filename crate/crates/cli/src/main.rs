//! `modsynth` command-line front end for the batch pipeline.
//!
//! Exit codes: 0 when a command ran to completion (individual subjects may
//! still have failed), 1 for configuration or usage errors, 2 for I/O and
//! data errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use modsynth::pipeline::{self, Mode, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "modsynth", version, about = "Learned contrast synthesis and landmark-evaluated registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Restrict the command to one subject id.
    #[arg(long)]
    subject: Option<String>,
    /// Overrides the training and phantom seeds of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Synth,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clip, smooth and rescale the template and subjects.
    Preprocess(Common),
    /// Build decile labels and train the configured learner.
    Train(Common),
    /// Synthesize template-contrast images with the trained model.
    Synth(Common),
    /// Register subjects or synthesized images to the template.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "baseline")]
        mode: ModeArg,
    },
    /// Compute landmark errors and write the report.
    Evaluate(Common),
    /// Generate a synthetic phantom suite.
    Phantom(Common),
}

fn load(common: &Common) -> modsynth::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
        cfg.phantom.params.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> modsynth::Result<()> {
    match cli.command {
        Command::Preprocess(c) => pipeline::cmd_preprocess(&load(&c)?, c.subject.as_deref()),
        Command::Train(c) => {
            if c.subject.is_some() {
                log::warn!("--subject is ignored by train; training subjects come from the configuration");
            }
            pipeline::cmd_train(&load(&c)?)
        }
        Command::Synth(c) => pipeline::cmd_synth(&load(&c)?, c.subject.as_deref()),
        Command::Register { common, mode } => {
            let mode = match mode {
                ModeArg::Baseline => Mode::Baseline,
                ModeArg::Synth => Mode::Synth,
            };
            let outcomes = pipeline::cmd_register(&load(&common)?, mode, common.subject.as_deref())?;
            for o in outcomes {
                match o.status {
                    Ok(failed) => println!("{}\t{}", o.subject, if failed { "failed" } else { "ok" }),
                    Err(e) => println!("{}\terror: {e}", o.subject),
                }
            }
            Ok(())
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            for t in pipeline::cmd_evaluate(&cfg, c.subject.as_deref())? {
                println!(
                    "{}\t{}/{} below {} um",
                    t.method, t.n_success, t.n_total, cfg.evaluation.threshold_um
                );
            }
            Ok(())
        }
        Command::Phantom(c) => pipeline::cmd_phantom(&load(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
