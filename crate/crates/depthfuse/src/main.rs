use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use depthfuse::app::{self, AppError, Scenario, SynthOptions};
use depthfuse::config::PipelineConfig;
use depthfuse::core::evaluation::Alignment;
use depthfuse::core::global_model::{ColorMode, PlyFormat};
use depthfuse::dataset::DEFAULT_DEPTH_DIVISOR;

#[derive(Parser)]
#[command(
    name = "depthfuse",
    version,
    about = "Monocular SLAM with predicted-depth fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    None,
    Rigid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rgb,
    Label,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Loop,
    Pan,
    Slide,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on a dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute metrics for a run against a ground-truth dataset directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "rigid")]
        align: Align,
        #[arg(long, default_value_t = DEFAULT_DEPTH_DIVISOR)]
        depth_divisor: f64,
    },
    /// Export the global model of a run as PLY.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
    },
    /// Print every configuration key with its default value.
    PrintConfig,
    /// Render a synthetic dataset with exact depth predictions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "loop")]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 50)]
        frames: usize,
    },
}

fn execute(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = app::run(&cfg)?;
            println!(
                "processed {} frames, {} key-frames; artifacts in {}",
                out.frames.len(),
                out.keyframes.len(),
                cfg.output_dir.display()
            );
        }
        Command::Evaluate {
            run,
            gt,
            align,
            depth_divisor,
        } => {
            let align = match align {
                Align::None => Alignment::None,
                Align::Rigid => Alignment::Rigid,
            };
            print!(
                "{}",
                app::evaluate(&run, &gt, align, depth_divisor)?.to_text()
            );
        }
        Command::Export { run, mode, format } => {
            let mode = match mode {
                Mode::Rgb => ColorMode::Rgb,
                Mode::Label => ColorMode::Label,
            };
            let format = match format {
                Format::Ascii => PlyFormat::Ascii,
                Format::Binary => PlyFormat::BinaryLittleEndian,
            };
            println!("{}", app::export(&run, mode, format)?.display());
        }
        Command::PrintConfig => print!("{}", PipelineConfig::default().to_text()),
        Command::Synth {
            out,
            scenario,
            frames,
        } => {
            let scenario = match scenario {
                ScenarioArg::Loop => Scenario::Loop,
                ScenarioArg::Pan => Scenario::Pan,
                ScenarioArg::Slide => Scenario::Slide,
            };
            app::synthesize_dataset(
                &out,
                &SynthOptions {
                    scenario,
                    frames,
                    ..SynthOptions::default()
                },
            )?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
