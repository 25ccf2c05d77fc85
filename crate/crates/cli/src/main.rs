use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slicer_core::harness::{self, ModelTag, RunConfig};
use slicer_core::{Error, Result};

#[derive(Parser)]
#[command(name = "slicer", version, about = "Simulate, calibrate, train and compare food-slicing policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Restrict train/eval to one world model.
    #[arg(long = "model-tag", global = true, value_parser = ["cutsim", "baseline"])]
    model_tag: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Scripted constant-speed cuts that produce reference force profiles.
    Simulate,
    /// Fit the cutting model and the spring baseline to every item's profiles.
    Calibrate,
    /// Train one policy per world model.
    Train,
    /// Evaluate trained policies in the calibrated cutting world.
    Eval,
    /// Compare both policies, including on the held-out item.
    Compare,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let tags: Vec<ModelTag> = match &cli.model_tag {
        Some(t) => vec![t.parse()?],
        None => ModelTag::ALL.to_vec(),
    };
    match cli.command {
        Command::Simulate => {
            for p in harness::cmd_simulate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Calibrate => {
            for r in harness::cmd_calibrate(&cfg)? {
                match (r.calibration_loss, r.relative_rmse) {
                    (Some(loss), Some(rel)) => {
                        println!("{} {}: loss {loss:.4e}, relative RMSE {rel:.4}", r.name, r.tag.as_str())
                    }
                    _ => println!("{} {}: peak-force match", r.name, r.tag.as_str()),
                }
            }
        }
        Command::Train => {
            for s in harness::cmd_train(&cfg, &tags)? {
                let last = s.curve.last();
                println!(
                    "{}: {} steps, last eval return {:.1}, success {:.2}",
                    s.tag.as_str(),
                    s.steps,
                    last.map_or(f64::NAN, |p| p.mean_return),
                    last.map_or(f64::NAN, |p| p.success_rate)
                );
            }
        }
        Command::Eval => {
            for (tag, m) in harness::cmd_eval(&cfg, &tags)? {
                println!("{}: {} episodes, success {:.2}, mean return {:.1}", tag.as_str(), m.episodes.len(), m.success_rate(), m.mean_return());
            }
        }
        Command::Compare => {
            let report = harness::cmd_compare(&cfg)?;
            for (name, m) in &report.rows {
                for s in m.by_item() {
                    let flag = if s.item == report.held_out { " (held out)" } else { "" };
                    println!(
                        "{name} {}{flag}: success {:.2}, median board peak {:.2} N",
                        s.item,
                        s.success_rate,
                        s.board_peak_force.map_or(f64::NAN, |q| q.median)
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are configuration errors; --help/--version are not
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_config_error() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}
