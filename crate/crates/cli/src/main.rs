use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use terraseg_cli::{dispatch, error_line, parse_config, Command};

/// Soil-sampling site segmentation: synth, augment, train, eval, predict, baseline-grid.
#[derive(Parser, Debug)]
#[command(name = "terraseg", version)]
struct Cli {
    /// synth | augment | train | eval | predict | baseline-grid
    command: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// paper | tiny
    #[arg(long)]
    preset: Option<String>,
    /// Scaled (0-255) binarization threshold.
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Checkpoint for eval and predict.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Any config key, as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn overrides(cli: &Cli) -> terraseg::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let flags = [
        ("seed", &cli.seed),
        ("model.preset", &cli.preset),
        ("threshold", &cli.threshold),
        ("out", &cli.out),
        ("data", &cli.data),
        ("train.lr", &cli.lr),
        ("train.epochs", &cli.epochs),
        ("model.checkpoint", &cli.checkpoint),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            out.push((k.to_string(), v.clone()));
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| terraseg::Error::Usage(format!("--set `{kv}` is not KEY=VALUE")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn run(cli: &Cli) -> terraseg::Result<String> {
    let command: Command = cli.command.parse()?;
    let cfg = parse_config(command, cli.config.as_deref(), &overrides(cli)?)?;
    dispatch(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg: String = e.to_string().lines().next().unwrap_or("").to_string();
            eprintln!("error\tusage\t{}", msg.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            match e {
                terraseg::Error::Config(_) | terraseg::Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
