use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use sparse_scale_attn::harness::commands::exit_status;
use sparse_scale_attn::harness::{run, Command, HarnessConfig};
use sparse_scale_attn::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    Mask,
    Verify,
    Bench,
    Analyze,
}

#[derive(Debug, Parser)]
#[command(
    name = "sparse-scale-attn",
    version,
    about = "Cross-scale sparse attention masks, checks, benchmarks and analysis"
)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// Config file of key=value lines.
    #[arg(long)]
    config: PathBuf,
    /// Directory for JSON, CSV and PGM outputs; JSON goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Shape preset applied after the config file.
    #[arg(long, value_parser = ["infinity-1k-last"])]
    preset: Option<String>,
}

fn load(cli: &Cli) -> Result<HarnessConfig, Error> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut cfg = HarnessConfig::parse(&text)?;
    if let Some(p) = &cli.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cmd = match cli.command {
        Sub::Mask => Command::Mask,
        Sub::Verify => Command::Verify,
        Sub::Bench => Command::Bench,
        Sub::Analyze => Command::Analyze,
    };
    let report = match run(cmd, &cfg, cli.out.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match &cli.out {
        Some(dir) => eprintln!("wrote {}", dir.join(format!("{}.json", cmd.name())).display()),
        None => match report.to_json() {
            Ok(j) => println!("{j}"),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
    }
    for c in &report.checks {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    ExitCode::from(exit_status(&report))
}
