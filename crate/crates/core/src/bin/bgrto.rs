use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bgrto::cli::{self, RunConfig, Split};
use bgrto::schedules::Mode;

#[derive(Parser)]
#[command(name = "bgrto", version, about = "Bootstrapped policy/tool RL on a synthetic segmentation grid world")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run config; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.workdir` (default: $GRTO_WORKDIR, then ./runs).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.bto.beta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the tool on source-convention scenes (writes omega0.ckpt).
    PretrainTool,
    /// Warm the policy up on scripted demonstrations (writes theta0.ckpt).
    WarmupPolicy,
    /// Roll out the reference policy into the replay buffer.
    BuildBuffer,
    /// Train one regime and select its best validation checkpoint.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a training checkpoint; prints an EvalReport.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Number of test scenes.
        #[arg(long, default_value_t = 256)]
        scenes: usize,
    },
    /// Exact-enumeration oracle checks, one JSON line each.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn load(global: &Global, extra: &[String]) -> bgrto::Result<RunConfig> {
    let mut overrides = global.overrides.clone();
    if let Some(w) = &global.workdir {
        overrides.push(format!("paths.workdir={}", w.display()));
    }
    overrides.extend_from_slice(extra);
    cli::parse_config(global.config.as_deref(), &overrides)
}

fn run(args: Cli) -> bgrto::Result<bool> {
    let print = |v: &serde_json::Value| println!("{v}");
    match args.command {
        Command::PretrainTool => print(&cli::cmd_pretrain_tool(&load(&args.global, &[])?)?),
        Command::WarmupPolicy => print(&cli::cmd_warmup_policy(&load(&args.global, &[])?)?),
        Command::BuildBuffer => print(&cli::cmd_build_buffer(&load(&args.global, &[])?)?),
        Command::Train { mode, seed } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("train.mode={}", m.as_str()));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            print(&cli::cmd_train(&load(&args.global, &extra)?)?)
        }
        Command::Eval { checkpoint, split, scenes } => {
            let report = cli::cmd_eval(&load(&args.global, &[])?, &checkpoint, split, scenes)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::OracleCheck { seed, instances } => {
            let checks = cli::cmd_oracle_check(seed, instances)?;
            for c in &checks {
                println!("{}", serde_json::to_string(c)?);
            }
            return Ok(checks.iter().all(|c| c.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", cli::error_json(&e));
            ExitCode::from(2)
        }
    }
}
