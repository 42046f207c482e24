//! `blindsr` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage or config errors, 2 when the work
//! itself fails. Diagnostics go to stderr as `error[kind]: message` lines.

mod args;
mod commands;
mod failure;
mod manifest;

use std::path::{Path, PathBuf};

use blindsr_core::config::RunConfig;
use blindsr_core::Error;
use clap::Parser;

use args::{Cli, Command, GlobalArgs};
use failure::{Failure, Outcome};
use manifest::{Invocation, RunManifest};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let code = match Cli::try_parse() {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(f) => {
                f.report();
                f.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Outcome<()> {
    let g = cli.global;
    if g.device != "cpu" {
        return Err(Failure::usage(format!("device {:?} is not available (only cpu)", g.device)));
    }
    let inv = match cli.command {
        Command::Replay(r) => {
            if g.config.is_some() || g.preset.is_some() || g.seed.is_some() {
                return Err(Failure::usage("replay takes its config and seed from the manifest; only --out may be given"));
            }
            let mut inv = RunManifest::load(&r.manifest)?.invocation;
            if let Some(out) = g.out {
                inv.out = absolute(&out)?;
            }
            log::info!("replaying {} into {}", inv.command.name(), inv.out.display());
            inv
        }
        command => {
            let out = g.out.as_deref().ok_or_else(|| Failure::usage(format!("{} needs --out DIR", command.name())))?;
            Invocation { config: explicit_config(&g)?, seed: g.seed, out: absolute(out)?, command: absolute_paths(command)? }
        }
    };
    commands::execute(&inv)
}

/// The config named by `--config` or `--preset`, if any.
fn explicit_config(g: &GlobalArgs) -> Outcome<Option<RunConfig>> {
    match (&g.config, &g.preset) {
        (Some(_), Some(_)) => Err(Failure::usage("--config and --preset are mutually exclusive")),
        (Some(path), None) => RunConfig::load(path).map(Some).map_err(|e| match e {
            e @ Error::Io { .. } => Failure::usage(format!("cannot read config: {e}")),
            e => e.into(),
        }),
        (None, Some(name)) => Ok(Some(RunConfig::preset(name)?)),
        (None, None) => Ok(None),
    }
}

fn absolute(p: &Path) -> Outcome<PathBuf> {
    std::path::absolute(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
}

fn absolute_opt(p: Option<PathBuf>) -> Outcome<Option<PathBuf>> {
    p.map(|p| absolute(&p)).transpose()
}

/// Makes every path argument absolute so the manifest replays from any cwd.
fn absolute_paths(command: Command) -> Outcome<Command> {
    Ok(match command {
        Command::Synth(mut a) => {
            a.hr_dir = absolute_opt(a.hr_dir)?;
            Command::Synth(a)
        }
        Command::Train(mut a) => {
            a.init_from = absolute_opt(a.init_from)?;
            a.resume = absolute_opt(a.resume)?;
            a.hr_dir = absolute_opt(a.hr_dir)?;
            Command::Train(a)
        }
        Command::Infer(mut a) => {
            a.checkpoint = absolute(&a.checkpoint)?;
            a.input = absolute(&a.input)?;
            Command::Infer(a)
        }
        Command::Eval(mut a) => {
            a.checkpoint = absolute_opt(a.checkpoint)?;
            a.hr_dir = absolute_opt(a.hr_dir)?;
            a.protocol_file = absolute_opt(a.protocol_file)?;
            Command::Eval(a)
        }
        Command::Ablate(mut a) => {
            a.checkpoints = a.checkpoints.iter().map(|p| absolute(p)).collect::<Outcome<_>>()?;
            a.hr_dir = absolute_opt(a.hr_dir)?;
            Command::Ablate(a)
        }
        replay @ Command::Replay(_) => replay,
    })
}
