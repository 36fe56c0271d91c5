mod args;
mod eval;
mod pretrain;

use std::process::ExitCode;

use clap::Parser;
use smart::manifest::RunManifest;
use smart::pretrain::TrainConfig;
use smart::Error;

use args::{Cli, Command};

fn replay(a: &args::ReplayArgs) -> smart::Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let cmd: Command = serde_json::from_value(m.invocation.clone())
        .map_err(|e| Error::Format(format!("{}: unreadable invocation: {e}", a.manifest.display())))?;
    match cmd {
        Command::Pretrain(mut p) => {
            let cfg: TrainConfig = serde_json::from_value(m.config)
                .map_err(|e| Error::Format(format!("{}: unreadable config: {e}", a.manifest.display())))?;
            p.out = a.out.clone();
            pretrain::run(&p, Some(cfg))
        }
        Command::Eval(mut e) => {
            e.common_mut().out = a.out.clone();
            eval::run(&e)
        }
        Command::Replay(_) => Err(Error::Config("a manifest cannot record a replay".into())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => pretrain::run(a, None),
        Command::Eval(e) => eval::run(e),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
