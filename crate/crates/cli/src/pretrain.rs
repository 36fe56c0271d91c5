use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use smart::config::{self, SEED_ENV};
use smart::manifest::RunManifest;
use smart::pretrain::{TrainConfig, Trainer};
use smart::{Error, Result, Scalar};

use crate::args::{Precision, PretrainArgs};

pub const STEPS_FILE: &str = "steps.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint.smrt";

/// Profile, file, `SMART_SEED`, then flags; `--steps` keeps the warmup
/// share unless the warmup is set explicitly.
fn resolve_config(a: &PretrainArgs) -> Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut sets = a.set.clone();
    if let Some(n) = a.steps {
        let pre = config::resolve_unchecked(&a.profile, text.as_deref(), env_seed.as_deref(), &sets)?;
        let explicit = sets.iter().any(|s| s.trim_start().starts_with("train.warmup_steps"))
            || text
                .as_deref()
                .map(config::parse_text)
                .transpose()?
                .is_some_and(|v| v.iter().any(|x| x.key == "train.warmup_steps"));
        sets.push(format!("train.steps={n}"));
        if !explicit {
            let w = (n as f64 * pre.train.warmup_steps as f64 / pre.train.steps.max(1) as f64).round() as usize;
            sets.push(format!("train.warmup_steps={}", w.min(n)));
        }
    }
    if let Some(s) = a.seed {
        sets.push(format!("train.seed={s}"));
    }
    config::resolve(&a.profile, text.as_deref(), env_seed.as_deref(), &sets)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn train<T: Scalar>(a: &PretrainArgs, cfg: TrainConfig, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let mut tr = match &a.resume {
        Some(ck) => Trainer::<T>::load_checkpoint(ck)?,
        None => Trainer::<T>::new(cfg)?,
    };
    let steps_path = a.out.join(STEPS_FILE);
    if steps_path.exists() {
        fs::remove_file(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
    }
    fs::write(&steps_path, b"").map_err(|e| Error::io(&steps_path, e))?;
    outputs.push(steps_path.clone());
    let every = tr.cfg.train.checkpoint_every;
    let total = tr.cfg.train.steps;
    tr.run_until(total, |tr, out| {
        let line = out.record.to_json_line();
        println!("{line}");
        append_line(&steps_path, &line)?;
        if every > 0 && tr.step % every == 0 && tr.step < total {
            let p = a.out.join(format!("checkpoint-{:06}.smrt", tr.step));
            tr.save_checkpoint(&p)?;
            outputs.push(p);
        }
        Ok(())
    })?;
    let p = a.out.join(FINAL_CHECKPOINT);
    tr.save_checkpoint(&p)?;
    outputs.push(p);
    Ok(())
}

/// Runs pretraining; `fixed` bypasses config resolution (manifest replay).
pub fn run(a: &PretrainArgs, fixed: Option<TrainConfig>) -> Result<()> {
    let cfg = match (fixed, &a.resume) {
        (Some(c), _) => c,
        (None, Some(ck)) => {
            if a.config.is_some() || !a.set.is_empty() || a.steps.is_some() || a.seed.is_some() {
                return Err(Error::Config("--resume uses the checkpoint's configuration; drop --config/--set/--steps/--seed".into()));
            }
            Trainer::<f64>::load_checkpoint(ck)?.cfg
        }
        (None, None) => resolve_config(a)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let invocation = serde_json::to_value(crate::args::Command::Pretrain(a.clone())).expect("args serialize");
    let mut manifest = RunManifest::begin("pretrain", invocation, serde_json::to_value(&cfg).expect("config serializes"), cfg.train.seed);
    let cfg_path = a.out.join(CONFIG_FILE);
    let outcome = config::dump(&cfg)
        .and_then(|text| smart::checkpoint::write_atomic(&cfg_path, text.as_bytes()))
        .and_then(|()| {
            manifest.outputs.push(cfg_path.clone());
            match a.dtype {
                Precision::F32 => train::<f32>(a, cfg, &mut manifest.outputs),
                Precision::F64 => train::<f64>(a, cfg, &mut manifest.outputs),
            }
        });
    manifest.finish(&a.out, &outcome)?;
    outcome
}
