use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use smart::checkpoint::write_atomic;
use smart::eval::{
    attention_volume, cluster_metrics, embedding_plot, extract_features, finetune, linear_probe, load_dataset,
    write_report, zero_shot_localize, AttentionOptions, FeatureSource, FinetuneConfig, LocalizationReport,
    ProbeConfig, ReportText, SampleFailure,
};
use smart::manifest::RunManifest;
use smart::pretrain::load_model;
use smart::volume::{encode_raw, VolumeSample};
use smart::{Error, Result, Scalar};

use crate::args::{Command, EvalCommand, Precision};

#[derive(Debug, Serialize)]
struct AttentionEntry {
    index: usize,
    file: String,
    constant: bool,
    tiles: usize,
}

#[derive(Debug, Serialize)]
struct AttentionSummary {
    volumes: Vec<AttentionEntry>,
}

impl ReportText for AttentionSummary {
    fn task(&self) -> &'static str {
        "attention"
    }
    fn definition(&self) -> String {
        "per-voxel semantic attention of the last layer, head-averaged, upsampled trilinearly and rescaled to [0, 1]; \
overlapping tiles are averaged"
            .into()
    }
    fn table(&self) -> String {
        let mut s = String::from("index\tfile\tconstant\ttiles\n");
        for e in &self.volumes {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.index, e.file, e.constant, e.tiles));
        }
        s
    }
}

fn load_data<T: Scalar>(cmd: &EvalCommand) -> Result<(Vec<VolumeSample<T>>, Vec<SampleFailure>, Value)> {
    let c = cmd.common();
    match &c.data {
        Some(dir) => {
            let (vols, paths, failures) = load_dataset::<T>(dir)?;
            let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            Ok((vols, failures, json!({ "directory": dir, "files": names })))
        }
        None => {
            let set = c.phantoms.set();
            Ok((set.generate()?, Vec::new(), json!({ "phantoms": set })))
        }
    }
}

fn evaluate<T: Scalar>(cmd: &EvalCommand, outputs: &mut Vec<PathBuf>) -> Result<Value> {
    let c = cmd.common();
    let model = load_model::<T>(&c.checkpoint)?;
    let (enc, params) = (&model.encoder, &model.student);
    let normalize = !c.raw_intensity && model.config.augment.normalize;
    let (data, mut failures, data_desc) = load_data::<T>(cmd)?;
    let mut params_json = json!({
        "checkpoint": c.checkpoint,
        "checkpoint_step": model.step,
        "data": data_desc,
        "normalize": normalize,
    });
    let extract = |source: FeatureSource, failures: &mut Vec<SampleFailure>| {
        let ext = extract_features(enc, params, &data, source, normalize);
        failures.extend(ext.failures);
        ext.features
    };
    match cmd {
        EvalCommand::Cluster(a) => {
            let fm = extract(a.source.into(), &mut failures);
            let report = cluster_metrics(&fm)?;
            params_json["source"] = json!(FeatureSource::from(a.source));
            params_json["skipped_samples"] = json!(failures);
            outputs.extend(write_report(&c.out, "cluster", &params_json, &report)?);
        }
        EvalCommand::Probe(a) => {
            let fm = extract(a.source.into(), &mut failures);
            let cfg = ProbeConfig {
                folds: a.folds,
                seed: a.seed,
                mode: a.metric_mode.into(),
                ..Default::default()
            };
            let report = linear_probe(&fm, &cfg)?;
            params_json["source"] = json!(FeatureSource::from(a.source));
            params_json["probe"] = json!(cfg);
            params_json["skipped_samples"] = json!(failures);
            outputs.extend(write_report(&c.out, "probe", &params_json, &report)?);
        }
        EvalCommand::Finetune(a) => {
            let cfg = FinetuneConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                lr: a.lr,
                data_fraction: a.data_fraction,
                folds: a.folds,
                seed: a.seed,
                normalize,
                mode: a.metric_mode.into(),
                optim: model.config.optim.clone(),
            };
            let report = finetune(enc, params, &data, &cfg)?;
            params_json["finetune"] = json!(cfg);
            params_json["skipped_samples"] = json!(failures);
            outputs.extend(write_report(&c.out, "finetune", &params_json, &report)?);
        }
        EvalCommand::Localize(a) => {
            let opts = AttentionOptions {
                tiling: !a.no_tiling,
                normalize,
            };
            let mut cases = Vec::new();
            for (i, vol) in data.iter().enumerate() {
                match zero_shot_localize(enc, params, vol, a.percentile, opts) {
                    Ok(case) => cases.push(case),
                    Err(e) => {
                        log::warn!("sample {i}: {e}");
                        failures.push(SampleFailure {
                            index: i,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            if cases.is_empty() {
                return Err(Error::Validation("no sample could be localized (each needs a non-empty roi)".into()));
            }
            params_json["tiling"] = json!(opts.tiling);
            params_json["skipped_samples"] = json!(failures);
            let report = LocalizationReport::new(a.percentile, cases);
            outputs.extend(write_report(&c.out, "localize", &params_json, &report)?);
        }
        EvalCommand::Attention(a) => {
            let opts = AttentionOptions {
                tiling: !a.no_tiling,
                normalize,
            };
            let mut volumes = Vec::new();
            for (i, vol) in data.iter().enumerate() {
                let map = match attention_volume(enc, params, vol, opts) {
                    Ok(m) => m,
                    Err(e) => {
                        log::warn!("sample {i}: {e}");
                        failures.push(SampleFailure {
                            index: i,
                            reason: e.to_string(),
                        });
                        continue;
                    }
                };
                if map.constant {
                    log::warn!("sample {i}: attention is constant; written as zeros");
                }
                let file = format!("attention-{i:04}.smrtvol");
                let sample = VolumeSample::<f64>::new(map.volume, vol.spacing, vol.label, vol.roi.clone())?;
                let path = c.out.join(&file);
                write_atomic(&path, &encode_raw(&sample))?;
                outputs.push(path);
                volumes.push(AttentionEntry {
                    index: i,
                    file,
                    constant: map.constant,
                    tiles: map.tiles,
                });
            }
            params_json["tiling"] = json!(opts.tiling);
            params_json["skipped_samples"] = json!(failures);
            outputs.extend(write_report(&c.out, "attention", &params_json, &AttentionSummary { volumes })?);
        }
        EvalCommand::Plot(a) => {
            let fm = extract(a.source.into(), &mut failures);
            let (png, tsv) = (c.out.join("embedding.png"), c.out.join("embedding.tsv"));
            embedding_plot(&fm, &png, &tsv, a.seed)?;
            outputs.push(png);
            outputs.push(tsv);
            params_json["source"] = json!(FeatureSource::from(a.source));
            params_json["seed"] = json!(a.seed);
            params_json["skipped_samples"] = json!(failures);
        }
    }
    Ok(json!({ "model": model.config, "eval": params_json }))
}

pub fn run(cmd: &EvalCommand) -> Result<()> {
    let c = cmd.common();
    // fail before any compute or output
    if !c.checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", c.checkpoint.display())));
    }
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let invocation = serde_json::to_value(Command::Eval(cmd.clone())).expect("args serialize");
    let seed = match cmd {
        EvalCommand::Probe(a) => a.seed,
        EvalCommand::Finetune(a) => a.seed,
        EvalCommand::Plot(a) => a.seed,
        _ => c.phantoms.data_seed,
    };
    let mut manifest = RunManifest::begin(&format!("eval {}", cmd.name()), invocation, Value::Null, seed);
    let outcome = match c.dtype {
        Precision::F32 => evaluate::<f32>(cmd, &mut manifest.outputs),
        Precision::F64 => evaluate::<f64>(cmd, &mut manifest.outputs),
    };
    let outcome = outcome.map(|cfg| manifest.config = cfg);
    manifest.finish(&c.out, &outcome)?;
    outcome
}
