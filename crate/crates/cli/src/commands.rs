//! Subcommands. Every command writes its resolved config beside its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use forest_transfer::eval::{emit_report, EvalReport};
use forest_transfer::train::{write_log, Checkpoint, TrainOutcome};
use forest_transfer::{Error, Result};

use crate::config::RunConfig;
use crate::pipeline::{self, Scenes};

/// Create `dir` below the configured `root`, whose own parent must exist.
fn prepare_dir(dir: &Path, root: &Path, cfg: &RunConfig) -> Result<()> {
    if let Some(parent) = root.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output parent directory does not exist"),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&path, e))
}

fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out_dir.join(format!("{stage}_{}", cfg.channels))
}

pub fn pretrained_path(cfg: &RunConfig) -> PathBuf {
    stage_dir(cfg, "pretrain").join("model")
}

pub fn finetuned_path(cfg: &RunConfig) -> PathBuf {
    stage_dir(cfg, "finetune").join("model")
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io { path, .. } => Error::Checkpoint(format!("{what} checkpoint missing at {}", path.display())),
        other => other,
    })
}

fn save_outcome(out: &TrainOutcome, dir: &Path) -> Result<()> {
    out.checkpoint.save(dir.join("model"))?;
    write_log(&out.log, dir.join("log.csv"))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    prepare_dir(&cfg.data_dir, &cfg.data_dir, cfg)?;
    let scenes = pipeline::synthesize(cfg)?;
    pipeline::write_scenes(&scenes, &cfg.data_dir)?;
    let path = cfg.data_dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg.scene)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(cfg.data_dir.clone())
}

fn scenes(cfg: &RunConfig) -> Result<Scenes> {
    cfg.validate()?;
    pipeline::read_scenes(&cfg.data_dir)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let scenes = scenes(cfg)?;
    let dir = stage_dir(cfg, "pretrain");
    prepare_dir(&dir, &cfg.out_dir, cfg)?;
    let out = pipeline::pretrain_model(cfg, &scenes, &cfg.channels)?;
    save_outcome(&out, &dir)?;
    Ok(dir)
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<PathBuf> {
    let scenes = scenes(cfg)?;
    let pretrained = load_checkpoint(&pretrained_path(cfg), "pretrained")?;
    let dir = stage_dir(cfg, "finetune");
    prepare_dir(&dir, &cfg.out_dir, cfg)?;
    let out = pipeline::finetune_model(cfg, &pretrained, &scenes.target, &scenes.train_plots, &cfg.channels)?;
    save_outcome(&out, &dir)?;
    Ok(dir)
}

/// Target-site maps from the pretrained and, when present, fine-tuned model.
pub fn cmd_predict(cfg: &RunConfig) -> Result<PathBuf> {
    let scenes = scenes(cfg)?;
    let pretrained = load_checkpoint(&pretrained_path(cfg), "pretrained")?;
    let dir = stage_dir(cfg, "predict");
    prepare_dir(&dir, &cfg.out_dir, cfg)?;
    pipeline::predict_target(cfg, &pretrained, &scenes.target, &cfg.channels)?.save(dir.join("map_pretrained"))?;
    if finetuned_path(cfg).with_extension("json").exists() {
        let tuned = load_checkpoint(&finetuned_path(cfg), "fine-tuned")?;
        pipeline::predict_target(cfg, &tuned, &scenes.target, &cfg.channels)?.save(dir.join("map_finetuned"))?;
    }
    Ok(dir)
}

/// Test-plot reports for the fine-tuned and non-fine-tuned networks.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let scenes = scenes(cfg)?;
    let pretrained = load_checkpoint(&pretrained_path(cfg), "pretrained")?;
    let tuned = load_checkpoint(&finetuned_path(cfg), "fine-tuned")?;
    let dir = stage_dir(cfg, "evaluate");
    prepare_dir(&dir, &cfg.out_dir, cfg)?;
    let set = &cfg.channels;
    let mut reports = Vec::new();
    for (name, ck) in [("finetuned", &tuned), ("pretrained", &pretrained)] {
        let map = pipeline::predict_target(cfg, ck, &scenes.target, set)?;
        reports.push(pipeline::map_report(cfg, &map, &scenes.test_plots, &format!("seunet_{name}_{set}"), "full")?);
    }
    emit_report(&reports, &dir)?;
    Ok(dir)
}

/// kNN and MLR for each configured channel set.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<PathBuf> {
    let scenes = scenes(cfg)?;
    let dir = cfg.out_dir.join("baseline");
    prepare_dir(&dir, &cfg.out_dir, cfg)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for set in &cfg.baseline_channel_sets {
        for method in ["knn", "mlr"] {
            let (model, report) = pipeline::baseline_report(cfg, &scenes, method, set, &scenes.train_plots, "full")?;
            let path = dir.join(format!("model_{method}_{set}.json"));
            fs::write(&path, model.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
            reports.push(report);
        }
    }
    emit_report(&reports, &dir)?;
    Ok(dir)
}

/// Scenario matrix: {full, scarce, censored below, censored above} x
/// {kNN, fine-tuned network}.
pub fn cmd_experiment(cfg: &RunConfig) -> Result<PathBuf> {
    let scenes = scenes(cfg)?;
    let pretrained = load_checkpoint(&pretrained_path(cfg), "pretrained")?;
    let dir = stage_dir(cfg, "experiment");
    prepare_dir(&dir, &cfg.out_dir, cfg)?;
    let reports = pipeline::experiment(cfg, &scenes, &pretrained)?;
    emit_report(&reports, &dir)?;
    Ok(dir)
}
