//! The workflow stages as in-memory functions. Commands add file IO on top.

use std::path::Path;

use forest_transfer::baselines::{extract_all, knn_fit, mlr_fit, BaselineModel};
use forest_transfer::eval::{build_scenario, evaluate_plots, predict_map, EvalReport, PlotPredictor, ScenarioSpec};
use forest_transfer::patch::{augment, filter_patches_dense, filter_patches_sparse, split_patches, tile_scene, PatchSet};
use forest_transfer::plots::{load_plots, rasterize_plots, split_plots_by_attribute, PlotTable, SplitAttribute};
use forest_transfer::raster::{EOStack, SparseLabelRaster};
use forest_transfer::synth::{channel_subset, gen_site_pair, read_scene, write_scene, Scene};
use forest_transfer::train::{finetune, pretrain, Checkpoint, TrainOutcome};
use forest_transfer::{Error, Result};

use crate::config::RunConfig;

/// Source scene with dense truth; target scene with its plots split into
/// training and test tables.
pub struct Scenes {
    pub source: Scene,
    pub target: Scene,
    pub train_plots: PlotTable,
    pub test_plots: PlotTable,
}

pub fn synthesize(cfg: &RunConfig) -> Result<Scenes> {
    let pair = gen_site_pair(&cfg.scene)?;
    let attr = SplitAttribute::default_for(&pair.target.plots);
    let (train_plots, test_plots) = split_plots_by_attribute(&pair.target.plots, attr)?;
    Ok(Scenes {
        source: pair.source,
        target: pair.target,
        train_plots,
        test_plots,
    })
}

pub fn write_scenes(scenes: &Scenes, dir: &Path) -> Result<()> {
    write_scene(&scenes.source, &dir.join("source"))?;
    write_scene(&scenes.target, &dir.join("target"))?;
    scenes.train_plots.save(dir.join("target").join("plots_train.csv"))?;
    scenes.test_plots.save(dir.join("target").join("plots_test.csv"))
}

pub fn read_scenes(dir: &Path) -> Result<Scenes> {
    Ok(Scenes {
        source: read_scene(&dir.join("source"), "source")?,
        target: read_scene(&dir.join("target"), "target")?,
        train_plots: load_plots(dir.join("target").join("plots_train.csv"))?,
        test_plots: load_plots(dir.join("target").join("plots_test.csv"))?,
    })
}

pub fn select_channels(stack: &EOStack, set: &str) -> Result<EOStack> {
    stack.select_bands(&channel_subset(set, stack.bands())?)
}

/// Tiled, filtered, split and augmented source patches (not yet normalized).
pub fn pretrain_patches(cfg: &RunConfig, scenes: &Scenes, set: &str) -> Result<PatchSet> {
    let stack = select_channels(&scenes.source.stack, set)?;
    let patches = tile_scene(&stack, &scenes.source.truth, &scenes.source.mask, cfg.patch_size)?;
    let patches = filter_patches_dense(patches, cfg.min_forest_fraction);
    let mut ps = split_patches(patches, cfg.test_fraction, cfg.val_fraction, cfg.seed)?;
    ps.train = augment(&ps.train, cfg.augment_multiplier, cfg.shift_step, cfg.seed)?;
    Ok(ps)
}

pub fn pretrain_model(cfg: &RunConfig, scenes: &Scenes, set: &str) -> Result<TrainOutcome> {
    let ps = pretrain_patches(cfg, scenes, set)?;
    let channels = ps.train[0].channels;
    log::info!(
        "pretraining on {} train / {} val patches, {channels} channels",
        ps.train.len(),
        ps.val.len()
    );
    let mut out = pretrain(cfg.model_config(channels), &ps, &cfg.optimizer(false))?;
    out.checkpoint.meta.band_names = select_channels(&scenes.source.stack, set)?.band_names;
    Ok(out)
}

/// Target patches carrying at least one training plot.
pub fn finetune_patches(cfg: &RunConfig, target: &Scene, plots: &PlotTable, set: &str) -> Result<PatchSet> {
    let stack = select_channels(&target.stack, set)?;
    let mut labels: SparseLabelRaster = rasterize_plots(plots, &stack.grid)?;
    labels.apply_mask(&target.mask)?;
    let patches = filter_patches_sparse(tile_scene(&stack, &labels, &target.mask, cfg.patch_size)?);
    let mut ps = split_patches(patches, 0.0, cfg.finetune_val_fraction, cfg.seed)?;
    if cfg.finetune_augment_multiplier > 1.0 {
        ps.train = augment(&ps.train, cfg.finetune_augment_multiplier, cfg.shift_step, cfg.seed)?;
    }
    Ok(ps)
}

pub fn finetune_model(cfg: &RunConfig, pretrained: &Checkpoint, target: &Scene, plots: &PlotTable, set: &str) -> Result<TrainOutcome> {
    let ps = finetune_patches(cfg, target, plots, set)?;
    log::info!("fine-tuning on {} train / {} val patches", ps.train.len(), ps.val.len());
    finetune(pretrained, &ps, &cfg.optimizer(true))
}

pub fn predict_target(cfg: &RunConfig, ckpt: &Checkpoint, target: &Scene, set: &str) -> Result<SparseLabelRaster> {
    let stack = select_channels(&target.stack, set)?;
    predict_map(ckpt, &stack, &target.mask, cfg.patch_size)
}

pub fn map_report(cfg: &RunConfig, map: &SparseLabelRaster, test: &PlotTable, method: &str, scenario: &str) -> Result<EvalReport> {
    evaluate_plots(method, scenario, &PlotPredictor::Map(map, cfg.map_lookup), test)
}

pub fn fit_baseline(cfg: &RunConfig, method: &str, stack: &EOStack, plots: &PlotTable) -> Result<BaselineModel> {
    let features = extract_all(stack, plots)?;
    match method {
        "knn" => Ok(BaselineModel::Knn(knn_fit(&features, cfg.knn_k, cfg.knn_weighting)?)),
        "mlr" => Ok(BaselineModel::Mlr(mlr_fit(&features)?)),
        other => Err(Error::Config(format!("unknown baseline method {other:?}"))),
    }
}

pub fn baseline_report(
    cfg: &RunConfig,
    scenes: &Scenes,
    method: &str,
    set: &str,
    train: &PlotTable,
    scenario: &str,
) -> Result<(BaselineModel, EvalReport)> {
    let stack = select_channels(&scenes.target.stack, set)?;
    let model = fit_baseline(cfg, method, &stack, train)?;
    let report = evaluate_plots(
        &format!("{method}_{set}"),
        scenario,
        &PlotPredictor::Baseline(&model, &stack),
        &scenes.test_plots,
    )?;
    Ok((model, report))
}

/// Reports for one scenario: kNN and the fine-tuned network, both trained on
/// the scenario's reduced plot table.
pub fn scenario_reports(cfg: &RunConfig, scenes: &Scenes, pretrained: &Checkpoint, spec: &ScenarioSpec) -> Result<Vec<EvalReport>> {
    let set = cfg.channels.as_str();
    let plots = build_scenario(&scenes.train_plots, spec)?;
    log::info!("scenario {}: {} training plots", spec.name, plots.len());
    let (_, knn) = baseline_report(cfg, scenes, "knn", set, &plots, &spec.name)?;
    let tuned = finetune_model(cfg, pretrained, &scenes.target, &plots, set)?;
    let map = predict_target(cfg, &tuned.checkpoint, &scenes.target, set)?;
    let net = map_report(cfg, &map, &scenes.test_plots, &format!("seunet_finetuned_{set}"), &spec.name)?;
    Ok(vec![knn, net])
}

pub fn experiment(cfg: &RunConfig, scenes: &Scenes, pretrained: &Checkpoint) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for spec in ScenarioSpec::standard(cfg.seed) {
        out.extend(scenario_reports(cfg, scenes, pretrained, &spec)?);
    }
    Ok(out)
}
