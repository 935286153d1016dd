//! Run configuration: one JSON object, unknown keys rejected, every field
//! defaulted.

use std::path::{Path, PathBuf};

use forest_transfer::baselines::{KnnWeighting, DEFAULT_K};
use forest_transfer::eval::MapLookup;
use forest_transfer::model::ModelConfig;
use forest_transfer::patch::{DEFAULT_PATCH_SIZE, DEFAULT_SHIFT_STEP};
use forest_transfer::synth::SceneConfig;
use forest_transfer::train::OptimizerConfig;
use forest_transfer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Synthetic scene parameters (the `scene.json` schema).
    pub scene: SceneConfig,
    /// Where `synth` writes and later commands read the two scenes.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// `s2`, `s1s2` or `ms`.
    pub channels: String,
    pub seed: u64,

    pub patch_size: usize,
    pub shift_step: usize,
    pub min_forest_fraction: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub augment_multiplier: f64,
    pub finetune_val_fraction: f64,
    pub finetune_augment_multiplier: f64,

    pub base_width: usize,
    pub depth: usize,
    pub se_reduction: usize,

    pub max_lr: f64,
    pub finetune_max_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub freeze_bn_stats: bool,

    pub knn_k: usize,
    pub knn_weighting: KnnWeighting,
    pub map_lookup: MapLookup,
    /// Channel sets compared by `baseline`.
    pub baseline_channel_sets: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let model = ModelConfig::default();
        RunConfig {
            scene: SceneConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            channels: "ms".into(),
            seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
            shift_step: DEFAULT_SHIFT_STEP,
            min_forest_fraction: 0.5,
            test_fraction: 0.5,
            val_fraction: 0.1,
            augment_multiplier: 1433.0 / 246.0,
            finetune_val_fraction: 0.1,
            finetune_augment_multiplier: 1.0,
            base_width: model.base_width,
            depth: model.depth,
            se_reduction: model.se_reduction,
            max_lr: opt.max_lr,
            finetune_max_lr: opt.max_lr,
            weight_decay: opt.weight_decay,
            batch_size: opt.batch_size,
            epochs_pretrain: opt.epochs_pretrain,
            epochs_finetune: opt.epochs_finetune,
            freeze_bn_stats: opt.freeze_bn_stats,
            knn_k: DEFAULT_K,
            knn_weighting: KnnWeighting::default(),
            map_lookup: MapLookup::default(),
            baseline_channel_sets: vec!["ms".into(), "s2".into()],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model_config(1).validate()?;
        self.optimizer(false).validate()?;
        forest_transfer::synth::channel_subset(&self.channels, self.scene.sensor.channels.len())?;
        for set in &self.baseline_channel_sets {
            forest_transfer::synth::channel_subset(set, self.scene.sensor.channels.len())?;
        }
        if self.patch_size == 0 || self.patch_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                1 << self.depth
            )));
        }
        if self.shift_step == 0 {
            return Err(Error::Config("shift_step must be positive".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            base_width: self.base_width,
            depth: self.depth,
            se_reduction: self.se_reduction,
            seed: self.seed,
        }
    }

    pub fn optimizer(&self, finetune: bool) -> OptimizerConfig {
        OptimizerConfig {
            max_lr: if finetune { self.finetune_max_lr } else { self.max_lr },
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs_pretrain: self.epochs_pretrain,
            epochs_finetune: self.epochs_finetune,
            freeze_bn_stats: self.freeze_bn_stats,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }
}
