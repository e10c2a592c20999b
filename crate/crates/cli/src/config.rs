//! The TOML run configuration.
//!
//! Every section and field is optional; omitted values take the defaults
//! below, which describe the desk-scale reference task. Unknown keys are
//! rejected so that typos surface as errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uap_sentinel_core::attack::AttackConfig;
use uap_sentinel_core::classifier::TrainConfig;
use uap_sentinel_core::data::{Shape, SyntheticSpec, TileLayout};
use uap_sentinel_core::detector::FinetuneConfig;
use uap_sentinel_core::eval::default_eps_grid;
use uap_sentinel_core::numerics::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub classifier: ClassifierSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_separation: f64,
    pub noise_sd: f64,
    pub train_per_class: usize,
    pub calib_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub xi: f64,
    pub m: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub target_rate_goal: f64,
    pub holdout: usize,
    pub clip_cap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    /// Tile side; omitted means 8 for images of side ≥ 16, else 4.
    pub tile_size: Option<usize>,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Retained principal components; omitted means all of them.
    pub components: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub eps_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("run"),
            dataset: DatasetSection::default(),
            classifier: ClassifierSection::default(),
            attack: AttackSection::default(),
            detector: DetectorSection::default(),
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 3,
            height: 16,
            width: 16,
            class_separation: 0.08,
            noise_sd: 0.1,
            train_per_class: 250,
            calib_per_class: 250,
            test_per_class: 250,
        }
    }
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            batch_size: 32,
            epochs: 30,
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            xi: 16.0 / 255.0,
            m: 2,
            learning_rate: 0.5,
            max_epochs: 200,
            batch_size: 32,
            target_rate_goal: 0.75,
            holdout: 200,
            clip_cap: 5.0,
        }
    }
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            tile_size: None,
            alpha: 0.05,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
        }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            components: None,
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 50,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            eps_grid: default_eps_grid(),
        }
    }
}

/// Which split a synthetic dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Calib,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calib, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calib => "calib",
            Split::Test => "test",
        }
    }
}

impl RunConfig {
    /// Parses TOML text. Errors carry the line, column and offending key.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// `seed + fnv1a64(stage)`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn shape(&self) -> Shape {
        let d = &self.dataset;
        Shape::new(d.channels, d.height, d.width)
    }

    pub fn synthetic_spec(&self, split: Split) -> SyntheticSpec {
        let d = &self.dataset;
        SyntheticSpec {
            num_classes: d.num_classes,
            images_per_class: match split {
                Split::Train => d.train_per_class,
                Split::Calib => d.calib_per_class,
                Split::Test => d.test_per_class,
            },
            shape: self.shape(),
            class_separation: d.class_separation,
            noise_sd: d.noise_sd,
        }
    }

    pub fn classifier_config(&self) -> TrainConfig {
        let c = &self.classifier;
        TrainConfig {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            seed: self.stage_seed("train-classifier"),
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            xi: a.xi,
            m: a.m,
            learning_rate: a.learning_rate,
            max_epochs: a.max_epochs,
            batch_size: a.batch_size,
            target_rate_goal: a.target_rate_goal,
            holdout: a.holdout,
            clip_cap: a.clip_cap,
            seed: self.stage_seed("gen-uaps"),
        }
    }

    pub fn layout(&self) -> Result<TileLayout, String> {
        let d = &self.dataset;
        let layout = match self.detector.tile_size {
            Some(p) => TileLayout::new(d.height, d.width, p),
            None => TileLayout::default_for(d.height, d.width),
        };
        layout.map_err(|e| format!("detector.tile_size: {e}"))
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let d = &self.detector;
        FinetuneConfig {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            seed: self.stage_seed("train-detector"),
        }
    }

    pub fn baseline_config(&self) -> TrainConfig {
        let b = &self.baseline;
        TrainConfig {
            learning_rate: b.learning_rate,
            batch_size: b.batch_size,
            epochs: b.epochs,
            seed: self.stage_seed("train-baseline"),
        }
    }

    /// Number of principal components the baseline keeps.
    pub fn pca_components(&self) -> usize {
        let plane = self.dataset.height * self.dataset.width;
        self.baseline.components.unwrap_or(plane)
    }

    pub fn validate(&self) -> Result<(), String> {
        let d = &self.dataset;
        if d.num_classes < 2 {
            return Err("dataset.num_classes must be at least 2".into());
        }
        if !matches!(d.channels, 1 | 3) {
            return Err("dataset.channels must be 1 or 3".into());
        }
        for (name, side) in [("height", d.height), ("width", d.width)] {
            if !matches!(side, 8 | 16 | 32) {
                return Err(format!("dataset.{name} must be 8, 16 or 32"));
            }
        }
        if !(d.class_separation >= 0.0) || !(d.noise_sd >= 0.0) {
            return Err(
                "dataset.class_separation and dataset.noise_sd must be non-negative".into(),
            );
        }
        for (name, n) in [
            ("train_per_class", d.train_per_class),
            ("calib_per_class", d.calib_per_class),
            ("test_per_class", d.test_per_class),
        ] {
            if n == 0 {
                return Err(format!("dataset.{name} must be at least 1"));
            }
        }
        self.classifier_config()
            .validate()
            .map_err(|e| format!("classifier: {e}"))?;
        self.attack_config()
            .validate()
            .map_err(|e| format!("attack: {e}"))?;
        self.layout()?;
        if !(self.detector.alpha > 0.0 && self.detector.alpha < 1.0) {
            return Err("detector.alpha must lie in (0, 1)".into());
        }
        self.finetune_config()
            .validate()
            .map_err(|e| format!("detector: {e}"))?;
        self.baseline_config()
            .validate()
            .map_err(|e| format!("baseline: {e}"))?;
        let k = self.pca_components();
        if k == 0 || k > d.height * d.width {
            return Err("baseline.components must lie in 1..=height·width".into());
        }
        if self.eval.eps_grid.is_empty() {
            return Err("eval.eps_grid must not be empty".into());
        }
        if self
            .eval
            .eps_grid
            .iter()
            .any(|e| !(e.is_finite() && *e >= 0.0))
        {
            return Err("eval.eps_grid entries must be finite and non-negative".into());
        }
        Ok(())
    }
}
