//! The pipeline stages as in-memory functions of the configuration.
//!
//! The commands wrap these with file I/O. Each stage draws its randomness
//! from `RunConfig::stage_seed` with a fixed stage name.

use uap_sentinel_core::attack::{generate_targeted_uaps, PerturbationBank, TargetedOutcome};
use uap_sentinel_core::baseline::{
    fit_pca, pca_scores, train_linear_detector, LinearOutcome, PcaDetector,
};
use uap_sentinel_core::classifier::{train_classifier, MlpClassifier};
use uap_sentinel_core::data::{make_synthetic, Image, ImageDataset};
use uap_sentinel_core::detector::{
    calibrate_threshold, finetune, mean_perturbations, midpoint_threshold, pretrain_mle,
    DetectorParams, FinetuneOutcome,
};
use uap_sentinel_core::eval::{balanced_mix, sweep, Detector, EvalReport, ReportLabels};
use uap_sentinel_core::Result;

use crate::config::{RunConfig, Split};

/// Stage name whose seed drives the balanced training mix shared by both
/// detectors.
pub const TRAIN_MIX_STAGE: &str = "train-mix";

pub struct Splits {
    pub train: ImageDataset,
    pub calib: ImageDataset,
    pub test: ImageDataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &ImageDataset {
        match split {
            Split::Train => &self.train,
            Split::Calib => &self.calib,
            Split::Test => &self.test,
        }
    }
}

pub fn synth_split(cfg: &RunConfig, split: Split) -> Result<ImageDataset> {
    let seed = cfg.stage_seed(&format!("synth-{}", split.name()));
    make_synthetic(&cfg.synthetic_spec(split), seed)
}

pub fn synth(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits {
        train: synth_split(cfg, Split::Train)?,
        calib: synth_split(cfg, Split::Calib)?,
        test: synth_split(cfg, Split::Test)?,
    })
}

pub fn classifier(cfg: &RunConfig, train: &ImageDataset) -> Result<MlpClassifier> {
    train_classifier(train, &cfg.classifier_config())
}

pub fn uaps(cfg: &RunConfig, clf: &MlpClassifier, train: &ImageDataset) -> Result<TargetedOutcome> {
    generate_targeted_uaps(clf, train, &cfg.attack_config())
}

/// Training images, each perturbed at ε = 1 with probability one half.
pub fn training_mix(
    cfg: &RunConfig,
    train: &ImageDataset,
    bank: &PerturbationBank,
) -> Result<Vec<(Image, bool)>> {
    balanced_mix(train, bank, 1.0, cfg.stage_seed(TRAIN_MIX_STAGE))
}

/// MLE pretraining on the clean training split followed by BCE fine-tuning
/// on the training mix, starting from the midpoint threshold.
pub fn detector(
    cfg: &RunConfig,
    train: &ImageDataset,
    bank: &PerturbationBank,
) -> Result<FinetuneOutcome> {
    let layout = cfg
        .layout()
        .map_err(uap_sentinel_core::Error::InvalidArgument)?;
    let model = pretrain_mle(train, &layout)?;
    let means = mean_perturbations(bank, &layout)?;
    let mut params = DetectorParams::new(model, means, 0.0)?;
    let mix = training_mix(cfg, train, bank)?;
    params.tau = midpoint_threshold(&params, &mix)?;
    finetune(&params, &mix, &cfg.finetune_config())
}

pub fn calibrate(
    cfg: &RunConfig,
    params: &DetectorParams,
    calib: &ImageDataset,
) -> Result<DetectorParams> {
    calibrate_threshold(params, calib, cfg.detector.alpha)
}

/// PCA on the clean training split, then a linear detector on the scores of
/// the same training mix the LO-GLRT detector sees.
pub fn baseline(
    cfg: &RunConfig,
    train: &ImageDataset,
    bank: &PerturbationBank,
) -> Result<(PcaDetector, LinearOutcome)> {
    let pca = fit_pca(train, cfg.pca_components())?;
    let mix = training_mix(cfg, train, bank)?
        .into_iter()
        .map(|(img, y)| Ok((pca_scores(&pca, &img)?, y)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_linear_detector(&mix, &cfg.baseline_config())?;
    let det = PcaDetector {
        pca,
        linear: outcome.detector.clone(),
    };
    Ok((det, outcome))
}

/// Sweeps every named detector over the test split on one set of draws.
pub fn evaluate(
    cfg: &RunConfig,
    clf: &MlpClassifier,
    detectors: &[(&str, &dyn Detector)],
    test: &ImageDataset,
    bank: &PerturbationBank,
) -> Result<Vec<EvalReport>> {
    let seed = cfg.stage_seed("eval");
    detectors
        .iter()
        .map(|(name, det)| {
            let labels = ReportLabels {
                detector: (*name).to_string(),
                classifier: "mlp".into(),
                dataset: "synthetic-test".into(),
                alpha: cfg.detector.alpha,
            };
            sweep(clf, det, test, bank, &cfg.eval.eps_grid, &labels, seed)
        })
        .collect()
}
