//! Detector evaluation: false alarms, detection probability, mixed
//! clean/perturbed accuracy and the probability of a successful undetected
//! attack, swept over perturbation strength.
//!
//! Perturbed inputs are drawn per image: a target class uniformly, then one
//! of its stored perturbations uniformly. The draws depend only on the seed
//! and the dataset size, so every ε and every detector sees the same ones.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{perturb, PerturbationBank};
use crate::baseline::{pca_detect, PcaDetector};
use crate::classifier::MlpClassifier;
use crate::data::{Image, ImageDataset};
use crate::detector::{self, DetectorParams};
use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

pub const CSV_HEADER: &str = "eps,p_d,p_f,p_su,fooling,classifier_acc,n_samples";

/// Anything that declares an input adversarial (`true`) or clean.
pub trait Detector {
    fn detect(&self, img: &Image) -> Result<bool>;
}

impl Detector for DetectorParams {
    fn detect(&self, img: &Image) -> Result<bool> {
        detector::detect(self, img)
    }
}

impl Detector for PcaDetector {
    fn detect(&self, img: &Image) -> Result<bool> {
        pca_detect(&self.pca, &self.linear, img)
    }
}

impl<D: Detector + ?Sized> Detector for &D {
    fn detect(&self, img: &Image) -> Result<bool> {
        (**self).detect(img)
    }
}

/// Per-image perturbation choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub target: usize,
    pub index: usize,
    /// Whether the image is perturbed in the balanced mix.
    pub perturbed: bool,
}

/// One draw per image, in dataset order.
pub fn draw_perturbations(n: usize, bank: &PerturbationBank, seed: u64) -> Result<Vec<Draw>> {
    if bank.num_classes() == 0 || bank.per_class() == 0 {
        return Err(Error::EmptyBank);
    }
    let mut rng = seeded_rng(seed);
    Ok((0..n)
        .map(|_| {
            let (target, index) = bank.sample(&mut rng);
            Draw {
                target,
                index,
                perturbed: rng.random::<bool>(),
            }
        })
        .collect())
}

/// Balanced clean/perturbed mix built from the same draws as
/// [`mixed_accuracy`]: image `j` is perturbed iff its draw says so.
pub fn balanced_mix(
    ds: &ImageDataset,
    bank: &PerturbationBank,
    eps: f64,
    seed: u64,
) -> Result<Vec<(Image, bool)>> {
    check(ds, bank)?;
    let draws = draw_perturbations(ds.len(), bank, seed)?;
    ds.images()
        .iter()
        .zip(&draws)
        .map(|(img, d)| {
            if d.perturbed {
                Ok((perturb(img, bank.get(d.target, d.index), eps)?, true))
            } else {
                Ok((img.clone(), false))
            }
        })
        .collect()
}

fn check(ds: &ImageDataset, bank: &PerturbationBank) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bank.num_classes() == 0 || bank.per_class() == 0 {
        return Err(Error::EmptyBank);
    }
    Ok(())
}

fn fraction(count: usize, n: usize) -> f64 {
    count as f64 / n as f64
}

/// `P_F`: fraction of clean images flagged.
pub fn false_alarm(det: &impl Detector, clean: &ImageDataset) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut flagged = 0;
    for img in clean.images() {
        if det.detect(img)? {
            flagged += 1;
        }
    }
    Ok(fraction(flagged, clean.len()))
}

/// `P_D(ε)`: fraction of perturbed images flagged.
pub fn detection_probability(
    det: &impl Detector,
    ds: &ImageDataset,
    bank: &PerturbationBank,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    check(ds, bank)?;
    let draws = draw_perturbations(ds.len(), bank, seed)?;
    let mut flagged = 0;
    for (img, d) in ds.images().iter().zip(&draws) {
        if det.detect(&perturb(img, bank.get(d.target, d.index), eps)?)? {
            flagged += 1;
        }
    }
    Ok(fraction(flagged, ds.len()))
}

/// Accuracy of the detector on a mix where each image is perturbed with
/// probability one half.
pub fn mixed_accuracy(
    det: &impl Detector,
    ds: &ImageDataset,
    bank: &PerturbationBank,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    check(ds, bank)?;
    let draws = draw_perturbations(ds.len(), bank, seed)?;
    let mut correct = 0;
    for (img, d) in ds.images().iter().zip(&draws) {
        let decision = if d.perturbed {
            det.detect(&perturb(img, bank.get(d.target, d.index), eps)?)?
        } else {
            det.detect(img)?
        };
        if decision == d.perturbed {
            correct += 1;
        }
    }
    Ok(fraction(correct, ds.len()))
}

/// `P_su(ε)`: the prediction changes and the detector stays silent.
pub fn p_su(
    clf: &MlpClassifier,
    det: &impl Detector,
    ds: &ImageDataset,
    bank: &PerturbationBank,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    check(ds, bank)?;
    let draws = draw_perturbations(ds.len(), bank, seed)?;
    let mut hits = 0;
    for (img, d) in ds.images().iter().zip(&draws) {
        let moved = perturb(img, bank.get(d.target, d.index), eps)?;
        if clf.predict(&moved)? != clf.predict(img)? && !det.detect(&moved)? {
            hits += 1;
        }
    }
    Ok(fraction(hits, ds.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub p_d: f64,
    pub p_f: f64,
    pub p_su: f64,
    pub fooling: f64,
    pub classifier_acc: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub classifier: String,
    pub dataset: String,
    pub alpha: f64,
    pub xi: f64,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    /// Balanced-mix accuracy at `mixed_eps`.
    pub mixed_accuracy: f64,
    pub mixed_eps: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.eps, r.p_d, r.p_f, r.p_su, r.fooling, r.classifier_acc, r.n_samples
            )
            .expect("writing to a String cannot fail");
        }
        out
    }
}

/// Labels carried into the report.
#[derive(Clone, Debug, Default)]
pub struct ReportLabels {
    pub detector: String,
    pub classifier: String,
    pub dataset: String,
    pub alpha: f64,
}

/// The ε grid `{0, 0.1, …, 1.0}`.
pub fn default_eps_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

fn sweep_row(
    clf: &MlpClassifier,
    det: &impl Detector,
    ds: &ImageDataset,
    bank: &PerturbationBank,
    draws: &[Draw],
    clean_pred: &[usize],
    p_f: f64,
    eps: f64,
) -> Result<SweepRow> {
    let (mut detected, mut changed, mut sneaky, mut correct) = (0, 0, 0, 0);
    for (((img, label), d), &before) in ds.iter().zip(draws).zip(clean_pred) {
        let moved = perturb(img, bank.get(d.target, d.index), eps)?;
        let flagged = det.detect(&moved)?;
        let pred = clf.predict(&moved)?;
        detected += usize::from(flagged);
        changed += usize::from(pred != before);
        sneaky += usize::from(pred != before && !flagged);
        correct += usize::from(pred == label);
    }
    let n = ds.len();
    Ok(SweepRow {
        eps,
        p_d: fraction(detected, n),
        p_f,
        p_su: fraction(sneaky, n),
        fooling: fraction(changed, n),
        classifier_acc: fraction(correct, n),
        n_samples: n,
    })
}

/// One row per ε (sorted ascending) on common draws, plus the mixed
/// accuracy at ε = 1.
pub fn sweep(
    clf: &MlpClassifier,
    det: &impl Detector,
    ds: &ImageDataset,
    bank: &PerturbationBank,
    eps_grid: &[f64],
    labels: &ReportLabels,
    seed: u64,
) -> Result<EvalReport> {
    check(ds, bank)?;
    if eps_grid.is_empty() {
        return Err(Error::InvalidArgument("empty ε grid".into()));
    }
    if let Some(bad) = eps_grid.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid ε {bad}")));
    }
    let mut grid = eps_grid.to_vec();
    grid.sort_by(f64::total_cmp);

    let draws = draw_perturbations(ds.len(), bank, seed)?;
    let clean_pred: Vec<usize> = ds
        .images()
        .iter()
        .map(|im| clf.predict(im))
        .collect::<Result<_>>()?;
    let p_f = false_alarm(det, ds)?;
    let rows = grid
        .iter()
        .map(|&eps| sweep_row(clf, det, ds, bank, &draws, &clean_pred, p_f, eps))
        .collect::<Result<Vec<_>>>()?;
    let mixed_eps = 1.0;
    Ok(EvalReport {
        detector: labels.detector.clone(),
        classifier: labels.classifier.clone(),
        dataset: labels.dataset.clone(),
        alpha: labels.alpha,
        xi: bank.xi(),
        seed,
        rows,
        mixed_accuracy: mixed_accuracy(det, ds, bank, mixed_eps, seed)?,
        mixed_eps,
    })
}

/// Standard error of a binomial proportion.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
