//! Universal adversarial perturbations.
//!
//! Targeted perturbations are learned jointly for every (target class,
//! index) pair as the columns of an embedding matrix: each minibatch picks
//! one column at random, takes a gradient step on the mean cross-entropy
//! towards its target class and projects back onto the ℓ∞ ball of radius ξ.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{MlpClassifier, PROB_FLOOR};
use crate::data::{Image, ImageDataset, Shape};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, SeededRng};

/// `ξ = 8` in 8-bit pixel units.
pub const XI_8BIT_8: f64 = 8.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ radius in `[0, 1]` pixel units.
    pub xi: f64,
    /// Perturbations per target class.
    pub m: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub target_rate_goal: f64,
    /// Images set aside for the stopping check.
    pub holdout: usize,
    /// Truncation of the per-example loss in the non-targeted objective.
    pub clip_cap: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            xi: XI_8BIT_8,
            m: 2,
            learning_rate: 0.05,
            max_epochs: 200,
            batch_size: 32,
            target_rate_goal: 0.75,
            holdout: 200,
            clip_cap: 5.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) {
            return Err(Error::InvalidArgument("xi must be positive".into()));
        }
        if !(self.target_rate_goal > 0.0 && self.target_rate_goal <= 1.0) {
            return Err(Error::InvalidArgument(
                "target_rate_goal must lie in (0, 1]".into(),
            ));
        }
        if self.m == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "m and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_cap > 0.0) {
            return Err(Error::InvalidArgument(
                "learning_rate and clip_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `d × m|Y|` matrix whose column `t·m + k` is the k-th perturbation for
/// target class `t`. Stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    classes: usize,
    m: usize,
    columns: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn zeros(dim: usize, classes: usize, m: usize) -> Self {
        Self {
            dim,
            classes,
            m,
            columns: vec![vec![0.0; dim]; classes * m],
        }
    }

    pub fn index(&self, target: usize, k: usize) -> usize {
        target * self.m + k
    }

    pub fn column(&self, target: usize, k: usize) -> &[f64] {
        &self.columns[self.index(target, k)]
    }

    pub fn column_mut(&mut self, target: usize, k: usize) -> &mut [f64] {
        let i = self.index(target, k);
        &mut self.columns[i]
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// The empirical perturbation distribution: `m` vectors per target class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBank {
    xi: f64,
    shape: Shape,
    /// `per_class[t][k]` is a full-color perturbation.
    per_class: Vec<Vec<Vec<f64>>>,
}

impl PerturbationBank {
    pub fn new(xi: f64, shape: Shape, per_class: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let bank = Self {
            xi,
            shape,
            per_class,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.per_class.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::EmptyBank);
        }
        for hs in &self.per_class {
            Error::check_dim(m, hs.len())?;
            for h in hs {
                Error::check_dim(self.shape.len(), h.len())?;
                if h.iter().any(|v| !(v.abs() <= self.xi)) {
                    return Err(Error::InvalidArgument(format!(
                        "perturbation exceeds the ℓ∞ bound {}",
                        self.xi
                    )));
                }
            }
        }
        Ok(())
    }

    fn from_embedding(w: EmbeddingMatrix, xi: f64, shape: Shape) -> Self {
        let m = w.m;
        let mut cols = w.columns.into_iter();
        let per_class = (0..w.classes)
            .map(|_| cols.by_ref().take(m).collect())
            .collect();
        Self {
            xi,
            shape,
            per_class,
        }
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn per_class(&self) -> usize {
        self.per_class.first().map_or(0, Vec::len)
    }

    pub fn get(&self, target: usize, k: usize) -> &[f64] {
        &self.per_class[target][k]
    }

    pub fn class(&self, target: usize) -> &[Vec<f64>] {
        &self.per_class[target]
    }

    /// Draws a target uniformly, then one of its perturbations uniformly.
    pub fn sample(&self, rng: &mut SeededRng) -> (usize, usize) {
        let t = rng.random_range(0..self.num_classes());
        let k = rng.random_range(0..self.per_class());
        (t, k)
    }
}

#[derive(Clone, Debug)]
pub struct TargetedOutcome {
    pub bank: PerturbationBank,
    /// `false` when `max_epochs` ran out before every column met the goal.
    pub converged: bool,
    pub epochs_run: usize,
    /// Held-out target rate at ε = 1, indexed `[t][k]`.
    pub holdout_rates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct NontargetedOutcome {
    pub perturbation: Vec<f64>,
    /// Minibatch mean of the truncated loss, one entry per step.
    pub losses: Vec<f64>,
}

/// `clip(x + eps · h)`.
pub fn perturb(x: &Image, h: &[f64], eps: f64) -> Result<Image> {
    Error::check_dim(x.pixels().len(), h.len())?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be non-negative, got {eps}"
        )));
    }
    let pixels = x.pixels().iter().zip(h).map(|(a, b)| a + eps * b).collect();
    Image::clamped(x.shape(), pixels)
}

/// Fraction of images whose prediction changes under `eps · h`.
pub fn fooling_rate(clf: &MlpClassifier, ds: &ImageDataset, h: &[f64], eps: f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut fooled = 0usize;
    for img in ds.images() {
        if clf.predict(&perturb(img, h, eps)?)? != clf.predict(img)? {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / ds.len() as f64)
}

/// Fraction of perturbed images classified as `target`.
pub fn target_rate(
    clf: &MlpClassifier,
    ds: &ImageDataset,
    h: &[f64],
    target: usize,
    eps: f64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for img in ds.images() {
        if clf.predict(&perturb(img, h, eps)?)? == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

fn check_inputs(clf: &MlpClassifier, ds: &ImageDataset) -> Result<Shape> {
    let shape = ds.shape().ok_or(Error::EmptyDataset)?;
    Error::check_dim(clf.input_dim(), shape.len())?;
    Ok(shape)
}

/// Splits off the stopping-check batch. Small datasets are reused whole.
fn holdout_split(
    ds: &ImageDataset,
    holdout: usize,
    rng: &mut SeededRng,
) -> (ImageDataset, ImageDataset) {
    if holdout == 0 || ds.len() < 2 * holdout {
        return (ds.clone(), ds.clone());
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    (ds.subset(&idx[holdout..]), ds.subset(&idx[..holdout]))
}

/// Minibatch-mean gradient of `loss(f(clip(x + h)))` with respect to `h`.
///
/// Pixels where `x + h` leaves `[0, 1]` contribute no gradient (the clip is
/// flat there). `loss_cap` truncates each example's loss; capped examples
/// also contribute none.
fn batch_gradient(
    clf: &MlpClassifier,
    ds: &ImageDataset,
    batch: &[usize],
    h: &[f64],
    target: impl Fn(usize) -> usize,
    loss_cap: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; h.len()];
    let mut loss = 0.0;
    for &i in batch {
        let x = ds.images()[i].pixels();
        let shifted: Vec<f64> = x.iter().zip(h).map(|(a, b)| a + b).collect();
        let clipped: Vec<f64> = shifted.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (l, g) = clf.loss_and_input_gradient(&clipped, target(i))?;
        if let Some(cap) = loss_cap {
            if l >= cap {
                loss += cap;
                continue;
            }
        }
        loss += l;
        for ((acc, gi), s) in grad.iter_mut().zip(&g).zip(&shifted) {
            if (0.0..=1.0).contains(s) {
                *acc += gi;
            }
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn project(h: &mut [f64], xi: f64) {
    for v in h {
        *v = v.clamp(-xi, xi);
    }
}

/// Learns `m` targeted UAPs for every class.
pub fn generate_targeted_uaps(
    clf: &MlpClassifier,
    ds: &ImageDataset,
    cfg: &AttackConfig,
) -> Result<TargetedOutcome> {
    cfg.validate()?;
    let shape = check_inputs(clf, ds)?;
    let classes = clf.num_classes();
    let mut rng = seeded_rng(cfg.seed);
    let (train, holdout) = holdout_split(ds, cfg.holdout, &mut rng);
    let mut w = EmbeddingMatrix::zeros(shape.len(), classes, cfg.m);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let rates = |w: &EmbeddingMatrix| -> Result<Vec<Vec<f64>>> {
        (0..classes)
            .map(|t| {
                (0..cfg.m)
                    .map(|k| target_rate(clf, &holdout, w.column(t, k), t, 1.0))
                    .collect()
            })
            .collect()
    };
    let goal_met = |r: &[Vec<f64>]| r.iter().flatten().all(|&v| v >= cfg.target_rate_goal);

    let mut holdout_rates = rates(&w)?;
    let mut converged = goal_met(&holdout_rates);
    let mut epochs_run = 0;
    while !converged && epochs_run < cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let t = rng.random_range(0..classes);
            let k = rng.random_range(0..cfg.m);
            let (_, g) = batch_gradient(clf, &train, batch, w.column(t, k), |_| t, None)?;
            let col = w.column_mut(t, k);
            for (h, gi) in col.iter_mut().zip(&g) {
                *h -= cfg.learning_rate * gi;
            }
            project(col, cfg.xi);
        }
        epochs_run += 1;
        holdout_rates = rates(&w)?;
        converged = goal_met(&holdout_rates);
    }

    Ok(TargetedOutcome {
        bank: PerturbationBank::from_embedding(w, cfg.xi, shape),
        converged,
        epochs_run,
        holdout_rates,
    })
}

/// Single non-targeted UAP by projected ascent on the truncated
/// cross-entropy against the clean predictions.
pub fn generate_nontargeted_uap(
    clf: &MlpClassifier,
    ds: &ImageDataset,
    cfg: &AttackConfig,
) -> Result<NontargetedOutcome> {
    cfg.validate()?;
    let shape = check_inputs(clf, ds)?;
    let clean: Vec<usize> = ds
        .images()
        .iter()
        .map(|img| clf.predict(img))
        .collect::<Result<_>>()?;
    let mut rng = seeded_rng(cfg.seed);
    let mut h = vec![0.0; shape.len()];
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, g) = batch_gradient(clf, ds, batch, &h, |i| clean[i], Some(cfg.clip_cap))?;
            losses.push(loss);
            for (v, gi) in h.iter_mut().zip(&g) {
                *v += cfg.learning_rate * gi;
            }
            project(&mut h, cfg.xi);
        }
    }
    Ok(NontargetedOutcome {
        perturbation: h,
        losses,
    })
}

/// Minibatch mean of the truncated loss `min(H(1_{f(x)}, π̂(x + h)), cap)`.
pub fn truncated_loss(clf: &MlpClassifier, ds: &ImageDataset, h: &[f64], cap: f64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for img in ds.images() {
        let y = clf.predict(img)?;
        let p = clf.forward(&perturb(img, h, 1.0)?)?;
        total += (-p[y].max(PROB_FLOOR).ln()).min(cap);
    }
    Ok(total / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train_classifier, TrainConfig};
    use crate::data::{make_synthetic, SyntheticSpec};

    fn tiny_task() -> (MlpClassifier, ImageDataset) {
        let spec = SyntheticSpec {
            num_classes: 3,
            images_per_class: 30,
            shape: Shape::new(3, 8, 8),
            class_separation: 0.3,
            noise_sd: 0.05,
        };
        let ds = make_synthetic(&spec, 5).unwrap();
        let clf = train_classifier(
            &ds,
            &TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        (clf, ds)
    }

    #[test]
    #[allow(clippy::manual_clamp)]
    fn perturb_examples() {
        let x = Image::new(Shape::new(1, 1, 4), vec![0.1, 0.5, 0.9, 1.0]).unwrap();
        let h = [0.2, -0.7, 0.3, -0.1];
        assert_eq!(perturb(&x, &h, 0.0).unwrap(), x);
        assert_eq!(perturb(&x, &[0.0; 4], 0.8).unwrap(), x);
        let p = perturb(&x, &h, 1.0).unwrap();
        for ((out, a), b) in p.pixels().iter().zip(x.pixels()).zip(h) {
            let sum = a + b;
            let want = if sum < 0.0 {
                0.0
            } else if sum > 1.0 {
                1.0
            } else {
                sum
            };
            assert_eq!(*out, want);
        }
        assert!(perturb(&x, &h[..2], 1.0).is_err());
        assert!(perturb(&x, &h, -1.0).is_err());
    }

    #[test]
    fn rates_without_perturbation() {
        let (clf, ds) = tiny_task();
        let d = ds.shape().unwrap().len();
        let h = vec![0.03; d];
        assert_eq!(fooling_rate(&clf, &ds, &h, 0.0).unwrap(), 0.0);
        assert_eq!(fooling_rate(&clf, &ds, &vec![0.0; d], 1.0).unwrap(), 0.0);
        for t in 0..3 {
            let base = ds
                .images()
                .iter()
                .filter(|img| clf.predict(img).unwrap() == t)
                .count() as f64
                / ds.len() as f64;
            assert_eq!(target_rate(&clf, &ds, &vec![0.0; d], t, 1.0).unwrap(), base);
            assert_eq!(target_rate(&clf, &ds, &h, t, 0.0).unwrap(), base);
        }
    }

    #[test]
    fn fooling_rate_matches_loop() {
        let (clf, ds) = tiny_task();
        let d = ds.shape().unwrap().len();
        let h: Vec<f64> = (0..d)
            .map(|i| if i % 3 == 0 { 0.2 } else { -0.2 })
            .collect();
        let mut count = 0;
        for img in ds.images() {
            let mut px = img.pixels().to_vec();
            for (p, v) in px.iter_mut().zip(&h) {
                *p = (*p + 0.7 * v).clamp(0.0, 1.0);
            }
            let moved = Image::new(img.shape(), px).unwrap();
            if clf.predict(&moved).unwrap() != clf.predict(img).unwrap() {
                count += 1;
            }
        }
        let expected = count as f64 / ds.len() as f64;
        assert_eq!(fooling_rate(&clf, &ds, &h, 0.7).unwrap(), expected);
    }

    #[test]
    fn zero_epochs_gives_zero_bank() {
        let (clf, ds) = tiny_task();
        let cfg = AttackConfig {
            max_epochs: 0,
            ..AttackConfig::default()
        };
        let out = generate_targeted_uaps(&clf, &ds, &cfg).unwrap();
        assert_eq!(out.epochs_run, 0);
        for t in 0..3 {
            for h in out.bank.class(t) {
                assert!(h.iter().all(|&v| v == 0.0));
            }
        }
        let nt = generate_nontargeted_uap(&clf, &ds, &cfg).unwrap();
        assert!(nt.perturbation.iter().all(|&v| v == 0.0));
        assert_eq!(fooling_rate(&clf, &ds, &nt.perturbation, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn targeted_bank_respects_bound_and_is_deterministic() {
        let (clf, ds) = tiny_task();
        let cfg = AttackConfig {
            xi: 0.02,
            max_epochs: 5,
            holdout: 10,
            learning_rate: 1.0,
            ..AttackConfig::default()
        };
        let a = generate_targeted_uaps(&clf, &ds, &cfg).unwrap();
        let b = generate_targeted_uaps(&clf, &ds, &cfg).unwrap();
        assert_eq!(a.bank, b.bank);
        a.bank.validate().unwrap();
        for t in 0..3 {
            for h in a.bank.class(t) {
                assert!(h.iter().all(|v| v.abs() <= 0.02));
            }
        }
    }

    #[test]
    fn nontargeted_losses_are_truncated() {
        let (clf, ds) = tiny_task();
        let cfg = AttackConfig {
            xi: 0.3,
            max_epochs: 5,
            learning_rate: 5.0,
            clip_cap: 0.5,
            ..AttackConfig::default()
        };
        let out = generate_nontargeted_uap(&clf, &ds, &cfg).unwrap();
        assert!(!out.losses.is_empty());
        assert!(out.losses.iter().all(|&l| l <= 0.5 + 1e-15));
        assert!(out.perturbation.iter().all(|v| v.abs() <= 0.3));
        assert!(truncated_loss(&clf, &ds, &out.perturbation, 0.5).unwrap() <= 0.5);
    }

    #[test]
    fn embedding_indexing() {
        let mut w = EmbeddingMatrix::zeros(3, 4, 2);
        assert_eq!(w.num_columns(), 8);
        assert_eq!(w.index(2, 1), 5);
        w.column_mut(2, 1)[0] = 1.0;
        let bank = PerturbationBank::from_embedding(w, 1.0, Shape::new(1, 1, 3));
        assert_eq!(bank.get(2, 1), &[1.0, 0.0, 0.0]);
        assert_eq!(bank.per_class(), 2);
    }

    #[test]
    fn config_validation() {
        let bad = AttackConfig {
            xi: 0.0,
            ..AttackConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AttackConfig {
            target_rate_goal: 1.5,
            ..AttackConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn perturb_stays_in_range_and_moves_at_most_eps_xi(
                pixels in prop::collection::vec(0.0f64..=1.0, 12),
                h in prop::collection::vec(-0.2f64..0.2, 12),
                eps in 0.0f64..=1.0,
            ) {
                let x = Image::new(Shape::new(3, 2, 2), pixels).unwrap();
                let y = perturb(&x, &h, eps).unwrap();
                for ((a, b), hv) in x.pixels().iter().zip(y.pixels()).zip(&h) {
                    prop_assert!((0.0..=1.0).contains(b));
                    prop_assert!((a - b).abs() <= eps * hv.abs() + 1e-15);
                }
            }

            #[test]
            fn bank_respects_xi_for_any_radius(xi in 0.001f64..0.3, seed in any::<u64>()) {
                let (clf, ds) = tiny_task();
                let cfg = AttackConfig { xi, max_epochs: 2, learning_rate: 1.0, holdout: 0, seed, ..AttackConfig::default() };
                let bank = generate_targeted_uaps(&clf, &ds, &cfg).unwrap().bank;
                for t in 0..bank.num_classes() {
                    for h in bank.class(t) {
                        prop_assert!(h.iter().all(|v| v.abs() <= xi));
                    }
                }
            }
        }
    }
}
