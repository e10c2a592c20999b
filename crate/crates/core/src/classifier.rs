//! A one-hidden-layer softmax classifier with hand-written backpropagation.
//!
//! Architecture: flatten → dense(64) → ReLU → dense(|Y|) → softmax. The
//! attack needs gradients of the cross-entropy with respect to the *input*,
//! so the backward pass always runs down to the pixels.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, ImageDataset};
use crate::error::{Error, Result};
use crate::numerics::{dot, seeded_rng};

pub const HIDDEN_UNITS: usize = 64;

/// Lower clamp applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    input_dim: usize,
    hidden: usize,
    classes: usize,
    /// `hidden × input_dim`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `classes × hidden`, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
    /// Mean training cross-entropy after each epoch.
    epoch_losses: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
struct Activations {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

struct Gradients {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Gradients {
    fn zeros(clf: &MlpClassifier) -> Self {
        Self {
            w1: vec![0.0; clf.w1.len()],
            b1: vec![0.0; clf.b1.len()],
            w2: vec![0.0; clf.w2.len()],
            b2: vec![0.0; clf.b2.len()],
        }
    }
}

impl MlpClassifier {
    /// All weights and biases zero.
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
            epoch_losses: Vec::new(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut clf = Self::zeros(input_dim, hidden, classes);
        let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        clf.w1
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a1..a1));
        let a2 = (6.0 / (hidden + classes) as f64).sqrt();
        clf.w2
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-a2..a2));
        clf
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    /// Shape-checks a deserialized classifier.
    pub fn validate(&self) -> Result<()> {
        Error::check_dim(self.hidden * self.input_dim, self.w1.len())?;
        Error::check_dim(self.hidden, self.b1.len())?;
        Error::check_dim(self.classes * self.hidden, self.w2.len())?;
        Error::check_dim(self.classes, self.b2.len())?;
        if self.classes == 0 {
            return Err(Error::InvalidArgument("classifier has no classes".into()));
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Result<Activations> {
        Error::check_dim(self.input_dim, x.len())?;
        let pre_hidden: Vec<f64> = (0..self.hidden)
            .map(|j| dot(&self.w1[j * self.input_dim..(j + 1) * self.input_dim], x) + self.b1[j])
            .collect();
        let hidden: Vec<f64> = pre_hidden.iter().map(|&z| z.max(0.0)).collect();
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| dot(&self.w2[k * self.hidden..(k + 1) * self.hidden], &hidden) + self.b2[k])
            .collect();
        Ok(Activations {
            pre_hidden,
            hidden,
            probs: softmax(&logits),
        })
    }

    /// Class probabilities for a flattened input.
    pub fn forward_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(x)?.probs)
    }

    pub fn forward(&self, x: &Image) -> Result<Vec<f64>> {
        self.forward_values(x.pixels())
    }

    pub fn predict_values(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward_values(x)?))
    }

    /// Argmax of [`forward`](Self::forward); ties go to the smallest index.
    pub fn predict(&self, x: &Image) -> Result<usize> {
        self.predict_values(x.pixels())
    }

    /// Backward pass from `dL/dlogits`; returns `dL/dx` and, if `grads` is
    /// given, accumulates parameter gradients into it.
    fn backward(
        &self,
        x: &[f64],
        act: &Activations,
        dlogits: &[f64],
        grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let mut dhidden = vec![0.0; self.hidden];
        for (k, &dk) in dlogits.iter().enumerate() {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            for (dh, w) in dhidden.iter_mut().zip(row) {
                *dh += dk * w;
            }
        }
        let dpre: Vec<f64> = dhidden
            .iter()
            .zip(&act.pre_hidden)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();

        let mut dx = vec![0.0; self.input_dim];
        for (j, &dj) in dpre.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += dj * w;
            }
        }

        if let Some(g) = grads {
            for (k, &dk) in dlogits.iter().enumerate() {
                g.b2[k] += dk;
                let row = &mut g.w2[k * self.hidden..(k + 1) * self.hidden];
                for (gw, a) in row.iter_mut().zip(&act.hidden) {
                    *gw += dk * a;
                }
            }
            for (j, &dj) in dpre.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                g.b1[j] += dj;
                let row = &mut g.w1[j * self.input_dim..(j + 1) * self.input_dim];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += dj * xi;
                }
            }
        }
        dx
    }

    /// Cross-entropy against `target` and its gradient with respect to `x`.
    pub fn loss_and_input_gradient(&self, x: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        if target >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "target class {target} out of range"
            )));
        }
        let act = self.activations(x)?;
        let loss = -act.probs[target].max(PROB_FLOOR).ln();
        let dlogits = softmax_ce_grad(&act.probs, target);
        Ok((loss, self.backward(x, &act, &dlogits, None)))
    }

    /// Exact gradient of `cross_entropy(onehot(target), forward(x))` with
    /// respect to the input pixels.
    pub fn input_gradient(&self, x: &Image, target: usize) -> Result<Vec<f64>> {
        Ok(self.loss_and_input_gradient(x.pixels(), target)?.1)
    }

    fn apply(&mut self, g: &Gradients, scale: f64) {
        for (p, d) in self.w1.iter_mut().zip(&g.w1) {
            *p -= scale * d;
        }
        for (p, d) in self.b1.iter_mut().zip(&g.b1) {
            *p -= scale * d;
        }
        for (p, d) in self.w2.iter_mut().zip(&g.w2) {
            *p -= scale * d;
        }
        for (p, d) in self.b2.iter_mut().zip(&g.b2) {
            *p -= scale * d;
        }
    }

    /// Fraction of `ds` whose prediction equals the label.
    pub fn accuracy(&self, ds: &ImageDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hits = 0usize;
        for (img, label) in ds.iter() {
            if self.predict(img)? == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / ds.len() as f64)
    }

    pub fn mean_loss(&self, ds: &ImageDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for (img, label) in ds.iter() {
            let p = self.forward(img)?;
            total += -p[label].max(PROB_FLOOR).ln();
        }
        Ok(total / ds.len() as f64)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `dL/dlogits` for softmax followed by cross-entropy against a one-hot.
fn softmax_ce_grad(probs: &[f64], target: usize) -> Vec<f64> {
    let mut d = probs.to_vec();
    d[target] -= 1.0;
    d
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// `H(p, q) = −Σ pᵢ ln max(qᵢ, 1e-12)`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> Result<f64> {
    Error::check_dim(target.len(), probs.len())?;
    Ok(-target
        .iter()
        .zip(probs)
        .map(|(p, q)| {
            if *p == 0.0 {
                0.0
            } else {
                p * q.max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>())
}

/// Minibatch SGD on the mean cross-entropy.
pub fn train_classifier(ds: &ImageDataset, cfg: &TrainConfig) -> Result<MlpClassifier> {
    cfg.validate()?;
    let shape = ds.shape().ok_or(Error::EmptyDataset)?;
    let mut clf = MlpClassifier::init(shape.len(), HIDDEN_UNITS, ds.num_classes(), cfg.seed);
    let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..ds.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(&clf);
            for &i in batch {
                let x = ds.images()[i].pixels();
                let label = ds.labels()[i];
                let act = clf.activations(x)?;
                epoch_loss += -act.probs[label].max(PROB_FLOOR).ln();
                let dlogits = softmax_ce_grad(&act.probs, label);
                clf.backward(x, &act, &dlogits, Some(&mut grads));
            }
            clf.apply(&grads, cfg.learning_rate / batch.len() as f64);
        }
        clf.epoch_losses.push(epoch_loss / ds.len() as f64);
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Shape, SyntheticSpec};
    use rand_distr::StandardNormal;

    fn random_input(dim: usize, rng: &mut crate::numerics::SeededRng) -> Vec<f64> {
        (0..dim).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn zero_classifier_is_uniform_and_constant() {
        let clf = MlpClassifier::zeros(12, 5, 4);
        let x = vec![0.3; 12];
        let p = clf.forward_values(&x).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(clf.predict_values(&x).unwrap(), 0);
        let (_, g) = clf.loss_and_input_gradient(&x, 2).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_checks_dimension() {
        let clf = MlpClassifier::zeros(12, 5, 4);
        assert!(matches!(
            clf.forward_values(&[0.0; 3]),
            Err(Error::DimensionMismatch {
                expected: 12,
                got: 3
            })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let t = one_hot(1, 4);
        assert!(cross_entropy(&t, &one_hot(1, 4)).unwrap() <= 1e-11);
        let uniform = vec![0.25; 4];
        assert!((cross_entropy(&t, &uniform).unwrap() - 4f64.ln()).abs() < 1e-14);
        assert!(cross_entropy(&t, &[0.5, 0.5]).is_err());

        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
            let q = softmax(&logits);
            let p = softmax(&logits.iter().map(|v| -v).collect::<Vec<_>>());
            let mut oracle = 0.0;
            for i in 0..6 {
                oracle -= p[i] * q[i].ln();
            }
            assert!((cross_entropy(&p, &q).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_matches_forward_argmax() {
        let clf = MlpClassifier::init(10, 8, 5, 3);
        let mut rng = seeded_rng(5);
        for _ in 0..1000 {
            let x = random_input(10, &mut rng);
            let p = clf.forward_values(&x).unwrap();
            let (mut best, mut bv) = (0, p[0]);
            for (i, v) in p.iter().enumerate() {
                if *v > bv {
                    best = i;
                    bv = *v;
                }
            }
            assert_eq!(clf.predict_values(&x).unwrap(), best);
        }
        assert_eq!(argmax(&[0.1, 5.0, 0.2]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(6);
        let h = 1e-5;
        for trial in 0..100 {
            let clf = MlpClassifier::init(20, 16, 4, trial);
            let x = random_input(20, &mut rng);
            let target = rng.random_range(0..4);
            let (_, g) = clf.loss_and_input_gradient(&x, target).unwrap();
            for _ in 0..5 {
                let i = rng.random_range(0..20);
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fp = clf.loss_and_input_gradient(&xp, target).unwrap().0;
                let fm = clf.loss_and_input_gradient(&xm, target).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-5, "trial {trial} coord {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn saturated_gradient_vanishes() {
        // Logit gap of ~60 puts the target probability within e^-60 of one.
        let mut clf = MlpClassifier::zeros(4, 2, 3);
        clf.w1 = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        clf.w2 = vec![30.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        clf.b2 = vec![0.0, -30.0, -30.0];
        let x = [1.0, 0.5, 0.2, 0.1];
        let (_, g) = clf.loss_and_input_gradient(&x, 0).unwrap();
        assert!(crate::numerics::norm2(&g) <= 1e-6);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = SyntheticSpec {
            num_classes: 3,
            images_per_class: 5,
            shape: Shape::new(3, 8, 8),
            class_separation: 0.3,
            noise_sd: 0.05,
        };
        let ds = make_synthetic(&spec, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 17,
            ..TrainConfig::default()
        };
        let clf = train_classifier(&ds, &cfg).unwrap();
        assert_eq!(clf, MlpClassifier::init(192, HIDDEN_UNITS, 3, 17));
        assert!(clf.final_train_loss().is_none());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = ImageDataset::new(vec![], vec![], 2).unwrap();
        assert!(matches!(
            train_classifier(&ds, &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let spec = SyntheticSpec {
            num_classes: 3,
            images_per_class: 20,
            shape: Shape::new(3, 8, 8),
            class_separation: 0.3,
            noise_sd: 0.05,
        };
        let ds = make_synthetic(&spec, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train_classifier(&ds, &cfg).unwrap();
        let b = train_classifier(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.epoch_losses().iter().all(|l| l.is_finite()));
        assert_eq!(a.epoch_losses().len(), 5);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn probabilities_normalize(seed in any::<u64>(), scale in 0.1f64..50.0) {
                let mut clf = MlpClassifier::init(16, 8, 5, seed);
                clf.w2.iter_mut().for_each(|w| *w *= scale);
                let mut rng = seeded_rng(seed ^ 0xabc);
                let x = random_input(16, &mut rng);
                let p = clf.forward_values(&x).unwrap();
                prop_assert!(p.iter().all(|v| *v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
