//! PCA baseline detector: principal-component scores of the grayscale image
//! fed to a linear classifier trained with logistic loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::data::{grayscale_values, Image, ImageDataset};
use crate::error::{Error, Result};
use crate::numerics::{dot, seeded_rng, symmetric_eigen, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `k × d`, one unit component per row.
    components: Matrix,
    eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim(self.mean.len(), self.components.cols())?;
        Error::check_dim(self.components.rows(), self.eigenvalues.len())
    }
}

fn gray_vector(img: &Image) -> Result<Vec<f64>> {
    grayscale_values(img.shape(), img.pixels())
}

/// Top-`k` principal components of the grayscale images in `clean`.
pub fn fit_pca(clean: &ImageDataset, k: usize) -> Result<PcaModel> {
    if clean.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: clean.len(),
        });
    }
    let vectors: Vec<Vec<f64>> = clean
        .images()
        .iter()
        .map(gray_vector)
        .collect::<Result<_>>()?;
    let d = vectors[0].len();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={d}"
        )));
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = Matrix::zeros(d, d);
    let mut r = vec![0.0; d];
    for v in &vectors {
        for ((ri, x), m) in r.iter_mut().zip(v).zip(&mean) {
            *ri = x - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut components = Matrix::zeros(k, d);
    for i in 0..k {
        for j in 0..d {
            components[(i, j)] = vectors[(i, j)];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues: values[..k].to_vec(),
    })
}

/// `components · (grayscale(img) − mean)`.
pub fn pca_scores(model: &PcaModel, img: &Image) -> Result<Vec<f64>> {
    let g = gray_vector(img)?;
    Error::check_dim(model.mean.len(), g.len())?;
    let centered: Vec<f64> = g.iter().zip(&model.mean).map(|(a, b)| a - b).collect();
    model.components.mul_vec(&centered)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDetector {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearDetector {
    pub fn zeros(k: usize) -> Self {
        Self {
            weights: vec![0.0; k],
            bias: 0.0,
        }
    }

    pub fn decision_value(&self, scores: &[f64]) -> Result<f64> {
        Error::check_dim(self.weights.len(), scores.len())?;
        Ok(dot(&self.weights, scores) + self.bias)
    }

    /// `true` iff `w · s + b ≥ 0`.
    pub fn classify(&self, scores: &[f64]) -> Result<bool> {
        Ok(self.decision_value(scores)? >= 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct LinearOutcome {
    pub detector: LinearDetector,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn logistic_loss(det: &LinearDetector, mix: &[(Vec<f64>, bool)]) -> Result<f64> {
    let mut total = 0.0;
    for (s, y) in mix {
        let z = det.decision_value(s)?;
        // softplus(z) − y·z
        let sp = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        total += sp - if *y { z } else { 0.0 };
    }
    Ok(total / mix.len() as f64)
}

/// Logistic-loss minibatch SGD from a zero initialization. Returns the best
/// epoch iterate, so the final loss never exceeds the initial one.
pub fn train_linear_detector(mix: &[(Vec<f64>, bool)], cfg: &TrainConfig) -> Result<LinearOutcome> {
    cfg.validate()?;
    let positives = mix.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == mix.len() {
        return Err(Error::SingleClassMix);
    }
    let k = mix[0].0.len();
    let mut det = LinearDetector::zeros(k);
    let initial_loss = logistic_loss(&det, mix)?;
    let mut best = (det.clone(), initial_loss);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..mix.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; k];
            let mut gb = 0.0;
            for &i in batch {
                let (s, y) = &mix[i];
                let z = det.decision_value(s)?;
                let p = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    z.exp() / (1.0 + z.exp())
                };
                let r = p - if *y { 1.0 } else { 0.0 };
                for (g, x) in gw.iter_mut().zip(s) {
                    *g += r * x;
                }
                gb += r;
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (w, g) in det.weights.iter_mut().zip(&gw) {
                *w -= step * g;
            }
            det.bias -= step * gb;
        }
        let loss = logistic_loss(&det, mix)?;
        if loss.is_finite() && loss < best.1 {
            best = (det.clone(), loss);
        }
    }
    Ok(LinearOutcome {
        detector: best.0,
        initial_loss,
        final_loss: best.1,
    })
}

/// PCA projection plus linear decision rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaDetector {
    pub pca: PcaModel,
    pub linear: LinearDetector,
}

pub fn pca_detect(pca: &PcaModel, lin: &LinearDetector, img: &Image) -> Result<bool> {
    lin.classify(&pca_scores(pca, img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Shape;
    use crate::numerics::SeededRng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ds_from_planes(planes: Vec<Vec<f64>>, side: usize) -> ImageDataset {
        let n = planes.len();
        let imgs = planes
            .into_iter()
            .map(|p| Image::new(Shape::new(1, side, side), p).unwrap())
            .collect();
        ImageDataset::new(imgs, vec![0; n], 1).unwrap()
    }

    fn gaussian_planes(n: usize, d: usize, sd: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| (0.5 + sd * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rank_one_data() {
        let dir = [0.6, 0.0, -0.8, 0.0];
        let mut rng = seeded_rng(1);
        let planes: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let c: f64 = rng.random_range(-0.3..0.3);
                dir.iter().map(|d| 0.5 + c * d).collect()
            })
            .collect();
        let model = fit_pca(&ds_from_planes(planes, 2), 4).unwrap();
        let first = model.components().row(0);
        assert!((dot(first, &dir).abs() - 1.0).abs() < 1e-10);
        assert!(model.eigenvalues()[1].abs() < 1e-10);
    }

    #[test]
    fn isotropic_spectrum_is_flat() {
        let mut rng = seeded_rng(2);
        let sd = 0.05;
        let model = fit_pca(
            &ds_from_planes(gaussian_planes(4000, 16, sd, &mut rng), 4),
            16,
        )
        .unwrap();
        let var = sd * sd;
        // Sample eigenvalues of a 16-dim isotropic covariance with n = 4000
        // spread roughly as var·(1 ± 2√(d/n)).
        let spread = 2.0 * (16.0f64 / 4000.0).sqrt() + 0.05;
        for &ev in model.eigenvalues() {
            assert!((ev / var - 1.0).abs() < spread, "{ev}");
        }
    }

    #[test]
    fn full_rank_reconstruction_and_orthonormality() {
        let mut rng = seeded_rng(3);
        let planes = gaussian_planes(40, 16, 0.1, &mut rng);
        let ds = ds_from_planes(planes, 4);
        let model = fit_pca(&ds, 16).unwrap();
        let c = model.components();
        let gram = c.matmul(&c.transpose()).unwrap();
        let err = gram.sub(&Matrix::identity(16)).unwrap();
        assert!(err.frobenius_norm() < 1e-8 * 4.0);

        for w in model.eigenvalues().windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(model.eigenvalues().iter().all(|&e| e >= -1e-10));

        for img in ds.images() {
            let s = pca_scores(&model, img).unwrap();
            let back = c.transpose().mul_vec(&s).unwrap();
            for ((b, x), m) in back.iter().zip(img.pixels()).zip(model.mean()) {
                assert!((b - (x - m)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scores_on_axes() {
        let mut rng = seeded_rng(4);
        let ds = ds_from_planes(gaussian_planes(60, 16, 0.1, &mut rng), 4);
        let model = fit_pca(&ds, 5).unwrap();
        let mean_img = Image::new(Shape::new(1, 4, 4), model.mean().to_vec()).unwrap();
        assert!(pca_scores(&model, &mean_img)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12));

        let c = 0.05;
        let px: Vec<f64> = model
            .mean()
            .iter()
            .zip(model.components().row(2))
            .map(|(m, v)| m + c * v)
            .collect();
        let s = pca_scores(&model, &Image::new(Shape::new(1, 4, 4), px).unwrap()).unwrap();
        for (j, v) in s.iter().enumerate() {
            let want = if j == 2 { c } else { 0.0 };
            assert!((v - want).abs() < 1e-10);
        }

        // Direct projection oracle for a color image.
        let color = Image::new(
            Shape::new(3, 4, 4),
            (0..48).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let gray = crate::data::grayscale(&color);
        let s = pca_scores(&model, &color).unwrap();
        for j in 0..5 {
            let mut acc = 0.0;
            for i in 0..16 {
                acc += model.components()[(j, i)] * (gray.pixels()[i] - model.mean()[i]);
            }
            assert!((s[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn score_norm_bounded_by_centered_norm() {
        let mut rng = seeded_rng(5);
        let ds = ds_from_planes(gaussian_planes(50, 16, 0.1, &mut rng), 4);
        let partial = fit_pca(&ds, 6).unwrap();
        let full = fit_pca(&ds, 16).unwrap();
        for img in ds.images() {
            let centered: Vec<f64> = img
                .pixels()
                .iter()
                .zip(full.mean())
                .map(|(a, b)| a - b)
                .collect();
            let c2 = dot(&centered, &centered);
            let s = pca_scores(&partial, img).unwrap();
            assert!(dot(&s, &s) <= c2 + 1e-12);
            let s = pca_scores(&full, img).unwrap();
            assert!((dot(&s, &s) - c2).abs() < 1e-10);
        }
    }

    #[test]
    fn projected_variance_is_ordered() {
        let mut rng = seeded_rng(6);
        let ds = ds_from_planes(gaussian_planes(200, 16, 0.1, &mut rng), 4);
        let model = fit_pca(&ds, 16).unwrap();
        let scores: Vec<Vec<f64>> = ds
            .images()
            .iter()
            .map(|im| pca_scores(&model, im).unwrap())
            .collect();
        let var: Vec<f64> = (0..16)
            .map(|j| scores.iter().map(|s| s[j] * s[j]).sum::<f64>() / 199.0)
            .collect();
        for w in var.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn fit_pca_errors() {
        let ds = ds_from_planes(vec![vec![0.5; 16]], 4);
        assert!(matches!(
            fit_pca(&ds, 2),
            Err(Error::InsufficientData { .. })
        ));
        let ds = ds_from_planes(vec![vec![0.5; 16]; 3], 4);
        assert!(fit_pca(&ds, 17).is_err());
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.5,
            batch_size: 16,
            epochs,
            seed: 3,
        }
    }

    #[test]
    fn separable_scores_train_to_perfect_accuracy() {
        let mut rng = seeded_rng(7);
        let mix: Vec<(Vec<f64>, bool)> = (0..200)
            .map(|i| {
                let y = i % 2 == 0;
                let offset = if y { 1.0 } else { -1.0 };
                let s = vec![
                    offset + rng.random_range(-0.5..0.5),
                    rng.random_range(-1.0..1.0),
                ];
                (s, y)
            })
            .collect();
        let out = train_linear_detector(&mix, &cfg(50)).unwrap();
        let acc = mix
            .iter()
            .filter(|(s, y)| out.detector.classify(s).unwrap() == *y)
            .count();
        assert_eq!(acc, 200);
        assert!(out.final_loss <= out.initial_loss);
    }

    #[test]
    fn random_labels_stay_at_chance() {
        let mut rng = seeded_rng(8);
        let mut draw = |n: usize| -> Vec<(Vec<f64>, bool)> {
            (0..n)
                .map(|_| {
                    let s = (0..5).map(|_| rng.sample(StandardNormal)).collect();
                    (s, rng.random::<bool>())
                })
                .collect()
        };
        let train = draw(1000);
        let held = draw(4000);
        let out = train_linear_detector(&train, &cfg(20)).unwrap();
        let acc = held
            .iter()
            .filter(|(s, y)| out.detector.classify(s).unwrap() == *y)
            .count() as f64
            / held.len() as f64;
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn zero_epochs_and_single_class() {
        let mix = vec![(vec![1.0, 2.0], true), (vec![0.0, 1.0], false)];
        let out = train_linear_detector(&mix, &cfg(0)).unwrap();
        assert_eq!(out.detector, LinearDetector::zeros(2));
        let single = vec![(vec![1.0], true); 3];
        assert!(matches!(
            train_linear_detector(&single, &cfg(3)),
            Err(Error::SingleClassMix)
        ));
    }

    #[test]
    fn pca_detect_follows_affine_sign() {
        let mut rng = seeded_rng(9);
        let ds = ds_from_planes(gaussian_planes(30, 16, 0.1, &mut rng), 4);
        let pca = fit_pca(&ds, 4).unwrap();
        let mut lin = LinearDetector {
            weights: vec![1.0, -2.0, 0.5, 3.0],
            bias: -1e9,
        };
        assert!(ds
            .images()
            .iter()
            .all(|im| !pca_detect(&pca, &lin, im).unwrap()));
        lin.bias = 1e9;
        assert!(ds
            .images()
            .iter()
            .all(|im| pca_detect(&pca, &lin, im).unwrap()));
        lin.bias = 0.01;
        for im in ds.images() {
            let s = pca_scores(&pca, im).unwrap();
            let v: f64 = lin.weights.iter().zip(&s).map(|(w, x)| w * x).sum::<f64>() + lin.bias;
            assert_eq!(pca_detect(&pca, &lin, im).unwrap(), v >= 0.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn components_orthonormal_and_scores_bounded(seed in any::<u64>(), k in 1usize..=16, n in 3usize..40) {
                let mut rng = seeded_rng(seed);
                let ds = ds_from_planes(gaussian_planes(n, 16, 0.1, &mut rng), 4);
                let full = fit_pca(&ds, 16).unwrap();
                let part = fit_pca(&ds, k).unwrap();
                let c = full.components();
                for i in 0..16 {
                    for j in 0..16 {
                        let want = if i == j { 1.0 } else { 0.0 };
                        prop_assert!((crate::numerics::dot(c.row(i), c.row(j)) - want).abs() <= 1e-8);
                    }
                }
                prop_assert!(full.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(full.eigenvalues().iter().all(|&e| e >= -1e-10));
                for img in ds.images() {
                    let centered: Vec<f64> = img.pixels().iter().zip(part.mean()).map(|(a, b)| a - b).collect();
                    let norm = crate::numerics::dot(&centered, &centered);
                    let s_full = pca_scores(&full, img).unwrap();
                    let s_part = pca_scores(&part, img).unwrap();
                    prop_assert!(crate::numerics::dot(&s_part, &s_part) <= norm + 1e-10);
                    prop_assert!((crate::numerics::dot(&s_full, &s_full) - norm).abs() <= 1e-8 * (1.0 + norm));
                }
            }
        }
    }
}
