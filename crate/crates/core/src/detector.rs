//! The locally optimal GLRT detector under a Gaussian tile model.
//!
//! Inputs are grayscaled and cut into `n` tiles of `P × P` pixels that are
//! modelled as iid `N(μ, Σ)`. For target class `t` with mean perturbation
//! `h̄_t` the locally optimal score is
//!
//! ```text
//! s_t(x) = Σ_i (h̄_t)_iᵀ Σ⁻¹ (x_i − μ)
//! ```
//!
//! and the detector thresholds `T(x) = max_t s_t(x)` at `τ`. `Σ` is only
//! ever held as its Cholesky factor `L`; every `Σ⁻¹ v` is two triangular
//! solves.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::PerturbationBank;
use crate::data::{grayscale_values, tile_values, Image, ImageDataset, TileLayout};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky_with_jitter, dot, empirical_quantile, seeded_rng, solve_spd, LowerTriangular, Matrix,
};

/// Floor applied to the diagonal of `L` after every fine-tuning step.
pub const MIN_CHOL_DIAGONAL: f64 = 1e-8;

/// Shared tile density `q₀ = N(μ, L Lᵀ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTileModel {
    layout: TileLayout,
    mu: Vec<f64>,
    chol: LowerTriangular,
}

impl GaussianTileModel {
    pub fn new(layout: TileLayout, mu: Vec<f64>, chol: LowerTriangular) -> Result<Self> {
        let model = Self { layout, mu, chol };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim(self.layout.tile_dim(), self.mu.len())?;
        Error::check_dim(self.layout.tile_dim(), self.chol.dim())?;
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tile mean must be finite".into()));
        }
        let d = self.chol.dim();
        for i in 0..d {
            if !(self.chol.get(i, i) > 0.0) {
                return Err(Error::InvalidArgument(
                    "Cholesky diagonal must be positive".into(),
                ));
            }
            if (i + 1..d).any(|j| self.chol.get(i, j) != 0.0) {
                return Err(Error::InvalidArgument(
                    "Cholesky factor is not lower-triangular".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> &TileLayout {
        &self.layout
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn chol(&self) -> &LowerTriangular {
        &self.chol
    }

    pub fn covariance(&self) -> Matrix {
        self.chol.reconstruct()
    }

    /// `Σ⁻¹ (x_i − μ)` for each grayscale tile of `x`.
    pub fn whitened_tiles(&self, x: &Image) -> Result<Vec<Vec<f64>>> {
        self.whiten(&image_tiles(x, &self.layout)?)
    }

    fn whiten(&self, tiles: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        tiles
            .iter()
            .map(|t| {
                let r: Vec<f64> = t.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
                solve_spd(&self.chol, &r)
            })
            .collect()
    }

    /// `ln q₀(v)` for a single tile-sized vector.
    pub fn log_density(&self, v: &[f64]) -> Result<f64> {
        Error::check_dim(self.mu.len(), v.len())?;
        let r: Vec<f64> = v.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let y = self.chol.solve_lower(&r)?;
        let d = self.mu.len() as f64;
        Ok(-0.5 * dot(&y, &y)
            - 0.5 * self.chol.log_det_product()
            - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Grayscale tiles of a color or grayscale image.
pub fn image_tiles(x: &Image, layout: &TileLayout) -> Result<Vec<Vec<f64>>> {
    let s = x.shape();
    if s.height != layout.height() || s.width != layout.width() {
        return Err(Error::DimensionMismatch {
            expected: layout.plane(),
            got: s.plane(),
        });
    }
    tile_values(&grayscale_values(s, x.pixels())?, layout)
}

/// Per-class mean perturbations in grayscale tile space, `[t][i][e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanPerturbationSet {
    layout: TileLayout,
    per_class: Vec<Vec<Vec<f64>>>,
}

impl MeanPerturbationSet {
    pub fn new(layout: TileLayout, per_class: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let set = Self { layout, per_class };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class.is_empty() {
            return Err(Error::EmptyBank);
        }
        for tiles in &self.per_class {
            Error::check_dim(self.layout.tiles_per_image(), tiles.len())?;
            for t in tiles {
                Error::check_dim(self.layout.tile_dim(), t.len())?;
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, t: usize) -> &[Vec<f64>] {
        &self.per_class[t]
    }

    pub fn layout(&self) -> &TileLayout {
        &self.layout
    }
}

/// `θ = {μ, Σ, (h̄_t), τ}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub model: GaussianTileModel,
    pub means: MeanPerturbationSet,
    pub tau: f64,
}

impl DetectorParams {
    pub fn new(model: GaussianTileModel, means: MeanPerturbationSet, tau: f64) -> Result<Self> {
        let p = Self { model, means, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.means.validate()?;
        if self.model.layout != self.means.layout {
            return Err(Error::InvalidShape(
                "model and mean perturbations use different layouts".into(),
            ));
        }
        if self.tau.is_nan() {
            return Err(Error::InvalidArgument("threshold is NaN".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.means.num_classes()
    }

    /// Per-class scores from precomputed whitened tiles.
    fn class_scores(&self, whitened: &[Vec<f64>]) -> Vec<f64> {
        self.means
            .per_class
            .iter()
            .map(|tiles| tiles.iter().zip(whitened).map(|(h, z)| dot(h, z)).sum())
            .collect()
    }

    pub fn all_scores(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(self.class_scores(&self.model.whitened_tiles(x)?))
    }
}

/// `Σ_i (h̄_t)_iᵀ Σ⁻¹ (x_i − μ)`.
pub fn per_target_score(params: &DetectorParams, x: &Image, t: usize) -> Result<f64> {
    if t >= params.num_classes() {
        return Err(Error::InvalidArgument(format!("class {t} out of range")));
    }
    let z = params.model.whitened_tiles(x)?;
    Ok(params
        .means
        .class(t)
        .iter()
        .zip(&z)
        .map(|(h, zi)| dot(h, zi))
        .sum())
}

fn max_with_index(scores: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    (scores[best], best)
}

/// GLRT statistic `T(x)` and the maximizing class (ties → smallest index).
pub fn glrt_score(params: &DetectorParams, x: &Image) -> Result<(f64, usize)> {
    Ok(max_with_index(&params.all_scores(x)?))
}

/// `true` (adversarial) iff `T(x) ≥ τ`.
pub fn detect(params: &DetectorParams, x: &Image) -> Result<bool> {
    Ok(glrt_score(params, x)?.0 >= params.tau)
}

/// Maximum-likelihood `μ` and `Σ` from every grayscale tile of `clean`.
///
/// The covariance is the biased (`1/N`) estimate, jittered if it is not
/// numerically positive definite.
pub fn pretrain_mle(clean: &ImageDataset, layout: &TileLayout) -> Result<GaussianTileModel> {
    let d = layout.tile_dim();
    let needed = d + 1;
    let got = clean.len() * layout.tiles_per_image();
    if got < needed {
        return Err(Error::InsufficientData { needed, got });
    }
    let mut tiles = Vec::with_capacity(got);
    for img in clean.images() {
        tiles.extend(image_tiles(img, layout)?);
    }
    let n = tiles.len() as f64;
    let mut mu = vec![0.0; d];
    for t in &tiles {
        for (m, v) in mu.iter_mut().zip(t) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);

    let mut cov = Matrix::zeros(d, d);
    let mut r = vec![0.0; d];
    for t in &tiles {
        for ((ri, v), m) in r.iter_mut().zip(t).zip(&mu) {
            *ri = v - m;
        }
        for i in 0..d {
            let ri = r[i];
            for j in 0..=i {
                cov[(i, j)] += ri * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let (chol, _jitter) = cholesky_with_jitter(&cov)?;
    GaussianTileModel::new(*layout, mu, chol)
}

/// `h̄_t = (1/m) Σ_k tile(grayscale(h_{t,k}))`.
pub fn mean_perturbations(
    bank: &PerturbationBank,
    layout: &TileLayout,
) -> Result<MeanPerturbationSet> {
    let m = bank.per_class();
    if m == 0 || bank.num_classes() == 0 {
        return Err(Error::EmptyBank);
    }
    let shape = bank.shape();
    let mut per_class = Vec::with_capacity(bank.num_classes());
    for t in 0..bank.num_classes() {
        let mut acc = vec![0.0; shape.plane()];
        for h in bank.class(t) {
            for (a, g) in acc.iter_mut().zip(grayscale_values(shape, h)?) {
                *a += g;
            }
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        per_class.push(tile_values(&acc, layout)?);
    }
    MeanPerturbationSet::new(*layout, per_class)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
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

/// An image with its binary label (`true` = perturbed).
pub type LabeledImage = (Image, bool);

/// Gradient of the mean BCE loss with respect to every free parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneGradient {
    /// Lower triangle only; the upper triangle is zero.
    pub chol: Matrix,
    pub mu: Vec<f64>,
    pub means: Vec<Vec<Vec<f64>>>,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: DetectorParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-mix loss after each epoch (before best-iterate selection).
    pub epoch_losses: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−y ln σ(β) − (1 − y) ln(1 − σ(β))` written as `softplus(β) − yβ`.
fn bce(beta: f64, y: bool) -> f64 {
    softplus(beta) - if y { beta } else { 0.0 }
}

/// Margin `β(x; θ) = T(x) − τ`.
pub fn margin(params: &DetectorParams, x: &Image) -> Result<f64> {
    Ok(glrt_score(params, x)?.0 - params.tau)
}

/// Mean binary cross-entropy of the detector margin over `mix`.
pub fn bce_loss(params: &DetectorParams, mix: &[LabeledImage]) -> Result<f64> {
    if mix.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tiles: Vec<Vec<Vec<f64>>> = mix
        .iter()
        .map(|(img, _)| image_tiles(img, &params.model.layout))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = mix.iter().map(|(_, y)| *y).collect();
    loss_on_tiles(params, &tiles, &labels)
}

fn loss_on_tiles(params: &DetectorParams, tiles: &[Vec<Vec<f64>>], labels: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in tiles.iter().zip(labels) {
        let z = params.model.whiten(x)?;
        let (s, _) = max_with_index(&params.class_scores(&z));
        total += bce(s - params.tau, y);
    }
    Ok(total / tiles.len() as f64)
}

fn gradient_on_tiles(
    params: &DetectorParams,
    tiles: &[&Vec<Vec<f64>>],
    labels: &[bool],
) -> Result<FinetuneGradient> {
    let model = &params.model;
    let d = model.layout.tile_dim();
    let n_tiles = model.layout.tiles_per_image();
    let mut g = FinetuneGradient {
        chol: Matrix::zeros(d, d),
        mu: vec![0.0; d],
        means: vec![vec![vec![0.0; d]; n_tiles]; params.num_classes()],
        tau: 0.0,
    };
    // dβ/dΣ accumulated as a full (non-symmetric) matrix, mapped to L last.
    let mut g_sigma = Matrix::zeros(d, d);
    let batch = tiles.len() as f64;

    for (x, &y) in tiles.iter().zip(labels) {
        let z = model.whiten(x)?;
        let (s, t_star) = max_with_index(&params.class_scores(&z));
        let weight = (sigmoid(s - params.tau) - if y { 1.0 } else { 0.0 }) / batch;
        if weight == 0.0 {
            continue;
        }
        g.tau -= weight;
        for (i, (h, zi)) in params.means.class(t_star).iter().zip(&z).enumerate() {
            for (gm, zv) in g.means[t_star][i].iter_mut().zip(zi) {
                *gm += weight * zv;
            }
            let w = solve_spd(&model.chol, h)?;
            for (gm, wv) in g.mu.iter_mut().zip(&w) {
                *gm -= weight * wv;
            }
            for a in 0..d {
                let wa = weight * w[a];
                for b in 0..d {
                    g_sigma[(a, b)] -= wa * zi[b];
                }
            }
        }
    }

    // dΣ = dL Lᵀ + L dLᵀ  ⇒  ∂f/∂L = (G + Gᵀ) L, restricted to the lower triangle.
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in j..d {
                acc += (g_sigma[(i, k)] + g_sigma[(k, i)]) * model.chol.get(k, j);
            }
            g.chol[(i, j)] = acc;
        }
    }
    Ok(g)
}

/// Analytic gradient of [`bce_loss`] over `mix`.
///
/// The max over classes is differentiated through the maximizing class only.
pub fn bce_gradient(params: &DetectorParams, mix: &[LabeledImage]) -> Result<FinetuneGradient> {
    if mix.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tiles: Vec<Vec<Vec<f64>>> = mix
        .iter()
        .map(|(img, _)| image_tiles(img, &params.model.layout))
        .collect::<Result<_>>()?;
    let refs: Vec<&Vec<Vec<f64>>> = tiles.iter().collect();
    let labels: Vec<bool> = mix.iter().map(|(_, y)| *y).collect();
    gradient_on_tiles(params, &refs, &labels)
}

fn apply_step(params: &mut DetectorParams, g: &FinetuneGradient, lr: f64) {
    let d = params.model.chol.dim();
    for i in 0..d {
        for j in 0..=i {
            *params.model.chol.get_mut(i, j) -= lr * g.chol[(i, j)];
        }
    }
    params.model.chol.clamp_diagonal(MIN_CHOL_DIAGONAL);
    for (m, gm) in params.model.mu.iter_mut().zip(&g.mu) {
        *m -= lr * gm;
    }
    for (class, gclass) in params.means.per_class.iter_mut().zip(&g.means) {
        for (tile, gtile) in class.iter_mut().zip(gclass) {
            for (h, gh) in tile.iter_mut().zip(gtile) {
                *h -= lr * gh;
            }
        }
    }
    params.tau -= lr * g.tau;
}

/// Supervised fine-tuning of every parameter by minibatch SGD on the BCE
/// loss.
///
/// The full-mix loss is evaluated after each epoch and the best iterate
/// (including the starting point) is returned, so the final loss never
/// exceeds the initial one.
pub fn finetune(
    params0: &DetectorParams,
    mix: &[LabeledImage],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    params0.validate()?;
    let positives = mix.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == mix.len() {
        return Err(Error::SingleClassMix);
    }
    let layout = params0.model.layout;
    let tiles: Vec<Vec<Vec<f64>>> = mix
        .iter()
        .map(|(img, _)| image_tiles(img, &layout))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = mix.iter().map(|(_, y)| *y).collect();

    let initial_loss = loss_on_tiles(params0, &tiles, &labels)?;
    let mut best = params0.clone();
    let mut best_loss = initial_loss;
    let mut current = params0.clone();
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..mix.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bt: Vec<&Vec<Vec<f64>>> = batch.iter().map(|&i| &tiles[i]).collect();
            let bl: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
            let g = gradient_on_tiles(&current, &bt, &bl)?;
            apply_step(&mut current, &g, cfg.learning_rate);
        }
        let loss = loss_on_tiles(&current, &tiles, &labels)?;
        epoch_losses.push(loss);
        if loss.is_finite() && loss < best_loss {
            best_loss = loss;
            best = current.clone();
        }
    }

    Ok(FinetuneOutcome {
        params: best,
        initial_loss,
        final_loss: best_loss,
        epoch_losses,
    })
}

/// Threshold halfway between the mean GLRT score of the clean and the
/// perturbed members of `mix`; the starting point for fine-tuning.
pub fn midpoint_threshold(params: &DetectorParams, mix: &[LabeledImage]) -> Result<f64> {
    let (mut clean, mut adv) = ((0.0, 0usize), (0.0, 0usize));
    for (img, y) in mix {
        let s = glrt_score(params, img)?.0;
        let acc = if *y { &mut adv } else { &mut clean };
        acc.0 += s;
        acc.1 += 1;
    }
    if clean.1 == 0 || adv.1 == 0 {
        return Err(Error::SingleClassMix);
    }
    Ok(0.5 * (clean.0 / clean.1 as f64 + adv.0 / adv.1 as f64))
}

/// Neyman-Pearson threshold: the `1 − α` empirical quantile of clean
/// scores. Only `tau` changes.
pub fn calibrate_threshold(
    params: &DetectorParams,
    clean_validation: &ImageDataset,
    alpha: f64,
) -> Result<DetectorParams> {
    if clean_validation.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside (0, 1)"
        )));
    }
    let scores: Vec<f64> = clean_validation
        .images()
        .iter()
        .map(|img| glrt_score(params, img).map(|s| s.0))
        .collect::<Result<_>>()?;
    let tau = empirical_quantile(&scores, 1.0 - alpha)?;
    Ok(DetectorParams {
        tau,
        ..params.clone()
    })
}

/// `ln p₀(x − εh) − ln p₀(x)` from two log-density evaluations.
///
/// `model` must describe the whole input as a single tile. This is the
/// exact log-likelihood ratio for a point-mass perturbation and serves as
/// the reference for the first-order score.
pub fn exact_gaussian_llr(
    model: &GaussianTileModel,
    h: &[f64],
    eps: f64,
    x: &[f64],
) -> Result<f64> {
    Error::check_dim(1, model.layout.tiles_per_image())?;
    Error::check_dim(model.mu.len(), h.len())?;
    Error::check_dim(model.mu.len(), x.len())?;
    let shifted: Vec<f64> = x.iter().zip(h).map(|(a, b)| a - eps * b).collect();
    Ok(model.log_density(&shifted)? - model.log_density(x)?)
}
