//! Representation diffusion: noise schedule, forward corruption, x₀-prediction
//! training with SNR weights, deterministic DDIM sampling and the direct
//! regression baseline.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng as _;

use crate::batch::plan_batches;
use crate::graph::Graph;
use crate::nets::{Denoiser, IdentityRegressor, MapHead};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::real::Real;
use crate::rng::{self, normal_vec};
use crate::tensor::Tensor;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Upper clamp of the SNR loss weight.
pub const W_MAX: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub enum DiffusionError {
    InvalidSteps { steps: usize },
    TimestepOutOfRange { tau: usize, steps: usize },
    /// More sampling steps than diffusion steps.
    TooManySamplingSteps { sampling: usize, steps: usize },
    EmptySequence { index: usize },
    EmptyDataset,
    DimensionMismatch { expected: usize, got: usize },
    InvalidConfig(&'static str),
    NonFinite { step: usize },
}

impl core::fmt::Display for DiffusionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DiffusionError::InvalidSteps { steps } => write!(f, "diffusion needs at least one step, got {steps}"),
            DiffusionError::TimestepOutOfRange { tau, steps } => write!(f, "timestep {tau} outside 0..={steps}"),
            DiffusionError::TooManySamplingSteps { sampling, steps } => {
                write!(f, "{sampling} sampling steps exceed the {steps}-step schedule")
            }
            DiffusionError::EmptySequence { index } => write!(f, "sequence {index} has no frames"),
            DiffusionError::EmptyDataset => f.write_str("no training examples"),
            DiffusionError::DimensionMismatch { expected, got } => write!(f, "expected {expected}-d latents, got {got}"),
            DiffusionError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            DiffusionError::NonFinite { step } => write!(f, "non-finite diffusion loss at step {step}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DiffusionError {}

/// Linear-β schedule. Vectors indexed by `τ` carry an entry for `τ = 0`
/// (`ᾱ₀ = 1`, the empty product).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    weights: Vec<f64>,
}

pub fn make_schedule(steps: usize) -> Result<DiffusionSchedule, DiffusionError> {
    if steps < 1 {
        return Err(DiffusionError::InvalidSteps { steps });
    }
    let mut betas = vec![0.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut weights = vec![W_MAX; steps + 1];
    for tau in 1..=steps {
        let frac = if steps == 1 { 0.0 } else { (tau - 1) as f64 / (steps - 1) as f64 };
        betas[tau] = BETA_START + (BETA_END - BETA_START) * frac;
        alpha_bar[tau] = alpha_bar[tau - 1] * (1.0 - betas[tau]);
        weights[tau] = snr(alpha_bar[tau]);
    }
    Ok(DiffusionSchedule { steps, betas, alpha_bar, weights })
}

/// `ᾱ/(1−ᾱ)` clamped to [`W_MAX`].
pub fn snr(alpha_bar: f64) -> f64 {
    if alpha_bar >= 1.0 {
        W_MAX
    } else {
        (alpha_bar / (1.0 - alpha_bar)).min(W_MAX)
    }
}

impl DiffusionSchedule {
    fn check(&self, tau: usize) -> Result<(), DiffusionError> {
        if tau > self.steps {
            return Err(DiffusionError::TimestepOutOfRange { tau, steps: self.steps });
        }
        Ok(())
    }

    /// `β_τ` for `τ ≥ 1`.
    pub fn beta(&self, tau: usize) -> f64 {
        assert!(tau >= 1 && tau <= self.steps, "timestep {tau} out of range");
        self.betas[tau]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        assert!(tau <= self.steps, "timestep {tau} out of range");
        self.alpha_bar[tau]
    }

    pub fn weight(&self, tau: usize) -> f64 {
        assert!(tau <= self.steps, "timestep {tau} out of range");
        self.weights[tau]
    }
}

/// `√ᾱ_τ z₀ + √(1−ᾱ_τ) ε`; `τ = 0` returns `z₀`.
pub fn q_sample<T: Real>(z0: &[T], tau: usize, eps: &[T], sched: &DiffusionSchedule) -> Result<Vec<T>, DiffusionError> {
    sched.check(tau)?;
    if z0.len() != eps.len() {
        return Err(DiffusionError::DimensionMismatch { expected: z0.len(), got: eps.len() });
    }
    let ab = sched.alpha_bar(tau);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
}

/// Mean over rows of `w_n ‖pred_n − target_n‖²` for `[N, D]` operands.
pub fn rdm_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weights: &[T]) -> T {
    assert_eq!(pred.shape(), target.shape());
    let n = pred.dim(0);
    assert_eq!(weights.len(), n);
    let d = pred.len() / n.max(1);
    let mut total = T::zero();
    for i in 0..n {
        let sq = pred.data()[i * d..(i + 1) * d]
            .iter()
            .zip(&target.data()[i * d..(i + 1) * d])
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        total += weights[i] * sq;
    }
    total / T::lit(n as f64)
}

/// `Δ_exp = Z_exp − ẑ₀`.
pub fn expression_delta<T: Real>(z_exp: &[T], z0: &[T]) -> Vec<T> {
    assert_eq!(z_exp.len(), z0.len(), "latent size mismatch");
    z_exp.iter().zip(z0).map(|(&a, &b)| a - b).collect()
}

/// Anything that maps `(z_τ [N,D], τ, condition [N,D])` to a clean-latent estimate.
pub trait X0Predictor<T: Real> {
    fn predict(&self, z: &Tensor<T>, tau: usize, cond: &Tensor<T>) -> Tensor<T>;
}

/// `S` timesteps spaced uniformly over `[1, T]`, descending from `T`.
pub fn ddim_timesteps(steps: usize, sampling: usize) -> Result<Vec<usize>, DiffusionError> {
    if sampling < 1 {
        return Err(DiffusionError::InvalidSteps { steps: sampling });
    }
    if sampling > steps {
        return Err(DiffusionError::TooManySamplingSteps { sampling, steps });
    }
    Ok((1..=sampling).rev().map(|i| i * steps / sampling).collect())
}

/// Deterministic (η = 0) DDIM. Every row starts from the same seeded `z_T`,
/// so a row's result does not depend on the rest of the batch. Returns the
/// last clean-latent prediction.
pub fn ddim_sample<T: Real, P: X0Predictor<T> + ?Sized>(
    predictor: &P,
    cond: &Tensor<T>,
    sched: &DiffusionSchedule,
    sampling: usize,
    seed: u64,
) -> Result<Tensor<T>, DiffusionError> {
    let taus = ddim_timesteps(sched.steps, sampling)?;
    let (n, d) = (cond.dim(0), cond.dim(1));
    let mut r = rng::stream(seed, &[0xDD1A]);
    let start: Vec<T> = normal_vec(&mut r, d);
    let mut z = Tensor::from_vec(&[n, d], (0..n).flat_map(|_| start.iter().copied()).collect());
    let mut z0 = z.clone();
    for (i, &tau) in taus.iter().enumerate() {
        z0 = predictor.predict(&z, tau, cond);
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let ab = sched.alpha_bar(tau);
        let ab_prev = sched.alpha_bar(prev);
        let (sa, sb) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let (pa, pb) = (T::lit(ab_prev.sqrt()), T::lit((1.0 - ab_prev).sqrt()));
        let next = z
            .data()
            .iter()
            .zip(z0.data())
            .map(|(&zt, &x0)| {
                let eps = (zt - sa * x0) / sb;
                pa * x0 + pb * eps
            })
            .collect();
        z = Tensor::from_vec(&[n, d], next);
    }
    Ok(z0)
}

/// Per-dimension standardization of latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Mean and population standard deviation of `rows`, with a floor of 1e-6.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let rows: Vec<&[f32]> = rows.into_iter().collect();
        assert!(!rows.is_empty(), "cannot fit normalization on no rows");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; d];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for r in &rows {
            for ((s, &v), &m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v as f64 - m) * (v as f64 - m);
            }
        }
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| ((s / n).sqrt().max(1e-6)) as f32).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: &[f32]) -> Vec<f32> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((&x, &m), &s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, v: &[f32]) -> Vec<f32> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((&x, &m), &s)| x * s + m).collect()
    }
}

/// Latents of one identity's frames from a frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub identity: usize,
    pub texture: Vec<Vec<f32>>,
    pub shape: Vec<Vec<f32>>,
}

impl LatentSequence {
    pub fn frames(&self, head: MapHead) -> &[Vec<f32>] {
        match head {
            MapHead::Texture => &self.texture,
            MapHead::Shape => &self.shape,
        }
    }

    pub fn len(&self) -> usize {
        self.texture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texture.is_empty()
    }
}

/// One training pair: the sequence-mean target and one frame as condition.
#[derive(Clone, Debug, PartialEq)]
pub struct RdmExample {
    pub target: Vec<f32>,
    pub condition: Vec<f32>,
    pub head: MapHead,
    pub sequence: usize,
}

/// Arithmetic mean of `rows`, accumulated in f64.
pub fn latent_mean(rows: &[&[f32]]) -> Vec<f32> {
    assert!(!rows.is_empty());
    let mut acc = vec![0.0f64; rows[0].len()];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r.iter()) {
            *a += v as f64;
        }
    }
    acc.iter().map(|&a| (a / rows.len() as f64) as f32).collect()
}

/// `n` frame indices from a sequence of `len` frames: a random subset when
/// `len ≥ n`, otherwise concatenated random permutations so repeats stay balanced.
pub fn sample_frames(len: usize, n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = rng::permutation(rng, len);
        let take = (n - out.len()).min(len);
        out.extend_from_slice(&p[..take]);
    }
    out
}

pub fn build_rdm_dataset(sequences: &[LatentSequence], head: MapHead, n: usize, seed: u64) -> Result<Vec<RdmExample>, DiffusionError> {
    if sequences.is_empty() || n == 0 {
        return Err(DiffusionError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(sequences.len() * n);
    for (si, seq) in sequences.iter().enumerate() {
        let frames = seq.frames(head);
        if frames.is_empty() {
            return Err(DiffusionError::EmptySequence { index: si });
        }
        let mut r = rng::stream(seed, &[0x5E0, head as u64, si as u64]);
        let idx = sample_frames(frames.len(), n, &mut r);
        let rows: Vec<&[f32]> = idx.iter().map(|&i| frames[i].as_slice()).collect();
        let target = latent_mean(&rows);
        for &i in &idx {
            out.push(RdmExample { target: target.clone(), condition: frames[i].clone(), head, sequence: si });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Diffusion steps `T`.
    pub steps: usize,
    /// DDIM steps `S`.
    pub sampling_steps: usize,
    /// Frames sampled per sequence.
    pub frames: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, learning_rate: 1e-4, steps: 1000, sampling_steps: 5, frames: 16, seed: 0 }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.batch_size == 0 {
            return Err(DiffusionError::InvalidConfig("batch_size must be at least 1"));
        }
        if self.frames == 0 {
            return Err(DiffusionError::InvalidConfig("frames must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DiffusionError::InvalidConfig("learning rate must be positive"));
        }
        if self.steps == 0 {
            return Err(DiffusionError::InvalidSteps { steps: 0 });
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.steps {
            return Err(DiffusionError::TooManySamplingSteps { sampling: self.sampling_steps, steps: self.steps });
        }
        Ok(())
    }
}

/// A trained denoiser together with the latent standardization it works in.
#[derive(Clone, Debug)]
pub struct RdmModel {
    pub denoiser: Denoiser,
    pub params: ParamSet<f32>,
    pub norm: LatentNorm,
    pub head: MapHead,
}

struct Normalized<'a>(&'a RdmModel);

impl X0Predictor<f32> for Normalized<'_> {
    fn predict(&self, z: &Tensor<f32>, tau: usize, cond: &Tensor<f32>) -> Tensor<f32> {
        let m = self.0;
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.clone());
        let steps = vec![tau; z.dim(0)];
        let out = m.denoiser.forward(&mut g, &p, zv, &steps, cv);
        g.value(out).clone()
    }
}

fn normalized_rows(norm: &LatentNorm, rows: &[&[f32]]) -> Tensor<f32> {
    let d = norm.dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        assert_eq!(r.len(), d, "latent size mismatch");
        data.extend(norm.normalize(r));
    }
    Tensor::from_vec(&[rows.len(), d], data)
}

fn denormalized_rows(norm: &LatentNorm, t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let d = norm.dim();
    t.data().chunks(d).map(|r| norm.denormalize(r)).collect()
}

impl RdmModel {
    /// Identity latents `ẑ₀` for each condition row.
    pub fn sample(&self, conds: &[&[f32]], sched: &DiffusionSchedule, sampling: usize, seed: u64) -> Result<Vec<Vec<f32>>, DiffusionError> {
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let c = normalized_rows(&self.norm, conds);
        let z0 = ddim_sample(&Normalized(self), &c, sched, sampling, seed)?;
        Ok(denormalized_rows(&self.norm, &z0))
    }
}

/// One logged optimizer step of stage 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Step {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct Stage2Run {
    pub model: RdmModel,
    pub log: Vec<Stage2Step>,
    pub epoch_means: Vec<f64>,
}

fn check_examples(examples: &[RdmExample], d: usize) -> Result<(), DiffusionError> {
    if examples.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    for e in examples {
        for v in [&e.target, &e.condition] {
            if v.len() != d {
                return Err(DiffusionError::DimensionMismatch { expected: d, got: v.len() });
            }
        }
    }
    Ok(())
}

/// Trains one denoiser on examples of a single head. `norm` is fitted by the
/// caller, normally on every training frame of that head.
pub fn train_stage2(
    denoiser: Denoiser,
    examples: &[RdmExample],
    norm: LatentNorm,
    cfg: Stage2Config,
    mut on_step: impl FnMut(&Stage2Step),
) -> Result<Stage2Run, DiffusionError> {
    cfg.validate()?;
    let d = denoiser.cfg.latent;
    check_examples(examples, d)?;
    let head = examples[0].head;
    let sched = make_schedule(cfg.steps)?;
    let targets: Vec<Vec<f32>> = examples.iter().map(|e| norm.normalize(&e.target)).collect();
    let conds: Vec<Vec<f32>> = examples.iter().map(|e| norm.normalize(&e.condition)).collect();
    let mut params: ParamSet<f32> = denoiser.init_params(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut log = Vec::new();
    let mut epoch_means = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = plan_batches(examples.len(), cfg.batch_size, cfg.seed, epoch as u64);
        let mut sum = 0.0;
        for batch in &plan.batches {
            let b = batch.len();
            let mut r = rng::stream(cfg.seed, &[0x57A6E2, step as u64]);
            let mut z0 = Vec::with_capacity(b * d);
            let mut zt = Vec::with_capacity(b * d);
            let mut cond = Vec::with_capacity(b * d);
            let mut taus = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for &i in batch {
                let tau = r.random_range(1..=cfg.steps);
                let eps: Vec<f32> = normal_vec(&mut r, d);
                zt.extend(q_sample(&targets[i], tau, &eps, &sched)?);
                z0.extend_from_slice(&targets[i]);
                cond.extend_from_slice(&conds[i]);
                taus.push(tau);
                weights.push(sched.weight(tau) as f32);
            }
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let zv = g.constant(Tensor::from_vec(&[b, d], zt));
            let cv = g.constant(Tensor::from_vec(&[b, d], cond));
            let tv = g.constant(Tensor::from_vec(&[b, d], z0));
            let pred = denoiser.forward(&mut g, &p, zv, &taus, cv);
            let loss = g.weighted_sq_err(pred, tv, &weights);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(DiffusionError::NonFinite { step });
            }
            let grads = p.grads(&g, &g.backward(loss));
            drop(g);
            opt.step(&mut params, &grads);
            step += 1;
            let entry = Stage2Step { epoch: epoch + 1, step, loss: value };
            on_step(&entry);
            log.push(entry);
            sum += value;
        }
        epoch_means.push(sum / plan.batches.len() as f64);
    }
    Ok(Stage2Run { model: RdmModel { denoiser, params, norm, head }, log, epoch_means })
}

/// The direct-regression alternative to diffusion.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub regressor: IdentityRegressor,
    pub params: ParamSet<f32>,
    pub norm: LatentNorm,
    pub head: MapHead,
}

impl BaselineModel {
    pub fn predict(&self, conds: &[&[f32]]) -> Vec<Vec<f32>> {
        if conds.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(normalized_rows(&self.norm, conds));
        let y = self.regressor.forward(&mut g, &p, x);
        denormalized_rows(&self.norm, g.value(y))
    }
}

/// Fits the residual regressor with unweighted squared error, reusing the
/// stage-2 batch and optimizer settings.
pub fn train_baseline(
    regressor: IdentityRegressor,
    examples: &[RdmExample],
    norm: LatentNorm,
    cfg: Stage2Config,
) -> Result<(BaselineModel, Vec<f64>), DiffusionError> {
    cfg.validate()?;
    let d = regressor.latent;
    check_examples(examples, d)?;
    let targets: Vec<Vec<f32>> = examples.iter().map(|e| norm.normalize(&e.target)).collect();
    let conds: Vec<Vec<f32>> = examples.iter().map(|e| norm.normalize(&e.condition)).collect();
    let mut params: ParamSet<f32> = regressor.init_params(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut epoch_means = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = plan_batches(examples.len(), cfg.batch_size, cfg.seed, epoch as u64);
        let mut sum = 0.0;
        for batch in &plan.batches {
            let b = batch.len();
            let x: Vec<f32> = batch.iter().flat_map(|&i| conds[i].iter().copied()).collect();
            let y: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let xv = g.constant(Tensor::from_vec(&[b, d], x));
            let yv = g.constant(Tensor::from_vec(&[b, d], y));
            let pred = regressor.forward(&mut g, &p, xv);
            let loss = g.weighted_sq_err(pred, yv, &vec![1.0; b]);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(DiffusionError::NonFinite { step });
            }
            let grads = p.grads(&g, &g.backward(loss));
            drop(g);
            opt.step(&mut params, &grads);
            step += 1;
            sum += value;
        }
        epoch_means.push(sum / plan.batches.len() as f64);
    }
    let head = examples[0].head;
    Ok((BaselineModel { regressor, params, norm, head }, epoch_means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::DenoiserConfig;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        // direct product, independent of the running recursion
        let direct: f64 = (1..=1000).map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 0.01);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert_eq!(make_schedule(0), Err(DiffusionError::InvalidSteps { steps: 0 }));
    }

    #[test]
    fn snr_weight_values() {
        assert_eq!(snr(0.5), 1.0);
        assert_eq!(snr(1.0), W_MAX);
        assert_eq!(snr(0.9999999), W_MAX);
        assert!((snr(0.2) - 0.25).abs() < 1e-15);
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.weight(1), W_MAX);
        let ab = s.alpha_bar(700);
        assert_eq!(s.weight(700), ab / (1.0 - ab));
    }

    #[test]
    fn q_sample_limits_and_range() {
        let s = make_schedule(1000).unwrap();
        let z0 = [0.3f64, -1.2, 2.0];
        let eps = [1.0f64, 0.5, -0.7];
        assert_eq!(q_sample(&z0, 0, &eps, &s).unwrap(), z0.to_vec());
        let long = make_schedule(20000).unwrap();
        let far = q_sample(&z0, 20000, &eps, &long).unwrap();
        for (a, b) in far.iter().zip(eps) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(q_sample(&z0, 1001, &eps, &s), Err(DiffusionError::TimestepOutOfRange { .. })));
    }

    /// Mean and unbiased variance of `n` draws, with their standard errors
    /// under a Gaussian model.
    fn moments(draws: &[f64]) -> (f64, f64, f64, f64) {
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v, (v / n).sqrt(), v * (2.0 / (n - 1.0)).sqrt())
    }

    #[test]
    fn forward_noise_moments_match_closed_form() {
        let s = make_schedule(1000).unwrap();
        let z0 = 1.7f64;
        for tau in [1, 500, 1000] {
            let mut r = rng::stream(21, &[tau as u64]);
            let draws: Vec<f64> = (0..100_000).map(|_| q_sample(&[z0], tau, &[rng::normal(&mut r)], &s).unwrap()[0]).collect();
            let (m, v, se_m, se_v) = moments(&draws);
            let ab = s.alpha_bar(tau);
            assert!((m - ab.sqrt() * z0).abs() < 4.0 * se_m, "tau {tau} mean {m}");
            assert!((v - (1.0 - ab)).abs() < 4.0 * se_v, "tau {tau} var {v}");
            // unit-Gaussian inputs stay unit Gaussian
            let unit: Vec<f64> = (0..100_000)
                .map(|_| q_sample(&[rng::normal(&mut r)], tau, &[rng::normal(&mut r)], &s).unwrap()[0])
                .collect();
            let (m, v, se_m, se_v) = moments(&unit);
            assert!(m.abs() < 4.0 * se_m && (v - 1.0).abs() < 4.0 * se_v, "tau {tau}: {m} {v}");
        }
    }

    #[test]
    fn loss_of_perfect_and_zero_predictors() {
        let t = Tensor::from_vec(&[2, 2], vec![0.6f64, 0.8, 1.0, 0.0]);
        assert_eq!(rdm_loss(&t, &t, &[3.0, 7.0]), 0.0);
        let zero = Tensor::zeros(&[2, 2]);
        assert!((rdm_loss(&zero, &t, &[1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn expression_delta_inverts_addition() {
        let id = [0.25f32, -1.5, 3.0];
        let d = [0.125f32, 0.5, -0.75];
        let exp: Vec<f32> = id.iter().zip(&d).map(|(a, b)| a + b).collect();
        for (x, y) in expression_delta(&exp, &id).iter().zip(&d) {
            assert!((x - y).abs() < 1e-7);
        }
        assert_eq!(expression_delta(&id, &id), vec![0.0; 3]);
        assert_eq!(expression_delta(&id, &[0.0; 3]), id.to_vec());
    }

    struct Constant(Vec<f64>);

    impl X0Predictor<f64> for Constant {
        fn predict(&self, z: &Tensor<f64>, _tau: usize, _c: &Tensor<f64>) -> Tensor<f64> {
            let n = z.dim(0);
            Tensor::from_vec(&[n, self.0.len()], (0..n).flat_map(|_| self.0.iter().copied()).collect())
        }
    }

    #[test]
    fn ddim_returns_the_constant_oracle() {
        let s = make_schedule(1000).unwrap();
        let star = vec![0.7, -2.5, 1e-3, 4.0];
        let cond = Tensor::from_vec(&[2, 4], vec![1.0; 8]);
        for steps in [1, 2, 5, 50] {
            for seed in [0, 9] {
                let out = ddim_sample(&Constant(star.clone()), &cond, &s, steps, seed).unwrap();
                for (i, v) in out.data().iter().enumerate() {
                    assert!((v - star[i % 4]).abs() < 1e-6);
                }
            }
        }
    }

    /// Echoes its input so the result exposes `z_T` and the timestep.
    struct Echo;

    impl X0Predictor<f64> for Echo {
        fn predict(&self, z: &Tensor<f64>, tau: usize, _c: &Tensor<f64>) -> Tensor<f64> {
            z.map(|v| v + tau as f64)
        }
    }

    #[test]
    fn single_step_is_one_call_at_the_last_timestep() {
        let s = make_schedule(1000).unwrap();
        let cond = Tensor::zeros(&[1, 3]);
        let out = ddim_sample(&Echo, &cond, &s, 1, 4).unwrap();
        let start: Vec<f64> = normal_vec(&mut rng::stream(4, &[0xDD1A]), 3);
        for (o, z) in out.data().iter().zip(start) {
            assert_eq!(*o, z + 1000.0);
        }
        let again = ddim_sample(&Echo, &cond, &s, 5, 4).unwrap();
        assert_eq!(again, ddim_sample(&Echo, &cond, &s, 5, 4).unwrap());
        assert_ne!(again, ddim_sample(&Echo, &cond, &s, 5, 5).unwrap());
    }

    #[test]
    fn timestep_spacing() {
        assert_eq!(ddim_timesteps(1000, 5).unwrap(), vec![1000, 800, 600, 400, 200]);
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    fn seq(identity: usize, frames: Vec<Vec<f32>>) -> LatentSequence {
        LatentSequence { identity, texture: frames.clone(), shape: frames }
    }

    #[test]
    fn dataset_targets_are_sampled_means() {
        let v = vec![0.5f32, -1.0];
        let same = build_rdm_dataset(&[seq(0, vec![v.clone(); 5])], MapHead::Texture, 16, 1).unwrap();
        assert_eq!(same.len(), 16);
        assert!(same.iter().all(|e| e.target == v && e.condition == v));

        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let pm = build_rdm_dataset(&[seq(0, vec![v.clone(), neg])], MapHead::Shape, 16, 2).unwrap();
        assert!(pm.iter().all(|e| e.target == vec![0.0, 0.0]));

        let mut r = rng::stream(3, &[]);
        let frames: Vec<Vec<f32>> = (0..7).map(|_| normal_vec(&mut r, 4)).collect();
        let ex = build_rdm_dataset(&[seq(0, frames.clone())], MapHead::Texture, 16, 5).unwrap();
        let mut brute = [0.0f64; 4];
        for e in &ex {
            for k in 0..4 {
                brute[k] += e.condition[k] as f64 / 16.0;
            }
        }
        for k in 0..4 {
            assert!((ex[0].target[k] as f64 - brute[k]).abs() < 1e-7);
        }
        let empty = build_rdm_dataset(&[seq(0, vec![v]), seq(1, vec![])], MapHead::Texture, 4, 0);
        assert_eq!(empty, Err(DiffusionError::EmptySequence { index: 1 }));
    }

    #[test]
    fn long_sequences_sample_without_replacement() {
        let mut r = rng::stream(8, &[]);
        let mut idx = sample_frames(40, 16, &mut r);
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 16);
    }

    #[test]
    fn latent_norm_round_trips() {
        let rows = [vec![1.0f32, 10.0], vec![3.0, 14.0], vec![2.0, 12.0]];
        let n = LatentNorm::fit(rows.iter().map(|r| r.as_slice()));
        assert!((n.mean[0] - 2.0).abs() < 1e-6 && (n.mean[1] - 12.0).abs() < 1e-6);
        let back = n.denormalize(&n.normalize(&rows[1]));
        assert!((back[0] - 3.0).abs() < 1e-6 && (back[1] - 14.0).abs() < 1e-5);
    }

    fn toy_sequences(count: usize, frames: usize, d: usize, seed: u64) -> Vec<LatentSequence> {
        let mut r = rng::stream(seed, &[]);
        let dirs: Vec<Vec<f32>> = (0..3).map(|_| normal_vec(&mut r, d)).collect();
        (0..count)
            .map(|i| {
                let base: Vec<f32> = normal_vec(&mut r, d);
                let fr = (0..frames)
                    .map(|f| base.iter().zip(&dirs[f % 3]).map(|(b, e)| b + 0.8 * e).collect())
                    .collect();
                seq(i, fr)
            })
            .collect()
    }

    #[test]
    fn stage2_training_is_deterministic_and_decreases() {
        let den = Denoiser::new(DenoiserConfig::reduced());
        let seqs = toy_sequences(8, 6, 6, 1);
        let ex = build_rdm_dataset(&seqs, MapHead::Texture, 6, 0).unwrap();
        let norm = LatentNorm::fit(seqs.iter().flat_map(|s| s.texture.iter().map(|v| v.as_slice())));
        let cfg = Stage2Config { epochs: 40, batch_size: 8, learning_rate: 3e-3, steps: 100, ..Default::default() };
        let a = train_stage2(den, &ex, norm.clone(), cfg, |_| {}).unwrap();
        let b = train_stage2(den, &ex, norm, cfg, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.epoch_means[35..].iter().sum::<f64>() < a.epoch_means[..5].iter().sum::<f64>());
        let s = make_schedule(100).unwrap();
        let conds: Vec<&[f32]> = seqs[0].texture.iter().map(|v| v.as_slice()).collect();
        let z = a.model.sample(&conds, &s, 5, 0).unwrap();
        assert_eq!(z, a.model.sample(&conds, &s, 5, 0).unwrap());
        assert!(z.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn baseline_beats_zero_predictor() {
        let seqs = toy_sequences(10, 6, 6, 2);
        let ex = build_rdm_dataset(&seqs, MapHead::Shape, 6, 0).unwrap();
        let norm = LatentNorm::identity(6);
        let reg = IdentityRegressor { latent: 6, hidden: 16 };
        let cfg = Stage2Config { epochs: 60, batch_size: 8, learning_rate: 3e-3, ..Default::default() };
        let (model, _) = train_baseline(reg, &ex, norm, cfg).unwrap();
        let conds: Vec<&[f32]> = ex.iter().map(|e| e.condition.as_slice()).collect();
        let pred = model.predict(&conds);
        let mse = |f: &dyn Fn(usize) -> f64| (0..ex.len()).map(f).sum::<f64>() / ex.len() as f64;
        let model_mse = mse(&|i| ex[i].target.iter().zip(&pred[i]).map(|(a, b)| ((a - b) as f64).powi(2)).sum());
        let zero_mse = mse(&|i| ex[i].target.iter().map(|a| (*a as f64).powi(2)).sum());
        assert!(model_mse < zero_mse, "{model_mse} vs {zero_mse}");
    }

    #[test]
    fn zero_regressor_is_the_identity() {
        let reg = IdentityRegressor { latent: 3, hidden: 5 };
        let model = BaselineModel { regressor: reg, params: reg.init_params(0), norm: LatentNorm::identity(3), head: MapHead::Texture };
        let x = [0.5f32, -2.0, 7.0];
        assert_eq!(model.predict(&[&x]), vec![x.to_vec()]);
    }
}
