//! Stage 1: symmetric 3D-aware autoencoding with confidence-calibrated losses.

use alloc::vec::Vec;

use crate::batch::plan_batches;
use crate::graph::{GraphError, Graph, Var};
use crate::nets::{MapHead, NumericHead, Stage1Nets};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::render::{self, Camera, Light};
use crate::tensor::Tensor;

/// Factors replaced by constants during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_light: bool,
    pub disable_pose: bool,
    pub disable_shape: bool,
    pub disable_texture: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.disable_light || self.disable_pose || self.disable_shape || self.disable_texture
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_f: f64,
    pub lambda_flip: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, learning_rate: 1e-4, lambda_f: 1.0, lambda_flip: 0.5, seed: 0, ablation: Ablation::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    InvalidConfig(&'static str),
    /// A loss term became NaN or infinite.
    NonFinite { step: usize, term: &'static str },
    Graph(GraphError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::EmptyDataset => f.write_str("empty dataset"),
            TrainError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            TrainError::NonFinite { step, term } => write!(f, "non-finite {term} at step {step}"),
            TrainError::Graph(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.lambda_f >= 0.0) || !(self.lambda_flip >= 0.0) {
            return Err(TrainError::InvalidConfig("loss weights must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub lp: f64,
    pub lf: f64,
    pub lp_flip: f64,
    pub lf_flip: f64,
    pub total: f64,
}

impl LossReport {
    pub fn combine(lp: f64, lf: f64, lp_flip: f64, lf_flip: f64, lambda_f: f64, lambda_flip: f64) -> Self {
        Self { lp, lf, lp_flip, lf_flip, total: lp + lambda_f * lf + lambda_flip * (lp_flip + lambda_f * lf_flip) }
    }

    fn terms(&self) -> [(&'static str, f64); 5] {
        [("lp", self.lp), ("lf", self.lf), ("lp_flip", self.lp_flip), ("lf_flip", self.lf_flip), ("total", self.total)]
    }
}

/// Stand-alone evaluation of the confidence loss on plain tensors.
pub fn conf_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, sigma: &Tensor<T>, mask: Option<&[bool]>) -> Result<T, GraphError> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let s = g.constant(sigma.clone());
    let l = g.conf_loss(p, t, s, mask)?;
    Ok(g.value(l).item())
}

/// Encoder outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Latents {
    /// `[N, latent]`.
    pub texture: Var,
    pub shape: Var,
    /// Raw tanh outputs `[N,6]`, absent when pose is ablated.
    pub pose: Option<Var>,
    /// Raw tanh outputs `[N,4]`, absent when light is ablated.
    pub light: Option<Var>,
}

/// Every intermediate of one autoencoding pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub latents: Latents,
    /// `[N,3,R,R]` albedo in `[0,1]`.
    pub albedo: Var,
    /// `[N,1,R,R]` depth in `[0.9,1.1]`.
    pub depth: Var,
    /// `[N,6]` physical pose.
    pub pose: Var,
    /// `[N,4]` physical light.
    pub light: Var,
    pub recon: Var,
    pub recon_flip: Var,
    pub mask: Vec<bool>,
    pub mask_flip: Vec<bool>,
}

pub fn encode<T: Real>(g: &mut Graph<T>, nets: &Stage1Nets, p: &Bound, image: Var, ab: Ablation) -> Latents {
    Latents {
        texture: nets.encode_feature(g, p, MapHead::Texture, image),
        shape: nets.encode_feature(g, p, MapHead::Shape, image),
        pose: (!ab.disable_pose).then(|| nets.encode_numeric(g, p, NumericHead::Pose, image)),
        light: (!ab.disable_light).then(|| nets.encode_numeric(g, p, NumericHead::Light, image)),
    }
}

/// Decodes canonical maps, maps raw outputs to physical ranges and renders
/// both the direct and the mirrored reconstruction under shared pose/light.
pub fn decode_render<T: Real>(g: &mut Graph<T>, nets: &Stage1Nets, p: &Bound, lat: &Latents, ab: Ablation) -> Result<Forward, GraphError> {
    let n = g.shape(lat.texture)[0];
    let r = nets.cfg.resolution;
    let albedo = if ab.disable_texture {
        g.constant(Tensor::full(&[n, 3, r, r], T::lit(0.5)))
    } else {
        let raw = nets.decode_map(g, p, MapHead::Texture, lat.texture);
        g.affine(raw, T::lit(0.5), T::lit(0.5))
    };
    let depth = if ab.disable_shape {
        g.constant(Tensor::ones(&[n, 1, r, r]))
    } else {
        let raw = nets.decode_map(g, p, MapHead::Shape, lat.shape);
        g.affine(raw, T::lit(render::DEPTH_HALF_RANGE), T::one())
    };
    let pose = match lat.pose {
        Some(raw) => g.col_affine(raw, &render::pose_scales::<T>(), &[T::zero(); 6]),
        None => g.constant(Tensor::zeros(&[n, 6])),
    };
    let light = match lat.light {
        Some(raw) => {
            let h = T::lit(0.5);
            g.col_affine(raw, &[h, h, T::one(), T::one()], &[h, h, T::zero(), T::zero()])
        }
        None => {
            let l = Light::<T>::neutral().to_array();
            g.constant(Tensor::from_vec(&[n, 4], (0..n).flat_map(|_| l).collect()))
        }
    };
    let cam = Camera::default();
    let (recon, mask) = g.render(albedo, depth, pose, light, cam)?;
    let albedo_f = g.hflip(albedo);
    let depth_f = g.hflip(depth);
    let (recon_flip, mask_flip) = g.render(albedo_f, depth_f, pose, light, cam)?;
    Ok(Forward { latents: *lat, albedo, depth, pose, light, recon, recon_flip, mask, mask_flip })
}

pub fn forward_autoencode<T: Real>(g: &mut Graph<T>, nets: &Stage1Nets, p: &Bound, image: Var, ab: Ablation) -> Result<Forward, GraphError> {
    let lat = encode(g, nets, p, image, ab);
    decode_render(g, nets, p, &lat, ab)
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lp: Var,
    pub lf: Var,
    pub lp_flip: Var,
    pub lf_flip: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().as_f64();
        LossReport { lp: v(self.lp), lf: v(self.lf), lp_flip: v(self.lp_flip), lf_flip: v(self.lf_flip), total: v(self.total) }
    }
}

/// Pixel terms use `σ_p` channel 0 for the direct and 1 for the mirrored
/// render over each render's mask; feature terms use `σ_f` over the full map.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    nets: &Stage1Nets,
    feat: &Bound,
    image: Var,
    fwd: &Forward,
    sigma_p: Var,
    sigma_f: Var,
    lambda_f: f64,
    lambda_flip: f64,
) -> Result<LossVars, GraphError> {
    let sp0 = g.slice_channels(sigma_p, 0, 1);
    let sp1 = g.slice_channels(sigma_p, 1, 1);
    let sf0 = g.slice_channels(sigma_f, 0, 1);
    let sf1 = g.slice_channels(sigma_f, 1, 1);
    let lp = g.conf_loss(fwd.recon, image, sp0, Some(&fwd.mask))?;
    let lp_flip = g.conf_loss(fwd.recon_flip, image, sp1, Some(&fwd.mask_flip))?;
    let f_in = nets.feat_extract(g, feat, image);
    let f_rec = nets.feat_extract(g, feat, fwd.recon);
    let f_flip = nets.feat_extract(g, feat, fwd.recon_flip);
    let lf = g.conf_loss(f_rec, f_in, sf0, None)?;
    let lf_flip = g.conf_loss(f_flip, f_in, sf1, None)?;
    let lf_s = g.scale(lf, T::lit(lambda_f));
    let direct = g.add(lp, lf_s);
    let lff_s = g.scale(lf_flip, T::lit(lambda_f));
    let flip = g.add(lp_flip, lff_s);
    let flip_s = g.scale(flip, T::lit(lambda_flip));
    let total = g.add(direct, flip_s);
    Ok(LossVars { lp, lf, lp_flip, lf_flip, total })
}

/// Builds the full stage-1 objective for `images` on a fresh graph.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    nets: &Stage1Nets,
    params: &Bound,
    feat: &Bound,
    images: Tensor<T>,
    cfg: &Stage1Config,
) -> Result<(Forward, LossVars), GraphError> {
    let x = g.constant(images);
    let fwd = forward_autoencode(g, nets, params, x, cfg.ablation)?;
    let (sp, sf) = nets.confidence(g, params, x);
    let loss = reconstruction_loss(g, nets, feat, x, &fwd, sp, sf, cfg.lambda_f, cfg.lambda_flip)?;
    Ok((fwd, loss))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossReport,
}

/// Trainer state; parameters are owned exclusively by the trainer.
pub struct Stage1Trainer<'a> {
    pub nets: &'a Stage1Nets,
    pub params: ParamSet<f32>,
    pub feat: &'a ParamSet<f32>,
    pub cfg: Stage1Config,
    opt: Adam<f32>,
    step: usize,
}

impl<'a> Stage1Trainer<'a> {
    pub fn new(nets: &'a Stage1Nets, feat: &'a ParamSet<f32>, cfg: Stage1Config) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self { nets, params: nets.init_params(cfg.seed), feat, cfg, opt: Adam::new(AdamConfig::with_lr(cfg.learning_rate)), step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Forward, backward and one Adam update on `images: [B,3,R,R]`.
    pub fn train_step(&mut self, images: Tensor<f32>) -> Result<LossReport, TrainError> {
        let mut g = Graph::new();
        let pb = self.params.bind(&mut g, true);
        let fb = self.feat.bind(&mut g, false);
        let (_, loss) = build_objective(&mut g, self.nets, &pb, &fb, images, &self.cfg)?;
        let report = loss.report(&g);
        for (term, v) in report.terms() {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step: self.step, term });
            }
        }
        let grads = pb.grads(&g, &g.backward(loss.total));
        drop(g);
        self.opt.step(&mut self.params, &grads);
        self.step += 1;
        Ok(report)
    }
}

/// Result of a full stage-1 run.
pub struct Stage1Run {
    pub last: ParamSet<f32>,
    /// Parameters at the end of the epoch with the lowest mean total loss.
    pub best: ParamSet<f32>,
    pub best_epoch: usize,
    pub log: Vec<StepLog>,
    pub epoch_means: Vec<LossReport>,
}

/// Trains on `images: [N,3,R,R]`, calling `on_step` after every update.
pub fn train_stage1(
    nets: &Stage1Nets,
    feat: &ParamSet<f32>,
    images: &Tensor<f32>,
    cfg: Stage1Config,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Stage1Run, TrainError> {
    let n = images.dim(0);
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut tr = Stage1Trainer::new(nets, feat, cfg)?;
    let mut log = Vec::new();
    let mut epoch_means = Vec::new();
    let mut best = tr.params.clone();
    let mut best_epoch = 0;
    let mut best_total = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let plan = plan_batches(n, cfg.batch_size, cfg.seed, epoch as u64);
        let mut sum = LossReport::default();
        for batch in &plan.batches {
            let x = gather(images, batch);
            let report = tr.train_step(x)?;
            let entry = StepLog { epoch: epoch + 1, step: tr.step_count(), loss: report };
            on_step(&entry);
            log.push(entry);
            sum.lp += report.lp;
            sum.lf += report.lf;
            sum.lp_flip += report.lp_flip;
            sum.lf_flip += report.lf_flip;
            sum.total += report.total;
        }
        let k = plan.batches.len() as f64;
        let mean = LossReport { lp: sum.lp / k, lf: sum.lf / k, lp_flip: sum.lp_flip / k, lf_flip: sum.lf_flip / k, total: sum.total / k };
        if mean.total < best_total {
            best_total = mean.total;
            best = tr.params.clone();
            best_epoch = epoch + 1;
        }
        epoch_means.push(mean);
    }
    Ok(Stage1Run { last: tr.params, best, best_epoch, log, epoch_means })
}

/// Rows of `data` selected by `idx`, stacked along the leading axis.
pub fn gather<T: Real>(data: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let inner: usize = data.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        out.extend_from_slice(&data.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, out)
}

/// Eval-mode encoder outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceLatents {
    pub texture: Vec<f32>,
    pub shape: Vec<f32>,
    /// Physical pose `[yaw, pitch, roll, tx, ty, tz]`.
    pub pose: [f32; 6],
    /// Physical light `[ka, kd, lx, ly]`.
    pub light: [f32; 4],
}

/// Encodes `images: [N,3,R,R]` in chunks of `chunk`.
pub fn encode_images(nets: &Stage1Nets, params: &ParamSet<f32>, images: &Tensor<f32>, chunk: usize) -> Vec<FaceLatents> {
    let n = images.dim(0);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = chunk.max(1).min(n - start);
        let mut g = Graph::new();
        let pb = params.bind(&mut g, false);
        let x = g.constant(images.slice_outer(start, count));
        let lat = encode(&mut g, nets, &pb, x, Ablation::default());
        let d = nets.cfg.latent;
        let scales = render::pose_scales::<f32>();
        for s in 0..count {
            let t = &g.value(lat.texture).data()[s * d..(s + 1) * d];
            let sh = &g.value(lat.shape).data()[s * d..(s + 1) * d];
            let pr = &g.value(lat.pose.unwrap()).data()[s * 6..(s + 1) * 6];
            let lr = &g.value(lat.light.unwrap()).data()[s * 4..(s + 1) * 4];
            let mut pose = [0.0; 6];
            for k in 0..6 {
                pose[k] = pr[k] * scales[k];
            }
            let l = Light::from_unit([lr[0], lr[1], lr[2], lr[3]]).to_array();
            out.push(FaceLatents { texture: t.to_vec(), shape: sh.to_vec(), pose, light: l });
        }
        start += count;
    }
    out
}

/// Direct reconstructions `[N,3,R,R]` of `images` (eval mode, no ablation
/// beyond `ab`).
pub fn reconstruct(nets: &Stage1Nets, params: &ParamSet<f32>, images: &Tensor<f32>, ab: Ablation, chunk: usize) -> Result<Tensor<f32>, GraphError> {
    let n = images.dim(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let count = chunk.max(1).min(n - start);
        let mut g = Graph::new();
        let pb = params.bind(&mut g, false);
        let x = g.constant(images.slice_outer(start, count));
        let fwd = forward_autoencode(&mut g, nets, &pb, x, ab)?;
        parts.push(g.value(fwd.recon).clone());
        start += count;
    }
    let inner: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(n * inner);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(images.shape(), data))
}

/// Canonical maps decoded for each image: `(albedo [N,3,R,R], depth [N,1,R,R])`.
pub fn canonical_maps(nets: &Stage1Nets, params: &ParamSet<f32>, images: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let mut g = Graph::new();
    let pb = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let lat = encode(&mut g, nets, &pb, x, Ablation::default());
    let ta = nets.decode_map(&mut g, &pb, MapHead::Texture, lat.texture);
    let a = g.affine(ta, 0.5, 0.5);
    let td = nets.decode_map(&mut g, &pb, MapHead::Shape, lat.shape);
    let d = g.affine(td, render::DEPTH_HALF_RANGE as f32, 1.0);
    (g.value(a).clone(), g.value(d).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::nets::{init_feature_extractor, ZooConfig};
    use crate::rng::{stream, uniform};
    use core::f64::consts::SQRT_2;

    fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut r = stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| uniform(&mut r, lo, hi)).collect())
    }

    #[test]
    fn conf_loss_at_unit_laplace_scale_is_scaled_l1() {
        let pred = rand_t(&[1, 3, 5, 5], 0.0, 1.0, 1);
        let target = rand_t(&[1, 3, 5, 5], 0.0, 1.0, 2);
        let sigma = Tensor::full(&[1, 1, 5, 5], 1.0 / SQRT_2);
        let mask: Vec<bool> = (0..25).map(|i| i % 4 != 1).collect();
        let count = mask.iter().filter(|&&m| m).count() * 3;
        let mut l1 = 0.0;
        for c in 0..3 {
            for p in 0..25 {
                if mask[p] {
                    l1 += (pred.data()[c * 25 + p] - target.data()[c * 25 + p]).abs();
                }
            }
        }
        let got = conf_loss(&pred, &target, &sigma, Some(&mask)).unwrap();
        assert!((got - 2.0 * l1 / count as f64).abs() < 1e-12);
    }

    #[test]
    fn conf_loss_of_exact_reconstruction_is_log_scale() {
        let x = rand_t(&[2, 3, 4, 4], 0.0, 1.0, 3);
        for c in [0.05, 0.7, 3.0] {
            let sigma = Tensor::full(&[2, 1, 4, 4], c);
            let got = conf_loss(&x, &x, &sigma, None).unwrap();
            assert!((got - (SQRT_2 * c).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_scale_is_root_two_residual() {
        for d in [0.01, 0.2, 0.9] {
            let f = |s: f64| (SQRT_2 * s).ln() + SQRT_2 * d / s;
            let (mut best, mut arg) = (f64::INFINITY, 0.0);
            let mut s = 1e-4;
            while s < 3.0 {
                let v = f(s);
                if v < best {
                    best = v;
                    arg = s;
                }
                s += 1e-5;
            }
            assert!((arg - SQRT_2 * d).abs() < 1e-4, "d={d} arg={arg}");
        }
    }

    fn small_setup() -> (Stage1Nets, ParamSet<f64>, ParamSet<f64>) {
        let nets = Stage1Nets::new(ZooConfig::reduced(8));
        let p = nets.init_params(11);
        let f = init_feature_extractor(&nets.cfg, 12);
        (nets, p, f)
    }

    #[test]
    fn loss_report_is_the_weighted_sum() {
        let (nets, p, f) = small_setup();
        for (lf, lflip) in [(1.0, 0.5), (0.3, 0.0), (2.0, 1.7)] {
            let cfg = Stage1Config { lambda_f: lf, lambda_flip: lflip, ..Default::default() };
            let mut g = Graph::new();
            let pb = p.bind(&mut g, false);
            let fb = f.bind(&mut g, false);
            let (_, l) = build_objective(&mut g, &nets, &pb, &fb, rand_t(&[3, 3, 8, 8], 0.0, 1.0, 5), &cfg).unwrap();
            let r = l.report(&g);
            let want = LossReport::combine(r.lp, r.lf, r.lp_flip, r.lf_flip, lf, lflip).total;
            assert!((r.total - want).abs() <= 1e-6 * want.abs().max(1.0));
            assert!(r.total.is_finite());
            if lflip == 0.0 {
                assert!((r.total - (r.lp + lf * r.lf)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablation_flags_replace_only_their_factor() {
        let (nets, p, _) = small_setup();
        let x = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 6);
        let run = |ab: Ablation| {
            let mut g = Graph::new();
            let pb = p.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let f = forward_autoencode(&mut g, &nets, &pb, xv, ab).unwrap();
            [f.albedo, f.depth, f.pose, f.light].map(|v| g.value(v).clone())
        };
        let full = run(Ablation::default());
        let cases = [
            (Ablation { disable_texture: true, ..Default::default() }, 0),
            (Ablation { disable_shape: true, ..Default::default() }, 1),
            (Ablation { disable_pose: true, ..Default::default() }, 2),
            (Ablation { disable_light: true, ..Default::default() }, 3),
        ];
        for (ab, changed) in cases {
            let out = run(ab);
            for k in 0..4 {
                assert_eq!(out[k] == full[k], k != changed, "flag {ab:?} factor {k}");
            }
        }
        let pose = &run(cases[2].0)[2];
        assert!(pose.data().iter().all(|&v| v == 0.0));
        let light = &run(cases[3].0)[3];
        assert_eq!(light.data(), &[0.7, 0.3, 0.0, 0.0, 0.7, 0.3, 0.0, 0.0]);
        assert!(run(cases[1].0)[1].data().iter().all(|&v| v == 1.0));
        assert!(run(cases[0].0)[0].data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn direct_and_flipped_renders_share_pose_and_light() {
        let (nets, p, _) = small_setup();
        let x = rand_t(&[1, 3, 8, 8], 0.0, 1.0, 7);
        let mut g = Graph::new();
        let pb = p.bind(&mut g, false);
        let xv = g.constant(x);
        let f = forward_autoencode(&mut g, &nets, &pb, xv, Ablation::default()).unwrap();
        let a = g.value(f.albedo).clone();
        let d = g.value(f.depth).clone();
        let pose = g.value(f.pose).data().to_vec();
        let light = g.value(f.light).data().to_vec();
        let am = render::Map::new(3, 8, 8, a.data().to_vec());
        let dm = render::Map::new(1, 8, 8, d.data().to_vec());
        let pp = render::Pose::from_array([pose[0], pose[1], pose[2], pose[3], pose[4], pose[5]]);
        let ll = Light::from_array([light[0], light[1], light[2], light[3]]);
        let flipped = render::render_flipped(&am, &dm, &pp, &ll, &Camera::default()).unwrap();
        assert_eq!(g.value(f.recon_flip).data(), &flipped.image.data[..]);
        assert!(g.value(f.pose).all_finite() && g.value(f.light).all_finite());
    }

    #[test]
    fn objective_gradient_wrt_texture_latent() {
        let (nets, p, f) = small_setup();
        let x = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 8);
        let cfg = Stage1Config::default();
        // latents become leaves so the check differentiates decode → render → loss
        let lat = {
            let mut g = Graph::new();
            let pb = p.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let l = encode(&mut g, &nets, &pb, xv, Ablation::default());
            [l.texture, l.shape, l.pose.unwrap(), l.light.unwrap()].map(|v| g.value(v).clone())
        };
        let mut leaves = ParamSet::new();
        leaves.insert("z_tex", lat[0].clone());
        let report = check_params(
            &leaves,
            |g, b| {
                let pb = p.bind(g, false);
                let fb = f.bind(g, false);
                let xv = g.constant(x.clone());
                let l = Latents {
                    texture: b.var("z_tex"),
                    shape: g.constant(lat[1].clone()),
                    pose: Some(g.constant(lat[2].clone())),
                    light: Some(g.constant(lat[3].clone())),
                };
                let fwd = decode_render(g, &nets, &pb, &l, cfg.ablation).unwrap();
                let (sp, sf) = nets.confidence(g, &pb, xv);
                reconstruction_loss(g, &nets, &fb, xv, &fwd, sp, sf, cfg.lambda_f, cfg.lambda_flip).unwrap().total
            },
            1e-5,
            1e-6,
            usize::MAX,
            0,
        );
        assert!(report.max_rel < 1e-3, "{report:?}");
    }

    #[test]
    fn full_pipeline_parameter_gradients() {
        let (nets, p, f) = small_setup();
        let x = rand_t(&[2, 3, 8, 8], 0.0, 1.0, 9);
        let cfg = Stage1Config::default();
        let report = check_params(
            &p,
            |g, b| {
                let fb = f.bind(g, false);
                build_objective(g, &nets, b, &fb, x.clone(), &cfg).unwrap().1.total
            },
            1e-5,
            1e-6,
            3,
            1,
        );
        assert!(report.max_rel < 1e-3, "{report:?}");
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let nets = Stage1Nets::new(ZooConfig::reduced(8));
        let feat = init_feature_extractor::<f32>(&nets.cfg, 0);
        let mut r = stream(3, &[]);
        let images = Tensor::from_vec(&[10, 3, 8, 8], (0..1920).map(|_| uniform(&mut r, 0.0, 1.0)).collect());
        let cfg = Stage1Config { epochs: 2, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let a = train_stage1(&nets, &feat, &images, cfg, |_| {}).unwrap();
        let b = train_stage1(&nets, &feat, &images, cfg, |_| {}).unwrap();
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
        assert!(a.last.all_finite());
        assert!(a.log.iter().all(|s| s.loss.total.is_finite()));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let nets = Stage1Nets::new(ZooConfig::reduced(8));
        let feat = init_feature_extractor::<f32>(&nets.cfg, 0);
        let images = Tensor::<f32>::zeros(&[0, 3, 8, 8]);
        assert!(matches!(train_stage1(&nets, &feat, &images, Stage1Config::default(), |_| {}), Err(TrainError::EmptyDataset)));
    }
}
