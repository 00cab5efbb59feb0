//! Finite-difference and invariant checks, runnable from the command line
//! and from the acceptance harness.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::time::Instant;

use latentface_core::batch::plan_batches;
use latentface_core::diffusion::{ddim_sample, make_schedule, q_sample, X0Predictor};
use latentface_core::gradcheck::{self, analytic_render_backward, check_params, RenderBackward};
use latentface_core::graph::Graph;
use latentface_core::nets::{init_feature_extractor, Denoiser, DenoiserConfig, Stage1Nets, ZooConfig};
use latentface_core::params::ParamSet;
use latentface_core::render::{self, compute_normals, grid_coord, Camera, Light, Map, Pose, RasterCache, RenderGrads};
use latentface_core::rng::{self, normal, uniform};
use latentface_core::stage1::{build_objective, conf_loss, Stage1Config};
use latentface_core::Tensor;

/// Outcome of one check: `value` is compared against `limit` with `op`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub op: &'static str,
    pub limit: f64,
    pub pass: bool,
    pub note: String,
}

impl CheckLine {
    fn compare(name: impl Into<String>, value: f64, op: &'static str, limit: f64, pass: bool) -> Self {
        Self { name: name.into(), value, op, limit, pass, note: String::new() }
    }

    /// Passes when `value < limit`.
    pub fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::compare(name, value, "<", limit, value < limit)
    }

    /// Passes when `value <= limit`.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::compare(name, value, "<=", limit, value <= limit)
    }

    /// Passes when `value > limit`.
    pub fn above(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::compare(name, value, ">", limit, value > limit)
    }

    /// Passes when `value >= limit`.
    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::compare(name, value, ">=", limit, value >= limit)
    }

    /// A yes/no property; printed without a value.
    pub fn exact(name: impl Into<String>, ok: bool) -> Self {
        Self::compare(name, if ok { 0.0 } else { 1.0 }, "", f64::NAN, ok)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

fn num(v: f64) -> String {
    if v == 0.0 || (1e-2..1e5).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        if self.op.is_empty() {
            write!(f, "{verdict} {}", self.name)?;
        } else {
            write!(f, "{verdict} {}: {} ({} {})", self.name, num(self.value), self.op, num(self.limit))?;
        }
        if !self.note.is_empty() {
            write!(f, " [{}]", self.note)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Invariants,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "grad" => Some(Suite::Grad),
            "invariants" => Some(Suite::Invariants),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

pub const RENDER_GRAD_TOL: f64 = 1e-3;
pub const RENDER_GRAD_STEP: f64 = 1e-3;
pub const RENDER_GRAD_SIDE: usize = 8;
pub const RENDER_GRAD_SEEDS: u64 = 10;

/// Renderer gradients against central differences, worst case per input group
/// over ten random 8×8 scenes.
pub fn render_gradients(backward: RenderBackward<'_>) -> Vec<CheckLine> {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..RENDER_GRAD_SEEDS).collect();
    let reports = match gradcheck::render_suite(&seeds, RENDER_GRAD_SIDE, backward) {
        Ok(r) => r,
        Err(e) => return vec![CheckLine::exact(format!("render gradients ({e})"), false)],
    };
    let w = gradcheck::worst_of(&reports);
    let note = format!("min stable pixels {}, {:.1}s", w.stable_pixels, t0.elapsed().as_secs_f64());
    let mut lines: Vec<CheckLine> = [("albedo", w.albedo), ("depth", w.depth), ("pose", w.pose), ("light", w.light)]
        .into_iter()
        .map(|(g, v)| CheckLine::below(format!("grad render.{g} max rel err"), v, RENDER_GRAD_TOL))
        .collect();
    lines.push(CheckLine::exact("grad render stable pixel set non-empty", w.stable_pixels > 0).with_note(note));
    lines
}

/// The renderer's backward pass with the sign of every gradient that leaves
/// the shading stage flipped. A fault-injection fixture: the gradient suite
/// must reject it.
pub fn sign_flipped_shading_backward(
    a: &Map<f64>,
    d: &Map<f64>,
    p: &Pose<f64>,
    l: &Light<f64>,
    cam: &Camera<f64>,
    cache: &RasterCache<f64>,
    dimg: &Map<f64>,
) -> RenderGrads<f64> {
    let mut g = analytic_render_backward(a, d, p, l, cam, cache, dimg);
    g.albedo.data.iter_mut().for_each(|v| *v = -*v);
    g.light.iter_mut().for_each(|v| *v = -*v);
    g
}

fn network_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Folds per-tensor errors into per-network maxima.
fn grouped(prefix: &str, per_tensor: &[(String, f64)], tol: f64) -> Vec<CheckLine> {
    let mut groups: Vec<(String, f64)> = Vec::new();
    for (name, e) in per_tensor {
        let g = network_group(name);
        match groups.iter_mut().find(|(k, _)| k == g) {
            Some((_, m)) => *m = if e.is_nan() { f64::NAN } else { m.max(*e) },
            None => groups.push((g.to_string(), *e)),
        }
    }
    groups.into_iter().map(|(g, e)| CheckLine::below(format!("grad {prefix}.{g} max rel err"), e, tol)).collect()
}

/// Parameter gradients of the stage-1 objective and of the denoiser loss on
/// narrow double-precision networks.
pub fn network_gradients() -> Vec<CheckLine> {
    let nets = Stage1Nets::new(ZooConfig::reduced(8));
    let p: ParamSet<f64> = nets.init_params(11);
    let f: ParamSet<f64> = init_feature_extractor(&nets.cfg, 12);
    let mut r = rng::stream(0xC8EC, &[]);
    let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|_| uniform(&mut r, 0.0, 1.0)).collect());
    let cfg = Stage1Config::default();
    let s1 = check_params(
        &p,
        |g, b| {
            let fb = f.bind(g, false);
            build_objective(g, &nets, b, &fb, x.clone(), &cfg).expect("objective builds").1.total
        },
        1e-5,
        1e-6,
        3,
        1,
    );
    let mut lines = grouped("stage1", &s1.per_tensor, 1e-3);

    let den = Denoiser::new(DenoiserConfig::reduced());
    let dp: ParamSet<f64> = den.init_params(5);
    let d = den.cfg.latent;
    let z = Tensor::from_vec(&[3, d], (0..3 * d).map(|_| normal(&mut r)).collect());
    let c = Tensor::from_vec(&[3, d], (0..3 * d).map(|_| normal(&mut r)).collect());
    let t = Tensor::from_vec(&[3, d], (0..3 * d).map(|_| normal(&mut r)).collect());
    let steps = [3usize, 400, 999];
    let weights = [2.0, 0.5, 1.0];
    let s2 = check_params(
        &dp,
        |g, b| {
            let (zv, cv, tv) = (g.constant(z.clone()), g.constant(c.clone()), g.constant(t.clone()));
            let out = den.forward(g, b, zv, &steps, cv);
            g.weighted_sq_err(out, tv, &weights)
        },
        1e-5,
        1e-6,
        4,
        2,
    );
    lines.extend(grouped("stage2", &s2.per_tensor, 1e-3));
    lines
}

fn random_map(c: usize, n: usize, lo: f64, hi: f64, seed: u64) -> Map<f64> {
    let mut r = rng::stream(seed, &[0x1A7]);
    Map::new(c, n, n, (0..c * n * n).map(|_| uniform(&mut r, lo, hi)).collect())
}

/// Low-frequency map without mirror symmetry.
fn smooth_map(c: usize, n: usize, mean: f64, amp: f64, seed: u64) -> Map<f64> {
    let mut r = rng::stream(seed, &[0x5A0]);
    let mut data = Vec::with_capacity(c * n * n);
    for _ in 0..c {
        let (fx, fy, ph): (f64, f64, f64) = (uniform(&mut r, 0.5, 2.0), uniform(&mut r, 0.5, 2.0), uniform(&mut r, 0.0, 6.0));
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (grid_coord::<f64>(j, n), grid_coord::<f64>(i, n));
                data.push(mean + amp * (fx * x + ph).sin() * (fy * y).cos());
            }
        }
    }
    Map::new(c, n, n, data)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Flip involution, frontal mirror symmetry, flat-depth normals and the
/// identity-pose magnification.
pub fn render_properties() -> Vec<CheckLine> {
    let cam = Camera::<f64>::default();
    let m = random_map(3, 64, 0.0, 1.0, 1);
    let involution = m.hflip().hflip() == m && m.hflip().at(1, 5, 0) == m.at(1, 5, 63);

    let a = smooth_map(3, 64, 0.5, 0.4, 2);
    let d = smooth_map(1, 64, 1.0, 0.1, 3);
    let light = Light { ka: 0.4, kd: 0.6, lx: 0.0, ly: 0.3 };
    let mirror = match (render::render(&a, &d, &Pose::identity(), &light, &cam), render::render_flipped(&a, &d, &Pose::identity(), &light, &cam)) {
        (Ok(direct), Ok(flipped)) => max_abs(&flipped.image.data, &direct.image.hflip().data),
        _ => f64::INFINITY,
    };

    let flat = Map::filled(1, 64, 64, 1.0);
    let n = compute_normals(&flat);
    let normals_ok = (0..4096).all(|k| [n.data[k], n.data[4096 + k], n.data[8192 + k]] == [0.0, 0.0, 1.0]);

    let albedo = random_map(3, 64, 0.0, 1.0, 4);
    let lit = Light { ka: 0.6, kd: 0.5, lx: 0.2, ly: 0.1 };
    let shaded = render::shade(&albedo, &n, &lit);
    let magnification = match render::project_and_rasterize(&shaded, &flat, &Pose::identity(), &cam) {
        Ok((out, _)) if out.coverage() == 4096 => max_abs(&out.image.data, &shaded.data),
        _ => f64::INFINITY,
    };

    vec![
        CheckLine::exact("invariant flip involution", involution),
        CheckLine::below("invariant frontal mirror symmetry max abs", mirror, 1e-3),
        CheckLine::exact("invariant flat depth normals are (0,0,1)", normals_ok),
        CheckLine::below("invariant identity pose unit magnification max abs", magnification, 1e-3),
    ]
}

/// `1 / (2 tan 5°)`, evaluated independently of the camera code.
pub const FOCAL_REFERENCE: f64 = 5.715_026_7;

pub fn focal_length() -> CheckLine {
    let cam = Camera::<f64>::default();
    let err = (cam.focal - FOCAL_REFERENCE).abs().max((cam.focal * 2.0 * 5f64.to_radians().tan() - 1.0).abs());
    CheckLine::below("invariant focal length 1/(2 tan 5 deg)", err, 1e-6).with_note(format!("f = {:.7}", cam.focal))
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[0x7E5]);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| uniform(&mut r, lo, hi)).collect())
}

/// The three closed forms of the Laplace confidence loss.
pub fn conf_loss_forms() -> Vec<CheckLine> {
    let pred = random_tensor(&[2, 3, 6, 6], 0.0, 1.0, 1);
    let target = random_tensor(&[2, 3, 6, 6], 0.0, 1.0, 2);
    let unit = Tensor::full(&[2, 1, 6, 6], 1.0 / SQRT_2);
    let l1: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    let scaled_l1 = conf_loss(&pred, &target, &unit, None).map_or(f64::INFINITY, |v| (v - 2.0 * l1 / pred.len() as f64).abs());

    let mut exact = 0.0f64;
    for c in [0.05, 0.7, 3.0] {
        let sigma = Tensor::full(&[2, 1, 6, 6], c);
        exact = exact.max(conf_loss(&pred, &pred, &sigma, None).map_or(f64::INFINITY, |v| (v - (SQRT_2 * c).ln()).abs()));
    }

    // per-pixel optimum by grid search over σ at spacing 1e-5
    let mut argmin_err = 0.0f64;
    for d in [0.01, 0.2, 0.9] {
        let objective = |s: f64| {
            let sig = Tensor::full(&[1, 1, 1, 1], s);
            conf_loss(&Tensor::full(&[1, 3, 1, 1], d), &Tensor::zeros(&[1, 3, 1, 1]), &sig, None).unwrap_or(f64::INFINITY)
        };
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        let mut s = 1e-4;
        while s < 2.0 {
            let v = objective(s);
            if v < best {
                best = v;
                arg = s;
            }
            s += 1e-5;
        }
        argmin_err = argmin_err.max((arg - SQRT_2 * d).abs());
    }

    vec![
        CheckLine::below("invariant conf_loss at sigma=1/sqrt2 equals 2/|Omega| L1", scaled_l1, 1e-12),
        CheckLine::below("invariant conf_loss of exact reconstruction equals ln(sqrt2 sigma)", exact, 1e-12),
        CheckLine::below("invariant conf_loss optimum sigma* = sqrt2 |d|", argmin_err, 1e-4),
    ]
}

pub const MC_DRAWS: usize = 100_000;

/// Mean and variance of `q_sample` draws, in units of their standard errors.
pub fn forward_noise_moments() -> Vec<CheckLine> {
    let s = make_schedule(1000).expect("schedule");
    let z0 = 1.7f64;
    let mut lines = Vec::new();
    for tau in [1usize, 500, 1000] {
        let mut r = rng::stream(0x3C, &[tau as u64]);
        let draws: Vec<f64> = (0..MC_DRAWS).map(|_| q_sample(&[z0], tau, &[normal(&mut r)], &s).expect("in range")[0]).collect();
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let (se_m, se_v) = ((v / n).sqrt(), v * (2.0 / (n - 1.0)).sqrt());
        let ab = s.alpha_bar(tau);
        lines.push(CheckLine::below(format!("invariant q_sample mean at tau={tau} (standard errors)"), (m - ab.sqrt() * z0).abs() / se_m, 4.0));
        lines.push(CheckLine::below(format!("invariant q_sample variance at tau={tau} (standard errors)"), (v - (1.0 - ab)).abs() / se_v, 4.0));
    }
    lines
}

struct Constant(Vec<f64>);

impl X0Predictor<f64> for Constant {
    fn predict(&self, z: &Tensor<f64>, _tau: usize, _c: &Tensor<f64>) -> Tensor<f64> {
        let n = z.dim(0);
        Tensor::from_vec(&[n, self.0.len()], (0..n).flat_map(|_| self.0.iter().copied()).collect())
    }
}

/// DDIM with a denoiser that always answers the same latent.
pub fn ddim_oracle() -> Vec<CheckLine> {
    let s = make_schedule(1000).expect("schedule");
    let star = vec![0.7, -2.5, 1e-3, 4.0];
    let cond = Tensor::from_vec(&[3, 4], vec![1.0; 12]);
    let mut lines = Vec::new();
    for steps in [1usize, 2, 5, 50] {
        let err = match ddim_sample(&Constant(star.clone()), &cond, &s, steps, 3) {
            Ok(out) => out.data().iter().enumerate().map(|(i, v)| (v - star[i % 4]).abs()).fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        lines.push(CheckLine::below(format!("invariant DDIM constant oracle S={steps}"), err, 1e-6));
    }
    let den = Denoiser::new(DenoiserConfig::reduced());
    let p: ParamSet<f64> = den.init_params(1);
    struct Net<'a>(&'a Denoiser, &'a ParamSet<f64>);
    impl X0Predictor<f64> for Net<'_> {
        fn predict(&self, z: &Tensor<f64>, tau: usize, c: &Tensor<f64>) -> Tensor<f64> {
            let mut g = Graph::new();
            let b = self.1.bind(&mut g, false);
            let (zv, cv) = (g.constant(z.clone()), g.constant(c.clone()));
            let out = self.0.forward(&mut g, &b, zv, &vec![tau; z.dim(0)], cv);
            g.value(out).clone()
        }
    }
    let c = random_tensor(&[2, den.cfg.latent], -1.0, 1.0, 9);
    let a = ddim_sample(&Net(&den, &p), &c, &s, 5, 17).ok();
    let b = ddim_sample(&Net(&den, &p), &c, &s, 5, 17).ok();
    let other = ddim_sample(&Net(&den, &p), &c, &s, 5, 18).ok();
    lines.push(CheckLine::exact("invariant DDIM seed determinism", a.is_some() && a == b && a != other));
    lines
}

pub fn batch_plans() -> CheckLine {
    let ok = [(10usize, 16usize), (97, 16), (64, 8)].iter().all(|&(n, b)| {
        let p = plan_batches(n, b, 5, 2);
        let mut all: Vec<usize> = p.batches.concat();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>() && p == plan_batches(n, b, 5, 2)
    });
    CheckLine::exact("invariant batch plans are seeded bijections", ok)
}

pub fn grad_suite(backward: RenderBackward<'_>) -> Vec<CheckLine> {
    let mut lines = render_gradients(backward);
    lines.extend(network_gradients());
    lines
}

pub fn invariant_suite() -> Vec<CheckLine> {
    let mut lines = render_properties();
    lines.push(focal_length());
    lines.extend(conf_loss_forms());
    lines.extend(forward_noise_moments());
    lines.extend(ddim_oracle());
    lines.push(batch_plans());
    lines
}

pub fn run(suite: Suite) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        lines.extend(grad_suite(&analytic_render_backward));
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        lines.extend(invariant_suite());
    }
    lines
}
