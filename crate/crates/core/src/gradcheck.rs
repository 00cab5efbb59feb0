//! Finite-difference gradient verification.
//!
//! All checks run in `f64`. Relative error is `|a − n| / max(|a|, |n|, floor)`,
//! the floor keeping exactly-zero gradients from dividing by zero.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::render::{self, Camera, Light, Map, Pose, RasterCache, RenderError, RenderGrads};
use crate::rng::{self, uniform};

pub const DEFAULT_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst-case comparison of two gradient vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub max_rel: f64,
    pub worst_index: usize,
    pub count: usize,
}

pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> Comparison {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = Comparison { max_rel: 0.0, worst_index: 0, count: analytic.len() };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n, floor);
        if out.max_rel.is_nan() {
            break;
        }
        if !(e <= out.max_rel) {
            out.max_rel = e;
            out.worst_index = i;
        }
    }
    out
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Per-group worst relative error of a render gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderGradReport {
    pub albedo: f64,
    pub depth: f64,
    pub pose: f64,
    pub light: f64,
    /// Pixels whose contribution is smooth across every stencil point.
    pub stable_pixels: usize,
}

impl RenderGradReport {
    pub fn max(&self) -> f64 {
        self.albedo.max(self.depth).max(self.pose).max(self.light)
    }
}

/// Inputs of one render gradient check.
#[derive(Clone, Debug)]
pub struct RenderCase {
    pub albedo: Map<f64>,
    pub depth: Map<f64>,
    pub pose: Pose<f64>,
    pub light: Light<f64>,
    pub target: Map<f64>,
}

impl RenderCase {
    /// Random well-conditioned case: moderate pose, light close to head-on,
    /// depth perturbations small enough that every normal faces the light.
    pub fn random(seed: u64, res: usize) -> Self {
        let mut r = rng::stream(seed, &[0x6AD]);
        let n = res * res;
        let albedo = Map::new(3, res, res, (0..3 * n).map(|_| uniform(&mut r, 0.1, 0.9)).collect());
        let depth = Map::new(1, res, res, (0..n).map(|_| uniform(&mut r, 0.95, 1.05)).collect());
        let scales = render::pose_scales::<f64>();
        let mut p = [0.0; 6];
        for k in 0..6 {
            p[k] = scales[k] * uniform::<f64>(&mut r, -0.5, 0.5);
        }
        let light = Light { ka: uniform(&mut r, 0.2, 0.8), kd: uniform(&mut r, 0.2, 0.8), lx: uniform(&mut r, -0.4, 0.4), ly: uniform(&mut r, -0.4, 0.4) };
        let target = Map::new(3, res, res, (0..3 * n).map(|_| uniform(&mut r, 0.0, 1.0)).collect());
        Self { albedo, depth, pose: Pose::from_array(p), light, target }
    }

    fn unpack(&self, x: &[f64]) -> (Map<f64>, Map<f64>, Pose<f64>, Light<f64>) {
        let na = self.albedo.data.len();
        let nd = self.depth.data.len();
        let (h, w) = (self.depth.height, self.depth.width);
        let a = Map::new(3, h, w, x[..na].to_vec());
        let d = Map::new(1, h, w, x[na..na + nd].to_vec());
        let o = na + nd;
        let p = Pose::from_array([x[o], x[o + 1], x[o + 2], x[o + 3], x[o + 4], x[o + 5]]);
        let l = Light::from_array([x[o + 6], x[o + 7], x[o + 8], x[o + 9]]);
        (a, d, p, l)
    }

    fn pack(&self) -> Vec<f64> {
        let mut x = self.albedo.data.clone();
        x.extend_from_slice(&self.depth.data);
        x.extend_from_slice(&self.pose.to_array());
        x.extend_from_slice(&self.light.to_array());
        x
    }
}

/// Signature of an analytic render backward pass.
pub type RenderBackward<'a> =
    &'a dyn Fn(&Map<f64>, &Map<f64>, &Pose<f64>, &Light<f64>, &Camera<f64>, &RasterCache<f64>, &Map<f64>) -> RenderGrads<f64>;

/// Checks `backward` against central differences of a masked L1 render loss.
///
/// Pixels are kept only if, at every point of the difference stencil, they
/// stay covered by the same triangle, keep the sign of every residual, and
/// have no uncovered 4-neighbour. Inside that set the loss is smooth, so the
/// finite differences measure the interpolation and shading derivatives.
pub fn check_render(case: &RenderCase, h: f64, floor: f64, backward: RenderBackward<'_>) -> Result<RenderGradReport, RenderError> {
    let cam = Camera::<f64>::default();
    let (hh, ww) = (case.depth.height, case.depth.width);
    let npx = hh * ww;
    let x0 = case.pack();
    let render_x = |x: &[f64]| {
        let (a, d, p, l) = case.unpack(x);
        render::render_with_cache(&a, &d, &p, &l, &cam)
    };
    let (base, cache) = render_x(&x0)?;
    let signs = |img: &Map<f64>| -> Vec<i8> {
        img.data.iter().zip(&case.target.data).map(|(a, t)| if a > t { 1 } else if a < t { -1 } else { 0 }).collect()
    };
    let base_sign = signs(&base.image);
    let mut stable: Vec<bool> = (0..npx)
        .map(|p| {
            let (i, j) = (p / ww, p % ww);
            let covered = |ii: usize, jj: usize| base.mask[ii * ww + jj];
            base.mask[p]
                && (i == 0 || covered(i - 1, j))
                && (i + 1 == hh || covered(i + 1, j))
                && (j == 0 || covered(i, j - 1))
                && (j + 1 == ww || covered(i, j + 1))
                && (0..3).all(|c| base_sign[c * npx + p] != 0)
        })
        .collect();
    let mut xp = x0.clone();
    for k in 0..x0.len() {
        for s in [h, -h] {
            xp[k] = x0[k] + s;
            let (o, c) = render_x(&xp)?;
            let sg = signs(&o.image);
            for p in 0..npx {
                if c.pixel_triangle[p] != cache.pixel_triangle[p] || (0..3).any(|ch| sg[ch * npx + p] != base_sign[ch * npx + p]) {
                    stable[p] = false;
                }
            }
        }
        xp[k] = x0[k];
    }
    let loss = |x: &[f64]| -> f64 {
        let (o, _) = render_x(x).expect("stencil render");
        let mut acc = 0.0;
        for c in 0..3 {
            for p in 0..npx {
                if stable[p] {
                    acc += (o.image.data[c * npx + p] - case.target.data[c * npx + p]).abs();
                }
            }
        }
        acc
    };
    let numeric = central_differences(loss, &x0, h);
    let mut dimg = Map::filled(3, hh, ww, 0.0);
    for c in 0..3 {
        for p in 0..npx {
            if stable[p] {
                dimg.data[c * npx + p] = f64::from(base_sign[c * npx + p]);
            }
        }
    }
    let g = backward(&case.albedo, &case.depth, &case.pose, &case.light, &cam, &cache, &dimg);
    let na = case.albedo.data.len();
    let nd = case.depth.data.len();
    let o = na + nd;
    Ok(RenderGradReport {
        albedo: compare(&g.albedo.data, &numeric[..na], floor).max_rel,
        depth: compare(&g.depth.data, &numeric[na..o], floor).max_rel,
        pose: compare(&g.pose, &numeric[o..o + 6], floor).max_rel,
        light: compare(&g.light, &numeric[o + 6..o + 10], floor).max_rel,
        stable_pixels: stable.iter().filter(|&&s| s).count(),
    })
}

/// The renderer's own backward pass in [`RenderBackward`] form.
pub fn analytic_render_backward(
    a: &Map<f64>,
    d: &Map<f64>,
    p: &Pose<f64>,
    l: &Light<f64>,
    cam: &Camera<f64>,
    cache: &RasterCache<f64>,
    dimg: &Map<f64>,
) -> RenderGrads<f64> {
    render::render_backward(a, d, p, l, cam, cache, dimg)
}

/// Worst relative error of a graph gradient w.r.t. named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Worst relative error of each checked tensor, in name order.
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares backpropagated gradients of `loss` with central differences on
/// up to `per_tensor` randomly chosen entries of every tensor in `params`.
pub fn check_params(
    params: &ParamSet<f64>,
    loss: impl Fn(&mut Graph<f64>, &Bound) -> Var,
    h: f64,
    floor: f64,
    per_tensor: usize,
    seed: u64,
) -> ParamCheck {
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let l = loss(&mut g, &b);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let l = loss(&mut g, &b);
    let grads = b.grads(&g, &g.backward(l));
    let mut rng = rng::stream(seed, &[0xC4E]);
    let mut out = ParamCheck { max_rel: 0.0, worst: String::new(), checked: 0, per_tensor: Vec::new() };
    let mut work = params.clone();
    for name in params.names() {
        let len = params.get(&name).unwrap().len();
        let picks: Vec<usize> = if len <= per_tensor { (0..len).collect() } else { (0..per_tensor).map(|_| rng.random_range(0..len)).collect() };
        let mut tensor_max = 0.0f64;
        for i in picks {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(&name).unwrap().data()[i];
            let e = rel_err(analytic, numeric, floor);
            out.checked += 1;
            if e.is_nan() || e > tensor_max {
                tensor_max = e;
            }
            if !out.max_rel.is_nan() && !(e <= out.max_rel) {
                out.max_rel = e;
                out.worst = alloc::format!("{name}[{i}]");
            }
        }
        out.per_tensor.push((name, tensor_max));
    }
    out
}

/// Render gradient suite over `seeds` random cases.
pub fn render_suite(seeds: &[u64], res: usize, backward: RenderBackward<'_>) -> Result<Vec<RenderGradReport>, RenderError> {
    seeds.iter().map(|&s| check_render(&RenderCase::random(s, res), 1e-3, DEFAULT_FLOOR, backward)).collect()
}

/// Element-wise maximum over a set of reports.
pub fn worst_of(reports: &[RenderGradReport]) -> RenderGradReport {
    let mut w = RenderGradReport { albedo: 0.0, depth: 0.0, pose: 0.0, light: 0.0, stable_pixels: usize::MAX };
    for r in reports {
        w.albedo = w.albedo.max(r.albedo);
        w.depth = w.depth.max(r.depth);
        w.pose = w.pose.max(r.pose);
        w.light = w.light.max(r.light);
        w.stable_pixels = w.stable_pixels.min(r.stable_pixels);
    }
    if reports.is_empty() {
        w.stable_pixels = 0;
    }
    w
}
