//! Procedural faces with known identity, expression, pose and light.
//!
//! Every map is built in index space and mirrored as `(f[j] + f[W-1-j]) / 2`,
//! which makes horizontal symmetry exact in floating point.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;

use crate::render::{self, grid_coord, Camera, Light, Map, Pose, RenderError, RenderOutput};
use crate::rng::{self, uniform};

pub const CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; CLASSES] = ["smile", "surprise", "frown", "sad"];
pub const DEPTH_MIN: f64 = 0.9;
pub const DEPTH_MAX: f64 = 1.1;

#[derive(Clone, Debug, PartialEq)]
pub enum SynthError {
    UnknownClass(usize),
    MagnitudeOutOfRange(f64),
    InvalidCounts,
    InvalidRange(&'static str),
    Render(RenderError),
}

impl core::fmt::Display for SynthError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SynthError::UnknownClass(c) => write!(f, "unknown expression class {c}"),
            SynthError::MagnitudeOutOfRange(m) => write!(f, "expression magnitude {m} outside [0, 1]"),
            SynthError::InvalidCounts => f.write_str("identity and frame counts must be at least 1"),
            SynthError::InvalidRange(what) => write!(f, "invalid {what} range"),
            SynthError::Render(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SynthError {}

impl From<RenderError> for SynthError {
    fn from(e: RenderError) -> Self {
        SynthError::Render(e)
    }
}

fn gauss(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    (-(dx * dx + dy * dy) * 0.5).exp()
}

/// Evaluates `f(c, x, y)` on the grid and mirrors it left-right.
fn symmetric_field(channels: usize, res: usize, f: impl Fn(usize, f64, f64) -> f64) -> Map<f64> {
    let mut raw = vec![0.0; channels * res * res];
    for c in 0..channels {
        for i in 0..res {
            let y = grid_coord::<f64>(i, res);
            for j in 0..res {
                raw[(c * res + i) * res + j] = f(c, grid_coord(j, res), y);
            }
        }
    }
    let mut out = raw.clone();
    for c in 0..channels {
        for i in 0..res {
            let row = (c * res + i) * res;
            for j in 0..res {
                out[row + j] = (raw[row + j] + raw[row + res - 1 - j]) * 0.5;
            }
        }
    }
    Map::new(channels, res, res, out)
}

/// A symmetric canonical face.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub seed: u64,
    pub albedo: Map<f64>,
    pub depth: Map<f64>,
}

struct Bump {
    cx: f64,
    cy: f64,
    r: f64,
    a: f64,
}

pub fn gen_identity(id: usize, seed: u64, res: usize) -> SyntheticIdentity {
    let mut r = rng::stream(seed, &[0x1D]);
    let skin = [uniform::<f64>(&mut r, 0.5, 0.8), uniform::<f64>(&mut r, 0.35, 0.65), uniform::<f64>(&mut r, 0.25, 0.55)];
    let blobs: Vec<(usize, Bump)> = (0..6)
        .map(|k| {
            let b = Bump {
                cx: uniform(&mut r, -0.9, 0.9),
                cy: uniform(&mut r, -0.9, 0.9),
                r: uniform(&mut r, 0.25, 0.6),
                a: uniform(&mut r, -0.15, 0.15),
            };
            (k % 3, b)
        })
        .collect();
    let eye = (uniform::<f64>(&mut r, 0.25, 0.45), uniform::<f64>(&mut r, -0.35, -0.15), uniform::<f64>(&mut r, 0.07, 0.13));
    let eye_dark = uniform::<f64>(&mut r, 0.2, 0.4);
    let lip = (uniform::<f64>(&mut r, 0.4, 0.6), uniform::<f64>(&mut r, 0.15, 0.3));
    let albedo = symmetric_field(3, res, |c, x, y| {
        let mut v = skin[c];
        for (ch, b) in &blobs {
            if *ch == c {
                v += b.a * gauss(x, y, b.cx, b.cy, b.r, b.r);
            }
        }
        v -= eye_dark * gauss(x, y, eye.0, eye.1, eye.2, eye.2 * 0.7);
        let lip_tint = if c == 0 { 0.5 } else { 1.0 };
        v -= 0.15 * lip_tint * gauss(x, y, 0.0, lip.0, lip.1, 0.06);
        v.clamp(0.05, 0.95)
    });
    let count = r.random_range(2..=4);
    let bumps: Vec<Bump> = (0..count)
        .map(|_| Bump { cx: uniform(&mut r, -0.5, 0.5), cy: uniform(&mut r, -0.6, 0.6), r: uniform(&mut r, 0.2, 0.6), a: uniform(&mut r, 0.3, 1.0) })
        .collect();
    let field = symmetric_field(1, res, |_, x, y| bumps.iter().map(|b| b.a * gauss(x, y, b.cx, b.cy, b.r, b.r)).sum());
    let peak = field.data.iter().cloned().fold(0.0, f64::max).max(1e-12);
    // raised bumps sit closer to the camera
    let depth = Map::new(1, res, res, field.data.iter().map(|&v| 1.08 - 0.16 * v / peak).collect());
    SyntheticIdentity { id, seed, albedo, depth }
}

/// Additive albedo and depth fields of `class` at unit magnitude.
pub fn expression_template(class: usize, res: usize) -> Result<(Map<f64>, Map<f64>), SynthError> {
    if class >= CLASSES {
        return Err(SynthError::UnknownClass(class));
    }
    let band = |x: f64, y: f64, centre: f64, curve: f64, half: f64| -> f64 {
        let along = (-(x / half).powi(4)).exp();
        along * gauss(0.0, y, 0.0, centre + curve * x * x, 1.0, 0.06)
    };
    let albedo = symmetric_field(3, res, |_, x, y| match class {
        0 => -0.45 * band(x, y, 0.5, -0.8, 0.45) + 0.1 * gauss(x, y, 0.45, 0.25, 0.18, 0.18),
        1 => -0.55 * gauss(x, y, 0.0, 0.5, 0.14, 0.2) - 0.3 * band(x, y, -0.65, 0.0, 0.5),
        2 => -0.45 * gauss(x, y, 0.18, -0.42, 0.2, 0.06) - 0.2 * band(x, y, 0.55, 0.0, 0.3),
        _ => -0.45 * band(x, y, 0.45, 0.8, 0.45) - 0.25 * gauss(x, y, 0.12, -0.5, 0.12, 0.08),
    });
    let depth = symmetric_field(1, res, |_, x, y| match class {
        0 => -0.05 * gauss(x, y, 0.45, 0.25, 0.2, 0.2),
        1 => 0.06 * gauss(x, y, 0.0, 0.5, 0.15, 0.2),
        2 => -0.05 * gauss(x, y, 0.3, -0.4, 0.3, 0.08),
        _ => 0.04 * gauss(x, y, 0.0, 0.2, 0.35, 0.2),
    });
    Ok((albedo, depth))
}

/// `base + m·template`, unclamped.
pub fn expression_offset(identity: &SyntheticIdentity, class: usize, magnitude: f64) -> Result<(Map<f64>, Map<f64>), SynthError> {
    let res = identity.depth.width;
    let (ta, td) = expression_template(class, res)?;
    let add = |base: &Map<f64>, t: &Map<f64>| {
        Map::new(base.channels, res, res, base.data.iter().zip(&t.data).map(|(&b, &v)| b + magnitude * v).collect())
    };
    Ok((add(&identity.albedo, &ta), add(&identity.depth, &td)))
}

/// Expression-deformed canonical maps, clamped into the valid albedo and depth ranges.
pub fn gen_expression(identity: &SyntheticIdentity, class: usize, magnitude: f64) -> Result<(Map<f64>, Map<f64>), SynthError> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(SynthError::MagnitudeOutOfRange(magnitude));
    }
    if magnitude == 0.0 {
        if class >= CLASSES {
            return Err(SynthError::UnknownClass(class));
        }
        return Ok((identity.albedo.clone(), identity.depth.clone()));
    }
    let (mut a, mut d) = expression_offset(identity, class, magnitude)?;
    a.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    d.data.iter_mut().for_each(|v| *v = v.clamp(DEPTH_MIN, DEPTH_MAX));
    Ok((a, d))
}

/// Sampling ranges for the nuisance factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthRanges {
    pub magnitude: (f64, f64),
    /// Fraction of each pose component's full range, in `[0, 1]`.
    pub pose_fraction: f64,
    pub ka: (f64, f64),
    pub kd: (f64, f64),
    pub lx: (f64, f64),
    pub ly: (f64, f64),
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self { magnitude: (0.3, 1.0), pose_fraction: 1.0, ka: (0.35, 0.75), kd: (0.2, 0.5), lx: (-0.6, 0.6), ly: (-0.6, 0.6) }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = |r: (f64, f64), lo: f64, hi: f64| r.0 <= r.1 && r.0 >= lo && r.1 <= hi;
        if !ok(self.magnitude, 0.0, 1.0) {
            return Err(SynthError::InvalidRange("magnitude"));
        }
        if !(0.0..=1.0).contains(&self.pose_fraction) {
            return Err(SynthError::InvalidRange("pose"));
        }
        if !ok(self.ka, 0.0, 1.0) || !ok(self.kd, 0.0, 1.0) || !ok(self.lx, -1.0, 1.0) || !ok(self.ly, -1.0, 1.0) {
            return Err(SynthError::InvalidRange("light"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub frames: usize,
    pub seed: u64,
    pub resolution: usize,
    pub ranges: SynthRanges,
    /// Share of identities held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { identities: 64, frames: 16, seed: 0, resolution: 64, ranges: SynthRanges::default(), eval_fraction: 0.2 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.identities == 0 || self.frames == 0 || self.resolution < 2 {
            return Err(SynthError::InvalidCounts);
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(SynthError::InvalidRange("eval fraction"));
        }
        self.ranges.validate()
    }

    pub fn identity_seed(&self, identity: usize) -> u64 {
        rng::derive_seed(self.seed, &[0x1D, identity as u64])
    }

    /// Number of held-out identities, `round(eval_fraction · identities)`.
    pub fn eval_count(&self) -> usize {
        (self.eval_fraction * self.identities as f64).round() as usize
    }

    /// Identity indices in `(train, eval)`, each sorted; disjoint by construction.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut r = rng::stream(self.seed, &[0x5B]);
        let order = rng::permutation(&mut r, self.identities);
        let k = self.eval_count();
        let mut eval = order[..k].to_vec();
        let mut train = order[k..].to_vec();
        eval.sort_unstable();
        train.sort_unstable();
        (train, eval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

/// Ground truth for one frame; enough to re-render it exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameLabel {
    pub split: Split,
    pub identity: usize,
    pub frame: usize,
    pub class: usize,
    pub magnitude: f64,
    pub pose: Pose<f64>,
    pub light: Light<f64>,
}

/// Draws the label of `(identity, frame)`. Classes cycle through the frames so
/// every sequence is balanced when its length is a multiple of [`CLASSES`].
pub fn frame_label(cfg: &SynthConfig, split: Split, identity: usize, frame: usize) -> FrameLabel {
    let mut r = rng::stream(cfg.seed, &[0xF4A, identity as u64, frame as u64]);
    let rg = cfg.ranges;
    let scales = render::pose_scales::<f64>();
    let magnitude = uniform(&mut r, rg.magnitude.0, rg.magnitude.1);
    let mut pose = [0.0; 6];
    for (p, s) in pose.iter_mut().zip(scales) {
        let m = s * rg.pose_fraction;
        *p = uniform(&mut r, -m, m);
    }
    let light = Light {
        ka: uniform(&mut r, rg.ka.0, rg.ka.1),
        kd: uniform(&mut r, rg.kd.0, rg.kd.1),
        lx: uniform(&mut r, rg.lx.0, rg.lx.1),
        ly: uniform(&mut r, rg.ly.0, rg.ly.1),
    };
    FrameLabel { split, identity, frame, class: (frame + identity) % CLASSES, magnitude, pose: Pose::from_array(pose), light }
}

/// Renders a labelled frame of `identity`.
pub fn render_frame(identity: &SyntheticIdentity, label: &FrameLabel) -> Result<RenderOutput<f64>, SynthError> {
    let (a, d) = gen_expression(identity, label.class, label.magnitude)?;
    Ok(render::render(&a, &d, &label.pose, &label.light, &Camera::default())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub label: FrameLabel,
    /// `3×R×R` in `[0, ∞)`; values above 1 only where strong light saturates.
    pub image: Map<f64>,
}

/// Frames of one identity in frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub identity: usize,
    pub samples: Vec<SyntheticSample>,
}

/// All labels of the corpus, ordered by identity then frame.
pub fn corpus_labels(cfg: &SynthConfig) -> Result<Vec<FrameLabel>, SynthError> {
    cfg.validate()?;
    let (_, eval) = cfg.split();
    let mut out = Vec::with_capacity(cfg.identities * cfg.frames);
    for id in 0..cfg.identities {
        let split = if eval.binary_search(&id).is_ok() { Split::Eval } else { Split::Train };
        for f in 0..cfg.frames {
            out.push(frame_label(cfg, split, id, f));
        }
    }
    Ok(out)
}

/// Renders the whole corpus as one sequence per identity.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticSequence>, SynthError> {
    let labels = corpus_labels(cfg)?;
    let mut seqs = Vec::with_capacity(cfg.identities);
    for id in 0..cfg.identities {
        let ident = gen_identity(id, cfg.identity_seed(id), cfg.resolution);
        let mut samples = Vec::with_capacity(cfg.frames);
        for label in &labels[id * cfg.frames..(id + 1) * cfg.frames] {
            samples.push(SyntheticSample { label: *label, image: render_frame(&ident, label)?.image });
        }
        seqs.push(SyntheticSequence { identity: id, samples });
    }
    Ok(seqs)
}

/// Closed-form mean over frames of the unclamped canonical maps:
/// `base + mean(m_f · template_{e_f})`.
pub fn identity_mean_maps(identity: &SyntheticIdentity, labels: &[FrameLabel]) -> Result<(Map<f64>, Map<f64>), SynthError> {
    let res = identity.depth.width;
    let mut a = identity.albedo.clone();
    let mut d = identity.depth.clone();
    let k = labels.len() as f64;
    for class in 0..CLASSES {
        let weight: f64 = labels.iter().filter(|l| l.class == class).map(|l| l.magnitude).sum::<f64>() / k;
        if weight == 0.0 {
            continue;
        }
        let (ta, td) = expression_template(class, res)?;
        a.data.iter_mut().zip(&ta.data).for_each(|(v, t)| *v += weight * t);
        d.data.iter_mut().zip(&td.data).for_each(|(v, t)| *v += weight * t);
    }
    Ok((a, d))
}

/// Verification pairs among `labels` as `(i, j, same identity)` index
/// triples: up to `per_class` positives drawn from all same-identity
/// combinations and the same number of distinct cross-identity negatives.
pub fn sample_pairs(labels: &[FrameLabel], per_class: usize, seed: u64) -> Vec<(usize, usize, bool)> {
    let mut r = rng::stream(seed, &[0xBA1A]);
    let mut positives = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i].identity == labels[j].identity {
                positives.push((i, j, true));
            }
        }
    }
    let order = rng::permutation(&mut r, positives.len());
    let mut out: Vec<(usize, usize, bool)> = order.iter().take(per_class).map(|&k| positives[k]).collect();
    out.sort_unstable();
    let want = out.len();
    let cross = labels.len() * labels.len().saturating_sub(1) / 2 - positives.len();
    let mut negatives = Vec::new();
    let mut seen = alloc::collections::BTreeSet::new();
    while negatives.len() < want.min(cross) {
        let i = r.random_range(0..labels.len());
        let j = r.random_range(0..labels.len());
        let (a, b) = (i.min(j), i.max(j));
        if labels[a].identity != labels[b].identity && seen.insert((a, b)) {
            negatives.push((a, b, false));
        }
    }
    negatives.sort_unstable();
    out.extend(negatives);
    out
}
