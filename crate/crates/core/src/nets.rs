//! Model zoo: encoders, decoders, confidence net, frozen feature extractor,
//! latent denoiser and the residual identity regressor.
//!
//! Convolutional networks are described as [`Seq`] layer lists so that
//! initialization and the forward pass walk the same structure. Every network
//! is parameterized by a [`ZooConfig`], which lets the gradient tests run the
//! real architectures at 8×8 input and a handful of channels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::graph::{Activation, Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::rng::{self, uniform};
use crate::tensor::Tensor;

/// Architecture hyper-parameters shared by the stage-1 networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZooConfig {
    /// Input side length; a power of two ≥ 8.
    pub resolution: usize,
    /// First-stage channel count of the feature and numeric encoders.
    pub enc_base: usize,
    /// Last-stage channel count of the map decoders.
    pub dec_base: usize,
    pub conf_base: usize,
    pub latent: usize,
    /// Channels of the frozen extractor's three layers.
    pub feat_channels: [usize; 3],
}

impl ZooConfig {
    pub fn standard() -> Self {
        Self { resolution: 64, enc_base: 16, dec_base: 16, conf_base: 8, latent: 256, feat_channels: [16, 32, 32] }
    }

    /// Narrow variant for finite-difference checks.
    pub fn reduced(resolution: usize) -> Self {
        Self { resolution, enc_base: 4, dec_base: 4, conf_base: 4, latent: 8, feat_channels: [4, 8, 8] }
    }

    pub fn stages(&self) -> usize {
        assert!(self.resolution.is_power_of_two() && self.resolution >= 8, "resolution must be a power of two ≥ 8");
        self.resolution.trailing_zeros() as usize
    }

    /// Spatial side of the frozen feature map and of the short confidence output.
    pub fn feature_side(&self) -> usize {
        self.resolution / 4
    }
}

/// Stable architecture identifier stored in checkpoints.
pub fn arch_id(cfg: &ZooConfig) -> String {
    format!(
        "latentface-r{}-e{}-d{}-c{}-z{}-f{}x{}x{}",
        cfg.resolution,
        cfg.enc_base,
        cfg.dec_base,
        cfg.conf_base,
        cfg.latent,
        cfg.feat_channels[0],
        cfg.feat_channels[1],
        cfg.feat_channels[2]
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    Conv { cin: usize, cout: usize, k: usize, s: usize, p: usize },
    ConvT { cin: usize, cout: usize, k: usize, s: usize, p: usize },
    GroupNorm { c: usize },
    Act(Activation),
}

/// A named chain of layers; parameters are `"{name}.{index}.{w|b|g}"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq {
    pub name: String,
    pub layers: Vec<Layer>,
}

fn groups_for(c: usize) -> usize {
    if c >= 8 && c % 4 == 0 {
        c / 4
    } else {
        1
    }
}

impl Seq {
    fn new(name: &str) -> Self {
        Self { name: name.into(), layers: Vec::new() }
    }

    fn push(&mut self, l: Layer) -> &mut Self {
        self.layers.push(l);
        self
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> &mut Self {
        self.push(Layer::Conv { cin, cout, k, s, p })
    }

    fn convt(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> &mut Self {
        self.push(Layer::ConvT { cin, cout, k, s, p })
    }

    fn gn(&mut self, c: usize) -> &mut Self {
        self.push(Layer::GroupNorm { c })
    }

    fn act(&mut self, a: Activation) -> &mut Self {
        self.push(Layer::Act(a))
    }

    /// Fan-in-scaled uniform weights, zero biases, unit/zero normalization affines.
    pub fn init<T: Real>(&self, rng: &mut impl Rng, out: &mut ParamSet<T>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let followed_by_rectifier = self.layers[i + 1..]
                .iter()
                .find(|l| !matches!(l, Layer::GroupNorm { .. }))
                .is_some_and(|l| matches!(l, Layer::Act(Activation::Relu | Activation::LeakyRelu(_))));
            let gain = if followed_by_rectifier { 2.0 } else { 1.0 };
            let key = |s: &str| format!("{}.{}.{}", self.name, i, s);
            match *layer {
                Layer::Conv { cin, cout, k, .. } => {
                    let fan_in = cin * k * k;
                    out.insert(key("w"), fan_in_uniform(rng, &[cout, cin, k, k], fan_in, gain));
                    out.insert(key("b"), Tensor::zeros(&[cout]));
                }
                Layer::ConvT { cin, cout, k, s, .. } => {
                    let fan_in = (cin * k * k / (s * s)).max(1);
                    out.insert(key("w"), fan_in_uniform(rng, &[cin, cout, k, k], fan_in, gain));
                    out.insert(key("b"), Tensor::zeros(&[cout]));
                }
                Layer::GroupNorm { c } => {
                    out.insert(key("g"), Tensor::ones(&[c]));
                    out.insert(key("b"), Tensor::zeros(&[c]));
                }
                Layer::Act(_) => {}
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            let key = |s: &str| format!("{}.{}.{}", self.name, i, s);
            x = match *layer {
                Layer::Conv { s, p: pad, .. } => g.conv2d(x, p.var(&key("w")), Some(p.var(&key("b"))), s, pad),
                Layer::ConvT { s, p: pad, .. } => g.conv_transpose2d(x, p.var(&key("w")), Some(p.var(&key("b"))), s, pad),
                Layer::GroupNorm { c } => g.group_norm(x, p.var(&key("g")), p.var(&key("b")), groups_for(c)),
                Layer::Act(a) => g.act(x, a),
            };
        }
        x
    }
}

/// Uniform on `±gain·sqrt(3 / fan_in)`, i.e. variance `gain / fan_in`.
pub fn fan_in_bound(fan_in: usize, gain: f64) -> f64 {
    (3.0 * gain / fan_in as f64).sqrt()
}

fn fan_in_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let b = fan_in_bound(fan_in, gain);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| uniform(rng, -b, b)).collect())
}

const LEAKY: Activation = Activation::LeakyRelu(0.2);

/// Channel width of encoder stage `j` (output side `resolution / 2^(j+1)`).
fn enc_channels(base: usize, j: usize) -> usize {
    base << j.min(3)
}

/// Strided GN + leaky-ReLU stack ending in a 1×1 map of `latent` channels.
pub fn feature_encoder(name: &str, cfg: &ZooConfig) -> Seq {
    let k = cfg.stages();
    let mut s = Seq::new(name);
    let mut cin = 3;
    for j in 0..k - 1 {
        let c = enc_channels(cfg.enc_base, j);
        s.conv(cin, c, 4, 2, 1).gn(c).act(LEAKY);
        cin = c;
    }
    s.conv(cin, cfg.latent, 4, 2, 1);
    s
}

/// Rectifier stack ending in `outputs` tanh values.
pub fn numeric_encoder(name: &str, cfg: &ZooConfig, outputs: usize) -> Seq {
    let k = cfg.stages();
    let mut s = Seq::new(name);
    let mut cin = 3;
    for j in 0..k - 1 {
        let c = enc_channels(cfg.enc_base, j);
        s.conv(cin, c, 4, 2, 1).act(Activation::Relu);
        cin = c;
    }
    s.conv(cin, outputs, 4, 2, 1).act(Activation::Tanh);
    s
}

/// Upsampling stack from a latent vector to `out_channels` tanh maps.
pub fn map_decoder(name: &str, cfg: &ZooConfig, out_channels: usize) -> Seq {
    let k = cfg.stages();
    let mut s = Seq::new(name);
    let mut cin = cfg.latent;
    for i in 0..k {
        // stage i produces side 2^(i+1); mirror the encoder's widths
        let c = if i + 1 == k { cfg.dec_base } else { enc_channels(cfg.dec_base, k - 2 - i) };
        s.convt(cin, c, 4, 2, 1).gn(c).act(Activation::Relu);
        s.conv(c, c, 3, 1, 1).gn(c).act(Activation::Relu);
        cin = c;
    }
    s.conv(cin, out_channels, 5, 1, 2).act(Activation::Tanh);
    s
}

/// Confidence network split into a shared trunk ending at feature
/// resolution and two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceNet {
    pub trunk: Seq,
    pub head_feature: Seq,
    pub head_pixel: Seq,
}

pub fn confidence_net(name: &str, cfg: &ZooConfig) -> ConfidenceNet {
    let k = cfg.stages();
    let b = cfg.conf_base;
    let mut trunk = Seq::new(&format!("{name}.trunk"));
    let mut cin = 3;
    let mut widths = Vec::new();
    for j in 0..k {
        let c = enc_channels(b, j);
        trunk.conv(cin, c, 4, 2, 1);
        if j + 1 < k {
            trunk.gn(c);
        }
        trunk.act(LEAKY);
        widths.push(c);
        cin = c;
    }
    // back up to resolution / 4
    for i in 0..k - 2 {
        let c = widths[k - 2 - i];
        trunk.convt(cin, c, 4, 2, 1).gn(c).act(Activation::Relu);
        cin = c;
    }
    let mut head_feature = Seq::new(&format!("{name}.feat"));
    head_feature.conv(cin, 2, 3, 1, 1).act(Activation::Scale);
    let mut head_pixel = Seq::new(&format!("{name}.pix"));
    for _ in 0..2 {
        head_pixel.convt(cin, b, 4, 2, 1).gn(b).act(Activation::Relu);
        cin = b;
    }
    head_pixel.conv(b, 2, 5, 1, 2).act(Activation::Scale);
    ConfidenceNet { trunk, head_feature, head_pixel }
}

impl ConfidenceNet {
    pub fn init<T: Real>(&self, rng: &mut impl Rng, out: &mut ParamSet<T>) {
        self.trunk.init(rng, out);
        self.head_feature.init(rng, out);
        self.head_pixel.init(rng, out);
    }

    /// Returns `(σ_p: [N,2,R,R], σ_f: [N,2,R/4,R/4])`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> (Var, Var) {
        let h = self.trunk.forward(g, p, x);
        let sf = self.head_feature.forward(g, p, h);
        let sp = self.head_pixel.forward(g, p, h);
        (sp, sf)
    }
}

/// Frozen random perceptual extractor: three rectified convolutions,
/// two of them strided.
pub fn feature_extractor(cfg: &ZooConfig) -> Seq {
    let [c1, c2, c3] = cfg.feat_channels;
    let mut s = Seq::new("feat");
    s.conv(3, c1, 4, 2, 1).act(Activation::Relu);
    s.conv(c1, c2, 4, 2, 1).act(Activation::Relu);
    s.conv(c2, c3, 3, 1, 1).act(Activation::Relu);
    s
}

pub fn init_feature_extractor<T: Real>(cfg: &ZooConfig, seed: u64) -> ParamSet<T> {
    let mut rng = rng::stream(seed, &[0xFEA7]);
    let mut out = ParamSet::new();
    feature_extractor(cfg).init(&mut rng, &mut out);
    out
}

/// The stage-1 network collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Nets {
    pub cfg: ZooConfig,
    pub tex_enc: Seq,
    pub shape_enc: Seq,
    pub pose_enc: Seq,
    pub light_enc: Seq,
    pub tex_dec: Seq,
    pub shape_dec: Seq,
    pub conf: ConfidenceNet,
    pub feat: Seq,
}

impl Stage1Nets {
    pub fn new(cfg: ZooConfig) -> Self {
        Self {
            cfg,
            tex_enc: feature_encoder("tex_enc", &cfg),
            shape_enc: feature_encoder("shape_enc", &cfg),
            pose_enc: numeric_encoder("pose_enc", &cfg, 6),
            light_enc: numeric_encoder("light_enc", &cfg, 4),
            tex_dec: map_decoder("tex_dec", &cfg, 3),
            shape_dec: map_decoder("shape_dec", &cfg, 1),
            conf: confidence_net("conf", &cfg),
            feat: feature_extractor(&cfg),
        }
    }

    /// Trainable stage-1 parameters; each network draws from its own stream.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut out = ParamSet::new();
        let seqs = [&self.tex_enc, &self.shape_enc, &self.pose_enc, &self.light_enc, &self.tex_dec, &self.shape_dec];
        for (i, s) in seqs.iter().enumerate() {
            s.init(&mut rng::stream(seed, &[1, i as u64]), &mut out);
        }
        self.conf.init(&mut rng::stream(seed, &[1, 99]), &mut out);
        out
    }

    /// `[N,3,R,R]` → `[N, latent]`.
    pub fn encode_feature<T: Real>(&self, g: &mut Graph<T>, p: &Bound, which: MapHead, x: Var) -> Var {
        let seq = match which {
            MapHead::Texture => &self.tex_enc,
            MapHead::Shape => &self.shape_enc,
        };
        let z = seq.forward(g, p, x);
        let n = g.shape(z)[0];
        g.reshape(z, &[n, self.cfg.latent])
    }

    /// Raw tanh outputs `[N,6]` or `[N,4]`.
    pub fn encode_numeric<T: Real>(&self, g: &mut Graph<T>, p: &Bound, which: NumericHead, x: Var) -> Var {
        let (seq, d) = match which {
            NumericHead::Pose => (&self.pose_enc, 6),
            NumericHead::Light => (&self.light_enc, 4),
        };
        let z = seq.forward(g, p, x);
        let n = g.shape(z)[0];
        g.reshape(z, &[n, d])
    }

    /// `[N, latent]` → raw tanh maps `[N,C,R,R]`.
    pub fn decode_map<T: Real>(&self, g: &mut Graph<T>, p: &Bound, which: MapHead, z: Var) -> Var {
        let n = g.shape(z)[0];
        let x = g.reshape(z, &[n, self.cfg.latent, 1, 1]);
        match which {
            MapHead::Texture => self.tex_dec.forward(g, p, x),
            MapHead::Shape => self.shape_dec.forward(g, p, x),
        }
    }

    pub fn confidence<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> (Var, Var) {
        self.conf.forward(g, p, x)
    }

    pub fn feat_extract<T: Real>(&self, g: &mut Graph<T>, frozen: &Bound, x: Var) -> Var {
        self.feat.forward(g, frozen, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapHead {
    Texture,
    Shape,
}

impl MapHead {
    pub fn tag(self) -> &'static str {
        match self {
            MapHead::Texture => "texture",
            MapHead::Shape => "shape",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "texture" | "tex" => Some(MapHead::Texture),
            "shape" => Some(MapHead::Shape),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumericHead {
    Pose,
    Light,
}

/// Widths of the latent denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent: usize,
    /// Block widths, outer to inner to outer.
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub res_layers: usize,
}

impl DenoiserConfig {
    pub fn standard() -> Self {
        Self { latent: 256, widths: [512, 128, 256], time_dim: 128, res_layers: 2 }
    }

    pub fn reduced() -> Self {
        Self { latent: 6, widths: [12, 4, 8], time_dim: 8, res_layers: 2 }
    }

    pub fn input_size(&self) -> usize {
        2 * self.latent
    }
}

/// Sinusoidal embedding of integer timesteps, `[sin(τ ω_k), cos(τ ω_k)]`
/// with `ω_k = 10000^(-k / (d/2))`.
pub fn timestep_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let mut row = vec![T::zero(); dim];
        for k in 0..half {
            let freq = Float::exp(-Float::ln(10000f64) * k as f64 / half as f64);
            let a = t as f64 * freq;
            row[k] = T::lit(Float::sin(a));
            row[half + k] = T::lit(Float::cos(a));
        }
        out.extend_from_slice(&row);
    }
    Tensor::from_vec(&[steps.len(), dim], out)
}

fn linear_init<T: Real>(rng: &mut impl Rng, out: &mut ParamSet<T>, name: &str, din: usize, dout: usize, gain: f64) {
    out.insert(format!("{name}.w"), fan_in_uniform(rng, &[dout, din], din, gain));
    out.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

fn linear_fwd<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    g.linear(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))))
}

/// U-shaped residual MLP over `[noisy latent ‖ condition]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let c = self.cfg;
        let mut rng = rng::stream(seed, &[2]);
        let mut out = ParamSet::new();
        let [w0, w1, w2] = c.widths;
        linear_init(&mut rng, &mut out, "den.time.0", c.time_dim, c.time_dim, 1.0);
        linear_init(&mut rng, &mut out, "den.time.1", c.time_dim, c.time_dim, 1.0);
        linear_init(&mut rng, &mut out, "den.in", c.input_size(), w0, 1.0);
        for (b, w) in [(0, w0), (1, w1), (2, w2)] {
            for r in 0..c.res_layers {
                let n = format!("den.block{b}.res{r}");
                linear_init(&mut rng, &mut out, &format!("{n}.fc0"), w, w, 1.0);
                linear_init(&mut rng, &mut out, &format!("{n}.time"), c.time_dim, w, 1.0);
                linear_init(&mut rng, &mut out, &format!("{n}.fc1"), w, w, 0.25);
            }
        }
        linear_init(&mut rng, &mut out, "den.down", w0, w1, 1.0);
        linear_init(&mut rng, &mut out, "den.up", w1, w2, 1.0);
        linear_init(&mut rng, &mut out, "den.skip", w0, w2, 1.0);
        linear_init(&mut rng, &mut out, "den.out", w2, c.latent, 1.0);
        out
    }

    fn res_layer<T: Real>(&self, g: &mut Graph<T>, p: &Bound, name: &str, h: Var, temb: Var) -> Var {
        let a = g.act(h, Activation::Swish);
        let u = linear_fwd(g, p, &format!("{name}.fc0"), a);
        let tproj = linear_fwd(g, p, &format!("{name}.time"), temb);
        let u = g.add(u, tproj);
        let u = g.act(u, Activation::Swish);
        let u = linear_fwd(g, p, &format!("{name}.fc1"), u);
        g.add(h, u)
    }

    /// `z_noisy, cond: [N, latent]`, `steps` in `1..=T` → `ẑ₀: [N, latent]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z_noisy: Var, steps: &[usize], cond: Var) -> Var {
        let c = self.cfg;
        let emb = g.constant(timestep_embedding(steps, c.time_dim));
        let t = linear_fwd(g, p, "den.time.0", emb);
        let t = g.act(t, Activation::Swish);
        let temb = linear_fwd(g, p, "den.time.1", t);
        let x = g.concat(&[z_noisy, cond]);
        let mut h = linear_fwd(g, p, "den.in", x);
        for r in 0..c.res_layers {
            h = self.res_layer(g, p, &format!("den.block0.res{r}"), h, temb);
        }
        let skip = h;
        let a = g.act(h, Activation::Swish);
        h = linear_fwd(g, p, "den.down", a);
        for r in 0..c.res_layers {
            h = self.res_layer(g, p, &format!("den.block1.res{r}"), h, temb);
        }
        let a = g.act(h, Activation::Swish);
        let up = linear_fwd(g, p, "den.up", a);
        let sk = linear_fwd(g, p, "den.skip", skip);
        h = g.add(up, sk);
        for r in 0..c.res_layers {
            h = self.res_layer(g, p, &format!("den.block2.res{r}"), h, temb);
        }
        let a = g.act(h, Activation::Swish);
        linear_fwd(g, p, "den.out", a)
    }
}

/// `x + W₂ relu(W₁ x + b₁) + b₂`; the identity map when `W₂, b₂` are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityRegressor {
    pub latent: usize,
    pub hidden: usize,
}

impl IdentityRegressor {
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = rng::stream(seed, &[3]);
        let mut out = ParamSet::new();
        linear_init(&mut rng, &mut out, "base.fc0", self.latent, self.hidden, 2.0);
        out.insert("base.fc1.w", Tensor::zeros(&[self.latent, self.hidden]));
        out.insert("base.fc1.b", Tensor::zeros(&[self.latent]));
        out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = linear_fwd(g, p, "base.fc0", x);
        let h = g.act(h, Activation::Relu);
        let r = linear_fwd(g, p, "base.fc1", h);
        g.add(x, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval<T: Real>(seq: &Seq, params: &ParamSet<T>, x: Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x);
        let y = seq.forward(&mut g, &b, xv);
        g.value(y).clone()
    }

    fn image(n: usize, r: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rng::stream(seed, &[]);
        Tensor::from_vec(&[n, 3, r, r], (0..n * 3 * r * r).map(|_| uniform(&mut rng, 0.0, 1.0)).collect())
    }

    #[test]
    fn standard_shapes() {
        let cfg = ZooConfig::standard();
        let nets = Stage1Nets::new(cfg);
        let p: ParamSet<f32> = nets.init_params(1);
        let feat: ParamSet<f32> = init_feature_extractor(&cfg, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let fb = feat.bind(&mut g, false);
        let x = g.constant(image(2, 64, 3));
        let zt = nets.encode_feature(&mut g, &b, MapHead::Texture, x);
        assert_eq!(g.shape(zt), &[2, 256]);
        let zp = nets.encode_numeric(&mut g, &b, NumericHead::Pose, x);
        assert_eq!(g.shape(zp), &[2, 6]);
        let zl = nets.encode_numeric(&mut g, &b, NumericHead::Light, x);
        assert_eq!(g.shape(zl), &[2, 4]);
        assert!(g.value(zp).data().iter().chain(g.value(zl).data()).all(|v| v.abs() < 1.0));
        let a = nets.decode_map(&mut g, &b, MapHead::Texture, zt);
        assert_eq!(g.shape(a), &[2, 3, 64, 64]);
        let d = nets.decode_map(&mut g, &b, MapHead::Shape, zt);
        assert_eq!(g.shape(d), &[2, 1, 64, 64]);
        assert!(g.value(a).data().iter().all(|v| v.abs() < 1.0));
        let (sp, sf) = nets.confidence(&mut g, &b, x);
        assert_eq!(g.shape(sp), &[2, 2, 64, 64]);
        let f = nets.feat_extract(&mut g, &fb, x);
        assert_eq!(g.shape(sf)[2..], g.shape(f)[2..]);
        assert_eq!(g.shape(sf)[..2], [2, 2]);
        assert!(g.value(sp).data().iter().chain(g.value(sf).data()).all(|&v| v > 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let nets = Stage1Nets::new(ZooConfig::reduced(8));
        let a: ParamSet<f32> = nets.init_params(4);
        let b: ParamSet<f32> = nets.init_params(4);
        let c: ParamSet<f32> = nets.init_params(5);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for seq in [&nets.tex_enc, &nets.tex_dec, &nets.pose_enc] {
            for (i, l) in seq.layers.iter().enumerate() {
                let (fan_in, key) = match *l {
                    Layer::Conv { cin, k, .. } => (cin * k * k, format!("{}.{}.w", seq.name, i)),
                    Layer::ConvT { cin, k, s, .. } => (cin * k * k / (s * s), format!("{}.{}.w", seq.name, i)),
                    _ => continue,
                };
                let bound = fan_in_bound(fan_in, 2.0) as f32;
                assert!(a.get(&key).unwrap().data().iter().all(|v| v.is_finite() && v.abs() <= bound));
            }
        }
    }

    #[test]
    fn feature_map_responds_to_shift() {
        let cfg = ZooConfig::standard();
        let feat: ParamSet<f32> = init_feature_extractor(&cfg, 0);
        let seq = feature_extractor(&cfg);
        let x = image(1, 64, 9);
        let mut shifted = x.clone();
        let d = shifted.data_mut();
        for c in 0..3 {
            for i in 0..64 {
                for j in (1..64).rev() {
                    d[(c * 64 + i) * 64 + j] = d[(c * 64 + i) * 64 + j - 1];
                }
            }
        }
        let f0 = eval(&seq, &feat, x.clone());
        let f1 = eval(&seq, &feat, shifted);
        assert_eq!(f0, eval(&seq, &feat, x));
        assert!(f0.max_abs_diff(&f1) > 1e-4);
    }

    #[test]
    fn denoiser_shapes_and_time_dependence() {
        let den = Denoiser::new(DenoiserConfig::standard());
        let p: ParamSet<f32> = den.init_params(0);
        let mut rng = rng::stream(1, &[]);
        let z = Tensor::from_vec(&[1, 256], rng::normal_vec(&mut rng, 256));
        let c = Tensor::from_vec(&[1, 256], rng::normal_vec(&mut rng, 256));
        let run = |t: usize| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let zv = g.constant(z.clone());
            let cv = g.constant(c.clone());
            let y = den.forward(&mut g, &b, zv, &[t], cv);
            assert_eq!(g.shape(y), &[1, 256]);
            g.value(y).clone()
        };
        let a = run(10);
        assert_eq!(a, run(10));
        assert!(a.max_abs_diff(&run(900)) > 1e-5);
        assert!(a.all_finite());
    }

    #[test]
    fn zero_residual_regressor_is_identity() {
        let r = IdentityRegressor { latent: 5, hidden: 7 };
        let p: ParamSet<f64> = r.init_params(0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[2, 5], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()));
        let y = r.forward(&mut g, &b, x);
        assert_eq!(g.value(y), g.value(x));
    }
}
