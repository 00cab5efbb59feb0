//! Command implementations shared by the binary and the acceptance harness.

use std::fs;
use std::path::{Path, PathBuf};

use latentface_core::diffusion::{
    build_rdm_dataset, latent_mean, make_schedule, train_baseline, BaselineModel, LatentNorm, LatentSequence, RdmModel, Stage2Step,
};
use latentface_core::nets::{arch_id, init_feature_extractor, Denoiser, DenoiserConfig, IdentityRegressor, MapHead, Stage1Nets, ZooConfig};
use latentface_core::params::ParamSet;
use latentface_core::probe::{self, ClassificationReport, FoldReport};
use latentface_core::render::{self, Camera, Light, Map, Pose};
use latentface_core::rng::derive_seed;
use latentface_core::stage1::{self, Ablation, FaceLatents, Stage1Run, StepLog};
use latentface_core::stats;
use latentface_core::synth::{Split, CLASS_NAMES};
use latentface_core::Tensor;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{file_sha256, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::{imageio, report};

pub const STAGE1_LAST: &str = "stage1.lfck";
pub const STAGE1_BEST: &str = "stage1_best.lfck";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LATENTS: &str = "latents.lfck";
pub const RDM: &str = "rdm.lfck";
pub const BASELINE: &str = "baseline.lfck";
pub const FEATURES: &str = "features.lfck";

/// Images encoded per graph; fixed so results do not depend on thread count.
const CHUNK: usize = 32;
const BASELINE_HIDDEN: usize = 512;
const HEADS: [MapHead; 2] = [MapHead::Texture, MapHead::Shape];

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn ablation_names(ab: Ablation) -> Vec<&'static str> {
    let mut v = Vec::new();
    if ab.disable_pose {
        v.push("pose");
    }
    if ab.disable_light {
        v.push("light");
    }
    if ab.disable_shape {
        v.push("shape");
    }
    if ab.disable_texture {
        v.push("texture");
    }
    v
}

fn check_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    match c.meta_str("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::data(format!("expected a {kind} checkpoint, found {}", other.unwrap_or("an untyped one")))),
    }
}

/// Requires `got` to hold exactly the tensors and shapes of `want`.
fn check_layout(got: &ParamSet<f32>, want: &ParamSet<f32>, what: &str) -> Result<()> {
    if got.names() != want.names() {
        return Err(Error::data(format!("{what}: parameter names do not match the architecture")));
    }
    for (name, t) in want.iter() {
        let g = got.get(name).expect("names match");
        if g.shape() != t.shape() {
            return Err(Error::data(format!("{what}: `{name}` has shape {:?}, expected {:?}", g.shape(), t.shape())));
        }
    }
    if !got.all_finite() {
        return Err(Error::data(format!("{what}: non-finite parameters")));
    }
    Ok(())
}

/// Trained stage-1 networks with their frozen feature extractor.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub nets: Stage1Nets,
    pub params: ParamSet<f32>,
    pub feat: ParamSet<f32>,
    pub ablation: Ablation,
}

impl Stage1Model {
    pub fn to_checkpoint(&self, mut meta: Value) -> Checkpoint {
        meta["kind"] = json!("stage1");
        meta["arch"] = json!(arch_id(&self.nets.cfg));
        meta["ablate"] = json!(ablation_names(self.ablation));
        let mut c = Checkpoint::new(meta);
        c.insert_params("net/", &self.params);
        c.insert_params("frozen/", &self.feat);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        check_kind(c, "stage1")?;
        let nets = Stage1Nets::new(ZooConfig::standard());
        if c.meta_str("arch") != Some(arch_id(&nets.cfg).as_str()) {
            return Err(Error::data(format!("stage-1 architecture {:?} is not {}", c.meta_str("arch"), arch_id(&nets.cfg))));
        }
        let params = c.params("net/");
        check_layout(&params, &nets.init_params::<f32>(0), "stage-1 networks")?;
        let feat = c.params("frozen/");
        check_layout(&feat, &init_feature_extractor::<f32>(&nets.cfg, 0), "feature extractor")?;
        let names: Vec<String> = c
            .metadata
            .get("ablate")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        let ablation = crate::config::parse_ablation(&names).map_err(|e| Error::data(e.to_string()))?;
        Ok(Self { nets, params, feat, ablation })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn chunks(images: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let n = images.dim(0);
        (0..n).step_by(CHUNK).map(|s| images.slice_outer(s, CHUNK.min(n - s))).collect()
    }

    pub fn encode(&self, images: &Tensor<f32>) -> Vec<FaceLatents> {
        Self::chunks(images).par_iter().map(|x| stage1::encode_images(&self.nets, &self.params, x, CHUNK)).collect::<Vec<_>>().concat()
    }

    /// Reconstructions under the ablation the model was trained with.
    pub fn reconstruct(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = Self::chunks(images)
            .par_iter()
            .map(|x| stage1::reconstruct(&self.nets, &self.params, x, self.ablation, CHUNK))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Tensor::stack(&parts.iter().flat_map(|p| p.unstack()).collect::<Vec<_>>()))
    }
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    step: usize,
    lp: f64,
    lf: f64,
    lp_flip: f64,
    lf_flip: f64,
    total: f64,
}

/// Indices of the training split, or every image when the corpus has no splits.
pub fn training_indices(corpus: &Corpus) -> Vec<usize> {
    let train = corpus.select(Some(Split::Train));
    if train.is_empty() {
        corpus.select(None)
    } else {
        train
    }
}

/// Held-out reconstruction quality and pose recovery of a stage-1 model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Eval {
    pub images: usize,
    /// Mean per-image PSNR in dB.
    pub psnr: f64,
    /// Spearman correlation of predicted and true yaw; NaN without labels.
    pub yaw_spearman: f64,
}

pub fn evaluate_stage1(model: &Stage1Model, corpus: &Corpus, indices: &[usize]) -> Result<Stage1Eval> {
    if indices.is_empty() {
        return Err(Error::data("no images to evaluate"));
    }
    let images = corpus.load(indices)?;
    let recon = model.reconstruct(&images)?;
    let psnrs: Vec<f64> = (0..indices.len()).map(|i| stats::psnr(recon.slice_outer(i, 1).data(), images.slice_outer(i, 1).data())).collect();
    let yaw_spearman = match corpus.labels_for(indices) {
        Ok(labels) => {
            let predicted: Vec<f64> = model.encode(&images).iter().map(|l| l.pose[0] as f64).collect();
            let truth: Vec<f64> = labels.iter().map(|l| l.yaw).collect();
            stats::spearman(&predicted, &truth)
        }
        Err(_) => f64::NAN,
    };
    Ok(Stage1Eval { images: indices.len(), psnr: stats::mean(&psnrs), yaw_spearman })
}

pub struct Stage1Outcome {
    pub model: Stage1Model,
    pub run: Stage1Run,
    pub eval: Option<Stage1Eval>,
}

/// Stage 1 on the training split of `cfg.paths.data`, writing checkpoints,
/// the loss log, the resolved config and held-out metrics into `out`.
pub fn train_stage1(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&StepLog)) -> Result<Stage1Outcome> {
    let s1 = cfg.stage1_config()?;
    let data = cfg.paths.data.as_deref().ok_or_else(|| Error::usage("train --stage 1 requires --data <DIR>"))?;
    let corpus = Corpus::open(data)?;
    let train_idx = training_indices(&corpus);
    let images = corpus.load(&train_idx)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let nets = Stage1Nets::new(ZooConfig::standard());
    let feat = init_feature_extractor::<f32>(&nets.cfg, derive_seed(cfg.seed, &[0xFEA7]));
    let loss_path = out.join(LOSS_CSV);
    let mut log = csv::Writer::from_path(&loss_path).map_err(|e| Error::data(format!("{}: {e}", loss_path.display())))?;
    let mut write_err = None;
    let run = stage1::train_stage1(&nets, &feat, &images, s1, |s| {
        let l = s.loss;
        let row = LossRow { epoch: s.epoch, step: s.step, lp: l.lp, lf: l.lf, lp_flip: l.lp_flip, lf_flip: l.lf_flip, total: l.total };
        if let Err(e) = log.serialize(row).and_then(|_| log.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
        progress(s);
    })?;
    if let Some(e) = write_err {
        return Err(Error::data(format!("{}: {e}", loss_path.display())));
    }
    let meta = json!({
        "seed": cfg.seed,
        "epochs": s1.epochs,
        "batch_size": s1.batch_size,
        "learning_rate": s1.learning_rate,
        "lambda_f": s1.lambda_f,
        "lambda_flip": s1.lambda_flip,
        "images": train_idx.len(),
        "best_epoch": run.best_epoch,
    });
    let model = Stage1Model { nets: nets.clone(), params: run.last.clone(), feat: feat.clone(), ablation: s1.ablation };
    let mut last_meta = meta.clone();
    last_meta["epoch"] = json!(s1.epochs);
    model.to_checkpoint(last_meta).save(out.join(STAGE1_LAST))?;
    let best = Stage1Model { params: run.best.clone(), ..model.clone() };
    let mut best_meta = meta;
    best_meta["epoch"] = json!(run.best_epoch);
    best.to_checkpoint(best_meta).save(out.join(STAGE1_BEST))?;
    let eval_idx = corpus.select(Some(Split::Eval));
    let eval = if eval_idx.is_empty() {
        None
    } else {
        let e = evaluate_stage1(&model, &corpus, &eval_idx)?;
        report::write_metrics(&out.join(METRICS_CSV), &[("eval_images", e.images as f64), ("psnr_db", e.psnr), ("yaw_spearman", e.yaw_spearman)])?;
        Some(e)
    };
    Ok(Stage1Outcome { model, run, eval })
}

/// Latents of each sequence, grouped by `(split, identity)`, with names for the pack.
pub struct EncodedSequences {
    pub sequences: Vec<LatentSequence>,
    /// `(identity, frame names)` of each sequence.
    pub names: Vec<(String, Vec<String>)>,
}

pub fn encode_sequences(model: &Stage1Model, corpus: &Corpus, indices: &[usize]) -> Result<EncodedSequences> {
    let groups = corpus.sequences(indices);
    let flat: Vec<usize> = groups.concat();
    let latents = model.encode(&corpus.load(&flat)?);
    let mut sequences = Vec::with_capacity(groups.len());
    let mut names = Vec::with_capacity(groups.len());
    let mut k = 0;
    for (si, g) in groups.iter().enumerate() {
        let lat = &latents[k..k + g.len()];
        k += g.len();
        sequences.push(LatentSequence { identity: si, texture: lat.iter().map(|l| l.texture.clone()).collect(), shape: lat.iter().map(|l| l.shape.clone()).collect() });
        let e = &corpus.entries[g[0]];
        let id = e.identity.clone().unwrap_or_else(|| format!("{si}"));
        let frames = g.iter().map(|&i| corpus.entries[i].frame.clone().unwrap_or_else(|| corpus.entries[i].path.clone())).collect();
        names.push((id, frames));
    }
    Ok(EncodedSequences { sequences, names })
}

/// The latent pack: one `[latent]` tensor per `seq/<id>/frame/<k>/<head>`.
pub fn latent_pack(enc: &EncodedSequences, meta: Value) -> Checkpoint {
    let mut c = Checkpoint::new(meta);
    for (seq, (id, frames)) in enc.sequences.iter().zip(&enc.names) {
        for (k, frame) in frames.iter().enumerate() {
            for head in HEADS {
                let v = &seq.frames(head)[k];
                c.insert(format!("seq/{id}/frame/{frame}/{}", head.tag()), Tensor::from_vec(&[v.len()], v.clone()));
            }
        }
    }
    c
}

fn head_seed(seed: u64, head: MapHead) -> u64 {
    derive_seed(seed, &[0x52D, head as u64])
}

fn norm_tensors(c: &mut Checkpoint, prefix: &str, norm: &LatentNorm) {
    c.insert(format!("{prefix}norm.mean"), Tensor::from_vec(&[norm.dim()], norm.mean.clone()));
    c.insert(format!("{prefix}norm.std"), Tensor::from_vec(&[norm.dim()], norm.std.clone()));
}

fn read_norm(c: &Checkpoint, prefix: &str, dim: usize) -> Result<LatentNorm> {
    let mean = c.get(&format!("{prefix}norm.mean"))?.data().to_vec();
    let std = c.get(&format!("{prefix}norm.std"))?.data().to_vec();
    if mean.len() != dim || std.len() != dim || std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::data(format!("{prefix}: invalid latent normalization")));
    }
    Ok(LatentNorm { mean, std })
}

/// Both trained RDM heads.
#[derive(Clone, Debug)]
pub struct RdmPair {
    pub texture: RdmModel,
    pub shape: RdmModel,
    pub steps: usize,
    pub sampling_steps: usize,
}

impl RdmPair {
    pub fn head(&self, h: MapHead) -> &RdmModel {
        match h {
            MapHead::Texture => &self.texture,
            MapHead::Shape => &self.shape,
        }
    }

    pub fn to_checkpoint(&self, mut meta: Value) -> Checkpoint {
        meta["kind"] = json!("rdm");
        meta["steps"] = json!(self.steps);
        meta["sampling_steps"] = json!(self.sampling_steps);
        let mut c = Checkpoint::new(meta);
        for m in [&self.texture, &self.shape] {
            let prefix = format!("{}/", m.head.tag());
            c.insert_params(&prefix, &m.params);
            norm_tensors(&mut c, &prefix, &m.norm);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        check_kind(c, "rdm")?;
        let get = |k: &str| c.metadata.get(k).and_then(Value::as_u64).map(|v| v as usize).ok_or_else(|| Error::data(format!("rdm metadata lacks `{k}`")));
        let (steps, sampling_steps) = (get("steps")?, get("sampling_steps")?);
        let den = Denoiser::new(DenoiserConfig::standard());
        let load = |head: MapHead| -> Result<RdmModel> {
            let prefix = format!("{}/", head.tag());
            let mut params = ParamSet::new();
            for (n, t) in c.params(&prefix).iter().filter(|(n, _)| !n.starts_with("norm.")) {
                params.insert(n.clone(), t.clone());
            }
            let norm = read_norm(c, &prefix, den.cfg.latent)?;
            check_layout(&params, &den.init_params::<f32>(0), &format!("{} denoiser", head.tag()))?;
            Ok(RdmModel { denoiser: den, params, norm, head })
        };
        Ok(Self { texture: load(MapHead::Texture)?, shape: load(MapHead::Shape)?, steps, sampling_steps })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `ẑ₀` of every condition row for one head.
    pub fn sample(&self, head: MapHead, conds: &[&[f32]], seed: u64) -> Result<Vec<Vec<f32>>> {
        let sched = make_schedule(self.steps)?;
        Ok(self.head(head).sample(conds, &sched, self.sampling_steps, seed)?)
    }
}

#[derive(Clone, Debug)]
pub struct BaselinePair {
    pub texture: BaselineModel,
    pub shape: BaselineModel,
}

impl BaselinePair {
    pub fn head(&self, h: MapHead) -> &BaselineModel {
        match h {
            MapHead::Texture => &self.texture,
            MapHead::Shape => &self.shape,
        }
    }

    pub fn to_checkpoint(&self, mut meta: Value) -> Checkpoint {
        meta["kind"] = json!("baseline");
        meta["hidden"] = json!(BASELINE_HIDDEN);
        let mut c = Checkpoint::new(meta);
        for m in [&self.texture, &self.shape] {
            let prefix = format!("{}/", m.head.tag());
            c.insert_params(&prefix, &m.params);
            norm_tensors(&mut c, &prefix, &m.norm);
        }
        c
    }
}

/// Distances to the sequence-mean oracle on held-out sequences, per head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryReport {
    pub head: MapHead,
    pub frames: usize,
    /// Median `‖ẑ₀ − Z̄‖₂` of the diffusion model.
    pub rdm: f64,
    /// Median `‖Z_exp − Z̄‖₂`: using the frame latent itself.
    pub expression: f64,
    /// Median distance of the direct regression baseline.
    pub baseline: f64,
}

pub fn identity_recovery(rdm: &RdmPair, baseline: &BaselinePair, sequences: &[LatentSequence], head: MapHead, seed: u64) -> Result<RecoveryReport> {
    let mut conds: Vec<&[f32]> = Vec::new();
    let mut oracle: Vec<Vec<f32>> = Vec::new();
    for s in sequences {
        let frames: Vec<&[f32]> = s.frames(head).iter().map(Vec::as_slice).collect();
        if frames.is_empty() {
            continue;
        }
        let mean = latent_mean(&frames);
        for f in frames {
            conds.push(f);
            oracle.push(mean.clone());
        }
    }
    if conds.is_empty() {
        return Err(Error::data("no held-out sequences"));
    }
    let z0 = rdm.sample(head, &conds, seed)?;
    let base = baseline.head(head).predict(&conds);
    let dist = |rows: &[Vec<f32>]| -> f64 { stats::median(&rows.iter().zip(&oracle).map(|(r, m)| stats::l2_distance(r, m)).collect::<Vec<_>>()) };
    let expression = stats::median(&conds.iter().zip(&oracle).map(|(c, m)| stats::l2_distance(c, m)).collect::<Vec<_>>());
    Ok(RecoveryReport { head, frames: conds.len(), rdm: dist(&z0), expression, baseline: dist(&base) })
}

pub struct Stage2Outcome {
    pub rdm: RdmPair,
    pub baseline: BaselinePair,
    pub recovery: Vec<RecoveryReport>,
}

#[derive(Serialize)]
struct Stage2LossRow {
    head: &'static str,
    epoch: usize,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct BaselineLossRow {
    head: &'static str,
    epoch: usize,
    loss: f64,
}

/// Stage 2 on frozen stage-1 latents of the training sequences.
pub fn train_stage2(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(MapHead, &Stage2Step)) -> Result<Stage2Outcome> {
    let s2 = cfg.stage2_config()?;
    let stage1_path = cfg.paths.stage1.as_deref().ok_or_else(|| Error::usage("train --stage 2 requires --stage1 <CHECKPOINT>"))?;
    let data = cfg.paths.data.as_deref().ok_or_else(|| Error::usage("train --stage 2 requires --data <DIR>"))?;
    let model = Stage1Model::load(stage1_path)?;
    let stage1_sha = file_sha256(stage1_path)?;
    let corpus = Corpus::open(data)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let enc = encode_sequences(&model, &corpus, &training_indices(&corpus))?;
    let provenance = json!({ "stage1_sha256": stage1_sha, "seed": cfg.seed });
    let mut pack_meta = provenance.clone();
    pack_meta["kind"] = json!("latents");
    latent_pack(&enc, pack_meta).save(out.join(LATENTS))?;

    let mut rdm_models = Vec::new();
    let mut base_models = Vec::new();
    let mut loss_rows = Vec::new();
    let mut base_rows = Vec::new();
    for head in HEADS {
        let rows: Vec<&[f32]> = enc.sequences.iter().flat_map(|s| s.frames(head).iter().map(Vec::as_slice)).collect();
        let norm = LatentNorm::fit(rows);
        let hc = latentface_core::diffusion::Stage2Config { seed: head_seed(cfg.seed, head), ..s2 };
        let examples = build_rdm_dataset(&enc.sequences, head, hc.frames, hc.seed)?;
        let run = latentface_core::diffusion::train_stage2(Denoiser::new(DenoiserConfig::standard()), &examples, norm.clone(), hc, |s| {
            loss_rows.push(Stage2LossRow { head: head.tag(), epoch: s.epoch, step: s.step, loss: s.loss });
            progress(head, s);
        })?;
        let (base, means) = train_baseline(IdentityRegressor { latent: model.nets.cfg.latent, hidden: BASELINE_HIDDEN }, &examples, norm, hc)?;
        base_rows.extend(means.iter().enumerate().map(|(e, &loss)| BaselineLossRow { head: head.tag(), epoch: e + 1, loss }));
        rdm_models.push(run.model);
        base_models.push(base);
    }
    crate::corpus::write_csv(&out.join("stage2_loss.csv"), &loss_rows)?;
    crate::corpus::write_csv(&out.join("baseline_loss.csv"), &base_rows)?;
    let shape = rdm_models.pop().expect("two heads");
    let texture = rdm_models.pop().expect("two heads");
    let rdm = RdmPair { texture, shape, steps: s2.steps, sampling_steps: s2.sampling_steps };
    let bshape = base_models.pop().expect("two heads");
    let btexture = base_models.pop().expect("two heads");
    let baseline = BaselinePair { texture: btexture, shape: bshape };
    let mut meta = provenance;
    meta["frames"] = json!(s2.frames);
    meta["epochs"] = json!(s2.epochs);
    meta["batch_size"] = json!(s2.batch_size);
    meta["learning_rate"] = json!(s2.learning_rate);
    rdm.to_checkpoint(meta.clone()).save(out.join(RDM))?;
    baseline.to_checkpoint(meta).save(out.join(BASELINE))?;

    let eval_idx = corpus.select(Some(Split::Eval));
    let mut recovery = Vec::new();
    if !eval_idx.is_empty() {
        let held = encode_sequences(&model, &corpus, &eval_idx)?;
        let mut metrics = Vec::new();
        for head in HEADS {
            let r = identity_recovery(&rdm, &baseline, &held.sequences, head, cfg.seed)?;
            recovery.push(r);
            metrics.push((head, r));
        }
        let names: Vec<(String, f64)> = metrics
            .iter()
            .flat_map(|(h, r)| {
                let t = h.tag();
                [(format!("{t}_median_rdm"), r.rdm), (format!("{t}_median_expression"), r.expression), (format!("{t}_median_baseline"), r.baseline)]
            })
            .collect();
        let refs: Vec<(&str, f64)> = names.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        report::write_metrics(&out.join(METRICS_CSV), &refs)?;
    }
    Ok(Stage2Outcome { rdm, baseline, recovery })
}

/// Per-image features of a corpus, in corpus index order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub paths: Vec<String>,
    /// `[Δ_t, Δ_s, Z_t, Z_s]`.
    pub fer: Vec<Vec<f32>>,
    /// `[ẑ₀_t, ẑ₀_s, Z_t, Z_s]`.
    pub identity: Vec<Vec<f32>>,
    /// `[Z_t, Z_s]`.
    pub latent: Vec<Vec<f32>>,
}

pub const FER_TENSOR: &str = "features";
pub const IDENTITY_TENSOR: &str = "identity_features";
pub const LATENT_TENSOR: &str = "latents";

fn rows_tensor(rows: &[Vec<f32>]) -> Tensor<f32> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(&[rows.len(), d], rows.concat())
}

impl FeaturePack {
    pub fn to_checkpoint(&self, mut meta: Value) -> Checkpoint {
        meta["kind"] = json!("features");
        meta["paths"] = json!(self.paths);
        let mut c = Checkpoint::new(meta);
        c.insert(FER_TENSOR, rows_tensor(&self.fer));
        c.insert(IDENTITY_TENSOR, rows_tensor(&self.identity));
        c.insert(LATENT_TENSOR, rows_tensor(&self.latent));
        c
    }

    /// Rows of tensor `name` of a feature pack, with the image paths.
    pub fn read_rows(c: &Checkpoint, name: &str) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
        check_kind(c, "features")?;
        let paths: Vec<String> = c
            .metadata
            .get("paths")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .ok_or_else(|| Error::data("feature pack lacks image paths"))?;
        let t = c.get(name)?;
        if t.rank() != 2 || t.dim(0) != paths.len() {
            return Err(Error::data(format!("tensor `{name}` has shape {:?} for {} images", t.shape(), paths.len())));
        }
        let d = t.dim(1);
        Ok((paths, t.data().chunks(d.max(1)).map(<[f32]>::to_vec).collect()))
    }
}

/// Encodes every image and samples identity latents with both RDM heads.
pub fn extract_features(model: &Stage1Model, rdm: &RdmPair, corpus: &Corpus, seed: u64) -> Result<FeaturePack> {
    let all = corpus.select(None);
    let lat = model.encode(&corpus.load(&all)?);
    let tex: Vec<&[f32]> = lat.iter().map(|l| l.texture.as_slice()).collect();
    let shp: Vec<&[f32]> = lat.iter().map(|l| l.shape.as_slice()).collect();
    let id_t = rdm.sample(MapHead::Texture, &tex, seed)?;
    let id_s = rdm.sample(MapHead::Shape, &shp, seed)?;
    let mut pack = FeaturePack { paths: all.iter().map(|&i| corpus.entries[i].path.clone()).collect(), fer: Vec::new(), identity: Vec::new(), latent: Vec::new() };
    for i in 0..lat.len() {
        pack.fer.push(probe::fer_feature(tex[i], shp[i], &id_t[i], &id_s[i]));
        pack.identity.push(probe::verify_feature(tex[i], shp[i], &id_t[i], &id_s[i]));
        pack.latent.push([tex[i], shp[i]].concat());
    }
    Ok(pack)
}

pub fn extract(cfg: &RunConfig, out: &Path) -> Result<FeaturePack> {
    let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| Error::usage(format!("extract requires {flag}")));
    let data = need(&cfg.paths.data, "--data <DIR>")?;
    let stage1_path = need(&cfg.paths.stage1, "--stage1 <CHECKPOINT>")?;
    let rdm_path = need(&cfg.paths.rdm, "--rdm <CHECKPOINT>")?;
    let model = Stage1Model::load(&stage1_path)?;
    let rdm_ckpt = Checkpoint::load(&rdm_path)?;
    let stage1_sha = file_sha256(&stage1_path)?;
    if let Some(parent) = rdm_ckpt.meta_str("stage1_sha256") {
        if parent != stage1_sha {
            return Err(Error::data("the RDM checkpoint was trained on a different stage-1 checkpoint"));
        }
    }
    let rdm = RdmPair::from_checkpoint(&rdm_ckpt)?;
    let corpus = Corpus::open(&data)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let pack = extract_features(&model, &rdm, &corpus, cfg.seed)?;
    let meta = json!({ "stage1_sha256": stage1_sha, "rdm_sha256": file_sha256(&rdm_path)?, "seed": cfg.seed });
    pack.to_checkpoint(meta).save(out.join(FEATURES))?;
    Ok(pack)
}

/// Loads tensor `name` of a feature pack and aligns it with the corpus index.
pub fn aligned_features(pack_path: &Path, name: &str, corpus: &Corpus) -> Result<Vec<Vec<f32>>> {
    let (paths, rows) = FeaturePack::read_rows(&Checkpoint::load(pack_path)?, name)?;
    let mut out = vec![Vec::new(); corpus.len()];
    let mut seen = vec![false; corpus.len()];
    for (p, r) in paths.iter().zip(rows) {
        let i = corpus.find(p).ok_or_else(|| Error::data(format!("feature pack image {p} is not in the corpus")))?;
        out[i] = r;
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::data(format!("no features for {}", corpus.entries[i].path)));
    }
    Ok(out)
}

/// Linear probe of expression class: trained on the training split,
/// scored on the evaluation split.
pub fn probe_split(features: &[Vec<f32>], corpus: &Corpus, cfg: latentface_core::probe::ProbeConfig) -> Result<ClassificationReport> {
    let train = corpus.select(Some(Split::Train));
    let test = corpus.select(Some(Split::Eval));
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("probing needs both train and eval splits"));
    }
    let train_labels: Vec<usize> = corpus.labels_for(&train)?.iter().map(|l| l.class).collect();
    let test_labels: Vec<usize> = corpus.labels_for(&test)?.iter().map(|l| l.class).collect();
    let classes = train_labels.iter().chain(&test_labels).max().map_or(0, |m| m + 1).max(CLASS_NAMES.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| features[i].clone()).collect::<Vec<_>>();
    let head = probe::train_probe(&pick(&train), &train_labels, classes, cfg)?;
    Ok(probe::eval_classification(&head, &pick(&test), &test_labels)?)
}

pub fn run_probe(cfg: &RunConfig, out: &Path) -> Result<ClassificationReport> {
    let task = cfg.probe.task.as_str();
    let tensor = cfg.probe.tensor.as_deref().unwrap_or(FER_TENSOR);
    if task != "fer" {
        return Err(Error::usage(format!("unknown probe task `{task}` (expected fer)")));
    }
    let pcfg = cfg.probe_config()?;
    let data = cfg.paths.data.as_deref().ok_or_else(|| Error::usage("probe requires --data <DIR>"))?;
    let pack = cfg.paths.features.as_deref().ok_or_else(|| Error::usage("probe requires --features <PACK>"))?;
    let corpus = Corpus::open(data)?;
    let features = aligned_features(pack, tensor, &corpus)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let r = probe_split(&features, &corpus, pcfg)?;
    let names: Vec<String> = (0..r.confusion.len()).map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string())).collect();
    report::write_metrics(&out.join(METRICS_CSV), &[("accuracy", r.accuracy), ("macro_f1", r.macro_f1), ("chance", 1.0 / names.len() as f64)])?;
    report::write_confusion_csv(&out.join("confusion.csv"), &r, &names)?;
    report::write_confusion_png(&out.join("confusion.png"), &r)?;
    Ok(r)
}

pub fn run_verify(cfg: &RunConfig, out: &Path) -> Result<FoldReport> {
    let tensor = cfg.probe.tensor.as_deref().unwrap_or(IDENTITY_TENSOR);
    let pcfg = cfg.probe_config()?;
    let data = cfg.paths.data.as_deref().ok_or_else(|| Error::usage("verify requires --data <DIR>"))?;
    let pack = cfg.paths.features.as_deref().ok_or_else(|| Error::usage("verify requires --features <PACK>"))?;
    let corpus = Corpus::open(data)?;
    let pairs = corpus.resolved_pairs()?;
    let features = aligned_features(pack, tensor, &corpus)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let r = probe::verification_crossval(&pairs, &features, pcfg)?;
    report::write_folds(&out.join("folds.csv"), &r)?;
    report::write_metrics(&out.join(METRICS_CSV), &[("mean_accuracy", r.mean), ("std_accuracy", r.std), ("pairs", pairs.len() as f64)])?;
    Ok(r)
}

/// Images written by the render command.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub recon: Map<f32>,
    pub frontal: Map<f32>,
    pub albedo: Map<f32>,
    pub depth: Map<f32>,
    /// Canonical face at the requested pose under the neutral light.
    pub posed: Option<Map<f32>>,
}

pub fn render_image(model: &Stage1Model, image: &Map<f32>, pose: Option<Pose<f32>>) -> Result<Rendered> {
    let r = image.height;
    let x = Tensor::from_vec(&[1, 3, r, r], image.data.clone());
    let recon = model.reconstruct(&x)?;
    let (a, d) = stage1::canonical_maps(&model.nets, &model.params, &x);
    let albedo = Map::new(3, r, r, a.into_data());
    let depth = Map::new(1, r, r, d.into_data());
    let cam = Camera::<f32>::default();
    let frontal = render::frontalize(&albedo, &depth, &cam)?;
    let posed = pose.map(|p| render::render(&albedo, &depth, &p, &Light::neutral(), &cam).map(|o| o.image)).transpose()?;
    Ok(Rendered { recon: Map::new(3, r, r, recon.into_data()), frontal, albedo, depth, posed })
}

/// `yaw,pitch,roll[,tx,ty,tz]` with angles in degrees.
pub fn parse_pose(spec: &str) -> Result<Pose<f32>> {
    let vals: Vec<f64> = spec.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| Error::usage(format!("bad pose `{spec}`")))?;
    if vals.len() != 3 && vals.len() != 6 {
        return Err(Error::usage("pose takes yaw,pitch,roll or yaw,pitch,roll,tx,ty,tz"));
    }
    let mut a = [0.0f32; 6];
    for (k, v) in vals.iter().enumerate() {
        a[k] = if k < 3 { v.to_radians() as f32 } else { *v as f32 };
    }
    Ok(Pose::from_array(a))
}

pub fn run_render(cfg: &RunConfig, out: &Path) -> Result<Rendered> {
    let stage1_path = cfg.paths.stage1.as_deref().ok_or_else(|| Error::usage("render requires --stage1 <CHECKPOINT>"))?;
    let image_path = cfg.paths.image.as_deref().ok_or_else(|| Error::usage("render requires --image <PNG>"))?;
    let pose = cfg.render.pose.as_deref().map(parse_pose).transpose()?;
    let model = Stage1Model::load(stage1_path)?;
    let image = imageio::load_image(image_path)?;
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let r = render_image(&model, &image, pose)?;
    imageio::write_png(out.join("recon.png"), &r.recon)?;
    imageio::write_png(out.join("frontal.png"), &r.frontal)?;
    imageio::write_png(out.join("albedo.png"), &r.albedo)?;
    imageio::write_depth_pgm(out.join("depth.pgm"), &r.depth)?;
    if let Some(p) = &r.posed {
        imageio::write_png(out.join("posed.png"), p)?;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Stage1Model {
        let nets = Stage1Nets::new(ZooConfig::standard());
        let params = nets.init_params(1);
        let feat = init_feature_extractor(&nets.cfg, 2);
        Stage1Model { nets, params, feat, ablation: Ablation { disable_pose: true, ..Ablation::default() } }
    }

    #[test]
    fn pose_flags_are_degrees() {
        let p = parse_pose("90, 0, -45").unwrap().to_array();
        assert!((p[0] - std::f32::consts::FRAC_PI_2).abs() < 1e-6 && (p[2] + std::f32::consts::FRAC_PI_4).abs() < 1e-6);
        assert_eq!(parse_pose("0,0,0,0.1,0,0").unwrap().to_array()[3], 0.1);
        assert!(matches!(parse_pose("1,2"), Err(Error::Usage(_))));
        assert!(matches!(parse_pose("a,b,c"), Err(Error::Usage(_))));
    }

    #[test]
    fn stage1_checkpoint_restores_model_and_ablation() {
        let m = model();
        let c = Checkpoint::from_bytes(&m.to_checkpoint(json!({})).to_bytes()).unwrap();
        let back = Stage1Model::from_checkpoint(&c).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.feat, m.feat);
        assert_eq!(back.ablation, m.ablation);
    }

    #[test]
    fn mismatched_checkpoints_are_data_errors() {
        let mut c = model().to_checkpoint(json!({}));
        c.metadata["kind"] = json!("rdm");
        assert!(matches!(Stage1Model::from_checkpoint(&c), Err(Error::Data(_))));
        let mut c = model().to_checkpoint(json!({}));
        c.tensors.pop_last();
        assert!(matches!(Stage1Model::from_checkpoint(&c), Err(Error::Data(_))));
    }

    #[test]
    fn rdm_checkpoint_round_trips() {
        let den = Denoiser::new(DenoiserConfig::standard());
        let head = |h, s| RdmModel { denoiser: den, params: den.init_params(s), norm: LatentNorm { mean: vec![0.5; 256], std: vec![2.0; 256] }, head: h };
        let pair = RdmPair { texture: head(MapHead::Texture, 1), shape: head(MapHead::Shape, 2), steps: 1000, sampling_steps: 5 };
        let back = RdmPair::from_checkpoint(&pair.to_checkpoint(json!({}))).unwrap();
        assert_eq!(back.texture.params, pair.texture.params);
        assert_eq!(back.shape.norm, pair.shape.norm);
        assert_eq!((back.steps, back.sampling_steps), (1000, 5));
    }
}
