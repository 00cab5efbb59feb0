//! The JSON run configuration. Every section is optional in the file and
//! falls back to the defaults below; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use latentface_core::diffusion::Stage2Config;
use latentface_core::probe::ProbeConfig;
use latentface_core::stage1::{Ablation, Stage1Config};
use latentface_core::synth::{SynthConfig, SynthRanges};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub synth: SynthSection,
    pub probe: ProbeSection,
    pub render: RenderSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            synth: SynthSection::default(),
            probe: ProbeSection::default(),
            render: RenderSection::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_f: f64,
    pub lambda_flip: f64,
    /// Factors replaced by constants: any of `pose`, `light`, `shape`, `texture`.
    pub ablate: Vec<String>,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let d = Stage1Config::default();
        Self { epochs: d.epochs, batch_size: d.batch_size, learning_rate: d.learning_rate, lambda_f: d.lambda_f, lambda_flip: d.lambda_flip, ablate: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    /// Diffusion steps `T`.
    pub steps: usize,
    /// DDIM steps `S`.
    pub sampling_steps: usize,
    /// Frames sampled per sequence.
    pub frames: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let d = Stage2Config::default();
        Self { steps: d.steps, sampling_steps: d.sampling_steps, frames: d.frames, learning_rate: d.learning_rate, epochs: d.epochs, batch_size: d.batch_size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub identities: usize,
    pub frames: usize,
    pub eval_fraction: f64,
    pub magnitude: (f64, f64),
    pub pose_fraction: f64,
    pub ka: (f64, f64),
    pub kd: (f64, f64),
    pub lx: (f64, f64),
    pub ly: (f64, f64),
    /// Positive (and negative) verification pairs written with the corpus.
    pub pairs_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        let r = d.ranges;
        Self {
            identities: d.identities,
            frames: d.frames,
            eval_fraction: d.eval_fraction,
            magnitude: r.magnitude,
            pose_fraction: r.pose_fraction,
            ka: r.ka,
            kd: r.kd,
            lx: r.lx,
            ly: r.ly,
            pairs_per_class: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probing task; only `fer` is defined.
    pub task: String,
    /// Feature-pack tensor to read; each command has its own default.
    pub tensor: Option<String>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self { epochs: d.epochs, learning_rate: d.learning_rate, batch_size: d.batch_size, task: "fer".into(), tensor: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    /// `yaw,pitch,roll[,tx,ty,tz]`, angles in degrees.
    pub pose: Option<String>,
}

/// Inputs and outputs of the command that wrote the config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub stage1: Option<PathBuf>,
    pub rdm: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub image: Option<PathBuf>,
}

pub fn parse_ablation(names: &[String]) -> Result<Ablation> {
    let mut ab = Ablation::default();
    for n in names {
        match n.trim() {
            "pose" => ab.disable_pose = true,
            "light" => ab.disable_light = true,
            "shape" => ab.disable_shape = true,
            "texture" => ab.disable_texture = true,
            other => return Err(Error::usage(format!("unknown ablation `{other}` (expected pose, light, shape or texture)"))),
        }
    }
    Ok(ab)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| Error::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json()).map_err(Error::io(&path))
    }

    pub fn stage1_config(&self) -> Result<Stage1Config> {
        let s = &self.stage1;
        let cfg = Stage1Config {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            lambda_f: s.lambda_f,
            lambda_flip: s.lambda_flip,
            seed: self.seed,
            ablation: parse_ablation(&s.ablate)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage2_config(&self) -> Result<Stage2Config> {
        let s = &self.stage2;
        let cfg = Stage2Config {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            steps: s.steps,
            sampling_steps: s.sampling_steps,
            frames: s.frames,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let s = &self.synth;
        let cfg = SynthConfig {
            identities: s.identities,
            frames: s.frames,
            seed: self.seed,
            resolution: crate::imageio::SIDE,
            ranges: SynthRanges { magnitude: s.magnitude, pose_fraction: s.pose_fraction, ka: s.ka, kd: s.kd, lx: s.lx, ly: s.ly },
            eval_fraction: s.eval_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let p = &self.probe;
        if p.epochs == 0 || p.batch_size == 0 || !(p.learning_rate > 0.0) {
            return Err(Error::usage("probe epochs, batch size and learning rate must be positive"));
        }
        Ok(ProbeConfig { epochs: p.epochs, learning_rate: p.learning_rate, batch_size: p.batch_size, seed: self.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_training_constants() {
        let c = RunConfig::default();
        let s1 = c.stage1_config().unwrap();
        assert_eq!((s1.batch_size, s1.learning_rate, s1.epochs), (16, 1e-4, 30));
        let s2 = c.stage2_config().unwrap();
        assert_eq!((s2.frames, s2.learning_rate, s2.epochs, s2.batch_size), (16, 1e-4, 30, 16));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"stage1": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"paths": {"output": "x"}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 9, "stage1": {"epochs": 3}}"#).unwrap();
        assert_eq!((c.seed, c.stage1.epochs, c.stage1.batch_size), (9, 3, 16));
    }

    #[test]
    fn resolved_json_reloads_identically() {
        let mut c = RunConfig::default();
        c.stage1.ablate = vec!["pose".into(), "light".into()];
        c.paths.data = Some("data".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn ablation_names() {
        let ab = parse_ablation(&["pose".into(), "light".into()]).unwrap();
        assert!(ab.disable_pose && ab.disable_light && !ab.disable_shape);
        assert!(matches!(parse_ablation(&["posture".into()]), Err(Error::Usage(_))));
    }
}
