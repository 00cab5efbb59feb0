//! Argument parsing and dispatch for the `latentface` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::check::{self, Suite};
use crate::config::RunConfig;
use crate::corpus::write_synth_corpus;
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "latentface", version, about = "Train, render and probe LatentFace models")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; all available cores when unset.
    #[arg(long, global = true, value_name = "N", env = "LATENTFACE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labelled synthetic corpus.
    Synth(SynthArgs),
    /// Train stage 1 (autoencoder) or stage 2 (diffusion).
    Train(TrainArgs),
    /// Reconstruct, frontalize and optionally re-pose one image.
    Render(RenderArgs),
    /// Write the feature pack of every corpus image.
    Extract(ExtractArgs),
    /// Linear probe of expression class.
    Probe(ProbeArgs),
    /// Ten-fold pair verification.
    Verify(VerifyArgs),
    /// Finite-difference gradient and invariant suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub pairs_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Corpus directory.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Stage-1 checkpoint; required for stage 2.
    #[arg(long, value_name = "CHECKPOINT")]
    pub stage1: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Comma-separated factors to hold constant: pose, light, shape, texture.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Option<Vec<String>>,
    /// Frames sampled per sequence in stage 2.
    #[arg(long)]
    pub frames: Option<usize>,
    /// DDIM steps used when sampling.
    #[arg(long)]
    pub sampling_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, value_name = "CHECKPOINT")]
    pub stage1: Option<PathBuf>,
    #[arg(long, value_name = "PNG")]
    pub image: Option<PathBuf>,
    /// `yaw,pitch,roll[,tx,ty,tz]`, angles in degrees; rendered under the neutral light.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "CHECKPOINT")]
    pub stage1: Option<PathBuf>,
    #[arg(long, value_name = "CHECKPOINT")]
    pub rdm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "PACK")]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// Feature-pack tensor; defaults to `features`.
    #[arg(long)]
    pub tensor: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "PACK")]
    pub features: Option<PathBuf>,
    /// Feature-pack tensor; defaults to `identity_features`.
    #[arg(long)]
    pub tensor: Option<String>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// grad, invariants or all.
    #[arg(default_value = "all")]
    pub suite: String,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

/// The config file (or defaults) with every flag applied on top.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set_opt(&mut cfg.paths.out, cli.out.clone());
    match &cli.command {
        Command::Synth(a) => {
            set(&mut cfg.synth.identities, a.identities);
            set(&mut cfg.synth.frames, a.frames);
            set(&mut cfg.synth.pairs_per_class, a.pairs_per_class);
        }
        Command::Train(a) => {
            set_opt(&mut cfg.paths.data, a.data.clone());
            set_opt(&mut cfg.paths.stage1, a.stage1.clone());
            let (s1, s2) = (&mut cfg.stage1, &mut cfg.stage2);
            if a.stage == 1 {
                set(&mut s1.epochs, a.epochs);
                set(&mut s1.batch_size, a.batch_size);
                set(&mut s1.learning_rate, a.learning_rate);
                set(&mut s1.ablate, a.ablate.clone());
            } else {
                set(&mut s2.epochs, a.epochs);
                set(&mut s2.batch_size, a.batch_size);
                set(&mut s2.learning_rate, a.learning_rate);
                set(&mut s2.frames, a.frames);
                set(&mut s2.sampling_steps, a.sampling_steps);
                if a.ablate.is_some() {
                    return Err(Error::usage("--ablate applies to stage 1 only"));
                }
            }
        }
        Command::Render(a) => {
            set_opt(&mut cfg.paths.stage1, a.stage1.clone());
            set_opt(&mut cfg.paths.image, a.image.clone());
            set_opt(&mut cfg.render.pose, a.pose.clone());
        }
        Command::Extract(a) => {
            set_opt(&mut cfg.paths.data, a.data.clone());
            set_opt(&mut cfg.paths.stage1, a.stage1.clone());
            set_opt(&mut cfg.paths.rdm, a.rdm.clone());
        }
        Command::Probe(a) => {
            set_opt(&mut cfg.paths.data, a.data.clone());
            set_opt(&mut cfg.paths.features, a.features.clone());
            set(&mut cfg.probe.task, a.task.clone());
            set_opt(&mut cfg.probe.tensor, a.tensor.clone());
        }
        Command::Verify(a) => {
            set_opt(&mut cfg.paths.data, a.data.clone());
            set_opt(&mut cfg.paths.features, a.features.clone());
            set_opt(&mut cfg.probe.tensor, a.tensor.clone());
        }
        Command::Check(_) => {}
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.paths.out.clone().ok_or_else(|| Error::usage("an output directory is required (--out <DIR>)"))
}

/// Runs one parsed command. Returns the exit code for commands that report
/// rather than fail, such as `check`.
pub fn run(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::usage("--threads must be at least 1"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth(_) => {
            let synth = cfg.synth_config()?;
            let out = out_dir(&cfg)?;
            let m = write_synth_corpus(&out, &synth, cfg.synth.pairs_per_class)?;
            cfg.write_resolved(&out)?;
            println!("wrote {} images ({} train / {} eval identities) and {} pairs to {}", m.images, m.train_identities, m.eval_identities, m.pairs, out.display());
        }
        Command::Train(a) if a.stage == 1 => {
            let out = out_dir(&cfg)?;
            let r = pipeline::train_stage1(&cfg, &out, |s| {
                if s.step % 50 == 0 {
                    eprintln!("epoch {} step {} total {:.4} lp {:.4}", s.epoch, s.step, s.loss.total, s.loss.lp);
                }
            })?;
            println!("stage 1: {} steps, best epoch {}", r.run.log.len(), r.run.best_epoch);
            if let Some(e) = r.eval {
                println!("held-out PSNR {:.2} dB, yaw Spearman {:.3} over {} images", e.psnr, e.yaw_spearman, e.images);
            }
        }
        Command::Train(_) => {
            let out = out_dir(&cfg)?;
            let r = pipeline::train_stage2(&cfg, &out, |head, s| {
                if s.step % 50 == 0 {
                    eprintln!("{} epoch {} step {} loss {:.5}", head.tag(), s.epoch, s.step, s.loss);
                }
            })?;
            for rec in r.recovery {
                println!(
                    "{}: median distance to sequence mean: rdm {:.4}, expression {:.4}, baseline {:.4} ({} frames)",
                    rec.head.tag(),
                    rec.rdm,
                    rec.expression,
                    rec.baseline,
                    rec.frames
                );
            }
        }
        Command::Render(_) => {
            let out = out_dir(&cfg)?;
            pipeline::run_render(&cfg, &out)?;
            println!("wrote renders to {}", out.display());
        }
        Command::Extract(_) => {
            let out = out_dir(&cfg)?;
            let pack = pipeline::extract(&cfg, &out)?;
            println!("wrote features for {} images to {}", pack.paths.len(), out.join(pipeline::FEATURES).display());
        }
        Command::Probe(_) => {
            let out = out_dir(&cfg)?;
            let r = pipeline::run_probe(&cfg, &out)?;
            println!("accuracy {:.4}, macro F1 {:.4}", r.accuracy, r.macro_f1);
        }
        Command::Verify(_) => {
            let out = out_dir(&cfg)?;
            let r = pipeline::run_verify(&cfg, &out)?;
            println!("verification accuracy {:.4} ± {:.4} over {} folds", r.mean, r.std, r.accuracies.len());
        }
        Command::Check(a) => {
            let suite = Suite::parse(&a.suite).ok_or_else(|| Error::usage(format!("unknown suite `{}` (expected grad, invariants or all)", a.suite)))?;
            let lines = check::run(suite);
            for l in &lines {
                println!("{l}");
            }
            let failed = lines.iter().filter(|l| !l.pass).count();
            println!("{} checks, {failed} failed", lines.len());
            if failed > 0 {
                return Ok(3);
            }
        }
    }
    Ok(0)
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_from(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("latentface").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "stage1": {"epochs": 9, "batch_size": 4}}"#).unwrap();
        let cli = parse(&["--config", path.to_str().unwrap(), "train", "--stage", "1", "--epochs", "2", "--ablate", "pose,light"]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.stage1.epochs, cfg.stage1.batch_size), (3, 2, 4));
        assert_eq!(cfg.stage1.ablate, ["pose", "light"]);
        let ab = cfg.stage1_config().unwrap().ablation;
        assert!(ab.disable_pose && ab.disable_light && !ab.disable_shape && !ab.disable_texture);
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = parse(&["synth", "--identities", "2", "--seed", "11", "--out", "x"]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.synth.identities), (11, 2));
        assert_eq!(cfg.paths.out.as_deref(), Some(std::path::Path::new("x")));
    }

    #[test]
    fn stage_must_be_one_or_two() {
        assert!(Cli::try_parse_from(["latentface", "train", "--stage", "3"]).is_err());
        assert_eq!(main_from(["latentface", "train", "--stage", "3"]), 1);
        assert_eq!(main_from(["latentface", "--help"]), 0);
    }

    #[test]
    fn missing_inputs_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let err = run(&parse(&["train", "--stage", "2", "--data", out, "--out", out])).unwrap_err();
        assert!(matches!(&err, Error::Usage(m) if m.contains("--stage1")), "{err}");
        assert_eq!(main_from(["latentface", "check", "nothing"]), 1);
        assert_eq!(main_from(["latentface", "synth", "--identities", "0", "--out", out]), 1);
    }
}
