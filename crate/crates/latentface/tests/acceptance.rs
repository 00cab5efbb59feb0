//! Acceptance run: exact properties first, then the desk-scale experiments
//! on a 64 identity × 16 frame synthetic corpus. One PASS/FAIL line per
//! check; exits nonzero if any check fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use latentface::check::{self, CheckLine};
use latentface::checkpoint::file_sha256;
use latentface::config::RunConfig;
use latentface::corpus::{write_synth_corpus, Corpus};
use latentface::pipeline::{self, Stage1Eval, FER_TENSOR, IDENTITY_TENSOR, LATENT_TENSOR};
use latentface_core::gradcheck::analytic_render_backward;
use latentface_core::probe::{verification_crossval, ProbeConfig};
use latentface_core::rng::{normal_vec, stream};
use latentface_core::stats::mean;

const SEED: u64 = 7;
const PROBE_SEEDS: u64 = 3;

struct Report {
    lines: Vec<CheckLine>,
}

impl Report {
    fn push(&mut self, criterion: u32, line: CheckLine) {
        println!("[{criterion:>2}] {line}");
        self.lines.push(line);
    }

    fn extend(&mut self, criterion: u32, lines: Vec<CheckLine>) {
        lines.into_iter().for_each(|l| self.push(criterion, l));
    }

    fn timed<T>(&mut self, criterion: u32, budget_s: f64, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        let s = t0.elapsed().as_secs_f64();
        self.push(criterion, CheckLine::below("wall time (s)", s, budget_s));
        out
    }
}

/// Every number reported by one pass over the experiments.
#[derive(Debug)]
struct Experiment {
    epoch_totals: Vec<f64>,
    stage1: Stage1Eval,
    stage1_secs: f64,
    stage1_sha: String,
    recovery: Vec<pipeline::RecoveryReport>,
    stage2_secs: f64,
    rdm_sha: String,
    fer_accuracy: f64,
    with_delta: Vec<f64>,
    without_delta: Vec<f64>,
    probe_secs: f64,
    verify_folds: Vec<f64>,
    verify_mean: f64,
    verify_std: f64,
    null_mean: f64,
    verify_secs: f64,
}

impl Experiment {
    /// Flattened numbers compared bit-for-bit across reruns.
    fn numbers(&self) -> Vec<f64> {
        let mut v = self.epoch_totals.clone();
        v.extend([self.stage1.psnr, self.stage1.yaw_spearman]);
        for r in &self.recovery {
            v.extend([r.rdm, r.expression, r.baseline]);
        }
        v.push(self.fer_accuracy);
        v.extend(&self.with_delta);
        v.extend(&self.without_delta);
        v.extend(&self.verify_folds);
        v.extend([self.verify_mean, self.verify_std, self.null_mean]);
        v
    }
}

fn base_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig { seed: SEED, ..RunConfig::default() };
    cfg.synth.identities = 64;
    cfg.synth.frames = 16;
    cfg.paths.data = Some(root.join("data"));
    cfg
}

fn secs(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64()
}

fn run_experiment(root: &Path) -> Result<Experiment, latentface::Error> {
    let mut cfg = base_config(root);
    let data = root.join("data");
    let manifest = write_synth_corpus(&data, &cfg.synth_config()?, cfg.synth.pairs_per_class)?;
    eprintln!("corpus: {} images, {} eval pairs", manifest.images, manifest.pairs);

    let t0 = Instant::now();
    let s1 = pipeline::train_stage1(&cfg, &root.join("s1"), |s| {
        if s.step % 100 == 0 {
            eprintln!("  stage 1 epoch {} step {} total {:.4}", s.epoch, s.step, s.loss.total);
        }
    })?;
    let stage1_secs = secs(t0);
    let stage1_path = root.join("s1").join(pipeline::STAGE1_LAST);
    cfg.paths.stage1 = Some(stage1_path.clone());

    let t0 = Instant::now();
    let s2 = pipeline::train_stage2(&cfg, &root.join("s2"), |_, _| {})?;
    let stage2_secs = secs(t0);
    let rdm_path = root.join("s2").join(pipeline::RDM);
    cfg.paths.rdm = Some(rdm_path.clone());

    let t0 = Instant::now();
    pipeline::extract(&cfg, &root.join("fx"))?;
    let pack = root.join("fx").join(pipeline::FEATURES);
    cfg.paths.features = Some(pack.clone());
    let fer = pipeline::run_probe(&cfg, &root.join("probe"))?;
    let corpus = Corpus::open(&data)?;
    let fer_rows = pipeline::aligned_features(&pack, FER_TENSOR, &corpus)?;
    let latent_rows = pipeline::aligned_features(&pack, LATENT_TENSOR, &corpus)?;
    let (mut with_delta, mut without_delta) = (Vec::new(), Vec::new());
    for k in 0..PROBE_SEEDS {
        let pc = ProbeConfig { seed: SEED + k, ..cfg.probe_config()? };
        with_delta.push(pipeline::probe_split(&fer_rows, &corpus, pc)?.accuracy);
        without_delta.push(pipeline::probe_split(&latent_rows, &corpus, pc)?.accuracy);
    }
    let probe_secs = secs(t0);

    let t0 = Instant::now();
    cfg.probe.tensor = Some(IDENTITY_TENSOR.into());
    let ver = pipeline::run_verify(&cfg, &root.join("verify"))?;
    let mut r = stream(SEED, &[0x0A11]);
    let noise: Vec<Vec<f32>> = (0..corpus.len()).map(|_| normal_vec(&mut r, 1024)).collect();
    let null = verification_crossval(&corpus.resolved_pairs()?, &noise, cfg.probe_config()?)?;
    let verify_secs = secs(t0);

    Ok(Experiment {
        epoch_totals: s1.run.epoch_means.iter().map(|m| m.total).collect(),
        stage1: s1.eval.ok_or_else(|| latentface::Error::data("corpus has no eval split"))?,
        stage1_secs,
        stage1_sha: file_sha256(&stage1_path)?,
        recovery: s2.recovery,
        stage2_secs,
        rdm_sha: file_sha256(&rdm_path)?,
        fer_accuracy: fer.accuracy,
        with_delta,
        without_delta,
        probe_secs,
        verify_folds: ver.accuracies,
        verify_mean: ver.mean,
        verify_std: ver.std,
        null_mean: null.mean,
        verify_secs,
    })
}

fn report_experiment(rep: &mut Report, e: &Experiment) {
    let totals = &e.epoch_totals;
    rep.push(7, CheckLine::below("epoch-10 mean total loss minus epoch-1 mean", totals.get(9).copied().unwrap_or(f64::NAN) - totals[0], 0.0));
    rep.push(7, CheckLine::above("held-out reconstruction PSNR (dB)", e.stage1.psnr, 20.0).with_note(format!("{} eval images", e.stage1.images)));
    rep.push(7, CheckLine::above("|Spearman| predicted vs true yaw", e.stage1.yaw_spearman.abs(), 0.8).with_note(format!("rho = {:.4}", e.stage1.yaw_spearman)));
    rep.push(7, CheckLine::at_most("stage-1 wall time (s)", e.stage1_secs, 7200.0));

    for r in &e.recovery {
        let tag = r.head.tag();
        rep.push(8, CheckLine::below(format!("{tag}: median |z0 - mean| minus median |Z_exp - mean|"), r.rdm - r.expression, 0.0).with_note(format!("rdm {:.4}, expression {:.4}, {} frames", r.rdm, r.expression, r.frames)));
        rep.push(8, CheckLine::at_most(format!("{tag}: RDM median over baseline median"), r.rdm / r.baseline, 1.05).with_note(format!("baseline {:.4}", r.baseline)));
    }
    rep.push(8, CheckLine::at_most("stage-2 wall time (s)", e.stage2_secs, 1800.0));

    rep.push(9, CheckLine::at_least("FER probe accuracy, 4 classes", e.fer_accuracy, 0.70).with_note("chance 0.25"));
    let margin = mean(&e.with_delta) - mean(&e.without_delta);
    rep.push(9, CheckLine::above("mean accuracy gain from expression delta over 3 seeds", margin, 0.0).with_note(format!("with {:.4}, without {:.4}", mean(&e.with_delta), mean(&e.without_delta))));
    rep.push(9, CheckLine::at_most("extract + probe wall time (s)", e.probe_secs, 600.0));

    rep.push(10, CheckLine::exact("ten verification folds", e.verify_folds.len() == 10));
    rep.push(10, CheckLine::at_least("verification mean accuracy", e.verify_mean, 0.85).with_note(format!("± {:.4}", e.verify_std)));
    rep.push(10, CheckLine::at_least("random-feature null accuracy", e.null_mean, 0.4));
    rep.push(10, CheckLine::at_most("random-feature null accuracy", e.null_mean, 0.6));
    rep.push(10, CheckLine::at_most("verification wall time (s)", e.verify_secs, 600.0));
}

fn main() -> ExitCode {
    let mut rep = Report { lines: Vec::new() };
    let grad = rep.timed(1, 60.0, || check::render_gradients(&analytic_render_backward));
    rep.extend(1, grad);
    let props = rep.timed(2, 1.0, check::render_properties);
    rep.extend(2, props);
    rep.push(3, check::focal_length());
    let conf = rep.timed(4, 5.0, check::conf_loss_forms);
    rep.extend(4, conf);
    let moments = rep.timed(5, 60.0, check::forward_noise_moments);
    rep.extend(5, moments);
    let ddim = rep.timed(6, 1.0, check::ddim_oracle);
    rep.extend(6, ddim);

    let dir = tempfile::tempdir().expect("temporary directory");
    let first = match run_experiment(&dir.path().join("run1")) {
        Ok(e) => e,
        Err(e) => {
            rep.push(7, CheckLine::exact(format!("desk-scale experiment ran ({e})"), false));
            return ExitCode::FAILURE;
        }
    };
    report_experiment(&mut rep, &first);

    let mut ablated = base_config(&dir.path().join("run1"));
    ablated.stage1.ablate = vec!["pose".into(), "light".into()];
    let t0 = Instant::now();
    match pipeline::train_stage1(&ablated, &dir.path().join("ablate"), |_| {}) {
        Ok(out) => {
            let psnr = out.eval.map_or(f64::NAN, |e| e.psnr);
            rep.push(11, CheckLine::below("PSNR without pose and light minus full PSNR (dB)", psnr - first.stage1.psnr, 0.0).with_note(format!("ablated {psnr:.3}, full {:.3}", first.stage1.psnr)));
            rep.push(11, CheckLine::at_most("full + ablated stage-1 wall time (s)", first.stage1_secs + secs(t0), 7200.0));
        }
        Err(e) => rep.push(11, CheckLine::exact(format!("ablated training ran ({e})"), false)),
    }

    match run_experiment(&dir.path().join("run2")) {
        Ok(second) => {
            let (a, b) = (first.numbers(), second.numbers());
            let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
            rep.push(12, CheckLine::exact(format!("rerun reproduces all {} reported numbers bit-exactly", a.len()), same));
            rep.push(12, CheckLine::exact("rerun reproduces stage-1 and RDM checkpoints byte-for-byte", first.stage1_sha == second.stage1_sha && first.rdm_sha == second.rdm_sha));
        }
        Err(e) => rep.push(12, CheckLine::exact(format!("rerun ran ({e})"), false)),
    }

    let failed = rep.lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {} checks, {failed} failed", rep.lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
