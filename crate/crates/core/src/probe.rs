//! Linear probing of frozen features: batch-normalized linear classifiers,
//! classification metrics and ten-fold pair verification.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::batch::plan_batches;
use crate::graph::Graph;
use crate::nets::fan_in_bound;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::{self, uniform};
use crate::stats;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const FOLDS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub enum ProbeError {
    Empty,
    SingleClass,
    LabelOutOfRange { label: usize, classes: usize },
    DimensionMismatch { expected: usize, got: usize },
    InsufficientPairs { positives: usize, negatives: usize },
    NonFinite,
}

impl core::fmt::Display for ProbeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ProbeError::Empty => f.write_str("no samples"),
            ProbeError::SingleClass => f.write_str("probe training needs at least two classes"),
            ProbeError::LabelOutOfRange { label, classes } => write!(f, "label {label} outside 0..{classes}"),
            ProbeError::DimensionMismatch { expected, got } => write!(f, "expected {expected}-d features, got {got}"),
            ProbeError::InsufficientPairs { positives, negatives } => {
                write!(f, "verification needs {FOLDS} pairs per class, got {positives} positive and {negatives} negative")
            }
            ProbeError::NonFinite => f.write_str("probe loss became non-finite"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ProbeError {}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 1e-3, batch_size: 32, seed: 0 }
    }
}

/// Batch normalization followed by one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    /// `bn.gamma`, `bn.beta`, `fc.w [C,D]`, `fc.b [C]`.
    pub params: ParamSet<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub classes: usize,
}

impl ProbeHead {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x9B0E]);
        let bound = fan_in_bound(dim, 1.0);
        let mut params = ParamSet::new();
        params.insert("bn.gamma", Tensor::ones(&[dim]));
        params.insert("bn.beta", Tensor::zeros(&[dim]));
        params.insert("fc.w", Tensor::from_vec(&[classes, dim], (0..classes * dim).map(|_| uniform(&mut r, -bound, bound)).collect()));
        params.insert("fc.b", Tensor::zeros(&[classes]));
        Self { params, running_mean: vec![0.0; dim], running_var: vec![1.0; dim], classes }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Eval-mode logits `[N, C]` using the running statistics.
    pub fn logits(&self, features: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let gamma = self.params.get("bn.gamma").unwrap().data();
        let beta = self.params.get("bn.beta").unwrap().data();
        let w = self.params.get("fc.w").unwrap().data();
        let b = self.params.get("fc.b").unwrap().data();
        let d = self.dim();
        let scale: Vec<f32> =
            (0..d).map(|k| gamma[k] / (self.running_var[k] as f64 + BN_EPS).sqrt() as f32).collect();
        features
            .iter()
            .map(|x| {
                let z: Vec<f32> = (0..d).map(|k| (x[k] - self.running_mean[k]) * scale[k] + beta[k]).collect();
                (0..self.classes).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(&z).map(|(a, v)| a * v).sum::<f32>()).collect()
            })
            .collect()
    }

    /// Arg-max class per row; ties go to the lower index.
    pub fn predict(&self, features: &[Vec<f32>]) -> Vec<usize> {
        self.logits(features)
            .iter()
            .map(|l| {
                let mut best = 0;
                for (c, &v) in l.iter().enumerate() {
                    if v > l[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_features(features: &[Vec<f32>]) -> Result<usize, ProbeError> {
    let d = features.first().ok_or(ProbeError::Empty)?.len();
    for f in features {
        if f.len() != d {
            return Err(ProbeError::DimensionMismatch { expected: d, got: f.len() });
        }
    }
    Ok(d)
}

/// Batches of the epoch plan, with a trailing single-sample batch folded into
/// its predecessor so batch statistics are always defined.
fn probe_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut b = plan_batches(n, batch, seed, epoch).batches;
    if b.len() >= 2 && b.last().map_or(false, |l| l.len() == 1) {
        let last = b.pop().unwrap();
        b.last_mut().unwrap().extend(last);
    }
    b
}

/// Trains a fresh head with multinomial cross-entropy; only head parameters change.
pub fn train_probe(features: &[Vec<f32>], labels: &[usize], classes: usize, cfg: ProbeConfig) -> Result<ProbeHead, ProbeError> {
    let d = check_features(features)?;
    if labels.len() != features.len() {
        return Err(ProbeError::DimensionMismatch { expected: features.len(), got: labels.len() });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(ProbeError::LabelOutOfRange { label: l, classes });
    }
    let first = labels[0];
    if classes < 2 || labels.iter().all(|&l| l == first) {
        return Err(ProbeError::SingleClass);
    }
    let mut head = ProbeHead::new(d, classes, cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let momentum = BN_MOMENTUM as f32;
    for epoch in 0..cfg.epochs {
        for batch in probe_batches(features.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let b = batch.len();
            let x: Vec<f32> = batch.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            if b > 1 {
                for k in 0..d {
                    let mean = batch.iter().map(|&i| features[i][k] as f64).sum::<f64>() / b as f64;
                    let var = batch.iter().map(|&i| (features[i][k] as f64 - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
                    head.running_mean[k] = (1.0 - momentum) * head.running_mean[k] + momentum * mean as f32;
                    head.running_var[k] = (1.0 - momentum) * head.running_var[k] + momentum * var as f32;
                }
            }
            let mut g = Graph::new();
            let p = head.params.bind(&mut g, true);
            let xv = g.constant(Tensor::from_vec(&[b, d], x));
            let h = g.batch_norm(xv, p.var("bn.gamma"), p.var("bn.beta"), BN_EPS as f32);
            let logits = g.linear(h, p.var("fc.w"), Some(p.var("fc.b")));
            let loss = g.cross_entropy(logits, &y);
            if !g.value(loss).item().is_finite() {
                return Err(ProbeError::NonFinite);
            }
            let grads = p.grads(&g, &g.backward(loss));
            drop(g);
            opt.step(&mut head.params, &grads);
        }
    }
    Ok(head)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, macro-averaged F1 and the confusion matrix of predictions.
/// A class with no predictions and no samples contributes F1 = 0.
pub fn classification_metrics(predicted: &[usize], actual: &[usize], classes: usize) -> Result<ClassificationReport, ProbeError> {
    if actual.is_empty() {
        return Err(ProbeError::Empty);
    }
    if predicted.len() != actual.len() {
        return Err(ProbeError::DimensionMismatch { expected: actual.len(), got: predicted.len() });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        for l in [p, a] {
            if l >= classes {
                return Err(ProbeError::LabelOutOfRange { label: l, classes });
            }
        }
        confusion[a][p] += 1;
    }
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let predicted_c: usize = (0..classes).map(|a| confusion[a][c]).sum();
        let actual_c: usize = confusion[c].iter().sum();
        let denom = predicted_c as f64 + actual_c as f64;
        f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(ClassificationReport { accuracy: trace as f64 / actual.len() as f64, macro_f1: f1_sum / classes as f64, confusion })
}

pub fn eval_classification(head: &ProbeHead, features: &[Vec<f32>], labels: &[usize]) -> Result<ClassificationReport, ProbeError> {
    if features.is_empty() {
        return Err(ProbeError::Empty);
    }
    let d = check_features(features)?;
    if d != head.dim() {
        return Err(ProbeError::DimensionMismatch { expected: head.dim(), got: d });
    }
    classification_metrics(&head.predict(features), labels, head.classes)
}

/// A labelled image pair; indices refer to a feature list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
    /// Pair indices of each test fold.
    pub folds: Vec<Vec<usize>>,
}

/// Ten disjoint folds, each holding an equal share of positive and of
/// negative pairs (up to rounding).
pub fn verification_folds(pairs: &[Pair], seed: u64) -> Result<Vec<Vec<usize>>, ProbeError> {
    let pos: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].same).collect();
    let neg: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].same).collect();
    if pos.len() < FOLDS || neg.len() < FOLDS {
        return Err(ProbeError::InsufficientPairs { positives: pos.len(), negatives: neg.len() });
    }
    let mut folds = vec![Vec::new(); FOLDS];
    for (tag, group) in [(0u64, pos), (1, neg)] {
        let mut r = rng::stream(seed, &[0xF01D, tag]);
        let order = rng::permutation(&mut r, group.len());
        for (k, &o) in order.iter().enumerate() {
            folds[k * FOLDS / group.len()].push(group[o]);
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// `|e_a − e_b|` elementwise.
pub fn pair_feature(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()
}

/// Ten-fold verification: each fold is scored by a fresh head trained on the other nine.
pub fn verification_crossval(pairs: &[Pair], features: &[Vec<f32>], cfg: ProbeConfig) -> Result<FoldReport, ProbeError> {
    check_features(features)?;
    let folds = verification_folds(pairs, cfg.seed)?;
    let diff: Vec<Vec<f32>> = pairs.iter().map(|p| pair_feature(&features[p.a], &features[p.b])).collect();
    let label = |i: usize| pairs[i].same as usize;
    let mut accuracies = Vec::with_capacity(FOLDS);
    for (k, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, f)| f.iter().copied()).collect();
        let tx: Vec<Vec<f32>> = train.iter().map(|&i| diff[i].clone()).collect();
        let ty: Vec<usize> = train.iter().map(|&i| label(i)).collect();
        let head = train_probe(&tx, &ty, 2, ProbeConfig { seed: rng::derive_seed(cfg.seed, &[k as u64]), ..cfg })?;
        let ex: Vec<Vec<f32>> = test.iter().map(|&i| diff[i].clone()).collect();
        let ey: Vec<usize> = test.iter().map(|&i| label(i)).collect();
        accuracies.push(eval_classification(&head, &ex, &ey)?.accuracy);
    }
    let mean = stats::mean(&accuracies);
    let std = stats::std_dev(&accuracies);
    Ok(FoldReport { accuracies, mean, std, folds })
}

/// Expression-recognition feature `[Δ_t, Δ_s, Z_t, Z_s]`.
pub fn fer_feature(z_tex: &[f32], z_shape: &[f32], id_tex: &[f32], id_shape: &[f32]) -> Vec<f32> {
    let dt = crate::diffusion::expression_delta(z_tex, id_tex);
    let ds = crate::diffusion::expression_delta(z_shape, id_shape);
    [dt.as_slice(), ds.as_slice(), z_tex, z_shape].concat()
}

/// Verification feature `[ẑ₀_t, ẑ₀_s, Z_t, Z_s]`.
pub fn verify_feature(z_tex: &[f32], z_shape: &[f32], id_tex: &[f32], id_shape: &[f32]) -> Vec<f32> {
    [id_tex, id_shape, z_tex, z_shape].concat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;

    fn blobs(n: usize, d: usize, classes: usize, sep: f32, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut r = rng::stream(seed, &[]);
        let centres: Vec<Vec<f32>> = (0..classes).map(|_| normal_vec(&mut r, d)).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % classes;
            let noise: Vec<f32> = normal_vec(&mut r, d);
            x.push(centres[c].iter().zip(&noise).map(|(m, e)| sep * m + e).collect());
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_two_class_set_is_learned() {
        let (x, y) = blobs(200, 8, 2, 6.0, 1);
        let head = train_probe(&x, &y, 2, ProbeConfig::default()).unwrap();
        let rep = eval_classification(&head, &x, &y).unwrap();
        assert!(rep.accuracy >= 0.99, "{}", rep.accuracy);
        assert_eq!(head, train_probe(&x, &y, 2, ProbeConfig::default()).unwrap());
    }

    #[test]
    fn permuted_labels_give_chance() {
        let (x, y) = blobs(800, 8, 4, 3.0, 2);
        let mut r = rng::stream(5, &[]);
        let perm = rng::permutation(&mut r, y.len());
        let shuffled: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let (tx, ty) = (&x[..400], &shuffled[..400]);
        let head = train_probe(tx, ty, 4, ProbeConfig::default()).unwrap();
        let acc = eval_classification(&head, &x[400..], &shuffled[400..]).unwrap().accuracy;
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0f32, 2.0]; 4];
        assert_eq!(train_probe(&x, &[1, 1, 1, 1], 2, ProbeConfig::default()), Err(ProbeError::SingleClass));
        assert_eq!(
            train_probe(&x, &[0, 1, 2, 0], 2, ProbeConfig::default()),
            Err(ProbeError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let y = [0, 1, 2, 3, 0, 1, 2, 3];
        let r = classification_metrics(&y, &y, 4).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
        for (i, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 2);
            assert_eq!(row[i], 2);
        }
        let c = classification_metrics(&[1; 8], &y, 4).unwrap();
        assert_eq!(c.accuracy, 0.25);
    }

    proptest::proptest! {
        #[test]
        fn metrics_match_brute_force_recount(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..60)) {
            let (pred, act): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = classification_metrics(&pred, &act, 5).unwrap();
            let n = act.len() as f64;
            let correct = pred.iter().zip(&act).filter(|(p, a)| p == a).count() as f64;
            proptest::prop_assert!((r.accuracy - correct / n).abs() < 1e-9);
            let mut f1 = 0.0;
            for c in 0..5 {
                let tp = pred.iter().zip(&act).filter(|(&p, &a)| p == c && a == c).count() as f64;
                let fp = pred.iter().zip(&act).filter(|(&p, &a)| p == c && a != c).count() as f64;
                let fneg = pred.iter().zip(&act).filter(|(&p, &a)| p != c && a == c).count() as f64;
                f1 += if tp + fp + fneg > 0.0 { 2.0 * tp / (2.0 * tp + fp + fneg) } else { 0.0 };
                proptest::prop_assert_eq!(r.confusion[c].iter().sum::<usize>(), act.iter().filter(|&&a| a == c).count());
            }
            proptest::prop_assert!((r.macro_f1 - f1 / 5.0).abs() < 1e-9);
        }
    }

    fn pairs_for(n_ids: usize, per: usize, count: usize) -> Vec<Pair> {
        let mut out = Vec::new();
        for k in 0..count {
            let id = k % n_ids;
            out.push(Pair { a: id * per, b: id * per + 1 + k % (per - 1), same: true });
            let other = (id + 1 + k % (n_ids - 1)) % n_ids;
            out.push(Pair { a: id * per + k % per, b: other * per + (k / 3) % per, same: false });
        }
        out
    }

    #[test]
    fn folds_partition_pairs_with_balanced_classes() {
        let pairs = pairs_for(7, 5, 103);
        let folds = verification_folds(&pairs, 3).unwrap();
        assert_eq!(folds.len(), FOLDS);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..pairs.len()).collect::<Vec<_>>());
        for f in &folds {
            let pos = f.iter().filter(|&&i| pairs[i].same).count();
            assert!((10..=11).contains(&pos) && (10..=11).contains(&(f.len() - pos)));
        }
        assert_eq!(folds, verification_folds(&pairs, 3).unwrap());
        assert!(verification_folds(&pairs[..10], 0).is_err());
    }

    #[test]
    fn identical_positives_and_orthogonal_negatives_verify_perfectly() {
        // rows of a Sylvester–Hadamard matrix are mutually orthogonal ±1 codes
        let (n_ids, per, d) = (16, 4, 32);
        let code = |id: usize, k: usize| if (id & k).count_ones() % 2 == 0 { 1.0f32 } else { -1.0 };
        let mut feats = Vec::new();
        for id in 0..n_ids {
            let e: Vec<f32> = (0..d).map(|k| code(id, k)).collect();
            feats.extend(core::iter::repeat(e).take(per));
        }
        let pairs = pairs_for(n_ids, per, 200);
        let rep = verification_crossval(&pairs, &feats, ProbeConfig::default()).unwrap();
        assert_eq!(rep.mean, 1.0);
        assert_eq!(rep.accuracies.len(), FOLDS);
    }

    #[test]
    fn random_features_verify_at_chance() {
        let (n_ids, per) = (30, 8);
        let mut r = rng::stream(4, &[]);
        let feats: Vec<Vec<f32>> = (0..n_ids * per).map(|_| normal_vec(&mut r, 64)).collect();
        let rep = verification_crossval(&pairs_for(n_ids, per, 300), &feats, ProbeConfig::default()).unwrap();
        assert!((0.4..=0.6).contains(&rep.mean), "{}", rep.mean);
        let m = rep.accuracies.iter().sum::<f64>() / FOLDS as f64;
        assert!((rep.mean - m).abs() < 1e-12);
    }

    #[test]
    fn fer_feature_with_zero_identity_repeats_latents() {
        let zt = [0.5f32, -1.0];
        let zs = [2.0f32, 3.0];
        let f = fer_feature(&zt, &zs, &[0.0; 2], &[0.0; 2]);
        assert_eq!(f.len(), 8);
        assert_eq!(f[..4], f[4..]);
        assert_eq!(verify_feature(&zt, &zs, &[1.0; 2], &[2.0; 2]), vec![1.0, 1.0, 2.0, 2.0, 0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut head = ProbeHead::new(2, 2, 0);
        head.running_mean = vec![1.0, -1.0];
        head.running_var = vec![4.0, 1.0];
        let z = head.logits(&[vec![1.0, -1.0]]);
        assert_eq!(z, vec![vec![0.0, 0.0]]);
    }
}
