use latentface_core::diffusion::{ddim_sample, make_schedule, LatentNorm, X0Predictor};
use latentface_core::probe::{verification_folds, Pair};
use latentface_core::render::{self, Camera, Light, Map, Pose};
use latentface_core::stats::{l2_distance, spearman};
use latentface_core::synth::{corpus_labels, sample_pairs, SynthConfig, CLASSES};
use latentface_core::Tensor;
use proptest::prelude::*;

struct Fixed(Vec<f64>);

impl X0Predictor<f64> for Fixed {
    fn predict(&self, z: &Tensor<f64>, _tau: usize, _c: &Tensor<f64>) -> Tensor<f64> {
        let n = z.dim(0);
        Tensor::from_vec(&[n, self.0.len()], self.0.repeat(n))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hflip_is_an_involution(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let data: Vec<f64> = (0..c * h * w).map(|k| ((k as u64).wrapping_mul(seed | 1) % 997) as f64).collect();
        let m = Map::new(c, h, w, data);
        prop_assert_eq!(m.hflip().hflip(), m.clone());
        prop_assert_eq!(m.hflip().at(c - 1, h - 1, 0), m.at(c - 1, h - 1, w - 1));
    }

    #[test]
    fn ddim_returns_a_constant_oracle(star in prop::collection::vec(-5.0f64..5.0, 1..6), steps in 1usize..60, seed in any::<u64>()) {
        let sched = make_schedule(1000).unwrap();
        let cond = Tensor::from_vec(&[2, star.len()], vec![0.0; 2 * star.len()]);
        let out = ddim_sample(&Fixed(star.clone()), &cond, &sched, steps, seed).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            prop_assert!((v - star[i % star.len()]).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_norm_inverts(rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 4), 2..10)) {
        let norm = LatentNorm::fit(rows.iter().map(Vec::as_slice));
        for r in &rows {
            let back = norm.denormalize(&norm.normalize(r));
            prop_assert!(l2_distance(&back, r) < 1e-4);
        }
    }

    #[test]
    fn spearman_ignores_monotone_maps(x in prop::collection::vec(-10.0f64..10.0, 3..40)) {
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let distinct = x.iter().enumerate().all(|(i, a)| x[i + 1..].iter().all(|b| a != b));
        prop_assume!(distinct);
        prop_assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        prop_assert!((spearman(&x, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn verification_folds_partition_balanced(pos in 10usize..60, neg in 10usize..60, seed in any::<u64>()) {
        let pairs: Vec<Pair> = (0..pos + neg).map(|k| Pair { a: k, b: k + 1, same: k < pos }).collect();
        let folds = verification_folds(&pairs, seed).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..pos + neg).collect::<Vec<_>>());
        for f in &folds {
            let p = f.iter().filter(|&&i| pairs[i].same).count();
            prop_assert!(p >= pos / 10 && p <= pos.div_ceil(10));
        }
    }
}

#[test]
fn synthetic_labels_are_class_balanced_per_identity() {
    let cfg = SynthConfig { identities: 6, frames: 8, ..SynthConfig::default() };
    let labels = corpus_labels(&cfg).unwrap();
    assert_eq!(labels.len(), 48);
    for id in 0..6 {
        let mut counts = [0usize; CLASSES];
        labels.iter().filter(|l| l.identity == id).for_each(|l| counts[l.class] += 1);
        assert_eq!(counts, [2; CLASSES]);
    }
}

#[test]
fn sampled_pairs_are_distinct_and_labelled_by_identity() {
    let cfg = SynthConfig { identities: 5, frames: 6, ..SynthConfig::default() };
    let labels = corpus_labels(&cfg).unwrap();
    let pairs = sample_pairs(&labels, 20, 3);
    assert_eq!(pairs.iter().filter(|p| p.2).count(), 20);
    assert_eq!(pairs.iter().filter(|p| !p.2).count(), 20);
    let mut keys: Vec<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
    keys.sort_unstable();
    keys.dedup();
    assert_eq!(keys.len(), 40);
    assert!(pairs.iter().all(|&(a, b, same)| a < b && (labels[a].identity == labels[b].identity) == same));
    assert_eq!(sample_pairs(&labels, 20, 3), pairs);
}

#[test]
fn frontalize_is_identity_pose_under_neutral_light() {
    let a = Map::new(3, 16, 16, (0..768).map(|k| 0.2 + 0.6 * ((k * 37 % 101) as f64 / 101.0)).collect());
    let d = Map::new(1, 16, 16, (0..256).map(|k| 1.0 + 0.05 * ((k as f64) * 0.3).sin()).collect());
    let cam = Camera::default();
    let f = render::frontalize(&a, &d, &cam).unwrap();
    let direct = render::render(&a, &d, &Pose::identity(), &Light::neutral(), &cam).unwrap();
    assert_eq!(f, direct.image);
}
