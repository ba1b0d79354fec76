use cradl_core::data::{
    build_dataset, build_split, generate_normal, inject_anomaly, preprocess, resize, slice_label, Dataset, Split,
    SplitSet, SynthConfig, TextureFamily,
};
use cradl_core::data::image::zscore;
use cradl_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SynthConfig {
    SynthConfig {
        resolution: 32,
        n_train: 30,
        n_holdout: 10,
        n_val: 40,
        n_test: 40,
        ..SynthConfig::default()
    }
}

fn check_sample_invariants(ds: &Dataset) {
    for s in &ds.samples {
        assert!(s.anomaly_mask.iter().zip(&s.brain_mask).all(|(&a, &b)| !a || b));
        let count = s.anomaly_mask.iter().filter(|&&a| a).count();
        assert_eq!(s.slice_label, count > 5);
        assert!(s.image.data().iter().all(|v| (-1.5..=1.5).contains(v)));
        assert_eq!(s.image.shape(), &[ds.resolution, ds.resolution]);
    }
}

#[test]
fn mask_area_stays_within_bounds_over_many_seeds() {
    let cfg = SynthConfig::default();
    for seed in 0..1000 {
        let (img, mask) = generate_normal(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!((0.25..=0.75).contains(&frac), "seed {seed}: {frac}");
        assert!(img.data().iter().zip(&mask).all(|(&v, &m)| m || v == 0.0));
    }
}

#[test]
fn anomaly_contrast_is_visible() {
    let cfg = SynthConfig::default();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, brain) = generate_normal(&cfg, &mut rng).unwrap();
        let (out, ano) = inject_anomaly(&img, &brain, &mut rng, cfg.anomaly_size, TextureFamily::Mixed).unwrap();
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let inside: Vec<f32> = (0..img.len())
            .filter(|&k| ano[k])
            .map(|k| (out.data()[k] - img.data()[k]).abs())
            .collect();
        let mean = inside.iter().sum::<f32>() / inside.len() as f32;
        assert!(mean > 0.1 * (hi - lo), "seed {seed}: {mean} vs range {}", hi - lo);
        for k in 0..img.len() {
            if !ano[k] {
                assert_eq!(out.data()[k].to_bits(), img.data()[k].to_bits());
            }
        }
    }
}

#[test]
fn zero_pixel_anomaly_is_rejected() {
    let cfg = SynthConfig { resolution: 16, oversample: 1, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (img, _) = generate_normal(&cfg, &mut rng).unwrap();
    let mut tiny = vec![false; img.len()];
    tiny[8 * 16 + 8] = true;
    assert!(inject_anomaly(&img, &tiny, &mut rng, [0.01, 0.02], TextureFamily::Stripes).is_err());
    assert!(inject_anomaly(&img, &vec![false; img.len()], &mut rng, [0.1, 0.2], TextureFamily::Stripes).is_err());
    assert!(inject_anomaly(&img, &tiny, &mut rng, [0.1, 0.6], TextureFamily::Stripes).is_err());
}

#[test]
fn constant_image_cannot_be_preprocessed() {
    assert!(preprocess(&Tensor::full(&[8, 8], 0.7)).is_err());
}

#[test]
fn slice_label_uses_strict_threshold() {
    let mut m = vec![false; 64];
    m[..5].fill(true);
    assert!(!slice_label(&m));
    m[5] = true;
    assert!(slice_label(&m));
}

#[test]
fn splits_hold_their_invariants() {
    let set = build_dataset(&small()).unwrap();
    assert!(set.train.labels().iter().all(|&l| !l));
    assert!(set.holdout.labels().iter().all(|&l| !l));
    for split in Split::ALL {
        check_sample_invariants(set.get(split));
    }
    assert_eq!(set.val.labels().iter().filter(|&&l| l).count(), 8);
}

#[test]
fn val_prevalence_matches_configuration() {
    let cfg = SynthConfig { n_val: 1000, ..small() };
    let val = build_split(&cfg, Split::Val).unwrap();
    assert!((val.slice_prevalence() - 0.2).abs() <= 0.02, "{}", val.slice_prevalence());
}

#[test]
fn regenerated_dataset_is_bit_identical_on_disk() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small()).unwrap().save(a.path()).unwrap();
    build_dataset(&small()).unwrap().save(b.path()).unwrap();
    for split in Split::ALL {
        let mut names: Vec<_> = std::fs::read_dir(a.path().join(split.name()))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 3 * build_split(&small(), split).unwrap().len() + 1);
        for name in names {
            let x = std::fs::read(a.path().join(split.name()).join(&name)).unwrap();
            let y = std::fs::read(b.path().join(split.name()).join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
    }
    let index = std::fs::read_to_string(a.path().join("val").join("index.txt")).unwrap();
    assert!(index.lines().all(|l| l.len() == 8 && (l.ends_with(",0") || l.ends_with(",1"))));
    let loaded = SplitSet::load(a.path()).unwrap();
    assert_eq!(loaded.test, build_split(&small(), Split::Test).unwrap());
}

#[test]
fn different_seeds_give_different_data() {
    let a = build_split(&small(), Split::Train).unwrap();
    let b = build_split(&SynthConfig { seed: 1, ..small() }, Split::Train).unwrap();
    assert_ne!(a.samples[0].image, b.samples[0].image);
}

#[test]
fn resize_hand_values() {
    let c = Tensor::full(&[6, 6], -0.5);
    assert!(resize(&c, 3, 11).unwrap().data().iter().all(|&v| (v + 0.5).abs() < 1e-7));
    let two = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let out = resize(&two, 2, 4).unwrap();
    assert!(out.data()[..4].windows(2).all(|p| p[0] <= p[1]));
    assert!(resize(&two, 1, 4).is_err());
}

proptest! {
    #[test]
    fn preprocess_is_affine_invariant(seed in any::<u64>(), a in 0.5f32..4.0, b in -3.0f32..3.0) {
        let cfg = SynthConfig { resolution: 32, ..SynthConfig::default() };
        let (raw, _) = generate_normal(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let base = preprocess(&raw).unwrap();
        let moved = preprocess(&raw.map(|v| a * v + b)).unwrap();
        prop_assert!(base.max_abs_diff(&moved) < 1e-4);
        let z = zscore(&raw).unwrap();
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let std = (z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-5);
        prop_assert!(base.data().iter().all(|v| (-1.5..=1.5).contains(v)));
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let cfg = SynthConfig { resolution: 32, ..SynthConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (img, brain) = generate_normal(&cfg, &mut rng).unwrap();
            inject_anomaly(&img, &brain, &mut rng, cfg.anomaly_size, cfg.texture).unwrap()
        };
        let (a, ma) = run();
        let (b, mb) = run();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ma, mb);
    }
}
