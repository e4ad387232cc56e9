use proptest::prelude::*;

use revseg::data::augment::{crop_side, Affine, BinaryPlan, CropKind, MulticlassPlan};
use revseg::data::cache::{generate_dataset, load_split, read_manifest, DataSpec};
use revseg::data::image::{crop, Permute};
use revseg::data::{
    augment, generate_sample, image_batch, make_splits, target_batch, AugmentationConfig, Dataset, Image, Mask,
    SplitMode, SyntheticSpec,
};
use revseg::losses::{LossConfig, Target};

fn disc(size: usize, r: f64) -> Mask {
    let c = (size as f64 - 1.0) / 2.0;
    let mut m = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            if d <= r {
                m.labels[y * size + x] = 1;
            }
        }
    }
    m
}

fn histogram(m: &Mask) -> [usize; 256] {
    let mut h = [0; 256];
    for &l in &m.labels {
        h[l as usize] += 1;
    }
    h
}

#[test]
fn mean_foreground_fraction_of_default_spec() {
    let spec = SyntheticSpec::default();
    let total: f64 = (0..500)
        .map(|i| {
            let (_, m) = generate_sample(&spec, i);
            m.foreground() as f64 / m.labels.len() as f64
        })
        .sum();
    let mean = total / 500.0;
    assert!((0.05..=0.35).contains(&mean), "mean foreground fraction {mean}");
}

#[test]
fn synthetic_samples_are_reproducible_and_valid() {
    let spec = SyntheticSpec::multiclass(64, 9);
    for i in 0..20 {
        let (a, m) = generate_sample(&spec, i);
        let (b, n) = generate_sample(&spec, i);
        assert_eq!((&a, &m), (&b, &n));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.labels.iter().all(|&l| l <= 2));
        assert_eq!((a.h, a.w, m.h, m.w), (64, 64, 64, 64));
    }
    let (_, other) = generate_sample(&SyntheticSpec::multiclass(64, 10), 0);
    assert_ne!(generate_sample(&spec, 0).1, other);
}

#[test]
fn no_blobs_means_empty_masks() {
    let spec = SyntheticSpec {
        n_blobs: (0, 0),
        ..SyntheticSpec::default()
    };
    for i in 0..10 {
        assert_eq!(generate_sample(&spec, i).1.foreground(), 0);
    }
}

#[test]
fn spec_validation() {
    assert!(SyntheticSpec { size: 100, ..SyntheticSpec::default() }.validate().is_err());
    assert!(SyntheticSpec { radius: (0.01, 0.2), ..SyntheticSpec::default() }.validate().is_err());
    assert!(AugmentationConfig { p_crop: 1.5, ..AugmentationConfig::default() }.validate().is_err());
}

#[test]
fn rotate90_preserves_area() {
    let spec = SyntheticSpec::default();
    let (img, m) = generate_sample(&spec, 4);
    for k in 1..=3 {
        let (_, r) = Permute::Rot90(k).apply(&img, &m);
        assert_eq!(histogram(&r), histogram(&m));
    }
    let (_, back) = Permute::Rot90(1).apply(&img, &m);
    let (_, back) = Permute::Rot90(3).apply(&img, &back);
    assert_eq!(back, m);
}

#[test]
fn half_turn_affine_keeps_label_multiset() {
    let spec = SyntheticSpec::multiclass(64, 2);
    for i in 0..10 {
        let (img, m) = generate_sample(&spec, i);
        let a = Affine {
            rotation_deg: 180.0,
            ..Affine::identity()
        };
        let (_, r) = a.apply(&img, &m);
        assert_eq!(histogram(&r), histogram(&m));
    }
}

#[test]
fn zoom_scales_centered_area_quadratically() {
    let size = 96;
    let m = disc(size, 18.0);
    let img = Image::new(size, size);
    let a = Affine {
        zoom: (1.2, 1.2),
        ..Affine::identity()
    };
    let (_, z) = a.apply(&img, &m);
    let ratio = z.foreground() as f64 / m.foreground() as f64;
    assert!((ratio / 1.44 - 1.0).abs() <= 0.05, "area ratio {ratio}");
}

#[test]
fn crop_window_counts_match_recount() {
    let size = 96;
    let side = crop_side(size, AugmentationConfig::default().crop_window);
    assert_eq!(side, 56);
    let m = disc(size, 30.0);
    let img = Image::new(size, size);
    let (y0, x0) = (7, 30);
    let (_, c) = crop(&img, &m, y0, x0, side, side);
    let mut want = 0;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            want += (m.get(y, x) != 0) as usize;
        }
    }
    assert_eq!(c.foreground(), want);

    let plan = BinaryPlan {
        apply: true,
        rotate90: None,
        flip: None,
        hsv: None,
        brightness_contrast: None,
        blur: None,
        transpose: false,
        crop: Some(CropKind::Random { y0, x0 }),
    };
    let (_, via_plan) = plan.apply(&img, &m, side, side as f64 / size as f64);
    assert_eq!(via_plan.foreground(), want);
    let center = BinaryPlan {
        crop: Some(CropKind::Center),
        ..plan
    };
    let (_, c) = center.apply(&img, &m, side, side as f64 / size as f64);
    let o = (size - side) / 2;
    assert_eq!(c, crop(&img, &m, o, o, side, side).1);
}

#[test]
fn augmentation_is_a_function_of_seed_epoch_and_index() {
    let spec = SyntheticSpec::default();
    let (img, m) = generate_sample(&spec, 1);
    for cfg in [AugmentationConfig::default(), AugmentationConfig::multiclass()] {
        let a = augment(&img, &m, &mut cfg.rng(3, 7), &cfg, 64);
        let b = augment(&img, &m, &mut cfg.rng(3, 7), &cfg, 64);
        assert_eq!(a, b);
        assert_eq!((a.0.h, a.0.w, a.1.h, a.1.w), (64, 64, 64, 64));
        let differs = (0..20).any(|e| augment(&img, &m, &mut cfg.rng(e, 7), &cfg, 64) != a);
        assert!(differs);
    }
}

#[test]
fn multiclass_plans_respect_configured_ranges() {
    let cfg = AugmentationConfig::multiclass();
    for i in 0..2000 {
        let p = MulticlassPlan::sample(&mut cfg.rng(0, i), &cfg, 96);
        assert!(p.photometric.len() <= 3);
        if let Some(a) = p.affine {
            assert!(a.rotation_deg.abs() <= 180.0 && a.shear_deg.abs() <= 0.1);
            assert!((0.8..=1.2).contains(&a.zoom.0) && (0.8..=1.2).contains(&a.zoom.1));
            assert!(a.shift.0.abs() <= 24.0 && a.shift.1.abs() <= 24.0);
        }
    }
}

#[test]
fn batches_normalize_and_resize() {
    let spec = SyntheticSpec::default();
    let data = Dataset::synthetic(&spec, 3).unwrap();
    let images: Vec<&Image> = data.samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Mask> = data.samples.iter().map(|s| &s.mask).collect();
    let x = image_batch::<f32>(&images, 64).unwrap();
    assert_eq!(x.shape().dims(), [3, 3, 64, 64]);
    let v = data.samples[0].image.get(1, 0, 0);
    let same = image_batch::<f32>(&images[..1], 96).unwrap();
    assert!((same.at(0, 1, 0, 0) - (v - 0.456) / 0.224).abs() < 1e-6);
    match target_batch::<f32>(&masks, 64, 1, &LossConfig::default()).unwrap() {
        Target::Binary { mask, weights } => {
            assert_eq!(mask.shape(), weights.shape());
            assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        Target::Classes { .. } => panic!("binary data gave class labels"),
    }
    assert!(image_batch::<f32>(&[], 64).is_err());
}

#[test]
fn generated_splits_load_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DataSpec {
        synthetic: SyntheticSpec::multiclass(32, 4),
        count: 10,
        split: Some(SplitMode::Holdout { train_fraction: 0.7 }),
        split_seed: 1,
    };
    let dirs = generate_dataset(&spec, dir.path()).unwrap();
    assert_eq!(dirs.len(), 2);
    let train = load_split(&dirs[0]).unwrap();
    let test = load_split(&dirs[1]).unwrap();
    assert_eq!((train.len(), test.len()), (7, 3));
    assert_eq!(train.classes, 2);
    for s in train.samples.iter().chain(&test.samples) {
        let i: u64 = s.id.parse().unwrap();
        let (img, m) = generate_sample(&spec.synthetic, i);
        assert_eq!((&s.image, &s.mask), (&img, &m));
    }
    assert_eq!(read_manifest(&dirs[0]).unwrap().spec, spec.synthetic);

    let folds = DataSpec {
        split: Some(SplitMode::Kfold { k: 5 }),
        ..spec
    };
    let out = tempfile::tempdir().unwrap();
    assert_eq!(generate_dataset(&folds, out.path()).unwrap().len(), 5);
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DataSpec {
        synthetic: SyntheticSpec { size: 32, ..SyntheticSpec::default() },
        count: 2,
        split: None,
        split_seed: 0,
    };
    let all = generate_dataset(&spec, dir.path()).unwrap().remove(0);
    let path = all.join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"size\": 32", "\"size\": 64", 1);
    std::fs::write(&path, text).unwrap();
    assert!(load_split(&all).is_err());
}

proptest! {
    #[test]
    fn kfold_test_sets_partition(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let splits = make_splits(n, SplitMode::Kfold { k }, seed).unwrap();
        prop_assert_eq!(splits.len(), k);
        let mut seen = vec![0u32; n];
        for s in &splits {
            prop_assert_eq!(s.train.len() + s.test.len(), n);
            prop_assert!(s.test.len() >= n / k && s.test.len() <= n.div_ceil(k));
            for &i in &s.test {
                seen[i] += 1;
                prop_assert!(s.train.binary_search(&i).is_err());
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn holdout_is_a_seeded_partition(n in 2usize..300, f in 0.05f64..0.95, seed in any::<u64>()) {
        let a = make_splits(n, SplitMode::Holdout { train_fraction: f }, seed).unwrap();
        let b = make_splits(n, SplitMode::Holdout { train_fraction: f }, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let s = &a[0];
        prop_assert_eq!(s.train.len(), (n as f64 * f).round() as usize);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn geometric_plans_move_labels_with_pixels(index in 0u64..1000, seed in any::<u64>()) {
        let spec = SyntheticSpec { size: 32, ..SyntheticSpec::multiclass(32, seed) };
        let (_, m) = generate_sample(&spec, index);
        let mut img = Image::new(32, 32);
        for (i, &l) in m.labels.iter().enumerate() {
            img.data[i] = l as f32 / 2.0;
        }
        let cfg = AugmentationConfig { p_apply: 1.0, p_crop: 0.0, ..AugmentationConfig::default() };
        let mut plan = BinaryPlan::sample(&mut cfg.rng(seed, index), &cfg, 32);
        plan.hsv = None;
        plan.brightness_contrast = None;
        plan.blur = None;
        let (a, b) = plan.apply(&img, &m, 32, cfg.crop_window);
        for (v, &l) in a.plane(0).iter().zip(&b.labels) {
            prop_assert_eq!(*v, l as f32 / 2.0);
        }
    }
}
