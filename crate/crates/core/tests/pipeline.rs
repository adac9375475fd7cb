use std::path::Path;

use texfill::data::{make_synthetic_dataset, DatasetManifest, Split, TextureKind};
use texfill::masking::{build_mask_suite, MaskSource, MaskSuite};
use texfill::metrics::psnr;
use texfill::train::{evaluate, HoleFill, IdentitySurrogate, TrainConfig, Trainer, ZeroFill};
use texfill::Tensor;

fn config(pairs: &[(&str, &str)]) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("image_size", "32"),
        ("batch_size", "8"),
        ("gen_base_channels", "4"),
        ("gen_depth", "2"),
        ("disc_channels", "4,8,8"),
    ] {
        c.set(k, v).unwrap();
    }
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

fn images(n: usize, kinds: &[TextureKind], size: usize) -> Vec<Tensor> {
    make_synthetic_dataset(n, 0, kinds, 3, size, 3)
        .unwrap()
        .load_split(Split::Train, Path::new("."))
        .unwrap()
}

#[test]
fn reconstruction_alone_overfits_a_fixed_batch() {
    let imgs = images(8, &[TextureKind::Stripes], 32);
    // default generator width; the critic is unused with both weights at zero
    let mut t = Trainer::new(config(&[
        ("gen_base_channels", "16"),
        ("gen_depth", "3"),
        ("lambda_adv", "0"),
        ("gamma", "0"),
        ("lr_gen", "1e-3"),
        ("seed", "4"),
    ]))
    .unwrap();
    let batch = Tensor::stack(&imgs).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        last = t.train_step(&batch).unwrap().l_r;
    }
    assert!(last < 0.01, "L_r after 300 steps: {last}");
}

#[test]
fn identity_surrogate_is_perfect_and_zero_fill_is_not() {
    let imgs = images(6, &TextureKind::ALL, 32);
    let suite = build_mask_suite(MaskSource::Rectangles, 32, 32, 9, 6).unwrap();
    let ident = evaluate(&IdentitySurrogate(&imgs), "identity", "-", &imgs, &suite, HoleFill::Zero).unwrap();
    for r in &ident.records {
        assert!(r.psnr_db.is_infinite() && r.psnr_db > 0.0);
        assert_eq!(r.ssim, 1.0);
    }
    let zero = evaluate(&ZeroFill, "zero", "-", &imgs, &suite, HoleFill::Zero).unwrap();
    let mean = zero.records.iter().map(|r| r.psnr_db).sum::<f64>() / zero.records.len() as f64;
    assert!((zero.aggregate.psnr_db.mean - mean).abs() < 1e-12);
    assert_eq!(zero.aggregate.psnr_db.count, 6);
    for (r, (x, m)) in zero.records.iter().zip(imgs.iter().zip(&suite.masks)) {
        let filled = texfill::masking::apply_mask(x, m, 0.0).unwrap();
        assert_eq!(r.psnr_db, psnr(&filled, x, 1.0).unwrap());
    }
    let csv = zero.to_csv();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn a_short_mask_suite_is_rejected() {
    let imgs = images(6, &[TextureKind::Checker], 32);
    let suite = build_mask_suite(MaskSource::Rectangles, 32, 32, 9, 5).unwrap();
    assert!(evaluate(&ZeroFill, "zero", "-", &imgs, &suite, HoleFill::Zero).is_err());
    let wrong_size = build_mask_suite(MaskSource::Rectangles, 16, 16, 9, 6).unwrap();
    assert!(evaluate(&ZeroFill, "zero", "-", &imgs, &wrong_size, HoleFill::Zero).is_err());
}

#[test]
fn untrained_segmentation_map_is_near_one_half() {
    let imgs = images(2, &[TextureKind::SinusoidMix], 32);
    let t = Trainer::new(config(&[("seed", "11")])).unwrap();
    for x in &imgs {
        let logits = t.logits(x).unwrap();
        let mean_p = logits.data().iter().map(|&l| 1.0 / (1.0 + (-l).exp())).sum::<f64>() / logits.len() as f64;
        assert!((mean_p - 0.5).abs() < 0.1, "mean probability {mean_p}");
    }
}

#[test]
fn manifest_and_mask_suite_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_synthetic_dataset(5, 3, &TextureKind::ALL, 8, 32, 3).unwrap();
    let p = dir.path().join("manifest.txt");
    m.save(&p).unwrap();
    let back = DatasetManifest::load(&p).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.split(Split::Test).len(), 3);

    let suite = build_mask_suite(MaskSource::Rectangles, 32, 32, 21, 4).unwrap();
    let p = dir.path().join("masks.bin");
    suite.save(&p).unwrap();
    let back = MaskSuite::load(&p).unwrap();
    assert_eq!(back.masks.len(), 4);
    assert_eq!(back.seed, 21);
    for (a, b) in back.masks.iter().zip(&suite.masks) {
        assert_eq!(a.tensor().data(), b.tensor().data());
    }
}

#[test]
fn same_seed_same_suite_different_seed_different_suite() {
    let a = build_mask_suite(MaskSource::Rectangles, 32, 32, 5, 3).unwrap();
    let b = build_mask_suite(MaskSource::Rectangles, 32, 32, 5, 3).unwrap();
    let c = build_mask_suite(MaskSource::Rectangles, 32, 32, 6, 3).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
}
