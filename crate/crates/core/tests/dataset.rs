use std::path::Path;

use fedseg::dataset::{
    augment, build_training_set, export_crops, generate_synthetic, load_manifest, load_sample, nearest_resize,
    normalize, render_plate, shift, stack, write_dataset, AugmentConfig, DatasetStats, ImageSample, ManifestRecord,
    PlateGeometry, Split,
};
use fedseg::{rng, Error, Tensor};
use fedseg_oracles::largest_component;
use image::{GrayImage, RgbImage};

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn manifest_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = load_manifest(&write(dir.path(), "e.jsonl", "")).unwrap();
    assert!(empty.records.is_empty());

    let three = "{\"image_path\":\"a.png\",\"mask_path\":\"am.png\",\"split\":\"train\"}\n\
                 {\"image_path\":\"b.png\",\"mask_path\":\"bm.png\",\"split\":\"test\"}\n\n\
                 {\"image_path\":\"c.png\",\"mask_path\":\"cm.png\",\"split\":\"train\",\"id\":\"c\"}\n";
    let m = load_manifest(&write(dir.path(), "m.jsonl", three)).unwrap();
    let ids: Vec<String> = m.records.iter().map(|r| r.id()).collect();
    assert_eq!(ids, ["a.png", "b.png", "c"]);
    assert_eq!(m.split(Split::Train).count(), 2);

    let bad = "{\"image_path\":\"a.png\",\"mask_path\":\"am.png\",\"split\":\"train\"}\n\
               {\"image_path\":\"b.png\",\"mask_path\":\"bm.png\",\"split\":\"validation\"}\n";
    match load_manifest(&write(dir.path(), "bad.jsonl", bad)) {
        Err(Error::Manifest { line: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
    let dup = "{\"image_path\":\"a.png\",\"mask_path\":\"am.png\",\"split\":\"train\"}\n\
               {\"image_path\":\"a.png\",\"mask_path\":\"bm.png\",\"split\":\"test\"}\n";
    assert!(matches!(
        load_manifest(&write(dir.path(), "dup.jsonl", dup)),
        Err(Error::Manifest { line: 2, .. })
    ));
    assert!(matches!(load_manifest(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
}

fn record(img: &str, mask: &str) -> ManifestRecord {
    ManifestRecord {
        id: None,
        image_path: img.into(),
        mask_path: mask.into(),
        split: Split::Train,
    }
}

#[test]
fn mask_binarized_without_geometry_change() {
    let dir = tempfile::tempdir().unwrap();
    let mask = GrayImage::from_fn(8, 6, |x, y| image::Luma([if (x + y) % 3 == 0 { 255 } else { 0 }]));
    mask.save(dir.path().join("m.png")).unwrap();
    RgbImage::from_pixel(8, 6, image::Rgb([255, 0, 51])).save(dir.path().join("i.png")).unwrap();
    let s = load_sample(&record("i.png", "m.png"), dir.path(), 6, 8, 1.0 / 255.0).unwrap();
    assert_eq!(s.mask.shape(), &[6, 8, 3]);
    for y in 0..6 {
        for x in 0..8 {
            let want = if (x + y) % 3 == 0 { 1.0 } else { 0.0 };
            for c in 0..3 {
                assert_eq!(s.mask.data()[(y * 8 + x) * 3 + c], want);
            }
        }
    }
    assert!((s.image.data()[0] - 1.0).abs() < 1e-6);
    assert!((s.image.data()[2] - 0.2).abs() < 1e-6);
}

#[test]
fn downscaled_mask_stays_binary_and_matches_index_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let board = |x: u32, y: u32| if (x + y) % 2 == 0 { 255u8 } else { 0 };
    GrayImage::from_fn(384, 384, |x, y| image::Luma([board(x / 7, y / 5)]))
        .save(dir.path().join("m.png"))
        .unwrap();
    RgbImage::from_pixel(384, 384, image::Rgb([10, 20, 30])).save(dir.path().join("i.png")).unwrap();
    let s = load_sample(&record("i.png", "m.png"), dir.path(), 192, 192, 1.0 / 255.0).unwrap();
    assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));

    let src: Vec<f64> = (0..384 * 384)
        .map(|p| board((p % 384) as u32 / 7, (p / 384) as u32 / 5) as f64 / 255.0)
        .collect();
    let want = fedseg_oracles::nearest_resize(&src, 384, 384, 1, 192, 192);
    let got: Vec<f64> = s.mask.data().chunks(3).map(|p| p[0] as f64).collect();
    assert_eq!(got, want);

    let checker: Vec<f64> = (0..16).map(|p| ((p % 4 + p / 4) % 2) as f64).collect();
    assert_eq!(
        nearest_resize(&checker, 4, 4, 1, 2, 2),
        fedseg_oracles::nearest_resize(&checker, 4, 4, 1, 2, 2)
    );
}

#[test]
fn undecodable_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("i.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("m.png"), b"nope").unwrap();
    assert!(matches!(
        load_sample(&record("i.png", "m.png"), dir.path(), 4, 4, 1.0),
        Err(Error::Decode { .. })
    ));
}

fn constant_sample(v: f32, id: &str) -> ImageSample {
    ImageSample {
        id: id.into(),
        image: Tensor::full([4, 4, 3], v),
        mask: Tensor::zeros([4, 4, 3]),
    }
}

#[test]
fn identity_augmentation() {
    let s = generate_synthetic(1, 32, 32, 1).unwrap().remove(0);
    let mut r = rng::stream(0);
    assert_eq!(augment(&s, &AugmentConfig::identity(), None, &mut r).unwrap(), s);
}

#[test]
fn centering_two_constant_images() {
    let samples = [constant_sample(0.2, "a"), constant_sample(0.8, "b")];
    let stats = DatasetStats::compute(&samples).unwrap();
    let cfg = AugmentConfig {
        featurewise_std_normalization: false,
        featurewise_center: true,
        ..AugmentConfig::identity()
    };
    let out: Vec<ImageSample> = samples.iter().map(|s| normalize(s, &cfg, Some(&stats)).unwrap()).collect();
    for c in 0..3 {
        let mean: f64 = out
            .iter()
            .flat_map(|s| s.image.data().iter().skip(c).step_by(3))
            .map(|&v| v as f64)
            .sum::<f64>()
            / 32.0;
        assert!(mean.abs() < 1e-6, "{mean}");
    }
}

#[test]
fn featurewise_statistics_after_transform() {
    let samples = generate_synthetic(6, 32, 32, 3).unwrap();
    let stats = DatasetStats::compute(&samples).unwrap();
    let cfg = AugmentConfig {
        copies: 0,
        ..AugmentConfig::default()
    };
    let out = build_training_set(&samples, &cfg, Some(&stats)).unwrap();
    let after = DatasetStats::compute(&out).unwrap();
    for c in 0..3 {
        assert!(after.mean[c].abs() < 1e-5, "{:?}", after.mean);
        assert!((after.std[c] - 1.0).abs() < 1e-3, "{:?}", after.std);
    }
    assert!(out.iter().zip(&samples).all(|(a, b)| a.mask == b.mask));
}

#[test]
fn featurewise_flag_without_stats_fails() {
    let s = constant_sample(0.5, "a");
    assert!(matches!(
        normalize(&s, &AugmentConfig::default(), None),
        Err(Error::MissingStats)
    ));
}

#[test]
fn stats_round_trip_json() {
    let dir = tempfile::tempdir().unwrap();
    let stats = DatasetStats::compute(&generate_synthetic(2, 16, 16, 0).unwrap()).unwrap();
    let p = dir.path().join("stats.json");
    stats.save(&p).unwrap();
    assert_eq!(DatasetStats::load(&p).unwrap(), stats);
}

#[test]
fn shift_moves_image_and_mask_together() {
    let geom = PlateGeometry {
        center_y: 10.0,
        center_x: 12.0,
        plate_h: 4.0,
        plate_w: 8.0,
        angle: 0.0,
    };
    let s = render_plate(24, 32, &geom, &mut rng::stream(1)).unwrap();
    let moved = shift(&s, 3, 0);
    let rows = |t: &Tensor| -> Vec<usize> {
        (0..24).filter(|&i| (0..32).any(|j| t.data()[(i * 32 + j) * 3] == 1.0)).collect()
    };
    assert_eq!(rows(&s.mask), (8..12).collect::<Vec<_>>());
    assert_eq!(rows(&moved.mask), (11..15).collect::<Vec<_>>());
    for i in 3..24 {
        for j in 0..32 {
            let a = (i * 32 + j) * 3;
            let b = ((i - 3) * 32 + j) * 3;
            assert_eq!(moved.image.data()[a..a + 3], s.image.data()[b..b + 3]);
        }
    }
    assert!(moved.image.data()[..3 * 32 * 3].iter().all(|&v| v == 0.0));

    let cfg = AugmentConfig {
        featurewise_center: false,
        featurewise_std_normalization: false,
        width_shift_range: 0.25,
        height_shift_range: 0.25,
        ..AugmentConfig::default()
    };
    for seed in 0..20 {
        let a = augment(&s, &cfg, None, &mut rng::stream(seed)).unwrap();
        assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let found = (-6i64..=6)
            .flat_map(|dy| (-8i64..=8).map(move |dx| (dy, dx)))
            .any(|(dy, dx)| shift(&s, dy, dx) == a);
        assert!(found);
    }
}

#[test]
fn axis_aligned_plate_area() {
    let geom = PlateGeometry {
        center_y: 7.0,
        center_x: 13.0,
        plate_h: 6.0,
        plate_w: 14.0,
        angle: 0.0,
    };
    let s = render_plate(32, 32, &geom, &mut rng::stream(2)).unwrap();
    assert_eq!(s.mask.sum(), 6.0 * 14.0 * 3.0);
    let too_big = PlateGeometry {
        plate_w: 40.0,
        center_x: 16.0,
        ..geom
    };
    assert!(render_plate(32, 32, &too_big, &mut rng::stream(2)).is_err());
}

#[test]
fn synthetic_contract() {
    let a = generate_synthetic(40, 64, 64, 9).unwrap();
    for s in &a {
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let frac = s.mask.sum() / s.mask.len() as f32;
        assert!((0.02..=0.30).contains(&frac), "{frac}");
    }
    assert_eq!(a, generate_synthetic(40, 64, 64, 9).unwrap());
    assert_ne!(a[0], generate_synthetic(1, 64, 64, 10).unwrap()[0]);
    assert!(generate_synthetic(0, 64, 64, 9).is_err());
}

#[test]
fn dataset_write_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(3, 32, 32, 4).unwrap();
    let tagged: Vec<_> = samples
        .iter()
        .cloned()
        .zip([Split::Train, Split::Train, Split::Test])
        .collect();
    let path = write_dataset(&tagged, dir.path()).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.records.len(), 3);
    let train = m.load_split(Split::Train, 32, 32, 1.0 / 255.0).unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(train[0].mask, samples[0].mask);
    let err = train[0]
        .image
        .data()
        .iter()
        .zip(samples[0].image.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");

    std::fs::remove_file(dir.path().join("images/syn_00001.png")).unwrap();
    match m.load_split(Split::Train, 32, 32, 1.0) {
        Err(Error::Records { failures }) => assert_eq!(failures.len(), 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn stacking() {
    let s = generate_synthetic(3, 16, 16, 0).unwrap();
    let (x, y) = stack(&s).unwrap();
    assert_eq!(x.shape(), &[3, 16, 16, 3]);
    assert_eq!(y.shape(), &[3, 16, 16, 3]);
    assert!(stack(&[]).is_err());
}

fn mask_from(fg: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::new([h, w, 3], fg.iter().flat_map(|&b| [if b { 1.0 } else { 0.0 }; 3]).collect()).unwrap()
}

#[test]
fn crops() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = generate_synthetic(3, 16, 16, 5).unwrap();
    s[1].id = "b/slash".into();
    let full = mask_from(&[true; 256], 16, 16);
    let empty = mask_from(&[false; 256], 16, 16);
    // Two components: 40 pixels (5×8) and 10 pixels (2×5).
    let mut fg = vec![false; 256];
    for i in 1..6 {
        for j in 2..10 {
            fg[i * 16 + j] = true;
        }
    }
    for i in 10..12 {
        for j in 9..14 {
            fg[i * 16 + j] = true;
        }
    }
    let report = export_crops(&s, &[full, empty, mask_from(&fg, 16, 16)], dir.path()).unwrap();
    assert_eq!(report.files.len(), 2);
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[1].status, "empty_mask");

    let whole = image::open(&report.files[0]).unwrap().to_rgb8();
    assert_eq!(whole, fedseg::dataset::tensor_to_rgb8(&s[0].image).unwrap());

    let ((top, left, bottom, right), area) = largest_component(&fg, 16, 16).unwrap();
    assert_eq!(area, 40);
    let r = &report.rows[2];
    assert_eq!((r.top, r.left, r.top + r.height, r.left + r.width, r.area), (top, left, bottom, right, area));
    let crop = image::open(&report.files[1]).unwrap().to_rgb8();
    assert_eq!(crop.dimensions(), ((right - left) as u32, (bottom - top) as u32));
    let csv = std::fs::read_to_string(dir.path().join("crops.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
