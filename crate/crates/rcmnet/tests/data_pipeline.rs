//! Dataset mechanics: codec byte layouts, split and balance arithmetic,
//! augmentation counting and pixel-exact geometry, and separability of the
//! synthetic classes by a trivial classifier.

mod common;

use rcmnet::data::{
    self, AUGMENT_SUFFIXES, LabeledDataset, Provenance, Raster, Sample, SplitSpec,
};

fn flat_dataset(counts: &[usize], side: usize) -> LabeledDataset {
    let mut samples = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let mut img = Raster::new(side, side);
            img.set(0, 0, 0, (i % 256) as u8);
            samples.push(Sample { image: img, label });
        }
    }
    LabeledDataset {
        class_names: (0..counts.len()).map(|k| format!("c{k}")).collect(),
        samples,
        provenance: Provenance::Synthetic,
    }
}

#[test]
fn p6_codec_round_trips_hand_written_bytes() {
    // 2x1 image: red pixel then blue pixel, interleaved in the file
    let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff";
    let img = data::decode_netpbm(bytes).unwrap();
    assert_eq!((img.width, img.height), (2, 1));
    assert_eq!(img.get(0, 0, 0), 255);
    assert_eq!(img.get(2, 0, 1), 255);
    assert_eq!(img.get(1, 0, 0), 0);
    let rt = data::decode_netpbm(&data::encode_p6(&img)).unwrap();
    assert_eq!(rt.data, img.data);
}

#[test]
fn p5_grayscale_replicates_across_channels() {
    let bytes = b"P5\n# a comment\n2 2\n255\n\x00\x40\x80\xff";
    let img = data::decode_netpbm(bytes).unwrap();
    for c in 0..3 {
        assert_eq!(img.get(c, 0, 1), 0x40);
        assert_eq!(img.get(c, 1, 1), 0xff);
    }
}

#[test]
fn codec_rejects_malformed_headers() {
    assert!(data::decode_netpbm(b"P4\n2 2\n255\n....").is_err());
    assert!(data::decode_netpbm(b"P6\n2 2\n127\n......").is_err()); // maxval
    assert!(data::decode_netpbm(b"P6\n2 2\n255\n\x00").is_err()); // truncated
}

#[test]
fn split_arithmetic_rounds_per_class() {
    // per-class 250 -> 200 train / 50 test
    let (train, test) = data::split_train_test(
        &flat_dataset(&[250, 250], 4),
        &SplitSpec { train_fraction: 0.8, seed: 1 },
    )
    .unwrap();
    assert_eq!(train.class_counts(), vec![200, 200]);
    assert_eq!(test.class_counts(), vec![50, 50]);

    // per-class 1214 -> 971 train / 243 test
    let (train, test) = data::split_train_test(
        &flat_dataset(&[1214, 1214], 2),
        &SplitSpec { train_fraction: 0.8, seed: 1 },
    )
    .unwrap();
    assert_eq!(train.class_counts(), vec![971, 971]);
    assert_eq!(test.class_counts(), vec![243, 243]);
}

#[test]
fn split_is_disjoint_exhaustive_and_deterministic() {
    let ds = data::synth_generate(3, 20, 16, 5).unwrap();
    let spec = SplitSpec { train_fraction: 0.8, seed: 9 };
    let (tr1, te1) = data::split_train_test(&ds, &spec).unwrap();
    let (tr2, te2) = data::split_train_test(&ds, &spec).unwrap();
    assert_eq!(tr1.samples.len() + te1.samples.len(), ds.samples.len());

    let key = |s: &Sample| (s.label, s.image.data.clone());
    let train_keys: Vec<_> = tr1.samples.iter().map(key).collect();
    assert!(te1.samples.iter().all(|s| !train_keys.contains(&key(s))));

    // same seed, same partition; different seed, different partition
    assert_eq!(train_keys, tr2.samples.iter().map(key).collect::<Vec<_>>());
    assert_eq!(te1.samples.iter().map(key).collect::<Vec<_>>(), te2.samples.iter().map(key).collect::<Vec<_>>());
    let (tr3, _) = data::split_train_test(&ds, &SplitSpec { train_fraction: 0.8, seed: 10 }).unwrap();
    assert_ne!(train_keys, tr3.samples.iter().map(key).collect::<Vec<_>>());
}

#[test]
fn balancing_truncates_to_smallest_class() {
    let ds = flat_dataset(&[3329, 1214], 2);
    let balanced = data::balance_classes(&ds, 0).unwrap();
    assert_eq!(balanced.class_counts(), vec![1214, 1214]);
    // deterministic under the same seed
    let again = data::balance_classes(&ds, 0).unwrap();
    let key = |s: &Sample| (s.label, s.image.data.clone());
    assert_eq!(
        balanced.samples.iter().map(key).collect::<Vec<_>>(),
        again.samples.iter().map(key).collect::<Vec<_>>()
    );
}

#[test]
fn augmentation_multiplies_counts_by_six() {
    // 500 source samples -> exactly 3000 augmented
    let ds = flat_dataset(&[250, 250], 4);
    let aug = data::augment(&ds).unwrap();
    assert_eq!(aug.samples.len(), 3000);
    assert_eq!(aug.class_counts(), vec![1500, 1500]);
    assert_eq!(AUGMENT_SUFFIXES.len(), 5);
}

#[test]
fn rotations_and_flips_are_pixel_exact() {
    let mut img = Raster::new(3, 3);
    let mut v = 0u8;
    for y in 0..3 {
        for x in 0..3 {
            for c in 0..3 {
                img.set(c, y, x, v);
                v = v.wrapping_add(7);
            }
        }
    }
    // four quarter turns come back to the start
    let r1 = data::rotate90(&img);
    let r2 = data::rotate90(&r1);
    let r3 = data::rotate90(&r2);
    let r4 = data::rotate90(&r3);
    assert_eq!(r4.data, img.data);
    assert_eq!(r2.data, data::rotate180(&img).data);
    assert_eq!(r3.data, data::rotate270(&img).data);

    // flips are involutions
    assert_eq!(data::flip_horizontal(&data::flip_horizontal(&img)).data, img.data);
    assert_eq!(data::flip_vertical(&data::flip_vertical(&img)).data, img.data);

    // clockwise quarter turn: top-left corner moves to top-right
    let corner = img.get(0, 0, 0);
    assert_eq!(r1.get(0, 0, 2), corner);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data::synth_generate(3, 4, 16, 7).unwrap();
    let written = data::save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(written, 12);
    let (loaded, problems) = data::load_dataset(dir.path()).unwrap();
    assert!(problems.is_empty());
    assert_eq!(loaded.class_names, ds.class_names);
    assert_eq!(loaded.class_counts(), ds.class_counts());
    // class folders sort identically, so pixel content must survive
    let mut a: Vec<_> = ds.samples.iter().map(|s| (s.label, s.image.data.clone())).collect();
    let mut b: Vec<_> = loaded.samples.iter().map(|s| (s.label, s.image.data.clone())).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn synthetic_generation_is_deterministic_and_distinct() {
    let a = data::synth_generate(4, 5, 24, 11).unwrap();
    let b = data::synth_generate(4, 5, 24, 11).unwrap();
    let c = data::synth_generate(4, 5, 24, 12).unwrap();
    let key = |ds: &LabeledDataset| -> Vec<Vec<u8>> {
        ds.samples.iter().map(|s| s.image.data.clone()).collect()
    };
    assert_eq!(key(&a), key(&b));
    assert_ne!(key(&a), key(&c));
    assert_eq!(a.class_counts(), vec![5, 5, 5, 5]);
}

#[test]
fn synthetic_classes_separate_under_a_decision_stump() {
    // a single threshold on the mean intensity of the central patch must
    // already separate filled disks (class 0) from rings (class 1)
    let ds = data::synth_generate(2, 50, 32, 3).unwrap();
    let feature = |img: &Raster| -> f64 {
        let mut acc = 0.0;
        for y in 12..20 {
            for x in 12..20 {
                acc += img.get(0, y, x) as f64;
            }
        }
        acc / 64.0
    };
    let pts: Vec<(f64, usize)> = ds.samples.iter().map(|s| (feature(&s.image), s.label)).collect();
    let mut best = 0usize;
    for &(threshold, _) in &pts {
        for polarity in [false, true] {
            let correct = pts
                .iter()
                .filter(|(f, label)| ((*f >= threshold) == polarity) == (*label == 0))
                .count();
            best = best.max(correct);
        }
    }
    assert!(
        best as f64 / pts.len() as f64 >= 0.9,
        "stump accuracy {}/{}",
        best,
        pts.len()
    );
}
