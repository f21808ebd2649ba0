mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scopeformer::cli::dir_digest;
use scopeformer::data::{
    batch_iter, hu_window_stack, parse_dicom_lite, read_manifest, resize_bilinear, synth_generate, synth_samples,
    window_value, write_dicom_lite, write_manifest, CtSlice, DataError, FixtureOptions, ManifestEntry, WindowSpec,
    DEFAULT_WINDOWS,
};
use scopeformer::tensor::Tensor;

/// Scalar bilinear sample with half-pixel centres and edge clamping.
fn bilinear_at(src: &[[f64; 2]; 2], oy: usize, ox: usize, out: usize) -> f64 {
    let coord = |o: usize| ((o as f64 + 0.5) * 2.0 / out as f64 - 0.5).clamp(0.0, 1.0);
    let (y, x) = (coord(oy), coord(ox));
    src[0][0] * (1.0 - y) * (1.0 - x) + src[0][1] * (1.0 - y) * x + src[1][0] * y * (1.0 - x) + src[1][1] * y * x
}

#[test]
fn resize_checkerboard_2x2_to_4x4() {
    let src = [[0.0, 1.0], [1.0, 0.0]];
    let img = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let r = resize_bilinear(&img, 4, 4).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert!((r.get(&[y, x, 0]) - bilinear_at(&src, y, x, 4)).abs() < 1e-15, "({y},{x})");
        }
    }
    // Corners clamp to the source pixels; the inner block is the blend.
    assert_eq!(r.get(&[0, 0, 0]), 0.0);
    assert_eq!(r.get(&[0, 3, 0]), 1.0);
    assert!((r.get(&[1, 1, 0]) - 0.375).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resize_stays_within_input_range(h in 1usize..7, w in 1usize..7, oh in 1usize..12, ow in 1usize..12, seed in 0u64..500) {
        let img = Tensor::uniform(&[h, w, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (lo, hi) = img.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let r = resize_bilinear(&img, oh, ow).unwrap();
        prop_assert_eq!(r.shape(), &[oh, ow, 2]);
        prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn window_is_monotone(a in -2000.0f64..3000.0, b in -2000.0f64..3000.0, c in -500.0f64..500.0, w in 1.0f64..2000.0) {
        let spec = WindowSpec::new(c, w).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(window_value(lo, spec) <= window_value(hi, spec));
        prop_assert!((0.0..=1.0).contains(&window_value(a, spec)));
    }

    #[test]
    fn dicom_writer_parser_round_trip(
        rows in 1usize..6, cols in 1usize..6, signed in any::<bool>(),
        slope_q in 1i32..16, intercept in -2048i32..2048, seed in 0u64..1000,
        include_sequence in any::<bool>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * cols;
        let slope = slope_q as f64 / 4.0;
        let slice = if signed {
            CtSlice::new_signed(rows, cols, (0..n).map(|_| rng.gen_range(-32768..32768)).collect(), slope, intercept as f64)
        } else {
            CtSlice::new(rows, cols, (0..n).map(|_| rng.gen_range(0..65536)).collect(), slope, intercept as f64)
        }.unwrap();
        let bytes = write_dicom_lite(&slice, &FixtureOptions { include_sequence, ..Default::default() }).unwrap();
        let back = parse_dicom_lite(&bytes, "prop").unwrap();
        prop_assert_eq!(&back.pixel_values, &slice.pixel_values);
        prop_assert_eq!((back.rows, back.cols, back.signed), (rows, cols, signed));
        for i in 0..n {
            prop_assert_eq!(back.hu(i), slice.pixel_values[i] as f64 * slope + intercept as f64);
        }
    }
}

#[test]
fn window_stack_matches_formula() {
    let slice = CtSlice::new(1, 3, vec![0, 1024, 1100], 1.0, -1024.0).unwrap();
    let img = hu_window_stack(&slice, &DEFAULT_WINDOWS).unwrap();
    assert_eq!(img.shape(), &[1, 3, 3]);
    // HU -1024, 0, 76 against (40, 80), (80, 200), (40, 380).
    let want = [
        [0.0, 0.0, 0.0],
        [0.0, 0.1, 150.0 / 380.0],
        [0.95, 0.48, 226.0 / 380.0],
    ];
    for (p, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            assert!((img.get(&[0, p, c]) - w).abs() < 1e-12, "pixel {p} channel {c}");
        }
    }
}

#[test]
fn synth_is_deterministic_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_generate(12, 16, 5, a.path()).unwrap();
    synth_generate(12, 16, 5, b.path()).unwrap();
    assert_eq!(dir_digest(a.path()).unwrap(), dir_digest(b.path()).unwrap());
    let c = tempfile::tempdir().unwrap();
    synth_generate(12, 16, 6, c.path()).unwrap();
    assert_ne!(dir_digest(a.path()).unwrap(), dir_digest(c.path()).unwrap());
}

#[test]
fn synth_positive_rate_near_target() {
    let samples = synth_samples(1000, 8, 0);
    for k in 1..6 {
        let rate = samples.iter().filter(|s| s.labels[k] == 1).count() as f64 / 1000.0;
        assert!((0.25..=0.35).contains(&rate), "label {k}: {rate}");
    }
}

fn grid_features(img: &Tensor, grid: usize) -> Vec<f64> {
    let s = img.shape()[0];
    let cell = s / grid;
    let mut f = vec![0.0; grid * grid];
    for y in 0..s {
        for x in 0..s {
            f[(y / cell).min(grid - 1) * grid + (x / cell).min(grid - 1)] += img.get(&[y, x, 0]);
        }
    }
    let norm = (cell * cell) as f64;
    let mut out: Vec<f64> = f.into_iter().map(|v| v / norm).collect();
    out.push(1.0);
    out
}

#[test]
fn synth_labels_are_learnable_by_a_linear_probe() {
    let train = synth_samples(400, 32, 21);
    let test = synth_samples(200, 32, 22);
    let feats = |s: &[scopeformer::data::SynthSample]| -> Vec<(Vec<f64>, f64)> {
        s.iter().map(|s| (grid_features(&s.image, 8), s.labels[1] as f64)).collect()
    };
    let (train, test) = (feats(&train), feats(&test));
    let mut w = vec![0.0; train[0].0.len()];
    for _ in 0..600 {
        let mut g = vec![0.0; w.len()];
        for (x, y) in &train {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += (p - y) * xi;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 2.0 * gi / train.len() as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            (z > 0.0) == (*y == 1.0)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    let majority = test.iter().filter(|(_, y)| *y == 0.0).count() as f64 / test.len() as f64;
    assert!(acc > 0.6 && acc > majority + 0.05, "probe accuracy {acc}, majority {majority}");
}

#[test]
fn batches_cover_epoch_with_short_tail() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(10, 8, 1, dir.path()).unwrap();
    let it = batch_iter(&m, 4, 3, 0);
    assert_eq!(it.num_batches(), 3);
    let mut seen = Vec::new();
    let mut sizes = Vec::new();
    for b in it {
        let b = b.unwrap();
        sizes.push(b.ids.len());
        assert_eq!(b.images.shape(), &[b.ids.len(), 8, 8, 3]);
        seen.extend(b.ids);
    }
    assert_eq!(sizes, [4, 4, 2]);
    seen.sort();
    let mut all: Vec<_> = m.entries.iter().map(|e| e.id.clone()).collect();
    all.sort();
    assert_eq!(seen, all);

    let a: Vec<_> = batch_iter(&m, 4, 3, 0).order().to_vec();
    assert_eq!(a, batch_iter(&m, 4, 3, 0).order());
    assert_ne!(a, batch_iter(&m, 4, 3, 1).order());
}

#[test]
fn batches_resize_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(3, 8, 1, dir.path()).unwrap();
    let b = batch_iter(&m, 3, 0, 0).with_image_size(12).next().unwrap().unwrap();
    assert_eq!(b.images.shape(), &[3, 12, 12, 3]);
}

#[test]
fn missing_sample_error_names_the_id() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(4, 8, 1, dir.path()).unwrap();
    let victim = m.entries[2].clone();
    std::fs::remove_file(m.resolve(&victim)).unwrap();
    let err = m.load_batch(&[0, 1, 2, 3], None).unwrap_err();
    assert!(matches!(&err, DataError::MissingSample { id, .. } if *id == victim.id));
    assert!(err.to_string().contains(&victim.id));
}

#[test]
fn manifest_round_trip_and_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let entries = vec![
        ManifestEntry {
            id: "a".into(),
            path: "a.sfi".into(),
            labels: vec![1, 1, 0, 0, 0, 0],
        },
        ManifestEntry {
            id: "b".into(),
            path: "/abs/b.sfi".into(),
            labels: vec![0; 6],
        },
    ];
    write_manifest(&path, &entries).unwrap();
    let m = read_manifest(&path).unwrap();
    assert_eq!(m.entries, entries);
    assert_eq!(m.resolve(&m.entries[0]), dir.path().join("a.sfi"));
    assert_eq!(m.resolve(&m.entries[1]), std::path::PathBuf::from("/abs/b.sfi"));

    let cases = [
        ("{\"id\":\"a\",\"path\":\"a\",\"labels\":[0,0,0]}\n", 1),
        ("\n{\"id\":\"a\",\"path\":\"a\",\"labels\":[0,0,0,0,0,2]}\n", 2),
        ("{\"id\":\"a\",\"path\":\"a\",\"labels\":[0,0,0,0,0,0],\"x\":1}\n", 1),
        ("not json\n", 1),
    ];
    for (text, want_line) in cases {
        std::fs::write(&path, text).unwrap();
        match read_manifest(&path) {
            Err(DataError::Manifest { line, .. }) => assert_eq!(line, want_line, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    let bad = vec![ManifestEntry {
        id: "c".into(),
        path: "c".into(),
        labels: vec![0; 5],
    }];
    assert!(write_manifest(&path, &bad).is_err());
}
