use aff_core::data::{
    accuracy, decode_container, encode_cifar_record, encode_container, gen_synthetic_classification,
    gen_synthetic_segmentation, inside, load_cifar_binary, miou, parse_cifar, read_container, write_container,
    CifarVariant, LabeledImage, Normalization, ShapeKind, SyntheticConfig,
};
use aff_core::{Error, Shape, Tensor};
use proptest::prelude::*;

fn record_bytes(coarse: u8, fine: u8, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut b = vec![coarse, fine];
    b.extend((0..3072).map(pixel));
    b
}

#[test]
fn constructed_record_decodes_to_its_labels() {
    let bytes = record_bytes(3, 7, |_| 255);
    assert_eq!(bytes.len(), 3074);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    std::fs::write(&path, &bytes).unwrap();

    let coarse = load_cifar_binary(&path, CifarVariant::Cifar100Coarse).unwrap();
    assert_eq!(coarse.len(), 1);
    assert_eq!(coarse[0].label, 3);
    assert_eq!(coarse[0].pixels.shape(), Shape::new(1, 3, 32, 32));
    assert!(coarse[0].pixels.data().iter().all(|&v| v == 1.0));

    let fine = load_cifar_binary(&path, CifarVariant::Cifar100Fine).unwrap();
    assert_eq!(fine[0].label, 7);
}

#[test]
fn pixel_planes_are_rgb_row_major() {
    // Byte value encodes (channel, row, column) so every position is checked.
    let bytes = record_bytes(0, 0, |i| ((i / 1024) * 80 + (i % 1024) % 61) as u8);
    let img = &parse_cifar(&bytes, CifarVariant::Cifar100Coarse).unwrap()[0];
    for c in 0..3 {
        for h in 0..32 {
            for w in 0..32 {
                let i = h * 32 + w;
                let want = ((c * 80 + i % 61) as u8) as f64 / 255.0;
                assert_eq!(img.pixels.at(0, c, h, w), want);
            }
        }
    }
}

#[test]
fn truncated_file_reports_offset() {
    let mut bytes = record_bytes(1, 2, |i| i as u8);
    bytes.extend(record_bytes(4, 5, |_| 0));
    bytes.truncate(3074 + 100);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.bin");
    std::fs::write(&path, &bytes).unwrap();
    match load_cifar_binary(&path, CifarVariant::Cifar100Coarse) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 3074),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn out_of_range_label_is_a_format_error() {
    let bytes = record_bytes(20, 0, |_| 0);
    assert!(matches!(parse_cifar(&bytes, CifarVariant::Cifar100Coarse), Err(Error::Format { .. })));
    assert!(parse_cifar(&bytes, CifarVariant::Cifar100Fine).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cifar_record_round_trip_is_bit_exact(pixels in prop::collection::vec(any::<u8>(), 3072), coarse in 0u8..20, fine in 0u8..100) {
        let t = Tensor::new(Shape::new(1, 3, 32, 32), pixels.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
        let rec = encode_cifar_record(&t, &[coarse, fine], CifarVariant::Cifar100Coarse).unwrap();
        prop_assert_eq!(&rec[2..], &pixels[..]);
        let back = parse_cifar(&rec, CifarVariant::Cifar100Coarse).unwrap();
        prop_assert_eq!(back[0].label, coarse as usize);
        for (a, b) in back[0].pixels.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn container_round_trip(seed in any::<u64>(), segment in any::<bool>(), size in 4usize..12) {
        let cfg = SyntheticConfig { image_size: size, count: 9, seed, ..Default::default() };
        let images = if segment { gen_synthetic_segmentation(&cfg) } else { gen_synthetic_classification(&cfg) }.unwrap();
        let quantized: Vec<LabeledImage> = images
            .iter()
            .map(|i| LabeledImage { pixels: i.pixels.map(|v| (v * 255.0).round() / 255.0), ..i.clone() })
            .collect();
        let bytes = encode_container(&images).unwrap();
        prop_assert_eq!(&bytes[..4], b"FSDS");
        let back = decode_container(&bytes).unwrap();
        prop_assert_eq!(back, quantized);
    }
}

#[test]
fn container_file_round_trip_and_corruption() {
    let cfg = SyntheticConfig { count: 5, ..Default::default() };
    let images = gen_synthetic_segmentation(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.fsds");
    write_container(&path, &images).unwrap();
    let back = read_container(&path).unwrap();
    assert_eq!(back.len(), 5);
    assert_eq!(back[2].mask, images[2].mask);

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode_container(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_container(&bad), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn synthetic_sets_are_pure_functions_of_config() {
    let cfg = SyntheticConfig { count: 50, seed: 9, ..Default::default() };
    assert_eq!(gen_synthetic_classification(&cfg).unwrap(), gen_synthetic_classification(&cfg).unwrap());
    let other = SyntheticConfig { seed: 10, ..cfg.clone() };
    assert_ne!(gen_synthetic_classification(&cfg).unwrap(), gen_synthetic_classification(&other).unwrap());
}

#[test]
fn label_histogram_is_uniform() {
    let cfg = SyntheticConfig { count: 10_000, image_size: 4, ..Default::default() };
    let images = gen_synthetic_classification(&cfg).unwrap();
    let mut hist = vec![0usize; cfg.classes];
    for i in &images {
        hist[i.label] += 1;
        assert!(i.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let expected = cfg.count as f64 / cfg.classes as f64;
    for h in hist {
        assert!((h as f64 - expected).abs() <= 0.03 * expected);
    }
}

fn full_frame_template(kind: ShapeKind, s: usize) -> Vec<bool> {
    let half = s as f64 / 2.0;
    (0..s * s)
        .map(|p| {
            let (i, j) = (p / s, p % s);
            inside(kind, (j as f64 + 0.5 - half) / half, (i as f64 + 0.5 - half) / half)
        })
        .collect()
}

/// Within-region pixel variance when the image is split by `template`, and
/// the summed per-channel gap between the two region means.
fn split_stats(img: &Tensor, template: &[bool]) -> (f64, f64) {
    let (mut within, mut gap) = (0.0, 0.0);
    for c in 0..3 {
        let plane = img.plane(0, c);
        let mut means = Vec::new();
        for side in [true, false] {
            let vals: Vec<f64> = plane.iter().zip(template).filter(|(_, &t)| t == side).map(|(v, _)| *v).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            within += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            means.push(m);
        }
        if let [a, b] = means[..] {
            gap += (a - b).abs();
        }
    }
    (within / img.shape().numel() as f64, gap)
}

#[test]
fn full_frame_noise_free_shapes_are_template_separable() {
    let s = 24;
    let cfg = SyntheticConfig { image_size: s, count: 70, scale_min: 1.0, scale_max: 1.0, noise: 0.0, seed: 3, ..Default::default() };
    let templates: Vec<Vec<bool>> = ShapeKind::ALL.iter().map(|&k| full_frame_template(k, s)).collect();
    let images = gen_synthetic_classification(&cfg).unwrap();
    let pred: Vec<usize> = images
        .iter()
        .map(|img| {
            // A template fits when both of its regions are flat; a flat frame
            // is a square, any other template must also separate two colors.
            (0..templates.len())
                .find(|&k| {
                    let (within, gap) = split_stats(&img.pixels, &templates[k]);
                    within < 1e-20 && (k == 0 || gap > 0.1)
                })
                .expect("some template fits")
        })
        .collect();
    let truth: Vec<usize> = images.iter().map(|i| i.label).collect();
    assert_eq!(accuracy(&pred, &truth).unwrap(), 1.0);
}

#[test]
fn full_frame_mask_is_the_analytic_interior() {
    let s = 20;
    let cfg = SyntheticConfig { image_size: s, count: 7, scale_min: 1.0, scale_max: 1.0, ..Default::default() };
    for img in gen_synthetic_segmentation(&cfg).unwrap() {
        let t = full_frame_template(ShapeKind::ALL[img.label], s);
        let want: Vec<u8> = t.iter().map(|&b| if b { img.label as u8 + 1 } else { 0 }).collect();
        assert_eq!(img.mask.unwrap(), want);
    }
}

#[test]
fn empty_scene_has_background_mask() {
    let cfg = SyntheticConfig { objects: 0, count: 4, ..Default::default() };
    for img in gen_synthetic_segmentation(&cfg).unwrap() {
        assert!(img.mask.unwrap().iter().all(|&m| m == 0));
    }
}

#[test]
fn mask_area_matches_sampled_scale() {
    let (s, scale) = (256, 0.3);
    let cfg = SyntheticConfig { image_size: s, count: 14, scale_min: scale, scale_max: scale, seed: 5, ..Default::default() };
    for img in gen_synthetic_segmentation(&cfg).unwrap() {
        let kind = ShapeKind::ALL[img.label];
        let area = img.mask.unwrap().iter().filter(|&&m| m != 0).count() as f64 / (s * s) as f64;
        let want = scale * kind.fill_factor();
        assert!((area - want).abs() / want < 0.02, "{kind:?}: {area} vs {want}");
    }
}

#[test]
fn miou_matches_counting_oracle() {
    let mut state = 17u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize % 2
    };
    let pred: Vec<usize> = (0..500).map(|_| next()).collect();
    let truth: Vec<usize> = (0..500).map(|_| next()).collect();
    let iou = |k: usize| {
        let inter = pred.iter().zip(&truth).filter(|(p, t)| **p == k && **t == k).count() as f64;
        let union = pred.iter().zip(&truth).filter(|(p, t)| **p == k || **t == k).count() as f64;
        inter / union
    };
    let want = (iou(0) + iou(1)) / 2.0;
    assert!((miou(&pred, &truth, 2).unwrap() - want).abs() < 1e-15);
    // A class absent from both sides is excluded.
    assert!((miou(&pred, &truth, 3).unwrap() - want).abs() < 1e-15);
    assert_eq!(miou(&truth, &truth, 2).unwrap(), 1.0);
    assert!(matches!(accuracy(&[], &[]), Err(Error::Input(_))));
}

#[test]
fn normalization_matches_direct_moments() {
    let cfg = SyntheticConfig { count: 20, image_size: 6, ..Default::default() };
    let images = gen_synthetic_classification(&cfg).unwrap();
    let norm = Normalization::fit(&images).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = images.iter().flat_map(|i| i.pixels.plane(0, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((norm.mean[c] - m).abs() < 1e-12);
        assert!((norm.std[c] - v.sqrt()).abs() < 1e-9);
    }
}
