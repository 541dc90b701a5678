mod common;

use std::path::PathBuf;

use cbamnet_core::preprocess::{
    clahe, clahe_plane, denormalize, median_filter, normalize, read_image, read_tensor_dump,
    run_pipeline, write_tensor_dump, Image, PreprocessConfig,
};
use common::oracles;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.random()).unwrap()
}

#[test]
fn median_equals_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..40 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let img = random_image(h, w, 1 + 2 * (case % 2), &mut rng);
        for k in [3, 5] {
            assert_eq!(
                median_filter(&img, k).unwrap(),
                oracles::median_filter(&img, k),
                "case {case} k {k}"
            );
        }
    }
}

#[test]
fn clahe_leaves_constant_images() {
    for v in 0..=255u8 {
        let img = Image::filled(24, 24, 1, v).unwrap();
        assert_eq!(clahe(&img, (8, 8), 2.0).unwrap(), img);
    }
}

/// 64×64 with distinct textures in the left and right halves.
fn two_tile_fixture() -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    Image::from_fn(64, 64, 1, |y, x, _| {
        if x < 32 {
            (40 + (y * 3 + x) % 50) as u8
        } else {
            let base = 120 + ((x * x + y) % 90) as i32;
            (base + rng.random_range(-10..=10)).clamp(0, 255) as u8
        }
    })
    .unwrap()
}

#[test]
fn clahe_matches_two_tile_oracle() {
    let img = two_tile_fixture();
    for clip in [1.5, 2.0, 4.0, 40.0] {
        let got = clahe_plane(img.pixels(), 64, 64, (1, 2), clip).unwrap();
        let expect = oracles::clahe_two_tiles(&img, clip);
        assert_eq!(got, expect.pixels(), "clip {clip}");
    }
}

#[test]
fn normalize_round_trips_every_level() {
    let img = Image::from_fn(16, 16, 1, |y, x, _| (y * 16 + x) as u8).unwrap();
    let t = normalize(&img);
    for (i, v) in t.data().iter().enumerate() {
        assert_eq!(*v, i as f64 / 255.0);
        assert!((0.0..=1.0).contains(v));
    }
    assert_eq!(denormalize(&t).unwrap(), img);
}

fn golden_config() -> PreprocessConfig {
    PreprocessConfig {
        target_size: (32, 32),
        clahe_tiles: (4, 4),
        ..PreprocessConfig::default()
    }
}

#[test]
fn golden_fixture_is_byte_stable() {
    let img = read_image(fixtures().join("sample32.pgm")).unwrap();
    let t = run_pipeline(&img, &golden_config(), None).unwrap();
    if std::env::var_os("CBAMNET_BLESS").is_some() {
        write_tensor_dump(&fixtures(), "sample32", &t, "golden").unwrap();
    }
    let (golden, sidecar) = read_tensor_dump(&fixtures(), "sample32").unwrap();
    assert_eq!(sidecar.shape, vec![1, 32, 32]);
    assert_eq!(t.to_le_bytes(), golden.to_le_bytes());
}

#[test]
fn constant_image_without_padding_gives_constant_tensor() {
    let cfg = PreprocessConfig {
        pad: 0,
        ..PreprocessConfig::default()
    };
    for v in [0u8, 77, 255] {
        let t = run_pipeline(&Image::filled(50, 70, 3, v).unwrap(), &cfg, None).unwrap();
        assert!(t.data().iter().all(|&x| x == v as f64 / 255.0));
    }
}

#[test]
fn augmented_pipeline_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = random_image(40, 40, 3, &mut rng);
    let cfg = PreprocessConfig::default();
    let a = run_pipeline(&img, &cfg, Some(5)).unwrap();
    assert_eq!(a, run_pipeline(&img, &cfg, Some(5)).unwrap());
    assert_eq!(a.shape(), &[3, 96, 96]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn median_keeps_values_within_range(seed in 0u64..100_000, h in 1usize..12, w in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(h, w, 1, &mut rng);
        let out = median_filter(&img, 3).unwrap();
        let (lo, hi) = (img.pixels().iter().min().unwrap(), img.pixels().iter().max().unwrap());
        prop_assert!(out.pixels().iter().all(|v| v >= lo && v <= hi));
    }

    #[test]
    fn clahe_is_monotone_within_a_tile(seed in 0u64..100_000) {
        // A single tile applies one non-decreasing table to every pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(16, 16, 1, &mut rng);
        let out = clahe(&img, (1, 1), 2.0).unwrap();
        let mut pairs: Vec<(u8, u8)> = img.pixels().iter().copied().zip(out.pixels().iter().copied()).collect();
        pairs.sort();
        prop_assert!(pairs.windows(2).all(|p| p[0].1 <= p[1].1));
    }
}
