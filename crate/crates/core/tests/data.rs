use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slc_core::data::augment::{augment, AugmentConfig};
use slc_core::data::dataset::{load_dataset, write_dataset};
use slc_core::data::image::Image;
use slc_core::data::raster::{load_image, load_labels, save_image, save_labels};
use slc_core::data::synth::{generate_synthetic, SynthSpec, SynthVariant};
use slc_core::data::tiles::{make_tile_grid, merge_predictions, Merge, TileLogits};
use slc_core::LabelMap;
use slc_tensor::Tensor;

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    // Values on the 8-bit grid survive a PNG round trip exactly.
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect()).unwrap()
}

/// Tiles covering pixel `y` along one axis when no origin is clamped.
fn analytic_multiplicity(y: usize, tile: usize, stride: usize) -> usize {
    let last = y / stride;
    let first = if y + 1 > tile { (y + 1 - tile).div_ceil(stride) } else { 0 };
    last + 1 - first
}

#[test]
fn class_areas_match_targets() {
    for fractions in [None, Some(vec![0.5, 0.3, 0.2])] {
        let spec = SynthSpec {
            n_images: 100,
            class_fractions: fractions,
            seed: 17,
            ..SynthSpec::default()
        };
        let mut counts = [0usize; 3];
        for i in 0..spec.n_images {
            let (_, labels) = spec.sample(i).unwrap();
            for &id in labels.ids() {
                counts[id as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for (c, &target) in spec.fractions().iter().enumerate() {
            let got = counts[c] as f64 / total as f64;
            assert!((got - target).abs() <= 0.1 * target, "class {c}: {got:.3} vs {target:.3}");
        }
    }
}

#[test]
fn synthetic_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [SynthVariant::Shapes, SynthVariant::Longrange] {
        let spec = SynthSpec { variant, n_images: 3, n_classes: 4, seed: 5, ..SynthSpec::default() };
        let (a, b) = (dir.path().join(format!("{variant:?}a")), dir.path().join(format!("{variant:?}b")));
        generate_synthetic(&spec, &a).unwrap();
        generate_synthetic(&spec, &b).unwrap();
        for stem in ["synth_00000", "synth_00002"] {
            for sub in ["images", "labels"] {
                let f = format!("{sub}/{stem}.png");
                assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
            }
        }
        assert!(load_dataset(&a).unwrap().iter().all(|s| s.labels.ids().iter().all(|&id| id < 4)));
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<(String, Image, LabelMap)> = (0..3)
        .map(|i| {
            let labels = LabelMap::new(6, 5, (0..30).map(|_| [0, 1, 2, 255][rng.random_range(0..4)]).collect(), 255).unwrap();
            (format!("s{i}"), random_image(6, 5, &mut rng), labels)
        })
        .collect();
    write_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    for ((stem, image, labels), s) in samples.iter().zip(&back) {
        assert_eq!((stem, image, labels), (&s.stem, &s.image, &s.labels));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_covers_every_pixel(h in 32usize..200, w in 32usize..200, tile in 8usize..32, q in 0usize..4) {
        let overlap = q as f64 / 8.0;
        let g = make_tile_grid(h, w, tile, overlap).unwrap();
        let mut count = vec![0usize; h * w];
        for &(r, c) in &g.origins {
            prop_assert!(r + tile <= h && c + tile <= w);
            for y in r..r + tile {
                for x in c..c + tile {
                    count[y * w + x] += 1;
                }
            }
        }
        prop_assert!(count.iter().all(|&n| n >= 1));
        // Unclamped axes follow the closed form.
        if (h - tile) % g.stride == 0 && (w - tile) % g.stride == 0 {
            for y in 0..h {
                for x in 0..w {
                    let want = analytic_multiplicity(y, tile, g.stride) * analytic_multiplicity(x, tile, g.stride);
                    prop_assert_eq!(count[y * w + x], want);
                }
            }
        }
    }

    #[test]
    fn merge_matches_accumulation(h in 16usize..60, w in 16usize..60, tile in 8usize..16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = make_tile_grid(h, w, tile, 0.25).unwrap();
        let n = 2;
        let tiles: Vec<TileLogits<f64>> = g
            .origins
            .iter()
            .map(|&origin| TileLogits {
                origin,
                logits: Tensor::new(&[n, tile, tile], (0..n * tile * tile).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap(),
            })
            .collect();
        let (mut sum, mut count, mut last) = (vec![0.0; n * h * w], vec![0.0; h * w], vec![0.0; n * h * w]);
        for t in &tiles {
            let (r0, c0) = t.origin;
            for c in 0..n {
                for y in 0..tile {
                    for x in 0..tile {
                        let v = t.logits.data()[(c * tile + y) * tile + x];
                        sum[(c * h + r0 + y) * w + c0 + x] += v;
                        last[(c * h + r0 + y) * w + c0 + x] = v;
                        if c == 0 {
                            count[(r0 + y) * w + c0 + x] += 1.0;
                        }
                    }
                }
            }
        }
        let mean = merge_predictions(&tiles, h, w, Merge::Mean).unwrap();
        for (i, &m) in mean.data().iter().enumerate() {
            prop_assert!((m - sum[i] / count[i % (h * w)]).abs() < 1e-12);
        }
        let lw = merge_predictions(&tiles, h, w, Merge::LastWrite).unwrap();
        prop_assert_eq!(lw.data(), &last[..]);
    }

    #[test]
    fn augmentation_keeps_label_ids_and_alignment(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (9, 7);
        let ids: Vec<u8> = (0..h * w).map(|_| [0, 2, 5, 255][rng.random_range(0..4)]).collect();
        let labels = LabelMap::new(h, w, ids, 255).unwrap();
        // Red channel encodes the label, so flips must keep the two in step.
        let mut data = vec![0.0f32; 3 * h * w];
        for (p, &id) in labels.ids().iter().enumerate() {
            data[p] = id as f32 / 255.0;
        }
        let image = Image::new(h, w, data).unwrap();
        let config = AugmentConfig { p_equalize: 0.0, p_blur: 0.0, ..AugmentConfig::default() };
        let (im, lab) = augment(&image, &labels, &config, &mut rng);
        let mut before: Vec<u8> = labels.ids().to_vec();
        let mut after: Vec<u8> = lab.ids().to_vec();
        before.sort_unstable();
        after.sort_unstable();
        prop_assert_eq!(before, after);
        for (p, &id) in lab.ids().iter().enumerate() {
            prop_assert_eq!(im.data()[p], id as f32 / 255.0);
        }
        let (_, lab) = augment(&image, &labels, &AugmentConfig::default(), &mut rng);
        prop_assert!(lab.ids().iter().all(|id| [0, 2, 5, 255].contains(id)));
    }

    #[test]
    fn raster_round_trip(h in 1usize..20, w in 1usize..20, seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(h, w, &mut rng);
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random()).collect(), 255).unwrap();
        save_image(dir.path().join("i.png"), &image).unwrap();
        save_labels(dir.path().join("l.png"), &labels).unwrap();
        prop_assert_eq!(load_image(dir.path().join("i.png")).unwrap(), image);
        prop_assert_eq!(load_labels(dir.path().join("l.png")).unwrap(), labels);
    }
}
