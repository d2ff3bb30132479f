use std::collections::HashSet;

use defect_synth::bench::{
    build_dataset, render_stroke, synth_background, DatasetManifest, DatasetPreset, Domain, Role, StrokeDistribution,
    TextureSpec,
};
use defect_synth::generation::derive_bbox;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn strokes_change_exactly_their_mask(seed in any::<u64>(), a in any::<bool>()) {
        let domain = if a { Domain::A } else { Domain::B };
        let bg = synth_background(&TextureSpec::new(domain, 64, 64, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stroke = StrokeDistribution::scratch().sample(&mut rng, 64, 64);
        let (img, mask) = render_stroke(&bg, &stroke).unwrap();
        prop_assert!(mask.count() as f32 >= stroke.length().floor());
        for i in 0..64 * 64 {
            if mask.data()[i] != 0 {
                prop_assert_ne!(img.data()[i], bg.data()[i]);
            } else {
                prop_assert_eq!(img.data()[i], bg.data()[i]);
            }
        }
        prop_assert!(img.is_valid_image());
    }

    #[test]
    fn textures_repeat_per_seed(seed in any::<u64>(), size in 16usize..48) {
        let spec = TextureSpec::new(Domain::B, size, size + 3, seed);
        let g = synth_background(&spec).unwrap();
        prop_assert_eq!(g.shape(), (1, size, size + 3));
        prop_assert_eq!(&g, &synth_background(&spec).unwrap());
    }
}

#[test]
fn domains_are_separable_by_mean() {
    for seed in 0..20 {
        let a = synth_background(&TextureSpec::new(Domain::A, 64, 64, seed)).unwrap();
        let b = synth_background(&TextureSpec::new(Domain::B, 64, 64, seed)).unwrap();
        assert!((a.mean() - b.mean()).abs() >= 0.2, "seed {seed}: {} vs {}", a.mean(), b.mean());
    }
}

#[test]
fn presets_have_the_published_counts_and_disjoint_seeds() {
    for (preset, want) in [(DatasetPreset::FewShot, [4, 20, 129, 0]), (DatasetPreset::ZeroShot, [4, 20, 133, 150])] {
        let m = build_dataset(preset, 3, preset.default_counts(), 64, 64).unwrap();
        let got = [Role::Reference, Role::Background, Role::Test, Role::SourceTrain].map(|r| m.count(r));
        assert_eq!(got, want);
        let seeds: HashSet<u64> = m.items.iter().map(|i| i.seed).collect();
        assert_eq!(seeds.len(), m.items.len());
        let other = build_dataset(preset, 4, preset.default_counts(), 64, 64).unwrap();
        assert!(other.items.iter().all(|i| !seeds.contains(&i.seed)));
    }
}

#[test]
fn manifest_regenerates_every_file_bitwise() {
    let preset = DatasetPreset::FewShot;
    let mut counts = preset.default_counts();
    counts.test = 12;
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(preset, 11, counts, 48, 48).unwrap();
    m.write_files(dir.path()).unwrap();
    let back = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, m);
    let again = tempfile::tempdir().unwrap();
    back.write_files(again.path()).unwrap();
    for item in &m.items {
        let files = std::iter::once(&item.image).chain(item.mask.as_ref());
        for f in files {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(again.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let s = m.materialize(item).unwrap();
        assert_eq!(s.bbox, item.bbox);
        if item.role.has_defect() {
            assert_eq!(s.bbox.unwrap(), derive_bbox(&s.mask).unwrap());
        } else {
            assert!(s.mask.is_empty());
        }
    }
}

#[test]
fn scratches_are_thin() {
    let preset = DatasetPreset::FewShot;
    let m = build_dataset(preset, 0, preset.default_counts(), 64, 64).unwrap();
    let mut widths: Vec<f64> = m
        .with_role(Role::Test)
        .map(|it| {
            let s = m.materialize(it).unwrap();
            let b = s.bbox.unwrap();
            // Pixel count over the box diagonal: the mean width of a line.
            let diag = ((b.width() as f64).powi(2) + (b.height() as f64).powi(2)).sqrt();
            s.mask.count() as f64 / diag
        })
        .collect();
    widths.sort_by(f64::total_cmp);
    let median = widths[widths.len() / 2];
    assert!(median <= 3.0, "median width {median}");
}
