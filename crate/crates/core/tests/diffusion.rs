use defect_synth::bench::{synth_background, Domain, TextureSpec};
use defect_synth::diffusion::{
    build_schedule, cfg_combine, forward_diffuse, posterior_step, predict_x0, psnr, reverse_step, sample_noise,
    Autoencoder, AutoencoderTraining, Denoiser, DenoiserConfig, NoisePredictor, NoiseSchedule, PatchAutoencoder,
    PatchAutoencoderConfig, PromptEncoding, ScheduleShape,
};
use defect_synth::generation::{guidance_scale_at, GuidanceSchedule};
use defect_synth::{Grid, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(values: &[f32], h: usize, w: usize) -> Grid {
    Grid::from_vec(1, h, w, values.to_vec()).unwrap()
}

fn sched() -> NoiseSchedule {
    build_schedule(50, 1e-3, 0.15, ScheduleShape::Linear).unwrap()
}

proptest! {
    #[test]
    fn forward_diffuse_is_linear(
        z in prop::collection::vec(-2.0f32..2.0, 12),
        z2 in prop::collection::vec(-2.0f32..2.0, 12),
        e in prop::collection::vec(-3.0f32..3.0, 12),
        e2 in prop::collection::vec(-3.0f32..3.0, 12),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
        t in 1usize..=50,
    ) {
        let s = sched();
        let mix = |p: &[f32], q: &[f32]| p.iter().zip(q).map(|(x, y)| a * x + b * y).collect::<Vec<_>>();
        let lhs = forward_diffuse(&grid(&mix(&z, &z2), 3, 4), t, &grid(&mix(&e, &e2), 3, 4), &s).unwrap();
        let f1 = forward_diffuse(&grid(&z, 3, 4), t, &grid(&e, 3, 4), &s).unwrap();
        let f2 = forward_diffuse(&grid(&z2, 3, 4), t, &grid(&e2, 3, 4), &s).unwrap();
        for i in 0..12 {
            let rhs = a * f1.data()[i] + b * f2.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-4, "cell {i}: {} vs {rhs}", lhs.data()[i]);
        }
    }

    #[test]
    fn cfg_combine_is_affine_in_scale(
        u in prop::collection::vec(-3.0f32..3.0, 8),
        c in prop::collection::vec(-3.0f32..3.0, 8),
        s1 in 0.0f64..4.0,
        gap in 0.5f64..4.0,
        s3 in 0.0f64..10.0,
    ) {
        let (gu, gc) = (grid(&u, 2, 4), grid(&c, 2, 4));
        let s2 = s1 + gap;
        let r1 = cfg_combine(&gu, &gc, s1).unwrap();
        let r2 = cfg_combine(&gu, &gc, s2).unwrap();
        let r3 = cfg_combine(&gu, &gc, s3).unwrap();
        let k = (s3 - s1) / (s2 - s1);
        for i in 0..8 {
            let extrapolated = r1.data()[i] as f64 + k * (r2.data()[i] as f64 - r1.data()[i] as f64);
            prop_assert!((extrapolated - r3.data()[i] as f64).abs() < 1e-4);
        }
        prop_assert_eq!(cfg_combine(&gu, &gu, s3).unwrap(), gu.clone());
    }

    #[test]
    fn guidance_ramp_is_monotone(s_start in 0.0f64..5.0, rise in 0.0f64..10.0, steps in 1usize..300) {
        let gs = GuidanceSchedule::new(s_start, s_start + rise, steps).unwrap();
        prop_assert_eq!(guidance_scale_at(steps, &gs).unwrap(), if steps == 1 { s_start + rise } else { s_start });
        prop_assert_eq!(guidance_scale_at(1, &gs).unwrap(), s_start + rise);
        let mut prev = f64::NEG_INFINITY;
        for t in (1..=steps).rev() {
            let s = guidance_scale_at(t, &gs).unwrap();
            prop_assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn alpha_bar_is_the_running_product(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.3) {
        let s = build_schedule(steps, lo, lo + span, ScheduleShape::Linear).unwrap();
        let mut prod = 1.0;
        let mut prev = 1.0;
        for t in 1..=steps {
            prod *= 1.0 - s.beta(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            prop_assert!(s.alpha_bar(t) < prev && s.alpha_bar(t) > 0.0);
            prev = s.alpha_bar(t);
        }
    }
}

#[test]
fn forward_diffuse_preserves_unit_variance() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200_000;
    let z0 = sample_noise(&mut rng, 1, 1, n);
    let eps = sample_noise(&mut rng, 1, 1, n);
    for t in [1, 10, 25, 50] {
        let x = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "t={t}: variance {var}");
    }
}

#[test]
fn closed_form_examples() {
    let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
    let x = forward_diffuse(&grid(&[1.0], 1, 1), 1, &grid(&[1.0], 1, 1), &s).unwrap();
    assert!((x.data()[0] as f64 - (0.5 + 0.75f64.sqrt())).abs() < 1e-6);
    let zero = forward_diffuse(&grid(&[0.0, 0.0], 1, 2), 1, &grid(&[2.0, -4.0], 1, 2), &s).unwrap();
    assert!((zero.data()[0] as f64 - 2.0 * 0.75f64.sqrt()).abs() < 1e-6);
    let two = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    assert!((two.alpha_bar(2) - 0.72).abs() < 1e-12);
}

/// Returns a fixed noise field, whatever it is asked.
struct Oracle(Grid);

impl NoisePredictor for Oracle {
    fn predict_noise(&self, _: &Grid, _: usize, _: Option<&PromptEncoding>) -> Result<Grid> {
        Ok(self.0.clone())
    }

    fn context_len(&self) -> usize {
        4
    }
}

#[test]
fn exact_noise_recovers_the_clean_sample() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z0 = Grid::from_vec(1, 4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let eps = sample_noise(&mut rng, 1, 4, 4);
    for t in [1, 7, 30, 50] {
        let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let x0 = predict_x0(&z_t, t, &eps, &s).unwrap();
        for (a, b) in x0.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
        }
    }
    // At t = 1 the step returns the clean estimate with no noise added.
    let z_1 = forward_diffuse(&z0, 1, &eps, &s).unwrap();
    let out = reverse_step(&Oracle(eps.clone()), &z_1, 1, None, &s, &mut rng, None).unwrap();
    for (a, b) in out.data().iter().zip(z0.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    let noise = sample_noise(&mut rng, 1, 4, 4);
    assert_eq!(
        posterior_step(&z_1, 1, &eps, &s, Some(&noise), None).unwrap(),
        posterior_step(&z_1, 1, &eps, &s, None, None).unwrap()
    );
}

#[test]
fn fresh_denoiser_output_is_small_and_repeatable() {
    let m: Denoiser = Denoiser::new(DenoiserConfig::default(), 5).unwrap();
    let p = PromptEncoding::parse("a photo of surface-a with scratch", 8).unwrap();
    let z = Grid::zeros(1, 16, 16);
    let mut bound = 0.0f32;
    for t in [1, 25, 50] {
        let a = m.predict(&z, t, &p).unwrap();
        assert_eq!(a, m.predict(&z, t, &p).unwrap());
        assert_eq!(a.shape(), z.shape());
        assert!(a.all_finite());
        bound = a.data().iter().fold(bound, |b, v| b.max(v.abs()));
    }
    // Observed maximum is about 0.005 for this seed; the output layer is
    // initialised small, so anything near 0.1 would mean a broken init.
    assert!(bound < 0.1, "initial output magnitude {bound}");
}

#[test]
fn learned_autoencoder_reconstructs_held_out_textures() {
    let textures = |seeds: std::ops::Range<u64>| {
        seeds
            .map(|s| {
                let d = if s % 2 == 0 { Domain::A } else { Domain::B };
                synth_background(&TextureSpec::new(d, 64, 64, s)).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let train = textures(0..24);
    let held_out = textures(1000..1008);
    let mut ae = PatchAutoencoder::new(PatchAutoencoderConfig::default(), 1).unwrap();
    ae.train(&train, &AutoencoderTraining::default()).unwrap();
    let ae = Autoencoder::Learned(ae);
    for x in &held_out {
        let z = ae.encode(x).unwrap();
        assert_eq!((z.height(), z.width()), (16, 16));
        let p = psnr(x, &ae.decode(&z).unwrap());
        assert!(p >= 25.0, "held-out PSNR {p:.2} dB");
    }
    let id = Autoencoder::Identity;
    assert_eq!(id.decode(&id.encode(&held_out[0]).unwrap()).unwrap(), held_out[0]);
}
