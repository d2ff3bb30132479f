use defect_synth::integration::{integrate_images, poisson_blend, IntegrationConfig, Solver};
use defect_synth::{BinaryMask, Grid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 8;

/// Dense solve of the Dirichlet Poisson problem straight from the stencil:
/// `4 f_p - sum(interior f_q) = sum(s_p - s_q) + sum(boundary t_q)`.
fn dense_blend(src: &[f32], tgt: &[f32], mask: &BinaryMask) -> Vec<f64> {
    let w = mask.width();
    let unknowns: Vec<usize> = (0..mask.height() * w).filter(|&p| mask.data()[p] != 0).collect();
    let n = unknowns.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &p) in unknowns.iter().enumerate() {
        a[(i, i)] = 4.0;
        for q in [p - w, p - 1, p + 1, p + w] {
            b[i] += src[p] as f64 - src[q] as f64;
            match unknowns.iter().position(|&u| u == q) {
                Some(j) => a[(i, j)] = -1.0,
                None => b[i] += tgt[q] as f64,
            }
        }
    }
    let f = a.lu().solve(&b).expect("Laplacian is non-singular");
    let mut out: Vec<f64> = tgt.iter().map(|&v| v as f64).collect();
    for (i, &p) in unknowns.iter().enumerate() {
        out[p] = f[i];
    }
    out
}

fn random_problem(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> (Grid, Grid, BinaryMask) {
    let mut img = || Grid::from_vec(1, N, N, (0..N * N).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
    let (s, t) = (img(), img());
    let mut m = BinaryMask::from_fn(N, N, |y, x| y > 0 && x > 0 && y < N - 1 && x < N - 1 && rng.random_bool(0.6));
    if m.is_empty() {
        m.set(3, 3, true);
    }
    (s, t, m)
}

#[test]
fn iterative_and_direct_match_a_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (s, t, m) = random_problem(&mut rng, 0.0, 1.0);
        let oracle = dense_blend(s.data(), t.data(), &m);
        for solver in [Solver::ConjugateGradient, Solver::Direct] {
            let out = poisson_blend(&s, &t, &m, solver, 1e-6).unwrap();
            for (p, (&got, &want)) in out.image.data().iter().zip(&oracle).enumerate() {
                let want = want.clamp(0.0, 1.0);
                assert!(
                    (got as f64 - want).abs() <= 1e-5,
                    "case {case} {solver:?} pixel {p}: {got} vs {want}"
                );
                if m.data()[p] == 0 {
                    assert_eq!(got, t.data()[p]);
                }
            }
        }
    }
}

fn objective(f: &[f64], src: &[f32], mask: &BinaryMask) -> f64 {
    let w = mask.width();
    let mut e = 0.0;
    for p in 0..f.len() {
        if mask.data()[p] == 0 {
            continue;
        }
        for q in [p - w, p - 1, p + 1, p + w] {
            let d = (f[p] - f[q]) - (src[p] as f64 - src[q] as f64);
            // Edges between two unknowns are visited twice; halve them.
            e += if mask.data()[q] != 0 { 0.5 * d * d } else { d * d };
        }
    }
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blend_minimises_gradient_mismatch(seed in any::<u64>(), bump in prop::sample::select(vec![-1e-3, 1e-3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Mid-range values keep the solution away from the clamp.
        let (s, t, m) = random_problem(&mut rng, 0.4, 0.6);
        let out = poisson_blend(&s, &t, &m, Solver::Auto, 1e-10).unwrap();
        prop_assert_eq!(out.clamped, 0);
        let f: Vec<f64> = out.image.data().iter().map(|&v| v as f64).collect();
        let base = objective(&f, s.data(), &m);
        for p in (0..N * N).filter(|&p| m.data()[p] != 0) {
            let mut g = f.clone();
            g[p] += bump;
            prop_assert!(objective(&g, s.data(), &m) >= base);
        }
    }

    #[test]
    fn blend_is_affine_in_the_source(seed in any::<u64>(), alpha in 0.0f32..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s1, t, m) = random_problem(&mut rng, 0.4, 0.6);
        let s2 = Grid::from_vec(1, N, N, (0..N * N).map(|_| rng.random_range(0.4..0.6)).collect()).unwrap();
        let mix: Vec<f32> = s1.data().iter().zip(s2.data()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let s3 = Grid::from_vec(1, N, N, mix).unwrap();
        let run = |s: &Grid| poisson_blend(s, &t, &m, Solver::Direct, 1e-6).unwrap().image;
        let (f1, f2, f3) = (run(&s1), run(&s2), run(&s3));
        for p in 0..N * N {
            let sup = alpha as f64 * f1.data()[p] as f64 + (1.0 - alpha as f64) * f2.data()[p] as f64;
            prop_assert!((sup - f3.data()[p] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn integration_never_touches_pixels_outside_the_mask(seed in any::<u64>(), color_match in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, t, m) = random_problem(&mut rng, 0.0, 1.0);
        let cfg = IntegrationConfig { color_match, ..IntegrationConfig::default() };
        let out = integrate_images(&s, &t, &m, &cfg).unwrap();
        for p in 0..N * N {
            if m.data()[p] == 0 {
                prop_assert_eq!(out.image.data()[p], t.data()[p]);
            }
        }
    }
}

#[test]
fn hand_examples_are_exact() {
    let t = Grid::from_vec(1, 6, 6, (0..36).map(|i| ((i * 5) % 9) as f32 / 8.0).collect()).unwrap();
    let m = BinaryMask::from_fn(6, 6, |y, x| (1..5).contains(&y) && (2..4).contains(&x));
    for solver in [Solver::Direct, Solver::ConjugateGradient] {
        assert_eq!(poisson_blend(&t, &t, &m, solver, 1e-6).unwrap().image, t);
        let flat = Grid::filled(1, 6, 6, 0.25);
        let out = poisson_blend(&Grid::filled(1, 6, 6, 0.8), &flat, &m, solver, 1e-6).unwrap();
        assert_eq!(out.image, flat);

        let mut s = Grid::zeros(1, 3, 3);
        s.set(0, 1, 1, 1.0);
        let mut one = BinaryMask::zeros(3, 3);
        one.set(1, 1, true);
        let out = poisson_blend(&s, &Grid::zeros(1, 3, 3), &one, solver, 1e-6).unwrap();
        assert_eq!(out.image.get(0, 1, 1), 1.0);
    }
}
