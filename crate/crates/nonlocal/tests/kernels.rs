mod common;

use nonlocal::expr::Expr;
use nonlocal::kernels::{psi, psi_derivative, validate_class, KernelSpec, RadialProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_y(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let r = 10f64.powf(rng.gen_range(-4.0..1.5));
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nrm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|c| *c *= r / nrm);
    v
}

fn radius(y: &[f64]) -> f64 {
    y.iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[test]
fn decomposition_is_exact_and_supported_where_claimed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [1usize, 2] {
        for s in [0.3, 0.5, 0.75] {
            let k = KernelSpec::fractional(n, s);
            for eps in [0.05, 0.1, 0.2] {
                let d = k.decompose(eps).unwrap();
                for _ in 0..10_000 {
                    let y = sample_y(&mut rng, n);
                    let (kk, k1, k2) = (k.density(&y), d.near.density(&y), d.far.density(&y));
                    assert!((k1 + k2 - kk).abs() <= 4.0 * f64::EPSILON * kk, "additivity at {y:?}");
                    let r = radius(&y);
                    if r <= 0.5 * eps {
                        assert_eq!(k1, kk);
                        assert_eq!(k2, 0.0);
                    }
                    if r >= eps {
                        assert_eq!(k1, 0.0);
                    }
                    assert!(k2 >= 0.0 && k2 <= kk * (1.0 + 1e-15));
                }
            }
        }
    }
}

#[test]
fn decomposition_constants_are_stable_across_radii() {
    for n in [1usize, 2] {
        for s in [0.3, 0.5, 0.75] {
            let k = KernelSpec::fractional(n, s);
            let cs: Vec<_> = [0.05, 0.1, 0.2].iter().map(|&e| k.decompose(e).unwrap()).collect();
            for get in
                [|d: &nonlocal::kernels::KernelDecomposition| d.c1, |d: &nonlocal::kernels::KernelDecomposition| d.c2]
            {
                let v: Vec<f64> = cs.iter().map(get).collect();
                let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
                assert!(lo > 0.0 && hi.is_finite() && hi <= 2.0 * lo, "n={n} s={s}: {v:?}");
            }
        }
    }
}

#[test]
fn homogeneity_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1usize, 2, 3] {
        for s in [0.2, 0.5, 0.9] {
            let k = KernelSpec::fractional(n, s);
            for _ in 0..500 {
                let y = sample_y(&mut rng, n);
                let r = 10f64.powf(rng.gen_range(-3.0..3.0));
                let ry: Vec<f64> = y.iter().map(|c| c * r).collect();
                let lhs = k.density(&ry) * r.powf(n as f64 + 2.0 * s);
                assert!((lhs / k.density(&y) - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn psi_bounds() {
    for i in 0..=100_000 {
        let t = -0.5 + 2.0 * i as f64 / 100_000.0;
        let (v, d) = (psi(t), psi_derivative(t));
        assert!((0.0..=1.0).contains(&v));
        assert!(d.abs() <= 4.0);
        if t <= 0.5 {
            assert_eq!(v, 0.0);
        }
        if t >= 1.0 {
            assert_eq!(v, 1.0);
        }
    }
}

#[test]
fn interpolation_kernel_mass_scales_with_delta() {
    for n in [1usize, 2] {
        for s in [0.3, 0.5, 0.75] {
            let k = KernelSpec::fractional(n, s);
            let ratios: Vec<f64> = [0.05, 0.1, 0.2, 0.4]
                .iter()
                .map(|&d| k.interpolation_kernel(d).unwrap().annulus_mass(0.0, d) / k.interpolation_mass_scale(d))
                .collect();
            let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
            assert!(lo > 0.0 && hi <= 3.0 * lo, "n={n} s={s}: {ratios:?}");
        }
    }
}

#[test]
fn shipped_families_satisfy_the_class_conditions() {
    let specs = [
        KernelSpec::fractional(1, 0.5),
        KernelSpec::fractional(2, 0.3),
        KernelSpec::fractional_scaled(1, 0.75, 2.0),
        KernelSpec::general_levy(1, RadialProfile::LogOscillation { s: 0.5, amplitude: 0.2 }),
        KernelSpec::general_levy(2, RadialProfile::Power { s: 0.4 }),
        KernelSpec::convolution_exponential(1, 2.0),
    ];
    for k in &specs {
        let r = validate_class(k, 2000, 11);
        let failed: Vec<_> = r.conditions.iter().filter(|c| !c.pass).map(|c| (&c.name, c.worst_ratio)).collect();
        assert!(r.pass, "{}: {failed:?}", k.family_name());
    }
}

#[test]
fn validation_is_reproducible_from_the_seed() {
    let k = KernelSpec::general_levy(1, RadialProfile::LogOscillation { s: 0.5, amplitude: 0.2 });
    let a = validate_class(&k, 500, 5);
    let b = validate_class(&k, 500, 5);
    for (x, y) in a.conditions.iter().zip(&b.conditions) {
        assert_eq!(x.worst_ratio.to_bits(), y.worst_ratio.to_bits());
    }
}

#[test]
fn understated_ellipticity_is_caught() {
    let mut k = KernelSpec::fractional(1, 0.5);
    k.cap_lambda = 0.5;
    assert!(k.check().is_err());
    let mut k = KernelSpec::fractional(1, 0.5);
    k.lambda = 1.5;
    k.cap_lambda = 100.0;
    let r = validate_class(&k, 500, 1);
    assert!(!r.condition("comparability").unwrap().pass);
}

#[test]
fn custom_density_with_wrong_order_fails_comparability() {
    // |y|^{-1.5} behaves like s = 1/4 near the origin, not s = 1/2
    let k = KernelSpec::custom(1, 0.5, Expr::parse("abs(x1)^(-1.5)").unwrap(), 0.5, 2.0);
    assert!(!validate_class(&k, 1000, 2).pass);
}

#[test]
fn masses_match_independent_quadrature() {
    // μ_K(ℝ ∖ B_r) = 2 r^{-2s}/(2s) for K = |y|^{-1-2s}
    for s in [0.3, 0.5, 0.75] {
        let k = KernelSpec::fractional(1, s);
        let want = 2.0 * 0.3f64.powf(-2.0 * s) / (2.0 * s);
        assert!((k.tail_mass(0.3) / want - 1.0).abs() < 1e-10);
        let ann = 2.0 * common::gauss_legendre(&|r: f64| r.powf(-1.0 - 2.0 * s), 0.3, 1.7, 40);
        assert!((k.annulus_mass(0.3, 1.7) / ann - 1.0).abs() < 1e-10);
    }
}
