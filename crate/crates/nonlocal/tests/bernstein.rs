mod common;

use common::{bernstein_nodes, line, max_abs, point};
use nonlocal::bernstein::{
    check_cutoff_estimates, check_interpolation, check_key_estimate, check_product_rule, components,
    equivalent_form_defect, find_min_sigma, setup, variant_components, SearchOptions, Tolerance, Variant,
};
use nonlocal::ensemble::{ensemble, EnsembleKind};
use nonlocal::fields::{analytic, constant, CutoffFunction, FieldRef};
use nonlocal::kernels::KernelSpec;
use nonlocal::operator::{Operator, QuadratureConfig};

fn q() -> QuadratureConfig {
    QuadratureConfig::default()
}

#[test]
fn product_rule_residual_is_within_quadrature_error() {
    let pts = line(-0.9, 0.9, 13);
    for s in [0.3, 0.5, 0.75] {
        let k = KernelSpec::fractional(1, s);
        let fs = ensemble(1, 5, 17, EnsembleKind::Mixed);
        for pair in fs.windows(2) {
            let r = check_product_rule(&k, &pair[0], &pair[1], &q(), &pts).unwrap();
            assert!(r.pass, "s={s}: residual {:e}", r.max_residual);
            assert!(r.max_residual <= 1e-6 * r.scale.max(1.0), "s={s}: {:e} vs scale {}", r.max_residual, r.scale);
        }
    }
}

#[test]
fn product_rule_in_two_dimensions() {
    let k = KernelSpec::fractional(2, 0.5);
    let u = analytic(2, "exp(-x1^2 - 2*x2^2)").unwrap();
    let v = analytic(2, "cos(x1 + x2) * exp(-x1^2 - x2^2)").unwrap();
    let pts = vec![point(&[0.0, 0.0]), point(&[0.3, -0.2]), point(&[-0.5, 0.4])];
    let r = check_product_rule(&k, &u, &v, &q(), &pts).unwrap();
    assert!(r.pass, "{:?}", r.residual);
}

#[test]
fn holder_quotient_components_are_rescaled_difference_quotient_components() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(48, &eta);
    let u = ensemble(1, 1, 3, EnsembleKind::GaussianMixture).remove(0);
    let h = 0.0625;
    let alpha = 0.4;
    let d = variant_components(&k, &Variant::DiffQuot { h: vec![h] }, &eta, &u, &q(), &pts).unwrap();
    let hq = variant_components(&k, &Variant::HolderQuot { h: vec![h], alpha }, &eta, &u, &q(), &pts).unwrap();
    let f = h.powf(2.0 - 2.0 * alpha);
    for sigma in [0.0, 0.7, 5.0] {
        for (a, b) in d.iter().zip(&hq) {
            let want = f * a.defect(sigma / f);
            let scale = b.l_main.abs() + b.r_main.abs() + sigma * (b.l_sigma.abs() + b.r_sigma.abs());
            assert!(
                (b.defect(sigma) - want).abs() <= 1e-12 * scale.max(1.0),
                "σ={sigma}: {} vs {want}",
                b.defect(sigma)
            );
        }
    }
}

#[test]
fn defect_is_nonincreasing_in_sigma() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(48, &eta);
    for u in ensemble(1, 4, 9, EnsembleKind::Mixed) {
        let cs = variant_components(&k, &Variant::FirstOrder { e: vec![1.0] }, &eta, &u, &q(), &pts).unwrap();
        for c in &cs {
            // S = -B(Y,Y) up to quadrature error
            assert!(c.s() <= 3.0 * c.err_sigma + 1e-12, "S = {}", c.s());
            for sigma in [1.0, 2.0, 4.0] {
                let slack = 3.0 * (c.error(sigma) + c.error(2.0 * sigma));
                assert!(c.defect(2.0 * sigma) <= c.defect(sigma) + slack);
            }
        }
    }
}

#[test]
fn integral_form_matches_the_defect() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let u = analytic(1, "exp(-2*x^2) * (1 + 0.5*sin(3*x))").unwrap();
    let st = setup(&k, &Variant::FirstOrder { e: vec![1.0] }, &u, &eta).unwrap();
    let cfg = q();
    let op = Operator::new(&k, &cfg, cfg.rho_for(u.fd_step())).unwrap();
    for x in [-0.6, -0.2, 0.0, 0.35, 0.7] {
        let c = components(&op, &st, &[x]);
        let e = equivalent_form_defect(&op, &st, 1.3, &[x]);
        let tol = 3.0 * (c.error(1.3) + e.error) + 1e-10;
        assert!((c.defect(1.3) - e.value).abs() <= tol, "x={x}: {} vs {}", c.defect(1.3), e.value);
    }
}

#[test]
fn positive_part_is_inert_for_increasing_functions() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(32, &eta);
    let u = analytic(1, "x^3 + x").unwrap();
    let a = variant_components(&k, &Variant::FirstOrder { e: vec![1.0] }, &eta, &u, &q(), &pts).unwrap();
    let b = variant_components(&k, &Variant::PosPart { e: vec![1.0] }, &eta, &u, &q(), &pts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.defect(2.0) - y.defect(2.0)).abs() <= 1e-10 * (1.0 + x.l_main.abs()));
    }
}

#[test]
fn zero_drift_reduces_to_the_plain_estimate() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(32, &eta);
    let u = ensemble(1, 1, 4, EnsembleKind::TrigSum).remove(0);
    let a = variant_components(&k, &Variant::FirstOrder { e: vec![1.0] }, &eta, &u, &q(), &pts).unwrap();
    let b = variant_components(&k, &Variant::Drift { e: vec![1.0], b: vec![0.0] }, &eta, &u, &q(), &pts).unwrap();
    assert!(max_abs(a.iter().zip(&b).map(|(x, y)| x.defect(1.0) - y.defect(1.0))) < 1e-13);
}

#[test]
fn constants_and_flat_cutoffs_need_no_sigma() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(32, &eta);
    let v = Variant::FirstOrder { e: vec![1.0] };
    let consts: Vec<FieldRef> = vec![constant(1, 1.0), constant(1, -3.0)];
    let r = find_min_sigma(&k, &v, &eta, &consts, &q(), &pts, Tolerance::default(), SearchOptions::default()).unwrap();
    assert_eq!(r.sigma_star, 0.0);

    // η ≡ 1 on every node: the defect is -B(∂u, ∂u) ≤ 0
    let flat = CutoffFunction::new(1, &[0.0], 10.0, 20.0).unwrap();
    let us = ensemble(1, 3, 5, EnsembleKind::Mixed);
    let r = find_min_sigma(&k, &v, &flat, &us, &q(), &pts, Tolerance::default(), SearchOptions::default()).unwrap();
    assert_eq!(r.sigma_star, 0.0);
}

#[test]
fn linear_function_violates_without_sigma() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(48, &eta);
    let u = analytic(1, "x").unwrap();
    let v = Variant::FirstOrder { e: vec![1.0] };
    let r = check_key_estimate(&k, &v, &eta, &u, 0.0, &q(), &pts, Tolerance::default()).unwrap();
    assert!(!r.pass && !r.violating_nodes.is_empty());
}

#[test]
fn sigma_search_brackets_the_threshold() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let (_, pts) = bernstein_nodes(48, &eta);
    let us = ensemble(1, 10, 1, EnsembleKind::Mixed);
    let v = Variant::FirstOrder { e: vec![1.0] };
    let tol = Tolerance::default();
    let r = find_min_sigma(&k, &v, &eta, &us, &q(), &pts, tol, SearchOptions::default()).unwrap();
    assert!(r.sigma_star > 0.0);
    let pass_at =
        |sigma: f64| us.iter().all(|u| check_key_estimate(&k, &v, &eta, u, sigma, &q(), &pts, tol).unwrap().pass);
    assert!(pass_at(r.sigma_star));
    assert!(!pass_at(0.99 * r.sigma_star));
}

#[test]
fn difference_quotient_steps_above_an_eighth_are_rejected() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let u = constant(1, 1.0);
    assert!(setup(&k, &Variant::DiffQuot { h: vec![0.2] }, &u, &eta).is_err());
    assert!(setup(&k, &Variant::DiffQuot { h: vec![0.125] }, &u, &eta).is_ok());
}

#[test]
fn cutoff_ratios_are_stable_across_radii() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let pts = line(-1.2, 1.2, 25);
    let mut ls = vec![];
    let mut bs = vec![];
    for eps in [0.05, 0.1, 0.2] {
        let near = k.decompose(eps).unwrap().near;
        let r = check_cutoff_estimates(&near, &eta, eps, &q(), &pts, 10.0, 10.0).unwrap();
        assert!(r.max_l_ratio.is_finite() && r.max_b_ratio.is_finite());
        assert!(r.max_b_ratio > 0.0);
        ls.push(r.max_l_ratio);
        bs.push(r.max_b_ratio);
    }
    for v in [&ls, &bs] {
        let (lo, hi) = (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(0.0, f64::max));
        assert!(hi <= 2.0 * lo, "{v:?}");
    }
}

#[test]
fn cutoff_estimates_need_a_supported_kernel() {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    assert!(check_cutoff_estimates(&k, &eta, 0.1, &q(), &line(-0.5, 0.5, 3), 1.0, 1.0).is_err());
}

#[test]
fn interpolation_constant_vanishes_for_constants() {
    let k = KernelSpec::fractional(1, 0.5);
    let u = constant(1, 2.0);
    let r = check_interpolation(&k, 0.1, &u, &[1.0], false, &q(), &line(-0.8, 0.8, 9), 1.0).unwrap();
    assert_eq!(r.required_c, 0.0);
    assert!(r.pass);
}

#[test]
fn one_interpolation_constant_serves_every_radius() {
    let k = KernelSpec::fractional(1, 0.5);
    let pts = line(-0.8, 0.8, 17);
    for u in ensemble(1, 3, 2, EnsembleKind::Mixed) {
        let cs: Vec<f64> = [0.4, 0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&d| check_interpolation(&k, d, &u, &[1.0], false, &q(), &pts, 1.0).unwrap().required_c)
            .collect();
        assert!(cs.iter().all(|c| c.is_finite() && *c <= 1.0), "{cs:?}");
        let p = check_interpolation(&k, 0.1, &u, &[1.0], true, &q(), &pts, 1.0).unwrap();
        assert!(p.pass, "{}", p.required_c);
    }
}
