use nonlocal::bellman::{
    assemble, shipped, solve_discrete, solve_policy_iteration, verify_semiconvexity, BellmanProblem, Member,
};
use nonlocal::fields::{analytic, constant, Exterior, Grid};
use nonlocal::kernels::KernelSpec;

const TOL: f64 = 1e-10;

fn two_member(c1: &str, c2: &str, scale2: f64) -> BellmanProblem {
    BellmanProblem {
        family: vec![
            Member { kernel: KernelSpec::fractional(1, 0.5), c: analytic(1, c1).unwrap() },
            Member { kernel: KernelSpec::fractional_scaled(1, 0.5, scale2), c: analytic(1, c2).unwrap() },
        ],
        grid: Grid::new(1, -1.0, 1.0, 33).unwrap(),
        exterior: Exterior::Zero,
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    let r = solve_policy_iteration(&two_member("1 - x^2", "1 - x^2", 1.0), TOL, 50).unwrap();
    assert!(r.policy.iter().all(|&g| g == 0));
}

#[test]
fn the_larger_source_is_selected() {
    // inf_γ (L u - c_γ) picks the largest c_γ
    let r = solve_policy_iteration(&two_member("1.5 - x^2", "1 - x^2", 1.0), TOL, 50).unwrap();
    assert!(r.policy.iter().all(|&g| g == 0));
    let r = solve_policy_iteration(&two_member("1 - x^2", "1.5 - x^2", 1.0), TOL, 50).unwrap();
    assert!(r.policy.iter().all(|&g| g == 1));
}

#[test]
fn solution_lies_above_every_single_kernel_solution() {
    // L_γ u ≥ c_γ for every γ, so u is a supersolution of each linear problem
    let p = shipped(64).unwrap();
    let r = solve_policy_iteration(&p, TOL, 100).unwrap();
    assert!(r.residual <= 1e-8);
    for k in 0..p.family.len() {
        let single = solve_policy_iteration(&p.single(k), TOL, 10).unwrap();
        for (a, b) in r.values.iter().zip(&single.values) {
            assert!(*a >= b - 1e-9, "member {k}: {a} < {b}");
        }
    }
}

#[test]
fn positive_scaling_scales_the_solution_and_keeps_the_policy() {
    let p = shipped(64).unwrap();
    let a = solve_policy_iteration(&p, TOL, 100).unwrap();
    let b = solve_policy_iteration(&p.scaled(2.5), TOL, 100).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((2.5 * x - y).abs() <= 1e-9, "{x} {y}");
    }
    for i in 0..a.policy.len() {
        if a.margins[i] > 1e-8 {
            assert_eq!(a.policy[i], b.policy[i], "node {i}");
        }
    }
}

#[test]
fn constant_data_gives_zero_constant() {
    let p = BellmanProblem {
        family: vec![
            Member { kernel: KernelSpec::fractional(1, 0.5), c: constant(1, 0.0) },
            Member { kernel: KernelSpec::fractional_scaled(1, 0.5, 2.0), c: constant(1, 0.0) },
        ],
        grid: Grid::new(1, -1.0, 1.0, 65).unwrap(),
        exterior: Exterior::Constant(1.0),
    };
    let r = solve_policy_iteration(&p, TOL, 50).unwrap();
    assert!(r.values.iter().all(|v| (v - 1.0).abs() < 1e-8));
    let c = verify_semiconvexity(&r, &p, &[1.0], &[1, 2]).unwrap();
    assert!(c.constant < 1e-9, "{}", c.constant);
}

#[test]
fn shipped_constant_is_positive_and_finite() {
    let p = shipped(128).unwrap();
    let d = assemble(&p).unwrap();
    let r = solve_discrete(&p, &d, TOL, 100).unwrap();
    assert!(r.policy.contains(&0) && r.policy.contains(&1));
    let c = verify_semiconvexity(&r, &p, &[1.0], &[1, 2, 4]).unwrap();
    assert!(c.constant > 0.0 && c.constant.is_finite());
    assert!(c.region_radius <= 0.125 + 1e-12);
}

#[test]
fn mismatched_orders_are_rejected() {
    let mut p = shipped(16).unwrap();
    p.family[1].kernel = KernelSpec::fractional(1, 0.3);
    assert!(assemble(&p).is_err());
    p.family.clear();
    assert!(assemble(&p).is_err());
}
