mod common;

use common::{max_abs, point};
use nonlocal::expr::Expr;
use nonlocal::fields::{
    analytic, average, diff_quotient, directional_derivative, holder_quotient, Exterior, Field, Grid, GridFunction,
};

fn gaussian_grid(intervals: usize) -> GridFunction {
    let g = Grid::new(1, -1.0, 1.0, intervals + 1).unwrap();
    let u = analytic(1, "exp(-x^2)").unwrap();
    GridFunction::sample(g, u.as_ref(), Exterior::analytic(u.clone())).unwrap()
}

#[test]
fn grid_derivatives_converge_at_fourth_order() {
    let err = |intervals: usize, order: u8| {
        let gf = gaussian_grid(intervals);
        let d = gf.directional_derivatives(&[1.0], order).unwrap();
        let exact = |x: f64| {
            if order == 1 {
                -2.0 * x * (-x * x).exp()
            } else {
                (4.0 * x * x - 2.0) * (-x * x).exp()
            }
        };
        max_abs((0..d.grid.len()).map(|k| d.values[k] - exact(d.grid.node(k)[0])))
    };
    for order in [1u8, 2] {
        let (a, b) = (err(32, order), err(64, order));
        assert!(a / b > 12.0, "order {order}: {a} -> {b}");
    }
}

#[test]
fn quadratic_second_derivative_is_exact() {
    let g = Grid::new(2, -1.0, 1.0, 17).unwrap();
    let u = analytic(2, "0.5*(3*x1^2 + 2*x1*x2 + x2^2)").unwrap();
    let gf = GridFunction::sample(g, u.as_ref(), Exterior::analytic(u.clone())).unwrap();
    for (e, want) in [([1.0, 0.0], 3.0), ([0.0, 1.0], 1.0)] {
        let d = gf.directional_derivatives(&e, 2).unwrap();
        assert!(max_abs(d.values.iter().map(|v| v - want)) < 1e-10);
    }
    // off-axis directions leave the lattice; the analytic path stays exact
    let e = [0.6, 0.8];
    let d2 = directional_derivative(&u, &e, 2).unwrap();
    let want = 3.0 * 0.36 + 2.0 * 0.48 + 0.64;
    assert!((d2.value(&[0.3, -0.2]) - want).abs() < 1e-6);
}

#[test]
fn missing_exterior_data_is_reported() {
    let g = Grid::new(1, -1.0, 1.0, 17).unwrap();
    let u = analytic(1, "x^3").unwrap();
    let gf = GridFunction::sample(g, u.as_ref(), Exterior::Zero).unwrap();
    assert!(gf.directional_derivatives(&[1.0], 1).is_err());
    assert!(gf.directional_derivatives(&[1.0], 3).is_err());
}

#[test]
fn difference_quotient_is_the_average_derivative() {
    let u = analytic(1, "sin(3*x)*exp(-x^2)").unwrap();
    let h = [0.2];
    let dq = diff_quotient(&u, &h).unwrap();
    let avg = average(&directional_derivative(&u, &[1.0], 1).unwrap(), &h);
    for k in 0..21 {
        let x = [-1.0 + 0.1 * k as f64];
        assert!((dq.value(&x) - avg.value(&x)).abs() < 1e-8, "x={x:?}");
    }
}

#[test]
fn holder_quotient_rescales_the_difference_quotient() {
    let u = analytic(2, "exp(-x1^2)*cos(x2)").unwrap();
    let h = [0.03, -0.04];
    let alpha = 0.35;
    let hq = holder_quotient(&u, &h, alpha).unwrap();
    let x = [0.2, 0.1];
    let raw = (u.value(&[0.23, 0.06]) - u.value(&x)) / 0.05f64.powf(alpha);
    assert!((hq.value(&x) - raw).abs() < 1e-14);
    assert!(holder_quotient(&u, &h, 1.0).is_err());
}

#[test]
fn power_rule_for_half_space_profile() {
    let u = analytic(1, "pos(x)^1.5").unwrap();
    let du = directional_derivative(&u, &[1.0], 1).unwrap();
    for x in [0.1, 0.4, 0.9] {
        assert!((du.value(&[x]) - 1.5 * x.sqrt()).abs() < 1e-6, "x={x}");
    }
}

#[test]
fn sine_derivative_at_the_origin() {
    let g = Grid::new(1, -1.0, 1.0, 201).unwrap();
    let u = analytic(1, "sin(x)").unwrap();
    let gf = GridFunction::sample(g, u.as_ref(), Exterior::analytic(u.clone())).unwrap();
    let d = gf.directional_derivatives(&[1.0], 1).unwrap();
    assert!((d.value(&[0.0]) - 1.0).abs() < 1e-8);
}

#[test]
fn csv_and_binary_round_trips() {
    let g = Grid::new(2, -1.0, 1.0, 9).unwrap();
    let u = analytic(2, "x1*x2 + sin(x1)").unwrap();
    let gf = GridFunction::sample(g, u.as_ref(), Exterior::Constant(0.5)).unwrap();
    let mut csv = vec![];
    gf.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8_lossy(&csv).starts_with("x1,x2,value\n"));
    let back = GridFunction::read_csv(&csv[..], Exterior::Constant(0.5)).unwrap();
    assert_eq!(back.values, gf.values);
    let mut bin = vec![];
    gf.write_binary(&mut bin).unwrap();
    let back = GridFunction::read_binary(&bin[..]).unwrap();
    assert_eq!(back.values, gf.values);
    assert_eq!(back.value(&[3.0, 0.0]), 0.5);
}

#[test]
fn exterior_rules_apply_outside_the_box() {
    let g = Grid::new(1, -1.0, 1.0, 5).unwrap();
    let vals = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let z = GridFunction::new(g.clone(), vals.clone(), Exterior::Zero).unwrap();
    let c = GridFunction::new(g.clone(), vals.clone(), Exterior::Clamp).unwrap();
    let a = GridFunction::new(g, vals, Exterior::analytic_expr(1, "x^2").unwrap()).unwrap();
    assert_eq!(z.value(&[1.5]), 0.0);
    assert_eq!(c.value(&[1.5]), 5.0);
    assert_eq!(a.value(&[-3.0]), 9.0);
    assert_eq!(z.value(&point(&[0.25])[..1]), 3.5);
}

#[test]
fn expression_errors_point_at_the_column() {
    let e = Expr::parse("1 + (x1 * 2").unwrap_err();
    assert!(e.column >= 5, "{e:?}");
    let e = Expr::parse("1 + foo(x)").unwrap_err();
    assert_eq!(e.column, 5);
    assert_eq!(Expr::parse("x2 + t").unwrap().max_variable_index(), 2);
}
