//! Reference values computed independently of the library quadrature.
#![allow(dead_code)]

use nonlocal::fields::{CutoffFunction, Grid};
use nonlocal::kernels::{Point, MAX_DIM};
use statrs::function::gamma::gamma;

/// `∫(1 - e^{-|y|²})|y|^{-n-2s} dy = π^{n/2} |Γ(-s)| / Γ(n/2)`, the value of
/// `L e^{-|x|²}` at the origin for `K = |y|^{-n-2s}`.
pub fn gaussian_at_origin(n: usize, s: f64) -> f64 {
    let h = n as f64 / 2.0;
    std::f64::consts::PI.powf(h) * (gamma(1.0 - s) / s) / gamma(h)
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on `P_m`.
pub fn legendre(m: usize) -> Vec<(f64, f64)> {
    (1..=m)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (m as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=m {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Composite 20-point Gauss–Legendre on `[a, b]` with `panels` panels.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize) -> f64 {
    let rule = legendre(20);
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let c = a + (k as f64 + 0.5) * w;
            rule.iter().map(|(x, wt)| wt * f(c + 0.5 * w * x)).sum::<f64>() * 0.5 * w
        })
        .sum()
}

/// `∫_{r0}^{r1} g(r) dr` in the variable `v = ln r`, eight panels per unit.
fn log_integral<F: Fn(f64) -> f64>(g: &F, r0: f64, r1: f64) -> f64 {
    let (v0, v1) = (r0.ln(), r1.ln());
    let panels = ((v1 - v0) * 8.0).ceil() as usize;
    gauss_legendre(
        &|v: f64| {
            let r = v.exp();
            g(r) * r
        },
        v0,
        v1,
        panels,
    )
}

/// A smooth 1D test function with its even derivatives at a point.
pub struct Smooth1d<'a> {
    pub u: &'a dyn Fn(f64) -> f64,
    pub d2: &'a dyn Fn(f64) -> f64,
    pub d4: &'a dyn Fn(f64) -> f64,
    /// Beyond this distance `u` is negligible.
    pub reach: f64,
}

/// `Lu(x) = ∫₀^∞ (2u(x) - u(x+r) - u(x-r)) r^{-1-2s} dr` for `K = |y|^{-1-2s}`.
/// Below `r = 1e-3` the integrand is replaced by its Taylor expansion.
pub fn frac_lap_1d(f: &Smooth1d, x: f64, s: f64) -> f64 {
    let r0: f64 = 1e-3;
    let (u, d2, d4) = ((f.u)(x), (f.d2)(x), (f.d4)(x));
    let near = -d2 * r0.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s) - d4 / 12.0 * r0.powf(4.0 - 2.0 * s) / (4.0 - 2.0 * s);
    let big = x.abs() + f.reach;
    let g = |r: f64| (2.0 * u - (f.u)(x + r) - (f.u)(x - r)) * r.powf(-1.0 - 2.0 * s);
    let mid = log_integral(&g, r0, big);
    near + mid + 2.0 * u * big.powf(-2.0 * s) / (2.0 * s)
}

/// `B(u,v)(x) = ∫(u(x)-u(y))(v(x)-v(y))|x-y|^{-1-2s} dy` by direct quadrature.
pub fn bilinear_1d(u: &dyn Fn(f64) -> f64, v: &dyn Fn(f64) -> f64, reach: f64, x: f64, s: f64) -> f64 {
    let (ux, vx) = (u(x), v(x));
    let big = x.abs() + reach;
    let g = |r: f64| ((ux - u(x + r)) * (vx - v(x + r)) + (ux - u(x - r)) * (vx - v(x - r))) * r.powf(-1.0 - 2.0 * s);
    log_integral(&g, 1e-9, big) + 2.0 * ux * vx * big.powf(-2.0 * s) / (2.0 * s)
}

pub fn point(x: &[f64]) -> Point {
    let mut p = [0.0; MAX_DIM];
    p[..x.len()].copy_from_slice(x);
    p
}

pub fn line(lo: f64, hi: f64, count: usize) -> Vec<Point> {
    (0..count).map(|k| point(&[lo + (hi - lo) * k as f64 / (count - 1) as f64])).collect()
}

/// Interior nodes of the standard Bernstein evaluation grid on `[-1.5, 1.5]`.
pub fn bernstein_nodes(intervals: usize, eta: &CutoffFunction) -> (Grid, Vec<Point>) {
    let grid = Grid::new(1, -1.5, 1.5, intervals + 1).unwrap();
    let pts = nonlocal::bernstein::evaluation_nodes(&grid, eta, 2);
    (grid, pts)
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}
