//! Parabolic obstacle problem `min{∂_t u + L_{K(t)} u - f, u} = 0` by
//! implicit Euler, and the space-time key estimates for `∂_t + L_{K(t)}`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bernstein::{self, BernsteinReport, Components, CutoffSpec, Setup, Tolerance};
use crate::expr::Expr;
use crate::fields::{self, CutoffFunction, Exterior, FieldError, FieldRef, Grid, GridFunction, TimeCutoff};
use crate::kernels::{KernelSpec, Point, MAX_DIM};
use crate::obstacle::{
    self, c11_surrogate, measure_semiconvexity, Assembled, Method, ObstacleError, ObstacleProblem, SemiconvexityReport,
    SolveOptions,
};
use crate::operator::{Operator, OperatorError, QuadratureConfig};

#[derive(Debug, Error)]
pub enum ParabolicError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Obstacle(#[from] ObstacleError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("level {level} (t = {time}): {source}")]
    Level { level: usize, time: f64, source: ObstacleError },
}

/// `f(t, x)`
pub type Forcing = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

pub fn forcing_from_expr(e: Expr) -> Forcing {
    Arc::new(move |t, x| e.eval_tx(t, x))
}

#[derive(Clone)]
pub struct ParabolicProblem {
    /// `K^{(t)} = m(t) K` through the kernel's time modulation.
    pub kernel: KernelSpec,
    pub grid: Grid,
    pub exterior: Exterior,
    pub forcing: Forcing,
    pub initial: FieldRef,
    pub dt: f64,
    pub t_end: f64,
}

impl ParabolicProblem {
    /// Fractional s = 1/2 on `[-1,1]`, zero exterior and initial data,
    /// forcing `f = 1 - 2x²`.
    pub fn shipped(intervals: usize, dt: f64) -> Result<Self, ParabolicError> {
        Ok(ParabolicProblem {
            kernel: KernelSpec::fractional(1, 0.5),
            grid: Grid::new(1, -1.0, 1.0, intervals + 1)?,
            exterior: Exterior::Zero,
            forcing: Arc::new(|_, x| 1.0 - 2.0 * x[0] * x[0]),
            initial: fields::constant(1, 0.0),
            dt,
            t_end: 1.0,
        })
    }

    fn validate(&self) -> Result<(), ParabolicError> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(ParabolicError::Parameter("need Δt > 0 and a positive final time".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParabolicSolution {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub levels: Vec<GridFunction>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub active_counts: Vec<usize>,
}

impl ParabolicSolution {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// CSV with one row per (level, node): t, coordinates, u.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let Some(first) = self.levels.first() else { return Ok(()) };
        let n = first.grid.dim;
        let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{},u", cols.join(","))?;
        for (t, gf) in self.times.iter().zip(&self.levels) {
            for k in 0..gf.grid.len() {
                let p = gf.grid.node(k);
                let c: Vec<String> = p[..n].iter().map(|c| format!("{c:.17e}")).collect();
                writeln!(w, "{t:.17e},{},{:.17e}", c.join(","), gf.values[k])?;
            }
        }
        Ok(())
    }
}

/// Implicit Euler: at each level solve
/// `min((u^{k+1} - u^k)/Δt + L_h u^{k+1} - f^{k+1}, u^{k+1}) = 0`.
pub fn solve(p: &ParabolicProblem, opts: &SolveOptions) -> Result<ParabolicSolution, ParabolicError> {
    p.validate()?;
    let n = p.grid.dim;
    let base = ObstacleProblem::new(
        p.kernel.clone(),
        p.grid.clone(),
        fields::constant(n, 0.0),
        fields::constant(n, 0.0),
        p.exterior.clone(),
    );
    let asm = obstacle::assemble(&base)?;
    solve_assembled(p, &asm, opts)
}

pub fn solve_assembled(
    p: &ParabolicProblem,
    asm: &Assembled,
    opts: &SolveOptions,
) -> Result<ParabolicSolution, ParabolicError> {
    let n = p.grid.dim;
    let m = asm.unknowns.len();
    let pts = asm.points();
    let mut u = asm.sample_interior(p.initial.as_ref());
    if u.iter().any(|v| *v < 0.0) {
        return Err(ParabolicError::Parameter("initial data must be nonnegative".into()));
    }
    let mut sol = ParabolicSolution {
        times: vec![0.0],
        levels: vec![asm.to_grid_function(&u, p.exterior.clone())?],
        residuals: vec![0.0],
        iterations: vec![0],
        active_counts: vec![u.iter().filter(|v| **v <= 0.0).count()],
    };
    let zero = DVector::zeros(m);
    let identity = DMatrix::<f64>::identity(m, m) / p.dt;
    for k in 1..=p.steps() {
        let t = k as f64 * p.dt;
        let mt = p.kernel.time_factor(t);
        if !(mt > 0.0) {
            return Err(ParabolicError::Parameter(format!("time modulation m({t}) = {mt} is not positive")));
        }
        let a = &asm.matrix * mt + &identity;
        let f = DVector::from_iterator(m, pts.iter().map(|x| (p.forcing)(t, &x[..n])));
        let b = &u / p.dt + f + &asm.exterior_load * mt;
        let lvl = obstacle::solve_lcp_from(&a, &b, &zero, opts, Some(&u)).map_err(|e| ParabolicError::Level {
            level: k,
            time: t,
            source: e,
        })?;
        u = lvl.u;
        sol.times.push(t);
        sol.levels.push(asm.to_grid_function(&u, p.exterior.clone())?);
        sol.residuals.push(lvl.residual);
        sol.iterations.push(lvl.iterations);
        sol.active_counts.push(u.iter().filter(|v| **v <= 2.0 * opts.tol).count());
    }
    Ok(sol)
}

pub fn default_options() -> SolveOptions {
    SolveOptions { method: Method::Psor { omega: 1.5 }, tol: 1e-10, max_iter: 200_000 }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpaceSemiconvexity {
    pub report: SemiconvexityReport,
    pub time: f64,
    pub forcing_norm: f64,
    pub sup_u: f64,
}

/// Measured constant over `(t_end/2, t_end] × B_{1/2}`-analog, normalised by
/// `sup_t ‖f(t)‖_{C^{1,1}} + sup |u|`.
pub fn measure_space_semiconvexity(
    sol: &ParabolicSolution,
    p: &ParabolicProblem,
    e: &[f64],
    step_multiples: &[usize],
) -> Result<SpaceSemiconvexity, ParabolicError> {
    let g = &p.grid;
    let n = g.dim;
    let center = vec![0.5 * (g.lo + g.hi); n];
    let whole = (g.hi - g.lo) * (n as f64).sqrt();
    let mut fnorm: f64 = 0.0;
    let mut sup_u: f64 = 0.0;
    for (t, gf) in sol.times.iter().zip(&sol.levels) {
        sup_u = sup_u.max(gf.sup_norm());
        if *t > 0.0 {
            let fv = (0..g.len()).map(|k| (p.forcing)(*t, &g.node(k)[..n])).collect();
            let fg = GridFunction::new(g.clone(), fv, Exterior::Zero)?;
            fnorm = fnorm.max(c11_surrogate(&fg, &center, whole));
        }
    }
    let denom = fnorm + sup_u;
    let mut best: Option<(SemiconvexityReport, f64)> = None;
    for (t, gf) in sol.times.iter().zip(&sol.levels) {
        if *t <= 0.5 * p.t_end {
            continue;
        }
        let r = measure_semiconvexity(gf, e, step_multiples, &center, 0.25 * (g.hi - g.lo), denom)?;
        if best.as_ref().map_or(true, |(b, _)| r.min_second_difference < b.min_second_difference) {
            best = Some((r, *t));
        }
    }
    let (report, time) = best.ok_or_else(|| ParabolicError::Parameter("no time level in (t_end/2, t_end]".into()))?;
    Ok(SpaceSemiconvexity { report, time, forcing_norm: fnorm, sup_u })
}

/// `t ↦ u(t, ·)`
pub type SpaceTimeField = Arc<dyn Fn(f64) -> FieldRef + Send + Sync>;

/// Separable `a(t) w(x)`.
pub fn separable(a: Arc<dyn Fn(f64) -> f64 + Send + Sync>, w: FieldRef) -> SpaceTimeField {
    Arc::new(move |t| fields::scale(&w, a(t)))
}

/// A time-independent field.
pub fn stationary(w: FieldRef) -> SpaceTimeField {
    Arc::new(move |_| w.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "tag")]
pub enum ParabolicVariant {
    FirstOrder {
        e: Vec<f64>,
    },
    PosPart {
        e: Vec<f64>,
    },
    /// `W = ∂²_{ee} ũ` (positive part), `Y = ∂_e ũ`, `ũ = η u`.
    SecondOrder {
        e: Vec<f64>,
        inner: CutoffSpec,
    },
}

impl ParabolicVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            ParabolicVariant::FirstOrder { .. } => "Parabolic",
            ParabolicVariant::PosPart { .. } => "ParabolicPosPart",
            ParabolicVariant::SecondOrder { .. } => "ParabolicSecondOrder",
        }
    }
}

fn setup_at(variant: &ParabolicVariant, u: &FieldRef, eta: FieldRef) -> Result<Setup, ParabolicError> {
    let n = u.dim();
    let unit = |e: &[f64]| -> Result<Vec<f64>, ParabolicError> {
        if e.len() != n || fields::norm(e) == 0.0 {
            return Err(ParabolicError::Parameter("e must be a nonzero vector of the field dimension".into()));
        }
        Ok(e.to_vec())
    };
    let mk = |w, pos, y| Setup { w, pos, eta, y, averaged: None, drift: None, region: None };
    Ok(match variant {
        ParabolicVariant::FirstOrder { e } => mk(fields::directional_derivative(u, &unit(e)?, 1)?, false, u.clone()),
        ParabolicVariant::PosPart { e } => mk(fields::directional_derivative(u, &unit(e)?, 1)?, true, u.clone()),
        ParabolicVariant::SecondOrder { e, inner } => {
            let e = unit(e)?;
            let ut = fields::product(&(Arc::new(inner.build(n)?) as FieldRef), u);
            mk(fields::directional_derivative(&ut, &e, 2)?, true, fields::directional_derivative(&ut, &e, 1)?)
        }
    })
}

/// Fourth-order central difference of `g` at `t` with an error estimate from
/// the step-doubled difference.
fn time_derivative(g: &dyn Fn(f64) -> f64, t: f64, tau: f64) -> (f64, f64) {
    let d = |h: f64| (-g(t + 2.0 * h) + 8.0 * g(t + h) - 8.0 * g(t - h) + g(t - 2.0 * h)) / (12.0 * h);
    let a = d(tau);
    let b = d(2.0 * tau);
    (a, (a - b).abs())
}

/// Defect pieces of the parabolic estimate at `(t, x)`.
#[allow(clippy::too_many_arguments)]
pub fn parabolic_components(
    op: &Operator,
    variant: &ParabolicVariant,
    u: &SpaceTimeField,
    eta1: &TimeCutoff,
    eta2: &CutoffFunction,
    t: f64,
    x: &[f64],
    tau: f64,
) -> Result<Components, ParabolicError> {
    let eta2_ref: FieldRef = Arc::new(eta2.clone());
    let at = |tt: f64| setup_at(variant, &u(tt), fields::scale(&eta2_ref, eta1.value(tt)));
    let st = at(t)?;
    let mt = op.kernel.time_factor(t);
    let mut c = bernstein::components(op, &st, x);
    c.l_main *= mt;
    c.r_main *= mt;
    c.l_sigma *= mt;
    c.r_sigma *= mt;
    c.err_main *= mt;
    c.err_sigma *= mt;

    let pp = |w: f64, pos: bool| if pos { w.max(0.0) } else { w };
    let main = |tt: f64| {
        let s = at(tt).expect("setup validated at t");
        let e = s.eta.value(x);
        let p = pp(s.w.value(x), s.pos);
        e * e * p * p
    };
    let w_of = |tt: f64| at(tt).expect("setup validated at t").w.value(x);
    let y_of = |tt: f64| at(tt).expect("setup validated at t").y.value(x);
    let (dmain, e1) = time_derivative(&main, t, tau);
    let (dw, e2) = time_derivative(&w_of, t, tau);
    let (dy2, e3) = time_derivative(&|tt| y_of(tt).powi(2), t, tau);
    let (dy, e4) = time_derivative(&y_of, t, tau);
    let eta = st.eta.value(x);
    let p = pp(st.w.value(x), st.pos);
    let y = st.y.value(x);
    c.l_main += dmain;
    c.r_main += 2.0 * eta * eta * p * dw;
    c.l_sigma += dy2;
    c.r_sigma += 2.0 * y * dy;
    c.err_main += e1 + 2.0 * eta * eta * p.abs() * e2;
    c.err_sigma += e3 + 2.0 * y.abs() * e4;
    Ok(c)
}

#[allow(clippy::too_many_arguments)]
fn space_time_components(
    kernel: &KernelSpec,
    variant: &ParabolicVariant,
    eta1: &TimeCutoff,
    eta2: &CutoffFunction,
    u: &SpaceTimeField,
    q: &QuadratureConfig,
    times: &[f64],
    points: &[Point],
) -> Result<Vec<Components>, ParabolicError> {
    let n = kernel.dim;
    if !kernel.symmetric {
        return Err(ParabolicError::Parameter("parabolic key estimates need symmetric kernels".into()));
    }
    if eta1.t1 != f64::NEG_INFINITY && !(eta1.t1 > eta1.t0) {
        return Err(ParabolicError::Parameter("η₁ needs t0 < t1".into()));
    }
    let lip = eta1.power_lipschitz(2.0 * kernel.s());
    if !lip.is_finite() || lip > 1e8 {
        return Err(ParabolicError::Parameter("η₁^{2s} is not Lipschitz on [0,1]".into()));
    }
    let tau = 1e-3;
    if times.is_empty() || times.iter().any(|&t| t - 4.0 * tau < 0.0) {
        return Err(ParabolicError::Parameter("evaluation times must be nonempty and exceed 4e-3".into()));
    }
    let u0 = u(times[0]);
    setup_at(variant, &u0, fields::constant(n, 1.0))?;
    let op = Operator::new(kernel, q, q.rho_for(u0.fd_step()))?;
    let jobs: Vec<(f64, Point)> = times.iter().flat_map(|&t| points.iter().map(move |p| (t, *p))).collect();
    jobs.par_iter().map(|(t, p)| parabolic_components(&op, variant, u, eta1, eta2, *t, &p[..n], tau)).collect()
}

/// `(∂_t + L_{K(t)})(η²P(W)² + σY²) ≤ 2η²(∂_t + L_{K(t)})(W)P(W) + 2σ(∂_t + L_{K(t)})(Y)Y`
/// on `times × points`, with `η = η₁(t)η₂(x)`.
#[allow(clippy::too_many_arguments)]
pub fn check_parabolic_key_estimate(
    kernel: &KernelSpec,
    variant: &ParabolicVariant,
    eta1: &TimeCutoff,
    eta2: &CutoffFunction,
    u: &SpaceTimeField,
    sigma: f64,
    q: &QuadratureConfig,
    times: &[f64],
    points: &[Point],
    tol: Tolerance,
) -> Result<BernsteinReport, ParabolicError> {
    let n = kernel.dim;
    let comps = space_time_components(kernel, variant, eta1, eta2, u, q, times, points)?;
    let flat: Vec<Point> = times.iter().flat_map(|_| points.iter().copied()).collect();
    let mut rep = BernsteinReport::from_components(variant.tag(), sigma, &flat, n, &comps, tol);
    rep.points = times
        .iter()
        .flat_map(|&t| {
            points.iter().map(move |p| {
                let mut v = vec![t];
                v.extend_from_slice(&p[..n]);
                v
            })
        })
        .collect();
    Ok(rep)
}

/// Smallest σ passing on `times × points` for every member of `ensemble`.
#[allow(clippy::too_many_arguments)]
pub fn find_min_sigma(
    kernel: &KernelSpec,
    variant: &ParabolicVariant,
    eta1: &TimeCutoff,
    eta2: &CutoffFunction,
    ensemble: &[SpaceTimeField],
    q: &QuadratureConfig,
    times: &[f64],
    points: &[Point],
    tol: Tolerance,
    opts: bernstein::SearchOptions,
) -> Result<bernstein::SigmaSearch, ParabolicError> {
    let all: Result<Vec<_>, _> =
        ensemble.iter().map(|u| space_time_components(kernel, variant, eta1, eta2, u, q, times, points)).collect();
    let flat: Vec<Point> = times.iter().flat_map(|_| points.iter().copied()).collect();
    bernstein::min_sigma_from_components(&all?, &flat, kernel.dim, tol, opts)
        .map_err(|e| ParabolicError::Parameter(e.to_string()))
}

/// Interior nodes of `[-r, r]ⁿ` with spacing `dx`.
pub fn box_points(dim: usize, r: f64, dx: f64) -> Vec<Point> {
    let m = (2.0 * r / dx).round() as usize + 1;
    (0..m.pow(dim as u32))
        .map(|k| {
            let mut c = k;
            let mut p = [0.0; MAX_DIM];
            for pa in p.iter_mut().take(dim) {
                *pa = -r + dx * (c % m) as f64;
                c /= m;
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_negative_forcing_keeps_zero() {
        let mut p = ParabolicProblem::shipped(32, 0.1).unwrap();
        p.forcing = Arc::new(|_, _| -5.0);
        let s = solve(&p, &default_options()).unwrap();
        assert!(s.levels.iter().all(|g| g.values.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn constant_field_has_zero_parabolic_defect() {
        let k = KernelSpec::fractional(1, 0.5);
        let u = stationary(fields::constant(1, 1.5));
        let r = check_parabolic_key_estimate(
            &k,
            &ParabolicVariant::FirstOrder { e: vec![1.0] },
            &TimeCutoff::standard(),
            &CutoffFunction::standard(1),
            &u,
            2.0,
            &QuadratureConfig::default(),
            &[0.2, 0.5],
            &box_points(1, 0.75, 0.25),
            Tolerance::default(),
        )
        .unwrap();
        assert!(r.defect.iter().all(|d| d.abs() < 1e-10));
    }
}
