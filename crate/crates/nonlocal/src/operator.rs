//! Quadrature for `Lu(x) = ∫ (u(x) - u(y)) K(x - y) dy`, the bilinear form
//! `B(u,v)`, compensated nonsymmetric operators, drift and `∂_t + L`.
//!
//! Every operator is reduced to a discrete measure (a *stencil*) of offsets
//! `d_k` and weights `ω_k ≈ K(-d_k)·vol`, so that
//! `Lu(x) ≈ Σ ω_k (u(x) - u(x + d_k)) + ∇u(x)·c + tail`. The inner cell
//! `B_ρ` is represented by symmetric pairs `±hθ` carrying the second moment
//! of K, which integrates the local quadratic Taylor model exactly.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fields::{dot, Field, FieldError, FieldRef};
use crate::kernels::{KernelError, KernelSpec, Point, MAX_DIM};
use crate::quadrature::{GaussLegendre, SphereRule};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("kernel is not symmetric; use the nonsymmetric evaluation")]
    NotSymmetric,
    #[error("invalid quadrature configuration: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct QuadratureConfig {
    /// Taylor-cell radius ρ; `None` picks 1e-3 for closed-form fields and
    /// 2Δx for grid functions.
    pub inner_radius: Option<f64>,
    /// Number of annuli between ρ and the far cutoff; `None` uses the ratio
    /// 2^{1/2} (2^{1/4} for s ≥ 0.9).
    pub annulus_count: Option<usize>,
    pub points_per_annulus: usize,
    /// Base number of directions (n ≥ 2), grown with the annulus radius.
    pub angular_points: usize,
    pub max_angular_points: usize,
    pub far_cutoff: f64,
    /// Radius beyond which the number of directions stops growing.
    pub angular_scale: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            inner_radius: None,
            annulus_count: None,
            points_per_annulus: 8,
            angular_points: 32,
            max_angular_points: 256,
            far_cutoff: 64.0,
            angular_scale: 0.5,
        }
    }
}

impl QuadratureConfig {
    pub fn rho_for(&self, step: f64) -> f64 {
        self.inner_radius.unwrap_or(if step > 1e-3 { 2.0 * step } else { 1e-3 })
    }

    fn validate(&self) -> Result<(), OperatorError> {
        if self.points_per_annulus == 0 || self.angular_points == 0 {
            return Err(OperatorError::Config("point counts must be positive".into()));
        }
        if let Some(0) = self.annulus_count {
            return Err(OperatorError::Config("annulus_count must be positive".into()));
        }
        if let Some(r) = self.inner_radius {
            if !(r > 0.0 && r < self.far_cutoff) {
                return Err(OperatorError::Config("need 0 < inner_radius < far_cutoff".into()));
            }
        }
        Ok(())
    }
}

/// How the first-order term is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    /// Symmetric kernel: first-order terms cancel.
    Symmetric,
    /// s < 1/2: plain integral.
    None,
    /// s = 1/2: principal value on symmetric annuli.
    PrincipalValue,
    /// s > 1/2: subtract `∇u(x)·(x - y)`.
    Gradient,
}

#[derive(Debug, Clone)]
pub struct Stencil {
    pub dim: usize,
    pub offsets: Vec<Point>,
    pub weights: Vec<f64>,
    /// `Lu += ∇u(x)·c`.
    pub compensation: Point,
    pub needs_gradient: bool,
    /// Far entries beyond the cutoff: replaced by the field's far value when
    /// known, sampled otherwise.
    pub tail_offsets: Vec<Point>,
    pub tail_weights: Vec<f64>,
    pub rho: f64,
}

impl Stencil {
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.tail_weights.iter().sum::<f64>()
    }
}

fn angular_rule(dim: usize, m: usize) -> SphereRule {
    match dim {
        1 => SphereRule::full(1, 2),
        2 => SphereRule::full(2, m),
        _ => SphereRule::full(3, (m / 2).max(8)),
    }
}

/// Builds the stencil for inner radius `rho` and geometric annulus ratio.
fn build_stencil(kernel: &KernelSpec, cfg: &QuadratureConfig, mode: Compensation, rho: f64, ratio: f64) -> Stencil {
    let n = kernel.dim;
    let big_r = cfg.far_cutoff;
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let mut comp = [0.0; MAX_DIM];
    let neg = |th: &Point| {
        let mut p = [0.0; MAX_DIM];
        for i in 0..n {
            p[i] = -th[i];
        }
        p
    };

    // inner cell: second moment of K(-·) on B_ρ carried by the pairs ±hθ
    let h = 0.5 * rho;
    let inner_rule = angular_rule(n, cfg.angular_points);
    for (th, w) in inner_rule.directions.iter().zip(&inner_rule.weights) {
        let m = kernel.radial_integral(&neg(th)[..n], 0.0, rho, 2.0);
        let wt = w * m / (2.0 * h * h);
        if wt == 0.0 {
            continue;
        }
        for sgn in [1.0, -1.0] {
            let mut d = [0.0; MAX_DIM];
            for i in 0..n {
                d[i] = sgn * h * th[i];
            }
            offsets.push(d);
            weights.push(wt);
        }
    }
    if mode == Compensation::None {
        let m1 = kernel.first_moment(0.0, rho);
        for i in 0..n {
            comp[i] += m1[i];
        }
    }

    // annuli
    let count = ((big_r / rho).ln() / ratio.ln()).ceil().max(1.0) as usize;
    let q = (big_r / rho).powf(1.0 / count as f64);
    let gl = GaussLegendre::new(cfg.points_per_annulus);
    let mut r0 = rho;
    for _ in 0..count {
        let r1 = r0 * q;
        let m = if n == 1 {
            2
        } else {
            let grow = (r0 / cfg.angular_scale).ceil().max(1.0) as usize;
            (cfg.angular_points * grow).min(cfg.max_angular_points.max(cfg.angular_points))
        };
        let rule = angular_rule(n, m);
        for (r, wr) in gl.mapped(r0, r1) {
            let jac = r.powi(n as i32 - 1) * wr;
            for (th, wth) in rule.directions.iter().zip(&rule.weights) {
                let mut d = [0.0; MAX_DIM];
                for i in 0..n {
                    d[i] = r * th[i];
                }
                let k = kernel.density(&neg(&d)[..n]);
                let wt = k * jac * wth;
                if wt == 0.0 {
                    continue;
                }
                offsets.push(d);
                weights.push(wt);
                if mode == Compensation::Gradient {
                    for i in 0..n {
                        comp[i] += wt * d[i];
                    }
                }
            }
        }
        r0 = r1;
    }

    // tail beyond the far cutoff
    let mut tail_offsets = Vec::new();
    let mut tail_weights = Vec::new();
    let far_rule = angular_rule(n, cfg.angular_points);
    for (th, w) in far_rule.directions.iter().zip(&far_rule.weights) {
        let nth = neg(th);
        let mass = if kernel.is_radial() {
            kernel.radial_integral(&th[..n], big_r, f64::INFINITY, 0.0)
        } else {
            kernel.radial_integral(&nth[..n], big_r, f64::INFINITY, 0.0)
        };
        if mass * w == 0.0 {
            continue;
        }
        let mut d = [0.0; MAX_DIM];
        for i in 0..n {
            d[i] = 2.0 * big_r * th[i];
        }
        tail_offsets.push(d);
        tail_weights.push(mass * w);
    }
    if mode == Compensation::Gradient {
        let m1 = kernel.first_moment(big_r, f64::INFINITY);
        for i in 0..n {
            comp[i] -= m1[i];
        }
    }
    let needs_gradient = matches!(mode, Compensation::None | Compensation::Gradient) && comp.iter().any(|c| *c != 0.0);
    Stencil { dim: n, offsets, weights, compensation: comp, needs_gradient, tail_offsets, tail_weights, rho }
}

fn mode_for(kernel: &KernelSpec) -> Compensation {
    if kernel.symmetric {
        return Compensation::Symmetric;
    }
    let s = kernel.s();
    if (s - 0.5).abs() < 1e-12 {
        Compensation::PrincipalValue
    } else if s < 0.5 {
        Compensation::None
    } else {
        Compensation::Gradient
    }
}

/// A kernel with precomputed fine and coarse stencils.
#[derive(Debug, Clone)]
pub struct Operator {
    pub kernel: KernelSpec,
    pub mode: Compensation,
    pub fine: Stencil,
    pub coarse: Stencil,
}

/// Value and error estimate at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Operator {
    /// Builds stencils for inner radius `rho`. Nonsymmetric kernels with
    /// s = 1/2 must pass the cancellation check.
    pub fn new(kernel: &KernelSpec, cfg: &QuadratureConfig, rho: f64) -> Result<Self, OperatorError> {
        kernel.check()?;
        cfg.validate()?;
        if !(rho > 0.0 && rho < cfg.far_cutoff / 4.0) {
            return Err(OperatorError::Config(format!("inner radius {rho} out of range")));
        }
        let mode = mode_for(kernel);
        if mode == Compensation::PrincipalValue {
            let c = crate::kernels::check_cancellation(kernel);
            if !c.pass {
                return Err(KernelError::SpecViolation(format!(
                    "cancellation condition fails (worst relative first moment {:.3e})",
                    c.worst_ratio * 1e-8
                ))
                .into());
            }
        }
        let ratio = match cfg.annulus_count {
            Some(c) => (cfg.far_cutoff / rho).powf(1.0 / c as f64),
            None if kernel.s() >= 0.9 => 2f64.powf(0.25),
            None => 2f64.sqrt(),
        };
        let fine = build_stencil(kernel, cfg, mode, rho, ratio);
        let coarse = build_stencil(kernel, cfg, mode, 2.0 * rho, ratio * ratio);
        Ok(Operator { kernel: kernel.clone(), mode, fine, coarse })
    }

    pub fn symmetric(kernel: &KernelSpec, cfg: &QuadratureConfig, rho: f64) -> Result<Self, OperatorError> {
        if !kernel.symmetric {
            return Err(OperatorError::NotSymmetric);
        }
        Self::new(kernel, cfg, rho)
    }

    fn eval_stencil(st: &Stencil, u: &dyn Field, x: &[f64]) -> (f64, f64) {
        let n = st.dim;
        let ux = u.value(x);
        let mut acc = 0.0;
        let mut mag = 0.0;
        let mut p = [0.0; MAX_DIM];
        for (d, w) in st.offsets.iter().zip(&st.weights) {
            for i in 0..n {
                p[i] = x[i] + d[i];
            }
            let uy = u.value(&p[..n]);
            acc += w * (ux - uy);
            mag += w * (ux.abs() + uy.abs());
        }
        let mut tail_err = 0.0;
        match u.far_value() {
            Some(far) => {
                let tw: f64 = st.tail_weights.iter().sum();
                acc += tw * (ux - far);
                mag += tw * (ux.abs() + far.abs());
            }
            None => {
                for (d, w) in st.tail_offsets.iter().zip(&st.tail_weights) {
                    for i in 0..n {
                        p[i] = x[i] + d[i];
                    }
                    let uy = u.value(&p[..n]);
                    for i in 0..n {
                        p[i] = x[i] + 2.0 * d[i];
                    }
                    let uz = u.value(&p[..n]);
                    acc += w * (ux - uy);
                    mag += w * (ux.abs() + uy.abs());
                    tail_err += w * (uy - uz).abs();
                }
            }
        }
        if st.needs_gradient {
            let g = u.gradient(x);
            let c = dot(&g[..n], &st.compensation[..n]);
            acc += c;
            mag += c.abs();
        }
        (acc, 4.0 * f64::EPSILON * mag + tail_err)
    }

    /// `Lu(x)` with error estimate `|Q_fine - Q_coarse|` + tail + roundoff.
    pub fn eval(&self, u: &dyn Field, x: &[f64]) -> Estimate {
        let (f, ef) = Self::eval_stencil(&self.fine, u, x);
        let (c, _) = Self::eval_stencil(&self.coarse, u, x);
        Estimate { value: f, error: (f - c).abs() + ef }
    }

    fn bilinear_stencil(st: &Stencil, u: &dyn Field, v: &dyn Field, x: &[f64]) -> (f64, f64) {
        let n = st.dim;
        let (ux, vx) = (u.value(x), v.value(x));
        let mut acc = 0.0;
        let mut mag = 0.0;
        let mut p = [0.0; MAX_DIM];
        for (d, w) in st.offsets.iter().zip(&st.weights) {
            for i in 0..n {
                p[i] = x[i] + d[i];
            }
            let t = w * (ux - u.value(&p[..n])) * (vx - v.value(&p[..n]));
            acc += t;
            mag += t.abs();
        }
        let mut tail_err = 0.0;
        match (u.far_value(), v.far_value()) {
            (Some(fu), Some(fv)) => {
                let tw: f64 = st.tail_weights.iter().sum();
                acc += tw * (ux - fu) * (vx - fv);
            }
            _ => {
                for (d, w) in st.tail_offsets.iter().zip(&st.tail_weights) {
                    for i in 0..n {
                        p[i] = x[i] + d[i];
                    }
                    let (uy, vy) = (u.value(&p[..n]), v.value(&p[..n]));
                    for i in 0..n {
                        p[i] = x[i] + 2.0 * d[i];
                    }
                    let (uz, vz) = (u.value(&p[..n]), v.value(&p[..n]));
                    acc += w * (ux - uy) * (vx - vy);
                    tail_err += w * ((ux - uy) * (vx - vy) - (ux - uz) * (vx - vz)).abs();
                }
            }
        }
        (acc, 4.0 * f64::EPSILON * mag + tail_err)
    }

    /// `B(u,v)(x) = ∫ (u(x) - u(y))(v(x) - v(y)) K(x - y) dy`.
    pub fn bilinear_eval(&self, u: &dyn Field, v: &dyn Field, x: &[f64]) -> Estimate {
        let (f, ef) = Self::bilinear_stencil(&self.fine, u, v, x);
        let (c, _) = Self::bilinear_stencil(&self.coarse, u, v, x);
        Estimate { value: f, error: (f - c).abs() + ef }
    }
}

/// Values and error estimates of an operator at a list of points.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorEval {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub config: QuadratureConfig,
}

impl OperatorEval {
    fn from_estimates(points: &[Point], dim: usize, est: Vec<Estimate>, cfg: &QuadratureConfig) -> Self {
        OperatorEval {
            points: points.iter().map(|p| p[..dim].to_vec()).collect(),
            values: est.iter().map(|e| e.value).collect(),
            errors: est.iter().map(|e| e.error).collect(),
            config: cfg.clone(),
        }
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// CSV: coordinates, value, error estimate.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.points.first().map_or(1, Vec::len);
        let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},value,error", cols.join(","))?;
        for ((p, v), e) in self.points.iter().zip(&self.values).zip(&self.errors) {
            let c: Vec<String> = p.iter().map(|c| format!("{c:.17e}")).collect();
            writeln!(w, "{},{v:.17e},{e:.17e}", c.join(","))?;
        }
        Ok(())
    }
}

fn par_eval<F: Fn(&[f64]) -> Estimate + Sync>(points: &[Point], dim: usize, f: F) -> Vec<Estimate> {
    points.par_iter().map(|p| f(&p[..dim])).collect()
}

/// `Lu` for a symmetric kernel.
pub fn apply(
    kernel: &KernelSpec,
    u: &FieldRef,
    cfg: &QuadratureConfig,
    points: &[Point],
) -> Result<OperatorEval, OperatorError> {
    let op = Operator::symmetric(kernel, cfg, cfg.rho_for(u.fd_step()))?;
    let est = par_eval(points, kernel.dim, |x| op.eval(u.as_ref(), x));
    Ok(OperatorEval::from_estimates(points, kernel.dim, est, cfg))
}

/// `Lu` for a (possibly) nonsymmetric kernel with the compensation chosen
/// by s.
pub fn apply_nonsym(
    kernel: &KernelSpec,
    u: &FieldRef,
    cfg: &QuadratureConfig,
    points: &[Point],
) -> Result<OperatorEval, OperatorError> {
    let op = Operator::new(kernel, cfg, cfg.rho_for(u.fd_step()))?;
    let est = par_eval(points, kernel.dim, |x| op.eval(u.as_ref(), x));
    Ok(OperatorEval::from_estimates(points, kernel.dim, est, cfg))
}

pub fn bilinear(
    kernel: &KernelSpec,
    u: &FieldRef,
    v: &FieldRef,
    cfg: &QuadratureConfig,
    points: &[Point],
) -> Result<OperatorEval, OperatorError> {
    let rho = cfg.rho_for(u.fd_step().max(v.fd_step()));
    let op = Operator::new(kernel, cfg, rho)?;
    let est = par_eval(points, kernel.dim, |x| op.bilinear_eval(u.as_ref(), v.as_ref(), x));
    Ok(OperatorEval::from_estimates(points, kernel.dim, est, cfg))
}

/// `(L + b·∇)u` with the kernel's drift `b`.
pub fn apply_with_drift(
    kernel: &KernelSpec,
    u: &FieldRef,
    cfg: &QuadratureConfig,
    points: &[Point],
) -> Result<OperatorEval, OperatorError> {
    let op = Operator::new(kernel, cfg, cfg.rho_for(u.fd_step()))?;
    let n = kernel.dim;
    let b = kernel.drift.clone();
    let est = par_eval(points, n, |x| {
        let e = op.eval(u.as_ref(), x);
        let g = u.gradient(x);
        Estimate { value: e.value + dot(&b, &g[..n]), error: e.error }
    });
    Ok(OperatorEval::from_estimates(points, n, est, cfg))
}

/// Second-order time derivative weights at level `k` of the (possibly
/// nonuniform) time list.
pub fn time_derivative_weights(times: &[f64], k: usize) -> Result<[(usize, f64); 3], OperatorError> {
    if times.len() < 3 {
        return Err(OperatorError::Evaluation("need at least three time levels".into()));
    }
    if k >= times.len() {
        return Err(OperatorError::Evaluation("time level out of range".into()));
    }
    let (a, b, c) = if k == 0 {
        (0, 1, 2)
    } else if k == times.len() - 1 {
        (k - 2, k - 1, k)
    } else {
        (k - 1, k, k + 1)
    };
    let t = times[k];
    let (ta, tb, tc) = (times[a], times[b], times[c]);
    // derivative of the Lagrange interpolant through (ta, tb, tc) at t
    let wa = ((t - tb) + (t - tc)) / ((ta - tb) * (ta - tc));
    let wb = ((t - ta) + (t - tc)) / ((tb - ta) * (tb - tc));
    let wc = ((t - ta) + (t - tb)) / ((tc - ta) * (tc - tb));
    Ok([(a, wa), (b, wb), (c, wc)])
}

/// `∂_t u + L_{K(t)} u` at level `k` of a time-indexed field, where
/// `K(t) = m(t) K`.
pub fn parabolic_apply(
    kernel: &KernelSpec,
    levels: &[(f64, FieldRef)],
    k: usize,
    cfg: &QuadratureConfig,
    points: &[Point],
) -> Result<OperatorEval, OperatorError> {
    let times: Vec<f64> = levels.iter().map(|(t, _)| *t).collect();
    let w = time_derivative_weights(&times, k)?;
    let (t, u) = &levels[k];
    let op = Operator::symmetric(kernel, cfg, cfg.rho_for(u.fd_step()))?;
    let m = kernel.time_factor(*t);
    let est = par_eval(points, kernel.dim, |x| {
        let e = op.eval(u.as_ref(), x);
        let dt: f64 = w.iter().map(|(i, c)| c * levels[*i].1.value(x)).sum();
        Estimate { value: dt + m * e.value, error: m.abs() * e.error }
    });
    Ok(OperatorEval::from_estimates(points, kernel.dim, est, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{analytic, constant};

    #[test]
    fn constants_are_annihilated() {
        let k = KernelSpec::fractional(2, 0.4);
        let u = constant(2, 3.5);
        let pts = [[0.1, 0.2, 0.0], [0.0, 0.0, 0.0]];
        let e = apply(&k, &u, &QuadratureConfig::default(), &pts).unwrap();
        assert!(e.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fractional_laplacian_of_gaussian_1d() {
        // for K = c_{1,s}|y|^{-1-2s} the fractional Laplacian of exp(-x²)
        // at 0 equals 4^s Γ(1/2+s)/Γ(1/2); with K = |y|^{-1-2s} divide by
        // c_{1,1/2} = 1/π at s = 1/2: value π · 2 · Γ(1)/Γ(1/2) = 2√π.
        let k = KernelSpec::fractional(1, 0.5);
        let u = analytic(1, "exp(-x^2)").unwrap();
        let e = apply(&k, &u, &QuadratureConfig::default(), &[[0.0; 3]]).unwrap();
        let exact = 2.0 * std::f64::consts::PI.sqrt();
        assert!((e.values[0] - exact).abs() < 1e-7 * exact, "{} vs {exact}", e.values[0]);
        assert!(e.errors[0] >= (e.values[0] - exact).abs());
    }

    #[test]
    fn time_weights_differentiate_quadratics() {
        let times = [0.0, 0.1, 0.25, 0.3];
        for k in 0..4 {
            let w = time_derivative_weights(&times, k).unwrap();
            let d: f64 = w.iter().map(|(i, c)| c * times[*i] * times[*i]).sum();
            assert!((d - 2.0 * times[k]).abs() < 1e-12);
        }
    }
}
