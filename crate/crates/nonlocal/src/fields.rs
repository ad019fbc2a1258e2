//! Functions on ℝⁿ: analytic closed forms, grid functions with explicit
//! exterior rules, cutoffs, and the difference/averaging combinators used by
//! the key estimates.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::expr::Expr;
use crate::kernels::{Mat, Point, MAX_DIM};
use crate::quadrature::{smoothstep, smoothstep_d1, smoothstep_d2, GaussLegendre};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// A real function on ℝⁿ with (possibly numerical) derivatives.
pub trait Field: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Point {
        fd_gradient(self, x, self.fd_step())
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        fd_hessian(self, x, self.fd_step())
    }

    /// Step used by the default difference formulas.
    fn fd_step(&self) -> f64 {
        1e-3
    }

    /// Limit of `u(x)` as `|x| → ∞`, when known.
    fn far_value(&self) -> Option<f64> {
        None
    }
}

pub type FieldRef = Arc<dyn Field>;

fn shifted(x: &[f64], i: usize, h: f64) -> Point {
    let mut p = [0.0; MAX_DIM];
    p[..x.len()].copy_from_slice(x);
    p[i] += h;
    p
}

/// Fourth-order central differences.
pub fn fd_gradient<F: Field + ?Sized>(f: &F, x: &[f64], h: f64) -> Point {
    let n = f.dim();
    let mut g = [0.0; MAX_DIM];
    for (i, gi) in g.iter_mut().enumerate().take(n) {
        let v = |k: f64| f.value(&shifted(&x[..n], i, k * h)[..n]);
        *gi = (-v(2.0) + 8.0 * v(1.0) - 8.0 * v(-1.0) + v(-2.0)) / (12.0 * h);
    }
    g
}

/// Fourth-order Hessian: Richardson combination of second-order stencils at
/// steps h and 2h.
pub fn fd_hessian<F: Field + ?Sized>(f: &F, x: &[f64], h: f64) -> Mat {
    let n = f.dim();
    let mut m = [[0.0; MAX_DIM]; MAX_DIM];
    let at = |i: usize, a: f64, j: usize, b: f64| {
        let mut p = shifted(&x[..n], i, a);
        p[j] += b;
        f.value(&p[..n])
    };
    let f0 = f.value(&x[..n]);
    for i in 0..n {
        let d = |k: f64| (at(i, k, i, 0.0) + at(i, -k, i, 0.0) - 2.0 * f0) / (k * k);
        m[i][i] = (4.0 * d(h) - d(2.0 * h)) / 3.0;
        for j in 0..i {
            let d = |k: f64| (at(i, k, j, k) - at(i, k, j, -k) - at(i, -k, j, k) + at(i, -k, j, -k)) / (4.0 * k * k);
            let v = (4.0 * d(h) - d(2.0 * h)) / 3.0;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

/// Hessian by central differences of an analytic gradient.
pub fn fd_hessian_from_gradient<F: Field + ?Sized>(f: &F, x: &[f64], h: f64) -> Mat {
    let n = f.dim();
    let mut m = [[0.0; MAX_DIM]; MAX_DIM];
    for j in 0..n {
        let gp = f.gradient(&shifted(&x[..n], j, h)[..n]);
        let gm = f.gradient(&shifted(&x[..n], j, -h)[..n]);
        let gp2 = f.gradient(&shifted(&x[..n], j, 2.0 * h)[..n]);
        let gm2 = f.gradient(&shifted(&x[..n], j, -2.0 * h)[..n]);
        for i in 0..n {
            m[i][j] = (-gp2[i] + 8.0 * gp[i] - 8.0 * gm[i] + gm2[i]) / (12.0 * h);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let a = 0.5 * (m[i][j] + m[j][i]);
            m[i][j] = a;
            m[j][i] = a;
        }
    }
    m
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_scaled(x: &[f64], h: &[f64], t: f64) -> Point {
    let mut p = [0.0; MAX_DIM];
    for i in 0..x.len() {
        p[i] = x[i] + t * h[i];
    }
    p
}

// ---------------------------------------------------------------------------
// Elementary fields

#[derive(Debug, Clone)]
pub struct ConstantField {
    pub dim: usize,
    pub value: f64,
}

impl Field for ConstantField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64]) -> f64 {
        self.value
    }
    fn gradient(&self, _x: &[f64]) -> Point {
        [0.0; MAX_DIM]
    }
    fn hessian(&self, _x: &[f64]) -> Mat {
        [[0.0; MAX_DIM]; MAX_DIM]
    }
    fn far_value(&self) -> Option<f64> {
        Some(self.value)
    }
}

pub fn constant(dim: usize, value: f64) -> FieldRef {
    Arc::new(ConstantField { dim, value })
}

/// A closed-form expression in `x1..xn` (and `t`, fixed at construction).
#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub dim: usize,
    pub expr: Expr,
    pub t: f64,
    pub far: Option<f64>,
}

impl AnalyticField {
    pub fn new(dim: usize, expr: Expr) -> Self {
        AnalyticField { dim, expr, t: 0.0, far: None }
    }
}

impl Field for AnalyticField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.expr.eval_tx(self.t, &x[..self.dim])
    }
    fn far_value(&self) -> Option<f64> {
        self.far
    }
}

pub fn analytic(dim: usize, source: &str) -> Result<FieldRef, crate::expr::ParseError> {
    Ok(Arc::new(AnalyticField::new(dim, Expr::parse(source)?)))
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Point + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> Mat + Send + Sync;

/// Field backed by closures; derivatives default to differences.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradFn>>,
    hessian: Option<Arc<HessFn>>,
    far: Option<f64>,
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnField(dim={})", self.dim)
    }
}

impl FnField {
    pub fn new(dim: usize, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FnField { dim, value: Arc::new(value), gradient: None, hessian: None, far: None }
    }
    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> Point + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }
    pub fn with_hessian(mut self, h: impl Fn(&[f64]) -> Mat + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self
    }
    pub fn with_far_value(mut self, v: f64) -> Self {
        self.far = Some(v);
        self
    }
    pub fn into_ref(self) -> FieldRef {
        Arc::new(self)
    }
}

impl Field for FnField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> Point {
        match &self.gradient {
            Some(g) => g(x),
            None => fd_gradient(self, x, self.fd_step()),
        }
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        match (&self.hessian, &self.gradient) {
            (Some(h), _) => h(x),
            (None, Some(_)) => fd_hessian_from_gradient(self, x, 1e-4),
            (None, None) => fd_hessian(self, x, self.fd_step()),
        }
    }
    fn far_value(&self) -> Option<f64> {
        self.far
    }
}

// ---------------------------------------------------------------------------
// Combinators

/// `Σ cᵢ fᵢ`
pub struct LinearCombination {
    terms: Vec<(f64, FieldRef)>,
}

impl Field for LinearCombination {
    fn dim(&self) -> usize {
        self.terms[0].1.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.value(x)).sum()
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let mut g = [0.0; MAX_DIM];
        for (c, f) in &self.terms {
            let gf = f.gradient(x);
            for i in 0..MAX_DIM {
                g[i] += c * gf[i];
            }
        }
        g
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        for (c, f) in &self.terms {
            let hf = f.hessian(x);
            for i in 0..MAX_DIM {
                for j in 0..MAX_DIM {
                    h[i][j] += c * hf[i][j];
                }
            }
        }
        h
    }
    fn fd_step(&self) -> f64 {
        self.terms.iter().map(|(_, f)| f.fd_step()).fold(f64::INFINITY, f64::min)
    }
    fn far_value(&self) -> Option<f64> {
        self.terms.iter().map(|(c, f)| f.far_value().map(|v| c * v)).sum()
    }
}

pub fn linear_combination(terms: Vec<(f64, FieldRef)>) -> FieldRef {
    assert!(!terms.is_empty(), "empty linear combination");
    Arc::new(LinearCombination { terms })
}

pub fn sum(a: &FieldRef, b: &FieldRef) -> FieldRef {
    linear_combination(vec![(1.0, a.clone()), (1.0, b.clone())])
}

pub fn difference(a: &FieldRef, b: &FieldRef) -> FieldRef {
    linear_combination(vec![(1.0, a.clone()), (-1.0, b.clone())])
}

pub fn scale(a: &FieldRef, c: f64) -> FieldRef {
    linear_combination(vec![(c, a.clone())])
}

/// `Π fᵢ`
pub struct Product {
    factors: Vec<FieldRef>,
}

impl Field for Product {
    fn dim(&self) -> usize {
        self.factors[0].dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.factors.iter().map(|f| f.value(x)).product()
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let vals: Vec<f64> = self.factors.iter().map(|f| f.value(x)).collect();
        let mut g = [0.0; MAX_DIM];
        for (k, f) in self.factors.iter().enumerate() {
            let others: f64 = vals.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v).product();
            if others == 0.0 {
                continue;
            }
            let gf = f.gradient(x);
            for i in 0..MAX_DIM {
                g[i] += others * gf[i];
            }
        }
        g
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        let n = self.dim();
        let vals: Vec<f64> = self.factors.iter().map(|f| f.value(x)).collect();
        let grads: Vec<Point> = self.factors.iter().map(|f| f.gradient(x)).collect();
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        let m = self.factors.len();
        for k in 0..m {
            let others: f64 = (0..m).filter(|j| *j != k).map(|j| vals[j]).product();
            if others != 0.0 {
                let hk = self.factors[k].hessian(x);
                for i in 0..n {
                    for j in 0..n {
                        h[i][j] += others * hk[i][j];
                    }
                }
            }
            for l in 0..m {
                if l == k {
                    continue;
                }
                let rest: f64 = (0..m).filter(|j| *j != k && *j != l).map(|j| vals[j]).product();
                for i in 0..n {
                    for j in 0..n {
                        h[i][j] += rest * grads[k][i] * grads[l][j];
                    }
                }
            }
        }
        h
    }
    fn fd_step(&self) -> f64 {
        self.factors.iter().map(|f| f.fd_step()).fold(f64::INFINITY, f64::min)
    }
    fn far_value(&self) -> Option<f64> {
        let mut acc = 1.0;
        for f in &self.factors {
            acc *= f.far_value()?;
        }
        Some(acc)
    }
}

pub fn product(a: &FieldRef, b: &FieldRef) -> FieldRef {
    Arc::new(Product { factors: vec![a.clone(), b.clone()] })
}

pub fn product_of(factors: Vec<FieldRef>) -> FieldRef {
    assert!(!factors.is_empty(), "empty product");
    Arc::new(Product { factors })
}

pub fn square(a: &FieldRef) -> FieldRef {
    product(a, a)
}

/// Positive or negative part: `max(f, 0)` or `max(-f, 0)`.
pub struct Part {
    inner: FieldRef,
    positive: bool,
}

impl Field for Part {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let v = self.inner.value(x);
        if self.positive {
            v.max(0.0)
        } else {
            (-v).max(0.0)
        }
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let v = self.inner.value(x);
        let active = if self.positive { v > 0.0 } else { v < 0.0 };
        if !active {
            return [0.0; MAX_DIM];
        }
        let mut g = self.inner.gradient(x);
        if !self.positive {
            g.iter_mut().for_each(|c| *c = -*c);
        }
        g
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        let v = self.inner.value(x);
        let active = if self.positive { v > 0.0 } else { v < 0.0 };
        if !active {
            return [[0.0; MAX_DIM]; MAX_DIM];
        }
        let mut h = self.inner.hessian(x);
        if !self.positive {
            h.iter_mut().flatten().for_each(|c| *c = -*c);
        }
        h
    }
    fn fd_step(&self) -> f64 {
        self.inner.fd_step()
    }
    fn far_value(&self) -> Option<f64> {
        let v = self.inner.far_value()?;
        Some(if self.positive { v.max(0.0) } else { (-v).max(0.0) })
    }
}

pub fn pos_part(a: &FieldRef) -> FieldRef {
    Arc::new(Part { inner: a.clone(), positive: true })
}

pub fn neg_part(a: &FieldRef) -> FieldRef {
    Arc::new(Part { inner: a.clone(), positive: false })
}

/// `∂_e f` (order 1) or `∂²_{ee} f` (order 2).
pub struct Directional {
    inner: FieldRef,
    e: Point,
    order: u8,
}

impl Field for Directional {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        if self.order == 1 {
            dot(&self.inner.gradient(x)[..n], &self.e[..n])
        } else {
            let h = self.inner.hessian(x);
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += self.e[i] * h[i][j] * self.e[j];
                }
            }
            acc
        }
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let n = self.dim();
        if self.order == 1 {
            let h = self.inner.hessian(x);
            let mut g = [0.0; MAX_DIM];
            for i in 0..n {
                g[i] = (0..n).map(|j| h[i][j] * self.e[j]).sum();
            }
            g
        } else {
            fd_gradient(self, x, self.fd_step())
        }
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        fd_hessian_from_gradient(self, x, self.fd_step())
    }
    fn fd_step(&self) -> f64 {
        self.inner.fd_step()
    }
    fn far_value(&self) -> Option<f64> {
        self.inner.far_value().map(|_| 0.0)
    }
}

/// `∂_e u` or `∂²_{ee} u` of an arbitrary field. `e` is normalised.
pub fn directional_derivative(u: &FieldRef, e: &[f64], order: u8) -> Result<FieldRef, FieldError> {
    if !(order == 1 || order == 2) {
        return Err(FieldError::Parameter(format!("derivative order {order} not in {{1,2}}")));
    }
    let ne = norm(e);
    if ne == 0.0 || e.len() != u.dim() {
        return Err(FieldError::Parameter("direction must be a nonzero vector of matching dimension".into()));
    }
    let mut d = [0.0; MAX_DIM];
    for i in 0..e.len() {
        d[i] = e[i] / ne;
    }
    Ok(Arc::new(Directional { inner: u.clone(), e: d, order }))
}

/// `x ↦ f(x + h)`
pub struct Shift {
    inner: FieldRef,
    h: Point,
}

impl Field for Shift {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        self.inner.value(&add_scaled(x, &self.h[..n], 1.0)[..n])
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let n = self.dim();
        self.inner.gradient(&add_scaled(x, &self.h[..n], 1.0)[..n])
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        let n = self.dim();
        self.inner.hessian(&add_scaled(x, &self.h[..n], 1.0)[..n])
    }
    fn fd_step(&self) -> f64 {
        self.inner.fd_step()
    }
    fn far_value(&self) -> Option<f64> {
        self.inner.far_value()
    }
}

pub fn shift(u: &FieldRef, h: &[f64]) -> FieldRef {
    let mut p = [0.0; MAX_DIM];
    p[..h.len()].copy_from_slice(h);
    Arc::new(Shift { inner: u.clone(), h: p })
}

fn check_step(u: &FieldRef, h: &[f64]) -> Result<f64, FieldError> {
    if h.len() != u.dim() {
        return Err(FieldError::Parameter("step dimension mismatch".into()));
    }
    let nh = norm(h);
    if nh == 0.0 {
        return Err(FieldError::Parameter("difference step must be nonzero".into()));
    }
    Ok(nh)
}

/// `D_h u(x) = (u(x+h) - u(x)) / |h|`
pub fn diff_quotient(u: &FieldRef, h: &[f64]) -> Result<FieldRef, FieldError> {
    let nh = check_step(u, h)?;
    Ok(linear_combination(vec![(1.0 / nh, shift(u, h)), (-1.0 / nh, u.clone())]))
}

/// `D_{-h} D_h u(x) = (2u(x) - u(x+h) - u(x-h)) / |h|²`
pub fn second_diff_quotient(u: &FieldRef, h: &[f64]) -> Result<FieldRef, FieldError> {
    let nh = check_step(u, h)?;
    let minus: Vec<f64> = h.iter().map(|c| -c).collect();
    let w = 1.0 / (nh * nh);
    Ok(linear_combination(vec![(2.0 * w, u.clone()), (-w, shift(u, h)), (-w, shift(u, &minus))]))
}

/// `D^α_h u = (u(x+h) - u(x)) / |h|^α = |h|^{1-α} D_h u`
pub fn holder_quotient(u: &FieldRef, h: &[f64], alpha: f64) -> Result<FieldRef, FieldError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FieldError::Parameter(format!("Hölder exponent {alpha} outside (0,1)")));
    }
    let nh = check_step(u, h)?;
    Ok(scale(&diff_quotient(u, h)?, nh.powf(1.0 - alpha)))
}

/// `u_h(x) = ∫₀¹ u(x + t h) dt`, Gauss–Legendre in t.
pub struct Average {
    inner: FieldRef,
    h: Point,
    rule: GaussLegendre,
}

impl Average {
    fn nodes(&self, x: &[f64]) -> impl Iterator<Item = (Point, f64)> + '_ {
        let n = self.inner.dim();
        let x = {
            let mut p = [0.0; MAX_DIM];
            p[..n].copy_from_slice(&x[..n]);
            p
        };
        self.rule.mapped(0.0, 1.0).map(move |(t, w)| (add_scaled(&x[..n], &self.h[..n], t), w))
    }
}

impl Field for Average {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        self.nodes(x).map(|(p, w)| w * self.inner.value(&p[..n])).sum()
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let n = self.dim();
        let mut g = [0.0; MAX_DIM];
        for (p, w) in self.nodes(x) {
            let gi = self.inner.gradient(&p[..n]);
            for i in 0..n {
                g[i] += w * gi[i];
            }
        }
        g
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        let n = self.dim();
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        for (p, w) in self.nodes(x) {
            let hi = self.inner.hessian(&p[..n]);
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += w * hi[i][j];
                }
            }
        }
        h
    }
    fn fd_step(&self) -> f64 {
        self.inner.fd_step()
    }
    fn far_value(&self) -> Option<f64> {
        self.inner.far_value()
    }
}

/// `u_h`; `u_0 = u`.
pub fn average(u: &FieldRef, h: &[f64]) -> FieldRef {
    average_with(u, h, 12)
}

pub fn average_with(u: &FieldRef, h: &[f64], points: usize) -> FieldRef {
    if norm(h) == 0.0 {
        return u.clone();
    }
    let mut p = [0.0; MAX_DIM];
    p[..h.len()].copy_from_slice(h);
    Arc::new(Average { inner: u.clone(), h: p, rule: GaussLegendre::new(points) })
}

// ---------------------------------------------------------------------------
// Cutoffs

/// Radial bump: 1 on `B_{r0}(c)`, 0 outside `B_{r1}(c)`, quintic ramp in
/// between. A flat cutoff (`r0 = ∞`) is identically one.
#[derive(Debug, Clone)]
pub struct CutoffFunction {
    pub dim: usize,
    pub center: Point,
    pub r0: f64,
    pub r1: f64,
}

impl CutoffFunction {
    pub fn new(dim: usize, center: &[f64], r0: f64, r1: f64) -> Result<Self, FieldError> {
        if !(r0 >= 0.0 && r1 > r0) {
            return Err(FieldError::Parameter(format!("cutoff radii must satisfy 0 ≤ r0 < r1, got ({r0}, {r1})")));
        }
        let mut c = [0.0; MAX_DIM];
        c[..center.len()].copy_from_slice(center);
        Ok(CutoffFunction { dim, center: c, r0, r1 })
    }

    /// The standard bump (r0 = 1/2, r1 = 1) centred at the origin.
    pub fn standard(dim: usize) -> Self {
        CutoffFunction { dim, center: [0.0; MAX_DIM], r0: 0.5, r1: 1.0 }
    }

    pub fn flat(dim: usize) -> Self {
        CutoffFunction { dim, center: [0.0; MAX_DIM], r0: f64::INFINITY, r1: f64::INFINITY }
    }

    pub fn is_flat(&self) -> bool {
        self.r0.is_infinite()
    }

    /// Radial profile and its first two derivatives.
    pub fn profile(&self, r: f64) -> (f64, f64, f64) {
        if self.is_flat() || r <= self.r0 {
            return (1.0, 0.0, 0.0);
        }
        if r >= self.r1 {
            return (0.0, 0.0, 0.0);
        }
        let w = self.r1 - self.r0;
        let t = (self.r1 - r) / w;
        (smoothstep(t), -smoothstep_d1(t) / w, smoothstep_d2(t) / (w * w))
    }

    /// `‖η‖_{C^{1,1}} = sup|η| + sup|∇η| + sup|D²η|` (spectral norm),
    /// evaluated on a fine radial grid.
    pub fn c11_norm(&self) -> f64 {
        if self.is_flat() {
            return 1.0;
        }
        let mut g: f64 = 0.0;
        let mut h: f64 = 0.0;
        for k in 0..=4000 {
            let r = self.r0 + (self.r1 - self.r0) * k as f64 / 4000.0;
            let (_, d1, d2) = self.profile(r);
            g = g.max(d1.abs());
            let tangential = if r > 0.0 && self.dim > 1 { d1.abs() / r } else { 0.0 };
            h = h.max(d2.abs()).max(tangential);
        }
        1.0 + g + h
    }

    /// Lipschitz constant of `η^p` along the radius.
    pub fn power_lipschitz(&self, p: f64) -> f64 {
        if self.is_flat() {
            return 0.0;
        }
        let m = 20000;
        let mut lip: f64 = 0.0;
        let mut prev = self.profile(self.r0).0.powf(p);
        for k in 1..=m {
            let r = self.r0 + (self.r1 - self.r0) * k as f64 / m as f64;
            let v = self.profile(r).0.powf(p);
            lip = lip.max((v - prev).abs() * m as f64 / (self.r1 - self.r0));
            prev = v;
        }
        lip
    }
}

impl Field for CutoffFunction {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        let mut d = [0.0; MAX_DIM];
        for i in 0..self.dim {
            d[i] = x[i] - self.center[i];
        }
        self.profile(norm(&d[..self.dim])).0
    }
    fn gradient(&self, x: &[f64]) -> Point {
        let n = self.dim;
        let mut d = [0.0; MAX_DIM];
        for i in 0..n {
            d[i] = x[i] - self.center[i];
        }
        let r = norm(&d[..n]);
        let (_, d1, _) = self.profile(r);
        let mut g = [0.0; MAX_DIM];
        if d1 != 0.0 && r > 0.0 {
            for i in 0..n {
                g[i] = d1 * d[i] / r;
            }
        }
        g
    }
    fn hessian(&self, x: &[f64]) -> Mat {
        let n = self.dim;
        let mut d = [0.0; MAX_DIM];
        for i in 0..n {
            d[i] = x[i] - self.center[i];
        }
        let r = norm(&d[..n]);
        let (_, d1, d2) = self.profile(r);
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        if r > 0.0 && (d1 != 0.0 || d2 != 0.0) {
            for i in 0..n {
                for j in 0..n {
                    let tt = d[i] * d[j] / (r * r);
                    let id = if i == j { 1.0 } else { 0.0 };
                    h[i][j] = d2 * tt + d1 / r * (id - tt);
                }
            }
        }
        h
    }
    fn far_value(&self) -> Option<f64> {
        Some(if self.is_flat() { 1.0 } else { 0.0 })
    }
}

/// Temporal cutoff: 0 on [0, t0], 1 on [t1, ∞), quintic ramp in between.
#[derive(Debug, Clone, Copy)]
pub struct TimeCutoff {
    pub t0: f64,
    pub t1: f64,
}

impl TimeCutoff {
    /// 0 at t ≤ 1/8, 1 at t ≥ 1/4.
    pub fn standard() -> Self {
        TimeCutoff { t0: 0.125, t1: 0.25 }
    }

    /// Identically one.
    pub fn flat() -> Self {
        TimeCutoff { t0: f64::NEG_INFINITY, t1: f64::NEG_INFINITY }
    }

    pub fn value(&self, t: f64) -> f64 {
        if self.t1 == f64::NEG_INFINITY {
            return 1.0;
        }
        smoothstep((t - self.t0) / (self.t1 - self.t0))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if self.t1 == f64::NEG_INFINITY {
            return 0.0;
        }
        smoothstep_d1((t - self.t0) / (self.t1 - self.t0)) / (self.t1 - self.t0)
    }

    /// Lipschitz constant of `η₁^p` on [0, 1] by sampling.
    pub fn power_lipschitz(&self, p: f64) -> f64 {
        let m = 20000;
        let mut lip: f64 = 0.0;
        let mut prev = self.value(0.0).powf(p);
        for k in 1..=m {
            let t = k as f64 / m as f64;
            let v = self.value(t).powf(p);
            lip = lip.max((v - prev).abs() * m as f64);
            prev = v;
        }
        lip
    }
}

// ---------------------------------------------------------------------------
// Grid functions

/// Extension of a grid function outside its box.
#[derive(Clone)]
pub enum Exterior {
    Zero,
    Constant(f64),
    /// Closed form; `source` is kept when the field came from an expression
    /// so the grid can be serialised.
    Analytic {
        field: FieldRef,
        source: Option<String>,
    },
    /// Nearest interior value.
    Clamp,
}

impl fmt::Debug for Exterior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exterior::Zero => write!(f, "Zero"),
            Exterior::Constant(c) => write!(f, "Constant({c})"),
            Exterior::Analytic { source, .. } => write!(f, "Analytic({source:?})"),
            Exterior::Clamp => write!(f, "Clamp"),
        }
    }
}

impl Exterior {
    pub fn analytic_expr(dim: usize, source: &str) -> Result<Self, crate::expr::ParseError> {
        Ok(Exterior::Analytic { field: analytic(dim, source)?, source: Some(source.to_string()) })
    }

    pub fn analytic(field: FieldRef) -> Self {
        Exterior::Analytic { field, source: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Multilinear,
    Cubic,
}

/// Uniform box grid `[lo, hi]ⁿ` with nodes on both faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    /// Nodes per axis, including both faces.
    pub count: usize,
}

impl Grid {
    pub fn new(dim: usize, lo: f64, hi: f64, count: usize) -> Result<Self, FieldError> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(FieldError::Parameter(format!("dimension {dim} outside 1..=3")));
        }
        if !(hi > lo) || count < 2 {
            return Err(FieldError::Parameter("grid needs hi > lo and at least two nodes per axis".into()));
        }
        Ok(Grid { dim, lo, hi, count })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.count.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Multi-index of the flat index (first axis slowest).
    pub fn index(&self, mut k: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for a in (0..self.dim).rev() {
            idx[a] = k % self.count;
            k /= self.count;
        }
        idx
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx[..self.dim].iter().fold(0, |acc, &i| acc * self.count + i)
    }

    pub fn node(&self, k: usize) -> Point {
        let idx = self.index(k);
        let h = self.spacing();
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.dim {
            p[a] = self.lo + h * idx[a] as f64;
        }
        p
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    /// True when every coordinate index is at least `collar` away from a face.
    pub fn is_inner(&self, k: usize, collar: usize) -> bool {
        let idx = self.index(k);
        idx[..self.dim].iter().all(|&i| i >= collar && i + collar < self.count)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let tol = 1e-12 * (self.hi - self.lo);
        x[..self.dim].iter().all(|&c| c >= self.lo - tol && c <= self.hi + tol)
    }
}

#[derive(Debug, Clone)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub exterior: Exterior,
    pub interpolation: Interpolation,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>, exterior: Exterior) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::Parameter(format!("expected {} values, got {}", grid.len(), values.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::Parameter(format!("non-finite value at node {k}")));
        }
        Ok(GridFunction { grid, values, exterior, interpolation: Interpolation::Multilinear })
    }

    /// Samples a field at the grid nodes.
    pub fn sample(grid: Grid, f: &dyn Field, exterior: Exterior) -> Result<Self, FieldError> {
        let values = (0..grid.len()).map(|k| f.value(&grid.node(k)[..grid.dim])).collect();
        Self::new(grid, values, exterior)
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn into_ref(self) -> FieldRef {
        Arc::new(self)
    }

    fn node_value(&self, idx: &[isize]) -> f64 {
        let c = self.grid.count as isize;
        if idx[..self.grid.dim].iter().all(|&i| i >= 0 && i < c) {
            let mut k = 0usize;
            for &i in &idx[..self.grid.dim] {
                k = k * self.grid.count + i as usize;
            }
            return self.values[k];
        }
        let h = self.grid.spacing();
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.grid.dim {
            p[a] = self.grid.lo + h * idx[a] as f64;
        }
        self.exterior_value(&p[..self.grid.dim])
    }

    fn exterior_value(&self, x: &[f64]) -> f64 {
        match &self.exterior {
            Exterior::Zero => 0.0,
            Exterior::Constant(c) => *c,
            Exterior::Analytic { field, .. } => field.value(x),
            Exterior::Clamp => {
                let mut p = [0.0; MAX_DIM];
                for a in 0..self.grid.dim {
                    p[a] = x[a].clamp(self.grid.lo, self.grid.hi);
                }
                self.interpolate(&p[..self.grid.dim])
            }
        }
    }

    fn interpolate(&self, x: &[f64]) -> f64 {
        let n = self.grid.dim;
        let h = self.grid.spacing();
        let last = (self.grid.count - 2) as isize;
        let mut base = [0isize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..n {
            let s = (x[a] - self.grid.lo) / h;
            let i = (s.floor() as isize).clamp(0, last);
            base[a] = i;
            frac[a] = (s - i as f64).clamp(0.0, 1.0);
        }
        match self.interpolation {
            Interpolation::Multilinear => {
                let mut acc = 0.0;
                for corner in 0..(1usize << n) {
                    let mut w = 1.0;
                    let mut idx = [0isize; MAX_DIM];
                    for a in 0..n {
                        let bit = (corner >> a) & 1;
                        idx[a] = base[a] + bit as isize;
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                    }
                    if w != 0.0 {
                        acc += w * self.node_value(&idx);
                    }
                }
                acc
            }
            Interpolation::Cubic => {
                let weights = |t: f64| {
                    [
                        -t * (t - 1.0) * (t - 2.0) / 6.0,
                        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                        -(t + 1.0) * t * (t - 2.0) / 2.0,
                        (t + 1.0) * t * (t - 1.0) / 6.0,
                    ]
                };
                let ws: Vec<[f64; 4]> = (0..n).map(|a| weights(frac[a])).collect();
                let mut acc = 0.0;
                for combo in 0..4usize.pow(n as u32) {
                    let mut w = 1.0;
                    let mut idx = [0isize; MAX_DIM];
                    let mut c = combo;
                    for a in 0..n {
                        let o = c % 4;
                        c /= 4;
                        idx[a] = base[a] - 1 + o as isize;
                        w *= ws[a][o];
                    }
                    if w != 0.0 {
                        acc += w * self.node_value(&idx);
                    }
                }
                acc
            }
        }
    }

    /// `‖u‖_{L^∞(ℝⁿ)}`: max of the stored values and the exterior bound
    /// (sampled on a shell for analytic exteriors).
    pub fn sup_norm(&self) -> f64 {
        let inner = self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ext = match &self.exterior {
            Exterior::Zero | Exterior::Clamp => 0.0,
            Exterior::Constant(c) => c.abs(),
            Exterior::Analytic { field, .. } => {
                let width = self.grid.hi - self.grid.lo;
                let mut m: f64 = 0.0;
                for k in 0..=400 {
                    let r = width * 8f64.powf(k as f64 / 400.0);
                    for sgn in [-1.0, 1.0] {
                        let mut p = [0.0; MAX_DIM];
                        for a in 0..self.grid.dim {
                            p[a] = 0.5 * (self.grid.lo + self.grid.hi) + sgn * r / (self.grid.dim as f64).sqrt();
                        }
                        m = m.max(field.value(&p[..self.grid.dim]).abs());
                    }
                }
                m
            }
        };
        inner.max(ext)
    }

    pub fn at_node(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Nodal `∂_e u` (order 1) or `∂²_{ee} u` (order 2) by fourth-order
    /// central differences with step Δx. Stencils leaving the box need an
    /// analytic exterior.
    pub fn directional_derivatives(&self, e: &[f64], order: u8) -> Result<GridFunction, FieldError> {
        if !(order == 1 || order == 2) {
            return Err(FieldError::Parameter(format!("derivative order {order} not in {{1,2}}")));
        }
        let n = self.grid.dim;
        let ne = norm(e);
        if e.len() != n || ne == 0.0 {
            return Err(FieldError::Parameter("direction must be nonzero with matching dimension".into()));
        }
        let dir: Vec<f64> = e.iter().map(|c| c / ne).collect();
        let h = self.grid.spacing();
        let analytic_ext = matches!(self.exterior, Exterior::Analytic { .. });
        let mut out = Vec::with_capacity(self.values.len());
        for k in 0..self.grid.len() {
            let x = self.grid.node(k);
            let at = |t: f64| {
                let p = add_scaled(&x[..n], &dir, t * h);
                if !analytic_ext && !self.grid.contains(&p[..n]) {
                    return Err(FieldError::Evaluation(format!(
                        "node {k} is within the difference stencil of the box boundary and the exterior carries no data"
                    )));
                }
                Ok(self.value(&p[..n]))
            };
            let v = if order == 1 {
                (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * h)
            } else {
                (-at(2.0)? + 16.0 * at(1.0)? - 30.0 * at(0.0)? + 16.0 * at(-1.0)? - at(-2.0)?) / (12.0 * h * h)
            };
            out.push(v);
        }
        let exterior = match &self.exterior {
            Exterior::Analytic { field, .. } => Exterior::analytic(directional_derivative(field, &dir, order)?),
            Exterior::Zero | Exterior::Constant(_) => Exterior::Zero,
            Exterior::Clamp => Exterior::Clamp,
        };
        GridFunction::new(self.grid.clone(), out, exterior)
    }

    // -- serialisation ------------------------------------------------------

    /// CSV with header `x1,..,xn,value`, one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), FieldError> {
        let n = self.grid.dim;
        let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).chain(["value".to_string()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.grid.len() {
            let p = self.grid.node(k);
            let mut row: Vec<String> = p[..n].iter().map(|c| format!("{c:.17e}")).collect();
            row.push(format!("{:.17e}", self.values[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`]; the grid is inferred from the
    /// node coordinates.
    pub fn read_csv<R: BufRead>(r: R, exterior: Exterior) -> Result<GridFunction, FieldError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| FieldError::Format("empty CSV".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = cols.len().checked_sub(1).filter(|n| (1..=MAX_DIM).contains(n));
        let n = n.ok_or_else(|| FieldError::Format("header must be x1,..,xn,value with n ≤ 3".into()))?;
        let mut coords: Vec<Vec<f64>> = Vec::new();
        let mut values = Vec::new();
        for (line_no, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| FieldError::Format(format!("line {}: {e}", line_no + 2)))?;
            if row.len() != n + 1 {
                return Err(FieldError::Format(format!("line {}: expected {} columns", line_no + 2, n + 1)));
            }
            coords.push(row[..n].to_vec());
            values.push(row[n]);
        }
        let count = (values.len() as f64).powf(1.0 / n as f64).round() as usize;
        if count < 2 || count.pow(n as u32) != values.len() {
            return Err(FieldError::Format("row count is not a full box grid".into()));
        }
        let lo = coords[0][0];
        let hi = coords[values.len() - 1][0];
        let grid = Grid::new(n, lo, hi, count)?;
        for (k, c) in coords.iter().enumerate() {
            let p = grid.node(k);
            if c.iter().zip(&p).any(|(a, b)| (a - b).abs() > 1e-9 * (hi - lo)) {
                return Err(FieldError::Format(format!("row {k} is not at the expected node")));
            }
        }
        GridFunction::new(grid, values, exterior)
    }

    /// Compact binary: magic `NLGF`, u32 version, u32 dim, f64 lo, f64 hi,
    /// u64 count, u8 exterior tag (+ payload), then little-endian values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), FieldError> {
        w.write_all(b"NLGF")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.grid.dim as u32).to_le_bytes())?;
        w.write_all(&self.grid.lo.to_le_bytes())?;
        w.write_all(&self.grid.hi.to_le_bytes())?;
        w.write_all(&(self.grid.count as u64).to_le_bytes())?;
        match &self.exterior {
            Exterior::Zero => w.write_all(&[0])?,
            Exterior::Constant(c) => {
                w.write_all(&[1])?;
                w.write_all(&c.to_le_bytes())?;
            }
            Exterior::Analytic { source: Some(src), .. } => {
                w.write_all(&[2])?;
                w.write_all(&(src.len() as u32).to_le_bytes())?;
                w.write_all(src.as_bytes())?;
            }
            Exterior::Analytic { source: None, .. } => {
                return Err(FieldError::Format("analytic exterior without expression source cannot be stored".into()))
            }
            Exterior::Clamp => w.write_all(&[3])?,
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<GridFunction, FieldError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"NLGF" {
            return Err(FieldError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(FieldError::Format("unsupported version".into()));
        }
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let lo = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let hi = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let grid = Grid::new(dim, lo, hi, count)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let exterior = match tag[0] {
            0 => Exterior::Zero,
            1 => {
                r.read_exact(&mut b8)?;
                Exterior::Constant(f64::from_le_bytes(b8))
            }
            2 => {
                r.read_exact(&mut b4)?;
                let mut buf = vec![0u8; u32::from_le_bytes(b4) as usize];
                r.read_exact(&mut buf)?;
                let src = String::from_utf8(buf).map_err(|e| FieldError::Format(e.to_string()))?;
                Exterior::analytic_expr(dim, &src).map_err(|e| FieldError::Format(e.to_string()))?
            }
            3 => Exterior::Clamp,
            t => return Err(FieldError::Format(format!("unknown exterior tag {t}"))),
        };
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        GridFunction::new(grid, values, exterior)
    }
}

impl Field for GridFunction {
    fn dim(&self) -> usize {
        self.grid.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        if self.grid.contains(x) {
            self.interpolate(x)
        } else {
            self.exterior_value(x)
        }
    }
    fn fd_step(&self) -> f64 {
        self.grid.spacing()
    }
    fn far_value(&self) -> Option<f64> {
        match &self.exterior {
            Exterior::Zero => Some(0.0),
            Exterior::Constant(c) => Some(*c),
            Exterior::Analytic { field, .. } => field.far_value(),
            Exterior::Clamp => None,
        }
    }
}
