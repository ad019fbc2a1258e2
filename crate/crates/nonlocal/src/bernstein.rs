//! Both sides of the Bernstein key inequalities, pointwise defects, and the
//! search for the smallest admissible σ.
//!
//! Every variant has the shape
//! `L(η² P(W)² + σ Z) ≤ 2η² L(W) P(W) + 2σ R`
//! with `P` the identity or the positive part, and either `Z = Y²`,
//! `R = L(Y)Y`, or the averaged pair `Z = [Y²]_h`, `R = [L(Y)Y]_h`. The
//! defect is affine in σ: `defect(σ) = A + σ S` with
//! `A = L(η²P(W)²) - 2η²L(W)P(W)` and `S = L(Z) - 2R = -B(Y,Y) ≤ 0`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fields::{
    self, average, diff_quotient, directional_derivative, holder_quotient, neg_part, pos_part, product,
    second_diff_quotient, square, CutoffFunction, Field, FieldError, FieldRef, Grid,
};
use crate::kernels::{KernelFamily, KernelSpec, Point, MAX_DIM};
use crate::operator::{Estimate, Operator, OperatorError, QuadratureConfig};
use crate::quadrature::GaussLegendre;

#[derive(Debug, Error)]
pub enum BernsteinError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("no admissible σ ≤ {sigma_max}: worst defect {worst_defect:.6e} at member {member}, node {node}")]
    SearchFailure { sigma_max: f64, worst_defect: f64, member: usize, node: usize, trace: Vec<(f64, f64)> },
}

/// The key-estimate catalogue.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "tag")]
pub enum Variant {
    FirstOrder {
        e: Vec<f64>,
    },
    PosPart {
        e: Vec<f64>,
    },
    DiffQuot {
        h: Vec<f64>,
    },
    DiffQuotPosPart {
        h: Vec<f64>,
    },
    DiffQuotImproved {
        h: Vec<f64>,
    },
    DiffQuotImprovedPosPart {
        h: Vec<f64>,
    },
    HolderQuot {
        h: Vec<f64>,
        alpha: f64,
    },
    HolderQuotPosPart {
        h: Vec<f64>,
        alpha: f64,
    },
    /// `ũ = η u` with `η` the inner cutoff; the estimate's cutoff is η̄.
    SecondOrder {
        e: Vec<f64>,
        inner: CutoffSpec,
    },
    SecondOrderDiffQuot {
        h: Vec<f64>,
        inner: CutoffSpec,
    },
    Parabolic {
        e: Vec<f64>,
    },
    ParabolicPosPart {
        e: Vec<f64>,
    },
    Drift {
        e: Vec<f64>,
        b: Vec<f64>,
    },
    DriftPosPart {
        e: Vec<f64>,
        b: Vec<f64>,
    },
    GeneralLevy {
        e: Vec<f64>,
    },
    GeneralLevyPosPart {
        e: Vec<f64>,
    },
}

/// Serializable description of a radial cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutoffSpec {
    pub r0: f64,
    pub r1: f64,
}

impl CutoffSpec {
    pub fn build(&self, dim: usize) -> Result<CutoffFunction, FieldError> {
        CutoffFunction::new(dim, &[0.0; MAX_DIM][..dim], self.r0, self.r1)
    }
}

pub const VARIANT_TAGS: [&str; 16] = [
    "FirstOrder",
    "PosPart",
    "DiffQuot",
    "DiffQuotPosPart",
    "DiffQuotImproved",
    "DiffQuotImprovedPosPart",
    "HolderQuot",
    "HolderQuotPosPart",
    "SecondOrder",
    "SecondOrderDiffQuot",
    "Parabolic",
    "ParabolicPosPart",
    "Drift",
    "DriftPosPart",
    "GeneralLevy",
    "GeneralLevyPosPart",
];

/// Tag and displayed inequality for every variant.
pub fn catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        ("FirstOrder", "L(η²(∂_e u)² + σu²) ≤ 2η² L(∂_e u) ∂_e u + 2σ L(u) u"),
        ("PosPart", "L(η²(∂_e v)₊² + σv²) ≤ 2η² L(∂_e v)(∂_e v)₊ + 2σ L(v) v"),
        ("DiffQuot", "L(η²(D_h u)² + σu_h²) ≤ 2η² L(D_h u) D_h u + 2σ L(u_h) u_h,  |h| ≤ 1/8"),
        ("DiffQuotPosPart", "L(η²(D_h v)₊² + σv_h²) ≤ 2η² L(D_h v)(D_h v)₊ + 2σ L(v_h) v_h,  |h| ≤ 1/8"),
        ("DiffQuotImproved", "L(η²(D_h u)² + σ[u²]_h) ≤ 2η² L(D_h u) D_h u + 2σ [L(u)u]_h  in B_{1/4}"),
        ("DiffQuotImprovedPosPart", "L(η²(D_h v)₊² + σ[v²]_h) ≤ 2η² L(D_h v)(D_h v)₊ + 2σ [L(v)v]_h  in B_{1/4}"),
        ("HolderQuot", "L(η²(D^α_h u)² + σu_h²) ≤ 2η² L(D^α_h u) D^α_h u + 2σ L(u_h) u_h"),
        ("HolderQuotPosPart", "L(η²(D^α_h v)₊² + σv_h²) ≤ 2η² L(D^α_h v)(D^α_h v)₊ + 2σ L(v_h) v_h"),
        ("SecondOrder", "L(η̄²(-∂²_ee ũ)₊² + σ(∂_e ũ)²) ≤ 2η̄² L(-∂²_ee ũ)(-∂²_ee ũ)₊ + 2σ L(∂_e ũ) ∂_e ũ,  ũ = ηu"),
        (
            "SecondOrderDiffQuot",
            "L(η̄²(D_{-h}D_h ũ)₊² + σ(D_h ũ_{-h})²) ≤ 2η̄² L(D_{-h}D_h ũ)(D_{-h}D_h ũ)₊ + 2σ L(D_h ũ_{-h}) D_h ũ_{-h}",
        ),
        (
            "Parabolic",
            "(∂_t + L_{K(t)})(η²(∂_e u)² + σu²) ≤ 2η²(∂_t + L_{K(t)})(∂_e u) ∂_e u + 2σ(∂_t + L_{K(t)})(u) u,  η = η₁(t)η₂(x)",
        ),
        (
            "ParabolicPosPart",
            "(∂_t + L_{K(t)})(η²(∂_e v)₊² + σv²) ≤ 2η²(∂_t + L_{K(t)})(∂_e v)(∂_e v)₊ + 2σ(∂_t + L_{K(t)})(v) v",
        ),
        ("Drift", "(L + b·∇)(η²(∂_e u)² + σu²) ≤ 2η²(L + b·∇)(∂_e u) ∂_e u + 2σ(L + b·∇)(u) u"),
        ("DriftPosPart", "(L + b·∇)(η²(∂_e v)₊² + σv²) ≤ 2η²(L + b·∇)(∂_e v)(∂_e v)₊ + 2σ(L + b·∇)(v) v"),
        ("GeneralLevy", "L(η²(∂_e u)² + σu²) ≤ 2η² L(∂_e u) ∂_e u + 2σ L(u) u,  λ|y|^{-n}g ≤ K ≤ Λ|y|^{-n}g"),
        ("GeneralLevyPosPart", "L(η²(∂_e v)₊² + σv²) ≤ 2η² L(∂_e v)(∂_e v)₊ + 2σ L(v) v,  general Lévy K"),
    ]
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::FirstOrder { .. } => "FirstOrder",
            Variant::PosPart { .. } => "PosPart",
            Variant::DiffQuot { .. } => "DiffQuot",
            Variant::DiffQuotPosPart { .. } => "DiffQuotPosPart",
            Variant::DiffQuotImproved { .. } => "DiffQuotImproved",
            Variant::DiffQuotImprovedPosPart { .. } => "DiffQuotImprovedPosPart",
            Variant::HolderQuot { .. } => "HolderQuot",
            Variant::HolderQuotPosPart { .. } => "HolderQuotPosPart",
            Variant::SecondOrder { .. } => "SecondOrder",
            Variant::SecondOrderDiffQuot { .. } => "SecondOrderDiffQuot",
            Variant::Parabolic { .. } => "Parabolic",
            Variant::ParabolicPosPart { .. } => "ParabolicPosPart",
            Variant::Drift { .. } => "Drift",
            Variant::DriftPosPart { .. } => "DriftPosPart",
            Variant::GeneralLevy { .. } => "GeneralLevy",
            Variant::GeneralLevyPosPart { .. } => "GeneralLevyPosPart",
        }
    }

    /// Default cutoff of the estimate: the standard bump, or η̄ (1 on
    /// B_{1/8}, 0 outside B_{1/4}) for second-order variants.
    pub fn default_cutoff(&self, dim: usize) -> CutoffFunction {
        match self {
            Variant::SecondOrder { .. } | Variant::SecondOrderDiffQuot { .. } => {
                CutoffFunction::new(dim, &[0.0; MAX_DIM][..dim], 0.125, 0.25).expect("valid radii")
            }
            _ => CutoffFunction::standard(dim),
        }
    }

    pub fn is_pos_part(&self) -> bool {
        self.tag().ends_with("PosPart")
            || matches!(self, Variant::SecondOrder { .. } | Variant::SecondOrderDiffQuot { .. })
    }
}

/// Fields entering one variant's display.
#[derive(Clone)]
pub struct Setup {
    pub w: FieldRef,
    pub pos: bool,
    pub eta: FieldRef,
    pub y: FieldRef,
    /// `Some(h)` for the averaged `[Y²]_h`, `[L(Y)Y]_h` pair.
    pub averaged: Option<Point>,
    pub drift: Option<Vec<f64>>,
    /// Nodes must lie in this ball (radius) when set.
    pub region: Option<f64>,
}

fn unit(v: &[f64], dim: usize, what: &str) -> Result<Vec<f64>, BernsteinError> {
    if v.len() != dim || fields::norm(v) == 0.0 {
        return Err(BernsteinError::Parameter(format!("{what} must be a nonzero vector of dimension {dim}")));
    }
    Ok(v.to_vec())
}

fn step(h: &[f64], dim: usize) -> Result<Vec<f64>, BernsteinError> {
    let h = unit(h, dim, "h")?;
    if fields::norm(&h) > 0.125 + 1e-15 {
        return Err(BernsteinError::Parameter("difference-quotient variants need |h| ≤ 1/8".into()));
    }
    Ok(h)
}

/// Builds the fields of a variant for test function `u` and cutoff `eta`.
pub fn setup(
    kernel: &KernelSpec,
    variant: &Variant,
    u: &FieldRef,
    eta: &CutoffFunction,
) -> Result<Setup, BernsteinError> {
    let n = kernel.dim;
    if u.dim() != n || eta.dim != n {
        return Err(BernsteinError::Parameter("dimension mismatch between kernel, field and cutoff".into()));
    }
    let eta_ref: FieldRef = std::sync::Arc::new(eta.clone());
    let levy = matches!(kernel.base().family, KernelFamily::GeneralLevy { .. });
    let needs_symmetric = !matches!(variant, Variant::Drift { .. } | Variant::DriftPosPart { .. });
    if needs_symmetric && !kernel.symmetric {
        return Err(BernsteinError::Parameter(format!("{} requires a symmetric kernel", variant.tag())));
    }
    let mk = |w: FieldRef, pos: bool, y: FieldRef| Setup {
        w,
        pos,
        eta: eta_ref.clone(),
        y,
        averaged: None,
        drift: None,
        region: None,
    };
    let s = match variant {
        Variant::FirstOrder { e } | Variant::PosPart { e } => {
            let e = unit(e, n, "e")?;
            mk(directional_derivative(u, &e, 1)?, variant.is_pos_part(), u.clone())
        }
        Variant::GeneralLevy { e } | Variant::GeneralLevyPosPart { e } => {
            if !levy {
                return Err(BernsteinError::Parameter("general Lévy variants need a general Lévy kernel".into()));
            }
            let e = unit(e, n, "e")?;
            mk(directional_derivative(u, &e, 1)?, variant.is_pos_part(), u.clone())
        }
        Variant::Drift { e, b } | Variant::DriftPosPart { e, b } => {
            let e = unit(e, n, "e")?;
            if b.len() != n {
                return Err(BernsteinError::Parameter("drift dimension mismatch".into()));
            }
            if fields::norm(b) > kernel.cap_lambda * (1.0 + 1e-12) {
                return Err(BernsteinError::Parameter("|b| exceeds Λ".into()));
            }
            let mut st = mk(directional_derivative(u, &e, 1)?, variant.is_pos_part(), u.clone());
            st.drift = Some(b.clone());
            st
        }
        Variant::DiffQuot { h } | Variant::DiffQuotPosPart { h } => {
            let h = step(h, n)?;
            mk(diff_quotient(u, &h)?, variant.is_pos_part(), average(u, &h))
        }
        Variant::HolderQuot { h, alpha } | Variant::HolderQuotPosPart { h, alpha } => {
            let h = step(h, n)?;
            mk(holder_quotient(u, &h, *alpha)?, variant.is_pos_part(), average(u, &h))
        }
        Variant::DiffQuotImproved { h } | Variant::DiffQuotImprovedPosPart { h } => {
            let h = step(h, n)?;
            let mut st = mk(diff_quotient(u, &h)?, variant.is_pos_part(), u.clone());
            let mut p = [0.0; MAX_DIM];
            p[..n].copy_from_slice(&h);
            st.averaged = Some(p);
            st.region = Some(0.25);
            st
        }
        Variant::SecondOrder { e, inner } => {
            let e = unit(e, n, "e")?;
            let ut = product(&(std::sync::Arc::new(inner.build(n)?) as FieldRef), u);
            let w = fields::scale(&directional_derivative(&ut, &e, 2)?, -1.0);
            mk(w, true, directional_derivative(&ut, &e, 1)?)
        }
        Variant::SecondOrderDiffQuot { h, inner } => {
            let h = step(h, n)?;
            let ut = product(&(std::sync::Arc::new(inner.build(n)?) as FieldRef), u);
            let minus: Vec<f64> = h.iter().map(|c| -c).collect();
            let w = second_diff_quotient(&ut, &h)?;
            let y = diff_quotient(&average(&ut, &minus), &h)?;
            mk(w, true, y)
        }
        Variant::Parabolic { .. } | Variant::ParabolicPosPart { .. } => {
            return Err(BernsteinError::Parameter(
                "parabolic variants act on space-time fields; use the parabolic module".into(),
            ))
        }
    };
    Ok(s)
}

/// Raw pieces of the defect at one node.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Components {
    /// `L(η²P(W)²)`
    pub l_main: f64,
    /// `2η² L(W) P(W)`
    pub r_main: f64,
    /// `L(Z)`
    pub l_sigma: f64,
    /// `2R`
    pub r_sigma: f64,
    pub err_main: f64,
    pub err_sigma: f64,
}

impl Components {
    pub fn a(&self) -> f64 {
        self.l_main - self.r_main
    }
    pub fn s(&self) -> f64 {
        self.l_sigma - self.r_sigma
    }
    pub fn lhs(&self, sigma: f64) -> f64 {
        self.l_main + sigma * self.l_sigma
    }
    pub fn rhs(&self, sigma: f64) -> f64 {
        self.r_main + sigma * self.r_sigma
    }
    pub fn defect(&self, sigma: f64) -> f64 {
        self.a() + sigma * self.s()
    }
    pub fn error(&self, sigma: f64) -> f64 {
        self.err_main + sigma * self.err_sigma
    }
}

/// Applies `L` (plus the drift term) to a field at a point.
pub fn apply_at(op: &Operator, drift: Option<&[f64]>, f: &dyn Field, x: &[f64]) -> Estimate {
    let mut e = op.eval(f, x);
    if let Some(b) = drift {
        let g = f.gradient(x);
        e.value += fields::dot(b, &g[..b.len()]);
    }
    e
}

/// The pieces for the main (σ-free) part at `x`.
pub fn main_components(op: &Operator, st: &Setup, x: &[f64]) -> (f64, f64, f64) {
    let p = if st.pos { pos_part(&st.w) } else { st.w.clone() };
    let main = product(&square(&st.eta), &square(&p));
    let lm = apply_at(op, st.drift.as_deref(), main.as_ref(), x);
    let lw = apply_at(op, st.drift.as_deref(), st.w.as_ref(), x);
    let eta = st.eta.value(x);
    let pv = p.value(x);
    (lm.value, 2.0 * eta * eta * lw.value * pv, lm.error + 2.0 * eta * eta * pv.abs() * lw.error)
}

pub fn sigma_components(op: &Operator, st: &Setup, x: &[f64]) -> (f64, f64, f64) {
    let n = st.y.dim();
    let drift = st.drift.as_deref();
    match st.averaged {
        None => {
            let z = square(&st.y);
            let lz = apply_at(op, drift, z.as_ref(), x);
            let ly = apply_at(op, drift, st.y.as_ref(), x);
            let yv = st.y.value(x);
            (lz.value, 2.0 * ly.value * yv, lz.error + 2.0 * yv.abs() * ly.error)
        }
        Some(h) => {
            let z = average(&square(&st.y), &h[..n]);
            let lz = apply_at(op, drift, z.as_ref(), x);
            let gl = GaussLegendre::new(12);
            let mut r = 0.0;
            let mut er = 0.0;
            for (t, w) in gl.mapped(0.0, 1.0) {
                let mut p = [0.0; MAX_DIM];
                for i in 0..n {
                    p[i] = x[i] + t * h[i];
                }
                let ly = apply_at(op, drift, st.y.as_ref(), &p[..n]);
                let yv = st.y.value(&p[..n]);
                r += w * ly.value * yv;
                er += w * yv.abs() * ly.error;
            }
            (lz.value, 2.0 * r, lz.error + 2.0 * er)
        }
    }
}

pub fn components(op: &Operator, st: &Setup, x: &[f64]) -> Components {
    let (l_main, r_main, err_main) = main_components(op, st, x);
    let (l_sigma, r_sigma, err_sigma) = sigma_components(op, st, x);
    Components { l_main, r_main, l_sigma, r_sigma, err_main, err_sigma }
}

/// Tolerance discipline for inequality assertions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerance {
    /// A node violates only if `defect > factor × error estimate + absolute`.
    pub factor: f64,
    pub absolute: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { factor: 3.0, absolute: 1e-12 }
    }
}

impl Tolerance {
    pub fn excess(&self, c: &Components, sigma: f64) -> f64 {
        c.defect(sigma) - self.factor * c.error(sigma) - self.absolute
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BernsteinReport {
    pub variant: String,
    pub sigma: f64,
    pub points: Vec<Vec<f64>>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub defect: Vec<f64>,
    pub error: Vec<f64>,
    pub max_defect: f64,
    /// Largest `defect - factor × error`; positive means a violation.
    pub max_excess: f64,
    pub violating_nodes: Vec<usize>,
    pub pass: bool,
}

impl BernsteinReport {
    pub fn from_components(
        variant: &str,
        sigma: f64,
        points: &[Point],
        dim: usize,
        comps: &[Components],
        tol: Tolerance,
    ) -> Self {
        let defect: Vec<f64> = comps.iter().map(|c| c.defect(sigma)).collect();
        let excess: Vec<f64> = comps.iter().map(|c| tol.excess(c, sigma)).collect();
        let violating_nodes: Vec<usize> = (0..comps.len()).filter(|&i| excess[i] > 0.0).collect();
        BernsteinReport {
            variant: variant.to_string(),
            sigma,
            points: points.iter().map(|p| p[..dim].to_vec()).collect(),
            lhs: comps.iter().map(|c| c.lhs(sigma)).collect(),
            rhs: comps.iter().map(|c| c.rhs(sigma)).collect(),
            error: comps.iter().map(|c| c.error(sigma)).collect(),
            max_defect: defect.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            max_excess: excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            pass: violating_nodes.is_empty(),
            violating_nodes,
            defect,
        }
    }

    /// CSV: coordinates, lhs, rhs, defect, error.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.points.first().map_or(1, Vec::len);
        let cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},lhs,rhs,defect,error", cols.join(","))?;
        for i in 0..self.points.len() {
            let c: Vec<String> = self.points[i].iter().map(|c| format!("{c:.17e}")).collect();
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                c.join(","),
                self.lhs[i],
                self.rhs[i],
                self.defect[i],
                self.error[i]
            )?;
        }
        Ok(())
    }
}

/// Evaluation nodes of a grid: drops a `collar`-node band at the faces and
/// nodes where `0 < η < 1e-3`.
pub fn evaluation_nodes(grid: &Grid, eta: &dyn Field, collar: usize) -> Vec<Point> {
    (0..grid.len())
        .filter(|&k| grid.is_inner(k, collar))
        .map(|k| grid.node(k))
        .filter(|p| {
            let v = eta.value(&p[..grid.dim]);
            !(v > 0.0 && v < 1e-3)
        })
        .collect()
}

fn operator_for(kernel: &KernelSpec, q: &QuadratureConfig, u: &FieldRef) -> Result<Operator, BernsteinError> {
    Ok(Operator::new(kernel, q, q.rho_for(u.fd_step()))?)
}

fn check_region(st: &Setup, points: &[Point], dim: usize) -> Result<(), BernsteinError> {
    if let Some(r) = st.region {
        if let Some(p) = points.iter().find(|p| fields::norm(&p[..dim]) > r + 1e-12) {
            return Err(BernsteinError::Parameter(format!(
                "node {:?} lies outside the valid region B_{r} of this variant",
                &p[..dim]
            )));
        }
    }
    Ok(())
}

/// Per-node components of a variant for one test function.
pub fn variant_components(
    kernel: &KernelSpec,
    variant: &Variant,
    eta: &CutoffFunction,
    u: &FieldRef,
    q: &QuadratureConfig,
    points: &[Point],
) -> Result<Vec<Components>, BernsteinError> {
    let st = setup(kernel, variant, u, eta)?;
    check_region(&st, points, kernel.dim)?;
    let op = operator_for(kernel, q, u)?;
    Ok(points.par_iter().map(|p| components(&op, &st, &p[..kernel.dim])).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn check_key_estimate(
    kernel: &KernelSpec,
    variant: &Variant,
    eta: &CutoffFunction,
    u: &FieldRef,
    sigma: f64,
    q: &QuadratureConfig,
    points: &[Point],
    tol: Tolerance,
) -> Result<BernsteinReport, BernsteinError> {
    if !(sigma >= 0.0) {
        return Err(BernsteinError::Parameter("σ must be nonnegative".into()));
    }
    let comps = variant_components(kernel, variant, eta, u, q, points)?;
    Ok(BernsteinReport::from_components(variant.tag(), sigma, points, kernel.dim, &comps, tol))
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaSearch {
    pub sigma_star: f64,
    pub binding_member: usize,
    pub binding_node: usize,
    pub binding_point: Vec<f64>,
    pub bisection_steps: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SearchOptions {
    pub sigma_max: f64,
    pub relative_tolerance: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { sigma_max: 1e6, relative_tolerance: 1e-3 }
    }
}

/// Bisection for the smallest σ with no violating node over the ensemble,
/// on precomputed components (`comps[member][node]`).
pub fn min_sigma_from_components(
    comps: &[Vec<Components>],
    points: &[Point],
    dim: usize,
    tol: Tolerance,
    opts: SearchOptions,
) -> Result<SigmaSearch, BernsteinError> {
    if comps.is_empty() {
        return Err(BernsteinError::Parameter("ensemble must be nonempty".into()));
    }
    let worst = |sigma: f64| {
        let mut w = (f64::NEG_INFINITY, 0, 0);
        for (m, cs) in comps.iter().enumerate() {
            for (k, c) in cs.iter().enumerate() {
                let e = tol.excess(c, sigma);
                if e > w.0 {
                    w = (e, m, k);
                }
            }
        }
        w
    };
    let binding = |w: (f64, usize, usize), sigma: f64, steps: usize| SigmaSearch {
        sigma_star: sigma,
        binding_member: w.1,
        binding_node: w.2,
        binding_point: points.get(w.2).map_or(vec![], |p| p[..dim].to_vec()),
        bisection_steps: steps,
    };
    let w0 = worst(0.0);
    if w0.0 <= 0.0 {
        return Ok(binding(w0, 0.0, 0));
    }
    let wmax = worst(opts.sigma_max);
    if wmax.0 > 0.0 {
        let c = &comps[wmax.1][wmax.2];
        let trace = [0.0, 1.0, 1e2, 1e4, opts.sigma_max].iter().map(|&s| (s, c.defect(s))).collect();
        return Err(BernsteinError::SearchFailure {
            sigma_max: opts.sigma_max,
            worst_defect: c.defect(opts.sigma_max),
            member: wmax.1,
            node: wmax.2,
            trace,
        });
    }
    let (mut lo, mut hi) = (0.0, opts.sigma_max);
    let mut steps = 0;
    let mut last_bad = w0;
    while hi - lo > opts.relative_tolerance * hi {
        let mid = 0.5 * (lo + hi);
        let w = worst(mid);
        if w.0 > 0.0 {
            lo = mid;
            last_bad = w;
        } else {
            hi = mid;
        }
        steps += 1;
    }
    Ok(binding(last_bad, hi, steps))
}

pub fn find_min_sigma(
    kernel: &KernelSpec,
    variant: &Variant,
    eta: &CutoffFunction,
    ensemble: &[FieldRef],
    q: &QuadratureConfig,
    points: &[Point],
    tol: Tolerance,
    opts: SearchOptions,
) -> Result<SigmaSearch, BernsteinError> {
    let comps: Result<Vec<_>, _> =
        ensemble.iter().map(|u| variant_components(kernel, variant, eta, u, q, points)).collect();
    min_sigma_from_components(&comps?, points, kernel.dim, tol, opts)
}

/// Defect of the equivalent integral form
/// `∫(η²(x) - η²(y))(∂_e u(y))² K(x-y)dy - η²B(∂_e u,∂_e u) - σB(u,u)`.
pub fn equivalent_form_defect(op: &Operator, st: &Setup, sigma: f64, x: &[f64]) -> Estimate {
    let n = st.w.dim();
    let eta2 = square(&st.eta);
    let w2 = square(&st.w);
    // ∫(η²(x) - η²(y)) W(y)² K = L(η²W²) - η²(x) L(W²)
    let a = op.eval(product(&eta2, &w2).as_ref(), x);
    let b = op.eval(w2.as_ref(), x);
    let e2 = eta2.value(&x[..n]);
    let bw = op.bilinear_eval(st.w.as_ref(), st.w.as_ref(), x);
    let bu = op.bilinear_eval(st.y.as_ref(), st.y.as_ref(), x);
    Estimate {
        value: a.value - e2 * b.value - e2 * bw.value - sigma * bu.value,
        error: a.error + e2 * b.error + e2 * bw.error + sigma * bu.error,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpolationReport {
    pub delta: f64,
    pub pos_part: bool,
    /// Smallest c making the inequality hold at every node.
    pub required_c: f64,
    pub ceiling: f64,
    pub pass: bool,
    pub lhs: Vec<f64>,
    pub first_term: Vec<f64>,
    pub second_term_unit: Vec<f64>,
}

/// `(∂_e u)² ≤ δ^{2s} B(∂_e u, ∂_e u) + c δ^{2s-2} B(u,u)` (and the
/// positive-part form with `- δ^{2s} L((∂_e v)₋)(∂_e v)₊`). For general Lévy
/// kernels `δ^{2s}` is replaced by `g(δ)^{-1}`.
#[allow(clippy::too_many_arguments)]
pub fn check_interpolation(
    kernel: &KernelSpec,
    delta: f64,
    u: &FieldRef,
    e: &[f64],
    pos_part_form: bool,
    q: &QuadratureConfig,
    points: &[Point],
    ceiling: f64,
) -> Result<InterpolationReport, BernsteinError> {
    if !(delta > 0.0) {
        return Err(BernsteinError::Parameter("δ must be positive".into()));
    }
    let n = kernel.dim;
    let du = directional_derivative(u, e, 1)?;
    let op = operator_for(kernel, q, u)?;
    let w1 = kernel.interpolation_weight(delta);
    let w2 = kernel.interpolation_lower_weight(delta);
    let rows: Vec<(f64, f64, f64)> = points
        .par_iter()
        .map(|p| {
            let x = &p[..n];
            let buu = op.bilinear_eval(u.as_ref(), u.as_ref(), x).value;
            if pos_part_form {
                let dp = pos_part(&du);
                let dm = neg_part(&du);
                let lhs = dp.value(x).powi(2);
                let b = op.bilinear_eval(dp.as_ref(), dp.as_ref(), x).value;
                let l = op.eval(dm.as_ref(), x).value;
                (lhs, w1 * (b - l * dp.value(x)), w2 * buu)
            } else {
                let lhs = du.value(x).powi(2);
                let b = op.bilinear_eval(du.as_ref(), du.as_ref(), x).value;
                (lhs, w1 * b, w2 * buu)
            }
        })
        .collect();
    let mut c: f64 = 0.0;
    for (lhs, t1, t2) in &rows {
        let need = lhs - t1;
        if need > 1e-14 * lhs.abs().max(1.0) {
            c = c.max(if *t2 > 0.0 { need / t2 } else { f64::INFINITY });
        }
    }
    Ok(InterpolationReport {
        delta,
        pos_part: pos_part_form,
        required_c: c,
        ceiling,
        pass: c <= ceiling,
        lhs: rows.iter().map(|r| r.0).collect(),
        first_term: rows.iter().map(|r| r.1).collect(),
        second_term_unit: rows.iter().map(|r| r.2).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CutoffReport {
    pub eps: f64,
    /// `L(η²)(x) / (‖D²η²‖_{L∞(B_ε(x))} ε^{2-2s})` per node (zero where the
    /// norm vanishes).
    pub l_ratio: Vec<f64>,
    /// `B(η,η)(x) / (‖∇η‖²_{L∞(B_ε(x))} ε^{2-2s})` per node.
    pub b_ratio: Vec<f64>,
    pub max_l_ratio: f64,
    pub max_b_ratio: f64,
    pub c1_ceiling: f64,
    pub c2_ceiling: f64,
    pub pass: bool,
}

fn local_sup<F: Fn(&[f64]) -> f64>(center: &[f64], eps: f64, f: F) -> f64 {
    let n = center.len();
    let m: usize = match n {
        1 => 401,
        2 => 61,
        _ => 21,
    };
    let mut sup: f64 = 0.0;
    for k in 0..m.pow(n as u32) {
        let mut c = k;
        let mut p = [0.0; MAX_DIM];
        let mut r2 = 0.0;
        for a in 0..n {
            let o = -eps + 2.0 * eps * (c % m) as f64 / (m - 1) as f64;
            c /= m;
            p[a] = center[a] + o;
            r2 += o * o;
        }
        if r2 <= eps * eps {
            sup = sup.max(f(&p[..n]));
        }
    }
    sup
}

fn spectral(h: &crate::kernels::Mat, n: usize) -> f64 {
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| h[i][j]);
    m.symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Cutoff estimates for a near kernel `K₁` supported in `B_ε`. For
/// nonsymmetric kernels with s ≤ 1/2 the first ratio uses
/// `‖η²‖_{C^{1,1}} (ε + η(x)) ε^{1-2s}`.
#[allow(clippy::too_many_arguments)]
pub fn check_cutoff_estimates(
    near: &KernelSpec,
    eta: &CutoffFunction,
    eps: f64,
    q: &QuadratureConfig,
    points: &[Point],
    c1_ceiling: f64,
    c2_ceiling: f64,
) -> Result<CutoffReport, BernsteinError> {
    let n = near.dim;
    let supported = near.support_radius().is_some_and(|r| r <= eps * (1.0 + 1e-12));
    if !supported {
        return Err(OperatorError::Kernel(crate::kernels::KernelError::SpecViolation(format!(
            "kernel is not supported in B_{eps}"
        )))
        .into());
    }
    let eta_ref: FieldRef = std::sync::Arc::new(eta.clone());
    let eta2 = square(&eta_ref);
    let mut qq = q.clone();
    qq.far_cutoff = qq.far_cutoff.min(64.0);
    let op = Operator::new(near, &qq, qq.rho_for(1e-3).min(eps / 8.0))?;
    let scale = near.cutoff_scale(eps);
    let s = near.s();
    let nonsym_low = !near.symmetric && s <= 0.5;
    let rows: Vec<(f64, f64)> = points
        .par_iter()
        .map(|p| {
            let x = &p[..n];
            let l = op.eval(eta2.as_ref(), x).value;
            let b = op.bilinear_eval(eta_ref.as_ref(), eta_ref.as_ref(), x).value;
            let d2 = local_sup(x, eps, |y| spectral(&eta2.hessian(y), n));
            let g = local_sup(x, eps, |y| fields::norm(&eta.gradient(y)[..n]));
            let l_den = if nonsym_low {
                let c11 = local_sup(x, eps, |y| {
                    eta2.value(y).abs() + fields::norm(&eta2.gradient(y)[..n]) + spectral(&eta2.hessian(y), n)
                });
                c11 * (eps + eta.value(x)) * eps.powf(1.0 - 2.0 * s)
            } else {
                d2 * scale
            };
            let lr = if l_den > 0.0 {
                l / l_den
            } else if l.abs() < 1e-14 {
                0.0
            } else {
                f64::INFINITY
            };
            let bden = g * g * scale;
            let br = if bden > 0.0 {
                b / bden
            } else if b.abs() < 1e-14 {
                0.0
            } else {
                f64::INFINITY
            };
            (lr, br)
        })
        .collect();
    let max_l = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let max_b = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(CutoffReport {
        eps,
        l_ratio: rows.iter().map(|r| r.0).collect(),
        b_ratio: rows.iter().map(|r| r.1).collect(),
        max_l_ratio: max_l,
        max_b_ratio: max_b,
        c1_ceiling,
        c2_ceiling,
        pass: max_l <= c1_ceiling && max_b <= c2_ceiling,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProductRuleReport {
    pub residual: Vec<f64>,
    pub error: Vec<f64>,
    pub max_residual: f64,
    pub scale: f64,
    pub pass: bool,
}

/// Residual `L(uv) - uLv - vLu + B(u,v)` with its summed error estimate.
pub fn check_product_rule(
    kernel: &KernelSpec,
    u: &FieldRef,
    v: &FieldRef,
    q: &QuadratureConfig,
    points: &[Point],
) -> Result<ProductRuleReport, BernsteinError> {
    let n = kernel.dim;
    let rho = q.rho_for(u.fd_step().max(v.fd_step()));
    let op = Operator::new(kernel, q, rho)?;
    let uv = product(u, v);
    let rows: Vec<(f64, f64, f64)> = points
        .par_iter()
        .map(|p| {
            let x = &p[..n];
            let luv = op.eval(uv.as_ref(), x);
            let lu = op.eval(u.as_ref(), x);
            let lv = op.eval(v.as_ref(), x);
            let b = op.bilinear_eval(u.as_ref(), v.as_ref(), x);
            let (ux, vx) = (u.value(x), v.value(x));
            let res = luv.value - ux * lv.value - vx * lu.value + b.value;
            let err = luv.error + ux.abs() * lv.error + vx.abs() * lu.error + b.error;
            let scale = luv.value.abs() + (ux * lv.value).abs() + (vx * lu.value).abs() + b.value.abs();
            (res, err, scale)
        })
        .collect();
    let max_residual = rows.iter().map(|r| r.0.abs()).fold(0.0, f64::max);
    let scale = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.0.abs() <= 3.0 * r.1 + 1e-13 * r.2.max(1.0));
    Ok(ProductRuleReport {
        residual: rows.iter().map(|r| r.0).collect(),
        error: rows.iter().map(|r| r.1).collect(),
        max_residual,
        scale,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::constant;

    #[test]
    fn constant_function_has_zero_defect() {
        let k = KernelSpec::fractional(1, 0.5);
        let u = constant(1, 2.0);
        let eta = CutoffFunction::standard(1);
        let pts: Vec<Point> = (0..5).map(|i| [-0.8 + 0.4 * i as f64, 0.0, 0.0]).collect();
        let r = check_key_estimate(
            &k,
            &Variant::FirstOrder { e: vec![1.0] },
            &eta,
            &u,
            3.0,
            &QuadratureConfig::default(),
            &pts,
            Tolerance::default(),
        )
        .unwrap();
        assert!(r.defect.iter().all(|d| d.abs() < 1e-12));
        assert!(r.pass);
    }

    #[test]
    fn improved_variant_rejects_nodes_outside_quarter_ball() {
        let k = KernelSpec::fractional(1, 0.5);
        let u = constant(1, 1.0);
        let eta = CutoffFunction::standard(1);
        let r = check_key_estimate(
            &k,
            &Variant::DiffQuotImproved { h: vec![0.05] },
            &eta,
            &u,
            1.0,
            &QuadratureConfig::default(),
            &[[0.5, 0.0, 0.0]],
            Tolerance::default(),
        );
        assert!(matches!(r, Err(BernsteinError::Parameter(_))));
        let big = Variant::DiffQuot { h: vec![0.2] };
        assert!(setup(&k, &big, &u, &eta).is_err());
    }

    #[test]
    fn catalog_covers_all_tags() {
        let c = catalog();
        assert_eq!(c.len(), VARIANT_TAGS.len());
        for (t, (ct, _)) in VARIANT_TAGS.iter().zip(&c) {
            assert_eq!(t, ct);
        }
    }
}
