//! Discrete nonlocal obstacle problem `min{Lu - f, u - φ} = 0`, with the
//! post-solve measurements: semiconvexity, the C^{1+s} exponent, free
//! boundary profiles and blow-up convexity.
//!
//! The operator is discretised with piecewise multilinear interpolation of
//! `u` on the box, a Taylor cell `[-Δx, Δx]ⁿ` around each node (axis second
//! differences carrying `∫ y_a² K`), and an exterior integral against the
//! prescribed exterior data. All off-diagonal entries are `-∫ hat·K ≤ 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fields::{self, Exterior, Field, FieldError, FieldRef, Grid, GridFunction};
use crate::kernels::{KernelError, KernelSpec, Point, MAX_DIM};
use crate::operator::{Operator, OperatorError, QuadratureConfig};
use crate::quadrature::{GaussLegendre, SphereRule};

#[derive(Debug, Error)]
pub enum ObstacleError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("discretisation is not monotone: off-diagonal entry {value:e} at ({row}, {col})")]
    NotMonotone { row: usize, col: usize, value: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64, history: Vec<f64> },
    #[error("fit error: {0}")]
    Fit(String),
    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),
}

/// `min{Lu - f, u - φ} = 0` on the strict interior of a box grid; face nodes
/// and the complement of the box carry the exterior data.
#[derive(Clone)]
pub struct ObstacleProblem {
    pub kernel: KernelSpec,
    pub grid: Grid,
    pub obstacle: FieldRef,
    pub rhs: FieldRef,
    pub exterior: Exterior,
    /// Exterior data is set to zero beyond this radius (truncated problems).
    pub exterior_radius: Option<f64>,
}

impl ObstacleProblem {
    pub fn new(kernel: KernelSpec, grid: Grid, obstacle: FieldRef, rhs: FieldRef, exterior: Exterior) -> Self {
        ObstacleProblem { kernel, grid, obstacle, rhs, exterior, exterior_radius: None }
    }

    /// `φ = 1 - 2|x|²` on `[-1,1]ⁿ`, fractional s = 1/2, zero exterior and
    /// zero right-hand side, with `intervals` cells per axis.
    pub fn shipped(dim: usize, intervals: usize) -> Result<Self, ObstacleError> {
        let grid = Grid::new(dim, -1.0, 1.0, intervals + 1)?;
        let phi = fields::FnField::new(dim, |x| 1.0 - 2.0 * x.iter().map(|c| c * c).sum::<f64>())
            .with_gradient(move |x| {
                let mut g = [0.0; MAX_DIM];
                for a in 0..x.len() {
                    g[a] = -4.0 * x[a];
                }
                g
            })
            .with_hessian(move |x| {
                let mut h = [[0.0; MAX_DIM]; MAX_DIM];
                for (a, row) in h.iter_mut().enumerate().take(x.len()) {
                    row[a] = -4.0;
                }
                h
            })
            .into_ref();
        Ok(ObstacleProblem::new(
            KernelSpec::fractional(dim, 0.5),
            grid,
            phi,
            fields::constant(dim, 0.0),
            Exterior::Zero,
        ))
    }

    pub fn exterior_value(&self, y: &[f64]) -> f64 {
        if let Some(r) = self.exterior_radius {
            if fields::norm(y) > r {
                return 0.0;
            }
        }
        match &self.exterior {
            Exterior::Zero => 0.0,
            Exterior::Constant(c) => *c,
            Exterior::Analytic { field, .. } => field.value(y),
            Exterior::Clamp => f64::NAN,
        }
    }

    fn validate(&self) -> Result<(), ObstacleError> {
        self.kernel.check()?;
        if !self.kernel.symmetric {
            return Err(ObstacleError::Parameter("the obstacle discretisation requires a symmetric kernel".into()));
        }
        if self.grid.dim != self.kernel.dim || self.obstacle.dim() != self.kernel.dim {
            return Err(ObstacleError::Parameter("dimension mismatch".into()));
        }
        if self.grid.dim > 2 {
            return Err(ObstacleError::Parameter("assembly is implemented for n ∈ {1, 2}".into()));
        }
        if self.grid.count < 3 {
            return Err(ObstacleError::Parameter("grid needs an interior node".into()));
        }
        if matches!(self.exterior, Exterior::Clamp) {
            return Err(ObstacleError::Parameter(
                "clamped exterior data is not defined for the obstacle problem".into(),
            ));
        }
        Ok(())
    }
}

/// Assembled `L_h u = M u_int - e` on the interior unknowns.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub grid: Grid,
    /// Flat grid indices of the interior unknowns, in matrix order.
    pub unknowns: Vec<usize>,
    pub matrix: DMatrix<f64>,
    /// Contribution of face nodes and of the exterior data.
    pub exterior_load: DVector<f64>,
    /// Values at face nodes (flat index, value).
    pub face_values: Vec<(usize, f64)>,
}

impl Assembled {
    /// `L_h` applied to nodal interior values.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u - &self.exterior_load
    }

    /// Grid function with interior values `u` and the face/exterior data.
    pub fn to_grid_function(&self, u: &DVector<f64>, exterior: Exterior) -> Result<GridFunction, FieldError> {
        let mut values = vec![0.0; self.grid.len()];
        for &(k, v) in &self.face_values {
            values[k] = v;
        }
        for (i, &k) in self.unknowns.iter().enumerate() {
            values[k] = u[i];
        }
        GridFunction::new(self.grid.clone(), values, exterior)
    }

    pub fn sample_interior(&self, f: &dyn Field) -> DVector<f64> {
        DVector::from_iterator(
            self.unknowns.len(),
            self.unknowns.iter().map(|&k| f.value(&self.grid.node(k)[..self.grid.dim])),
        )
    }

    pub fn points(&self) -> Vec<Point> {
        self.unknowns.iter().map(|&k| self.grid.node(k)).collect()
    }
}

/// `∫_a^∞ K(rθ) f(r) r^{n-1} dr` on geometric panels, split at `breaks`.
fn ray_integral(kernel: &KernelSpec, theta: &[f64], a: f64, breaks: &[f64], f: &dyn Fn(f64) -> f64) -> f64 {
    let gl = GaussLegendre::new(16);
    let n = kernel.dim;
    let mut stops: Vec<f64> = breaks.iter().cloned().filter(|&b| b > a).collect();
    stops.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let r_max = a.max(1.0) * 2f64.powi(60);
    stops.push(r_max);
    let mut total = 0.0;
    let mut lo = a;
    let mut y = [0.0; MAX_DIM];
    for stop in stops {
        while lo < stop {
            let hi = (2.0 * lo).min(stop);
            let hi = if stop - hi < 1e-9 * stop { stop } else { hi };
            total += gl.integrate(lo, hi, |r| {
                for i in 0..n {
                    y[i] = r * theta[i];
                }
                kernel.density(&y[..n]) * f(r) * r.powi(n as i32 - 1)
            });
            lo = hi;
        }
    }
    total
}

fn exit_distance_box(x: &[f64], theta: &[f64], lo: f64, hi: f64) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..x.len() {
        if theta[i] > 1e-15 {
            d = d.min((hi - x[i]) / theta[i]);
        } else if theta[i] < -1e-15 {
            d = d.min((lo - x[i]) / theta[i]);
        }
    }
    d
}

fn exit_distance_ball(x: &[f64], theta: &[f64], radius: f64) -> f64 {
    let b = fields::dot(x, theta);
    let c = fields::dot(x, x) - radius * radius;
    (-b + (b * b - c).max(0.0).sqrt()).max(0.0)
}

/// Directions for exterior rays.
fn ray_rule(dim: usize) -> SphereRule {
    SphereRule::full(dim, if dim == 1 { 2 } else { 1024 })
}

/// `(∫_ext K, ∫_ext K g)` over the complement of the box, seen from `x`.
fn exterior_integrals(p: &ObstacleProblem, rule: &SphereRule, x: &[f64]) -> (f64, f64) {
    let n = p.grid.dim;
    let mut mass = 0.0;
    let mut load = 0.0;
    for (dir, w) in rule.directions.iter().zip(&rule.weights) {
        let theta = &dir[..n];
        let d = exit_distance_box(x, theta, p.grid.lo, p.grid.hi);
        let mut breaks = vec![];
        if let Some(r) = p.exterior_radius {
            breaks.push(exit_distance_ball(x, theta, r));
        }
        mass += w * ray_integral(&p.kernel, theta, d, &[], &|_| 1.0);
        let g = |r: f64| {
            let mut y = [0.0; MAX_DIM];
            for i in 0..n {
                y[i] = x[i] + r * theta[i];
            }
            p.exterior_value(&y[..n])
        };
        if !matches!(p.exterior, Exterior::Zero) {
            load += w * ray_integral(&p.kernel, theta, d, &breaks, &g);
        }
    }
    (mass, load)
}

/// `∫_{[-Δx,Δx]ⁿ} y_a² K(y) dy` for each axis, summed over dyadic shells.
fn taylor_cell_moments(kernel: &KernelSpec, dx: f64) -> [f64; MAX_DIM] {
    let n = kernel.dim;
    let gl = GaussLegendre::new(10);
    let mut m = [0.0; MAX_DIM];
    let mut a = dx;
    let mut last = [0.0; MAX_DIM];
    let mut prev = [0.0; MAX_DIM];
    for level in 0..400 {
        let mut shell = [0.0; MAX_DIM];
        let side = a / 2.0;
        let cells = 4usize.pow(n as u32);
        for c in 0..cells {
            let mut lo = [0.0; MAX_DIM];
            let mut k = c;
            let mut central = true;
            for l in lo.iter_mut().take(n) {
                let i = k % 4;
                k /= 4;
                *l = -a + side * i as f64;
                central &= i == 1 || i == 2;
            }
            if central {
                continue;
            }
            let pts: Vec<(f64, f64)> = gl.mapped(0.0, side).collect();
            if n == 1 {
                for &(t, w) in &pts {
                    let y = [lo[0] + t];
                    shell[0] += w * y[0] * y[0] * kernel.density(&y);
                }
            } else {
                for &(t1, w1) in &pts {
                    for &(t2, w2) in &pts {
                        let y = [lo[0] + t1, lo[1] + t2];
                        let k = kernel.density(&y) * w1 * w2;
                        shell[0] += k * y[0] * y[0];
                        shell[1] += k * y[1] * y[1];
                    }
                }
            }
        }
        for i in 0..n {
            m[i] += shell[i];
        }
        prev = last;
        last = shell;
        a /= 2.0;
        if level > 8 && (0..n).all(|i| shell[i] <= 1e-17 * m[i]) {
            return m;
        }
    }
    // geometric remainder of the shell series
    for i in 0..n {
        if prev[i] > 0.0 {
            let q = last[i] / prev[i];
            if q < 1.0 {
                m[i] += last[i] * q / (1.0 - q);
            }
        }
    }
    m
}

/// Corner weights `∫_element hat_c(y) K(-y) dy` for the element with lower
/// corner at offset `p` (in units of Δx).
fn element_weights(kernel: &KernelSpec, dx: f64, p: &[i64], gl: &GaussLegendre) -> [f64; 4] {
    let n = kernel.dim;
    let mut out = [0.0; 4];
    let pts: Vec<(f64, f64)> = gl.mapped(0.0, 1.0).collect();
    if n == 1 {
        for &(t, w) in &pts {
            let y = [-(p[0] as f64 + t) * dx];
            let k = kernel.density(&y) * w * dx;
            out[0] += (1.0 - t) * k;
            out[1] += t * k;
        }
    } else {
        for &(t1, w1) in &pts {
            for &(t2, w2) in &pts {
                let y = [-(p[0] as f64 + t1) * dx, -(p[1] as f64 + t2) * dx];
                let k = kernel.density(&y) * w1 * w2 * dx * dx;
                out[0] += (1.0 - t1) * (1.0 - t2) * k;
                out[1] += t1 * (1.0 - t2) * k;
                out[2] += (1.0 - t1) * t2 * k;
                out[3] += t1 * t2 * k;
            }
        }
    }
    out
}

/// Monotone assembly of `L_h` on the interior nodes.
pub fn assemble(p: &ObstacleProblem) -> Result<Assembled, ObstacleError> {
    p.validate()?;
    let grid = &p.grid;
    let n = grid.dim;
    let c = grid.count as i64;
    let dx = grid.spacing();
    let unknowns: Vec<usize> = (0..grid.len()).filter(|&k| grid.is_inner(k, 1)).collect();
    let mut position = vec![usize::MAX; grid.len()];
    for (i, &k) in unknowns.iter().enumerate() {
        position[k] = i;
    }
    let face_values: Vec<(usize, f64)> =
        (0..grid.len()).filter(|&k| !grid.is_inner(k, 1)).map(|k| (k, p.exterior_value(&grid.node(k)[..n]))).collect();
    let mut face = vec![0.0; grid.len()];
    for &(k, v) in &face_values {
        face[k] = v;
    }

    // element weight table indexed by lower-corner offset in [-(c-1), c-2]ⁿ
    let span = (2 * c - 2) as usize;
    let corners = 1usize << n;
    let offsets: Vec<[i64; 2]> = (0..span.pow(n as u32))
        .map(|k| {
            let mut o = [0i64; 2];
            let mut r = k;
            for oa in o.iter_mut().take(n) {
                *oa = (r % span) as i64 - (c - 1);
                r /= span;
            }
            o
        })
        .collect();
    let near = GaussLegendre::new(16);
    let far = GaussLegendre::new(8);
    let table: Vec<[f64; 4]> = offsets
        .par_iter()
        .map(|o| {
            let touches_origin = (0..n).all(|a| o[a] == 0 || o[a] == -1);
            if touches_origin {
                return [0.0; 4];
            }
            let dist = (0..n).map(|a| o[a].max(-o[a] - 1)).max().unwrap_or(0);
            element_weights(&p.kernel, dx, &o[..n], if dist <= 3 { &near } else { &far })
        })
        .collect();
    let table_index = |o: &[i64]| -> usize {
        let mut k = 0usize;
        for a in (0..n).rev() {
            k = k * span + (o[a] + c - 1) as usize;
        }
        k
    };
    let moments = taylor_cell_moments(&p.kernel, dx);
    let rule = ray_rule(n);

    let m = unknowns.len();
    let rows: Vec<(Vec<(usize, f64)>, f64, f64)> = unknowns
        .par_iter()
        .map(|&k| {
            let idx = grid.index(k);
            let x = grid.node(k);
            let mut diag = 0.0;
            let mut load = 0.0;
            let mut entries: Vec<(usize, f64)> = Vec::new();
            let mut add = |j: usize, w: f64, diag: &mut f64, load: &mut f64| {
                *diag += w;
                if position[j] != usize::MAX {
                    entries.push((position[j], w));
                } else {
                    *load += w * face[j];
                }
            };
            // elements inside the box
            let elements = ((c - 1) as usize).pow(n as u32);
            for e in 0..elements {
                let mut lower = [0i64; 2];
                let mut r = e;
                for la in lower.iter_mut().take(n) {
                    *la = (r % (c as usize - 1)) as i64;
                    r /= c as usize - 1;
                }
                let mut off = [0i64; 2];
                for a in 0..n {
                    off[a] = lower[a] - idx[a] as i64;
                }
                let w = &table[table_index(&off[..n])];
                for (corner, &wc) in w.iter().enumerate().take(corners) {
                    if wc == 0.0 {
                        continue;
                    }
                    let mut node = [0usize; MAX_DIM];
                    for a in 0..n {
                        node[a] = (lower[a] + ((corner >> a) & 1) as i64) as usize;
                    }
                    add(grid.flat(&node[..n]), wc, &mut diag, &mut load);
                }
            }
            // Taylor cell, less the mean hat-interpolation error
            // -(Δx²/12) Σ_a ∂²_a u(x) times the element mass
            let elem_mass = diag;
            for a in 0..n {
                let w = (moments[a] / (2.0 * dx * dx) - elem_mass / 12.0).max(0.0);
                for sgn in [-1i64, 1] {
                    let mut node = idx;
                    node[a] = (idx[a] as i64 + sgn) as usize;
                    add(grid.flat(&node[..n]), w, &mut diag, &mut load);
                }
            }
            let (mass, ext) = exterior_integrals(p, &rule, &x[..n]);
            (entries, diag + mass, load + ext)
        })
        .collect();

    let mut matrix = DMatrix::zeros(m, m);
    let mut exterior_load = DVector::zeros(m);
    for (i, (entries, diag, load)) in rows.into_iter().enumerate() {
        matrix[(i, i)] += diag;
        for (j, w) in entries {
            matrix[(i, j)] -= w;
        }
        exterior_load[i] = load;
    }
    for i in 0..m {
        for j in 0..m {
            if i != j && matrix[(i, j)] > 1e-14 * matrix[(i, i)] {
                return Err(ObstacleError::NotMonotone { row: i, col: j, value: matrix[(i, j)] });
            }
        }
    }
    Ok(Assembled { grid: grid.clone(), unknowns, matrix, exterior_load, face_values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Method {
    Psor { omega: f64 },
    PolicyIteration,
}

impl Default for Method {
    fn default() -> Self {
        Method::Psor { omega: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveOptions {
    pub method: Method,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { method: Method::default(), tol: 1e-10, max_iter: 200_000 }
    }
}

/// `max_i |min((Mu - b)_i, u_i - ψ_i)|`
pub fn complementarity_residual(m: &DMatrix<f64>, b: &DVector<f64>, lower: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let r = m * u - b;
    (0..u.len()).map(|i| r[i].min(u[i] - lower[i]).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct LcpSolution {
    #[serde(skip)]
    pub u: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

/// Solves `min(Mu - b, u - ψ) = 0` for a monotone matrix `M`.
pub fn solve_lcp(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    lower: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<LcpSolution, ObstacleError> {
    solve_lcp_from(m, b, lower, opts, None)
}

/// As [`solve_lcp`], with an optional starting guess for PSOR.
pub fn solve_lcp_from(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    lower: &DVector<f64>,
    opts: &SolveOptions,
    initial: Option<&DVector<f64>>,
) -> Result<LcpSolution, ObstacleError> {
    let n = b.len();
    if m.nrows() != n || m.ncols() != n || lower.len() != n {
        return Err(ObstacleError::Parameter("LCP dimension mismatch".into()));
    }
    match opts.method {
        Method::Psor { omega } => {
            if !(omega > 0.0 && omega < 2.0) {
                return Err(ObstacleError::Parameter("PSOR needs 0 < ω < 2".into()));
            }
            let mt = m.transpose();
            let mut u = match initial {
                Some(u0) if u0.len() == n => u0.sup(lower),
                _ => lower.clone(),
            };
            let mut history = vec![];
            let check_every = 10;
            for it in 1..=opts.max_iter {
                let mut change: f64 = 0.0;
                for i in 0..n {
                    let col = mt.column(i);
                    let dot = col.dot(&u);
                    let diag = m[(i, i)];
                    let gs = u[i] + (b[i] - dot) / diag;
                    let new = ((1.0 - omega) * u[i] + omega * gs).max(lower[i]);
                    change = change.max((new - u[i]).abs());
                    u[i] = new;
                }
                if it % check_every == 0 || change == 0.0 {
                    let r = complementarity_residual(m, b, lower, &u);
                    history.push(r);
                    if r <= opts.tol {
                        return Ok(LcpSolution { u, iterations: it, residual: r, history });
                    }
                }
            }
            let r = complementarity_residual(m, b, lower, &u);
            Err(ObstacleError::NoConvergence { iterations: opts.max_iter, residual: r, history })
        }
        Method::PolicyIteration => {
            let mut active = vec![false; n];
            let mut history = vec![];
            let mut u = DVector::zeros(n);
            for it in 1..=opts.max_iter.min(10 * n + 10) {
                let mut a = m.clone();
                let mut rhs = b.clone();
                for i in 0..n {
                    if active[i] {
                        a.row_mut(i).fill(0.0);
                        a[(i, i)] = 1.0;
                        rhs[i] = lower[i];
                    }
                }
                u = a.lu().solve(&rhs).ok_or_else(|| ObstacleError::Parameter("singular policy system".into()))?;
                let r = m * &u - b;
                let next: Vec<bool> = (0..n).map(|i| u[i] - lower[i] < r[i]).collect();
                let res = complementarity_residual(m, b, lower, &u);
                history.push(res);
                if next == active {
                    if res <= opts.tol {
                        return Ok(LcpSolution { u, iterations: it, residual: res, history });
                    }
                    break;
                }
                active = next;
            }
            let res = complementarity_residual(m, b, lower, &u);
            Err(ObstacleError::NoConvergence { iterations: history.len(), residual: res, history })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FreeBoundaryPoint {
    /// Interior contact node adjacent to the non-contact set.
    pub node: usize,
    /// Sub-grid location from extrapolating `(u - φ)^{1/(1+s)}`.
    pub location: Vec<f64>,
    /// Unit vector pointing into `{u > φ}`.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObstacleSolveReport {
    #[serde(skip)]
    pub solution: GridFunction,
    pub values: Vec<f64>,
    pub method: Method,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub active_set: Vec<usize>,
    pub free_boundary: Vec<FreeBoundaryPoint>,
    pub min_gap: f64,
    pub semiconvexity: Option<SemiconvexityReport>,
    pub regularity: Vec<RegularityFit>,
    pub profiles: Vec<ProfileFit>,
}

/// Right-hand side of the zero-obstacle form `min{L_h v - f', v} = 0`,
/// `v = u - φ`, `f' = f - L_h φ̃` with `φ̃ = φ` on the grid and the exterior
/// data outside.
pub fn zero_obstacle_rhs(asm: &Assembled, phi: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
    f - asm.apply(phi)
}

pub fn solve(p: &ObstacleProblem, opts: &SolveOptions) -> Result<ObstacleSolveReport, ObstacleError> {
    let asm = assemble(p)?;
    solve_assembled(p, &asm, opts)
}

pub fn solve_assembled(
    p: &ObstacleProblem,
    asm: &Assembled,
    opts: &SolveOptions,
) -> Result<ObstacleSolveReport, ObstacleError> {
    let f = asm.sample_interior(p.rhs.as_ref());
    let phi = asm.sample_interior(p.obstacle.as_ref());
    let b = &f + &asm.exterior_load;
    let sol = solve_lcp(&asm.matrix, &b, &phi, opts)?;
    let gf = asm.to_grid_function(&sol.u, p.exterior.clone())?;
    let gap: Vec<f64> = (0..sol.u.len()).map(|i| sol.u[i] - phi[i]).collect();
    let contact_tol = 2.0 * opts.tol.max(1e-12);
    let active_set: Vec<usize> =
        asm.unknowns.iter().zip(&gap).filter(|(_, &g)| g <= contact_tol).map(|(&k, _)| k).collect();
    let free_boundary = detect_free_boundary(p, &gf, opts.tol.max(1e-12));
    Ok(ObstacleSolveReport {
        values: gf.values.clone(),
        solution: gf,
        method: opts.method,
        iterations: sol.iterations,
        residual: sol.residual,
        residual_history: sol.history,
        active_set,
        free_boundary,
        min_gap: gap.iter().cloned().fold(f64::INFINITY, f64::min),
        semiconvexity: None,
        regularity: vec![],
        profiles: vec![],
    })
}

/// Contact nodes (`u - φ ≤ 2 tol`) with an axis neighbour where
/// `u - φ > 10 tol`.
pub fn detect_free_boundary(p: &ObstacleProblem, u: &GridFunction, tol: f64) -> Vec<FreeBoundaryPoint> {
    let g = &p.grid;
    let n = g.dim;
    let dx = g.spacing();
    let s = p.kernel.s();
    let gap = |k: usize| u.values[k] - p.obstacle.value(&g.node(k)[..n]);
    let mut out = vec![];
    for k in (0..g.len()).filter(|&k| g.is_inner(k, 1)) {
        if gap(k) > 2.0 * tol {
            continue;
        }
        let idx = g.index(k);
        for a in 0..n {
            for sgn in [-1i64, 1] {
                let step = |m: i64| -> Option<usize> {
                    let mut j = idx;
                    let v = idx[a] as i64 + sgn * m;
                    if v < 1 || v > g.count as i64 - 2 {
                        return None;
                    }
                    j[a] = v as usize;
                    Some(g.flat(&j[..n]))
                };
                let (Some(k1), Some(k2)) = (step(1), step(2)) else { continue };
                let (g1, g2) = (gap(k1), gap(k2));
                if g1 <= 10.0 * tol {
                    continue;
                }
                let e = 1.0 / (1.0 + s);
                let (v1, v2) = (g1.max(0.0).powf(e), g2.max(0.0).powf(e));
                let mut t = if v2 > v1 { 1.0 - v1 / (v2 - v1) } else { 0.5 };
                t = t.clamp(0.0, 1.0);
                let mut loc = g.node(k);
                loc[a] += sgn as f64 * t * dx;
                let mut dir = vec![0.0; n];
                dir[a] = sgn as f64;
                out.push(FreeBoundaryPoint { node: k, location: loc[..n].to_vec(), direction: dir });
            }
        }
    }
    out
}

/// `sup|f| + sup|∇f| + sup|D²f|` over grid nodes in `B_radius(center)`,
/// derivatives by central differences.
pub fn c11_surrogate(f: &GridFunction, center: &[f64], radius: f64) -> f64 {
    let g = &f.grid;
    let n = g.dim;
    let dx = g.spacing();
    let (mut s0, mut s1, mut s2): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for k in 0..g.len() {
        if !g.is_inner(k, 1) {
            continue;
        }
        let x = g.node(k);
        let d: Vec<f64> = (0..n).map(|a| x[a] - center[a]).collect();
        if fields::norm(&d) > radius {
            continue;
        }
        let idx = g.index(k);
        let at = |shift: &[i64]| {
            let mut j = idx;
            for a in 0..n {
                j[a] = (idx[a] as i64 + shift[a]) as usize;
            }
            f.values[g.flat(&j[..n])]
        };
        s0 = s0.max(f.values[k].abs());
        let mut grad2 = 0.0;
        let mut hess = [[0.0; MAX_DIM]; MAX_DIM];
        for a in 0..n {
            let mut e = [0i64; MAX_DIM];
            e[a] = 1;
            let mut me = [0i64; MAX_DIM];
            me[a] = -1;
            let ga = (at(&e) - at(&me)) / (2.0 * dx);
            grad2 += ga * ga;
            hess[a][a] = (at(&e) - 2.0 * f.values[k] + at(&me)) / (dx * dx);
            for b in 0..a {
                let mut pp = [0i64; MAX_DIM];
                pp[a] = 1;
                pp[b] = 1;
                let mut mm = [0i64; MAX_DIM];
                mm[a] = -1;
                mm[b] = -1;
                let mut pm = [0i64; MAX_DIM];
                pm[a] = 1;
                pm[b] = -1;
                let mut mp = [0i64; MAX_DIM];
                mp[a] = -1;
                mp[b] = 1;
                let h = (at(&pp) + at(&mm) - at(&pm) - at(&mp)) / (4.0 * dx * dx);
                hess[a][b] = h;
                hess[b][a] = h;
            }
        }
        s1 = s1.max(grad2.sqrt());
        let mat = DMatrix::from_fn(n, n, |i, j| hess[i][j]);
        s2 = s2.max(mat.symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    s0 + s1 + s2
}

#[derive(Debug, Clone, Serialize)]
pub struct SemiconvexityReport {
    pub direction: Vec<f64>,
    pub steps: Vec<f64>,
    pub region_radius: f64,
    /// `min δ²_h u` over the region and steps; `δ²_h u = (u(x+h) + u(x-h) - 2u(x))/|h|²`.
    pub min_second_difference: f64,
    pub at: Vec<f64>,
    pub at_step: f64,
    pub denominator: f64,
    /// `max(0, -min) / denominator`
    pub constant: f64,
}

/// Smallest second difference of `u` along `e` at grid nodes in
/// `B_radius(center)`, for steps `k·Δx`.
pub fn measure_semiconvexity(
    u: &GridFunction,
    e: &[f64],
    step_multiples: &[usize],
    center: &[f64],
    radius: f64,
    denominator: f64,
) -> Result<SemiconvexityReport, ObstacleError> {
    let g = &u.grid;
    let n = g.dim;
    if e.len() != n || (fields::norm(e) - 1.0).abs() > 1e-12 {
        return Err(ObstacleError::Parameter("direction must be a unit vector".into()));
    }
    if step_multiples.is_empty() || step_multiples.contains(&0) {
        return Err(ObstacleError::Parameter("steps must be positive multiples of Δx".into()));
    }
    let dx = g.spacing();
    let hmax = *step_multiples.iter().max().unwrap() as f64 * dx;
    for a in 0..n {
        if center[a] - radius - hmax < g.lo - 1e-12 || center[a] + radius + hmax > g.hi + 1e-12 {
            return Err(ObstacleError::Parameter("measurement region plus stencil leaves the solve domain".into()));
        }
    }
    let mut best = (f64::INFINITY, vec![0.0; n], 0.0);
    for k in 0..g.len() {
        let x = g.node(k);
        let d: Vec<f64> = (0..n).map(|a| x[a] - center[a]).collect();
        if fields::norm(&d) > radius + 1e-12 {
            continue;
        }
        for &m in step_multiples {
            let h = m as f64 * dx;
            let mut xp = x;
            let mut xm = x;
            for a in 0..n {
                xp[a] += h * e[a];
                xm[a] -= h * e[a];
            }
            let v = (u.value(&xp[..n]) + u.value(&xm[..n]) - 2.0 * u.values[k]) / (h * h);
            if v < best.0 {
                best = (v, x[..n].to_vec(), h);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(ObstacleError::Parameter("no grid nodes in the measurement region".into()));
    }
    let constant = if best.0 < 0.0 { -best.0 / denominator } else { 0.0 };
    Ok(SemiconvexityReport {
        direction: e.to_vec(),
        steps: step_multiples.iter().map(|&m| m as f64 * dx).collect(),
        region_radius: radius,
        min_second_difference: best.0,
        at: best.1,
        at_step: best.2,
        denominator,
        constant,
    })
}

/// `‖u‖_∞ + ‖L_h φ̃‖_{C^{1,1}(B_{3/4})}`, the normalisation of the measured
/// semiconvexity constant.
pub fn semiconvexity_denominator(p: &ObstacleProblem, asm: &Assembled, u: &GridFunction) -> Result<f64, ObstacleError> {
    let phi = asm.sample_interior(p.obstacle.as_ref());
    let lphi = asm.apply(&phi);
    let gf = asm.to_grid_function(&lphi, Exterior::Zero)?;
    let center = vec![0.5 * (p.grid.lo + p.grid.hi); p.grid.dim];
    let radius = 0.375 * (p.grid.hi - p.grid.lo);
    Ok(u.sup_norm() + c11_surrogate(&gf, &center, radius))
}

/// Samples of `B_r(x0)`: lattice points with spacing `dx` (aligned with the
/// origin) together with `x0 ± r e_a`.
fn ball_samples(x0: &[f64], r: f64, dx: f64) -> Vec<Point> {
    let n = x0.len();
    let mut out = vec![];
    let lo: Vec<i64> = (0..n).map(|a| ((x0[a] - r) / dx).ceil() as i64).collect();
    let hi: Vec<i64> = (0..n).map(|a| ((x0[a] + r) / dx).floor() as i64).collect();
    let counts: Vec<usize> = (0..n).map(|a| (hi[a] - lo[a] + 1).max(0) as usize).collect();
    let total: usize = counts.iter().product();
    for k in 0..total {
        let mut c = k;
        let mut p = [0.0; MAX_DIM];
        for a in 0..n {
            p[a] = (lo[a] + (c % counts[a]) as i64) as f64 * dx;
            c /= counts[a];
        }
        let d: Vec<f64> = (0..n).map(|a| p[a] - x0[a]).collect();
        if fields::norm(&d) <= r {
            out.push(p);
        }
    }
    for a in 0..n {
        for sgn in [-1.0, 1.0] {
            let mut p = [0.0; MAX_DIM];
            p[..n].copy_from_slice(x0);
            p[a] += sgn * r;
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityFit {
    pub x0: Vec<f64>,
    pub radii: Vec<f64>,
    pub sups: Vec<f64>,
    pub beta: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum::<f64>() / m).sqrt();
    (slope, icpt, rms)
}

/// Slope of `log sup_{B_r(x0)} (u - φ)` against `log r`.
pub fn fit_regularity_exponent(
    gap: &dyn Field,
    x0: &[f64],
    radii: &[f64],
    dx: f64,
) -> Result<RegularityFit, ObstacleError> {
    let mut rs = vec![];
    let mut sups = vec![];
    for &r in radii {
        if r < 4.0 * dx * (1.0 - 1e-12) {
            continue;
        }
        let sup = ball_samples(x0, r, dx).iter().map(|p| gap.value(&p[..x0.len()])).fold(f64::NEG_INFINITY, f64::max);
        if sup > 0.0 {
            rs.push(r);
            sups.push(sup);
        }
    }
    if rs.len() < 3 {
        return Err(ObstacleError::Fit(format!("only {} usable radii (need 3, each ≥ 4Δx)", rs.len())));
    }
    let lx: Vec<f64> = rs.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = sups.iter().map(|v| v.ln()).collect();
    let (beta, _, residual) = linear_fit(&lx, &ly);
    Ok(RegularityFit { x0: x0.to_vec(), radii: rs, sups, beta, residual })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileFit {
    pub x0: Vec<f64>,
    pub window: f64,
    pub c0: f64,
    pub e: Vec<f64>,
    /// `max |gap - c0((x-x0)·e)₊^{1+s}|` over the fit samples.
    pub residual: f64,
    /// RMS residual relative to the RMS of the gap.
    pub relative_residual: f64,
    pub regular: bool,
}

fn unit_directions(n: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..720)
            .map(|k| {
                let t = k as f64 * std::f64::consts::PI / 360.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            let m = 4000;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
    }
}

/// Least-squares fit of `c0((x - x0)·e)₊^{1+s}` on `B_window(x0)` minus a
/// `3Δx` collar. Points are classified regular when
/// `c0 > 0.05·scale` and the relative residual is below 1/4.
pub fn fit_blowup_profile(
    gap: &dyn Field,
    x0: &[f64],
    s: f64,
    window: f64,
    dx: f64,
    scale: f64,
) -> Result<ProfileFit, ObstacleError> {
    if window < 4.0 * dx * (1.0 - 1e-12) {
        return Err(ObstacleError::Parameter("profile window must be at least 4Δx".into()));
    }
    let n = x0.len();
    let pts: Vec<(Vec<f64>, f64)> = ball_samples(x0, window, dx)
        .into_iter()
        .filter_map(|p| {
            let d: Vec<f64> = (0..n).map(|a| p[a] - x0[a]).collect();
            (fields::norm(&d) >= 3.0 * dx).then(|| {
                let v = gap.value(&p[..n]);
                (d, v)
            })
        })
        .collect();
    if pts.is_empty() {
        return Err(ObstacleError::Fit("no samples outside the collar".into()));
    }
    let fit = |e: &[f64]| {
        let m: Vec<f64> = pts.iter().map(|(d, _)| fields::dot(d, e).max(0.0).powf(1.0 + s)).collect();
        let mm: f64 = m.iter().map(|v| v * v).sum();
        let mv: f64 = m.iter().zip(&pts).map(|(a, (_, v))| a * v).sum();
        let c0 = if mm > 0.0 { (mv / mm).max(0.0) } else { 0.0 };
        let ss: f64 = m.iter().zip(&pts).map(|(a, (_, v))| (v - c0 * a).powi(2)).sum();
        (ss, c0)
    };
    let mut best_e = vec![];
    let mut best = (f64::INFINITY, 0.0);
    for e in unit_directions(n) {
        let r = fit(&e);
        if r.0 < best.0 {
            best = r;
            best_e = e;
        }
    }
    if n >= 2 {
        // local refinement by shrinking perturbations
        let mut step = 0.01;
        while step > 1e-12 {
            let mut improved = false;
            for a in 0..n {
                for sgn in [-1.0, 1.0] {
                    let mut e = best_e.clone();
                    e[a] += sgn * step;
                    let nrm = fields::norm(&e);
                    e.iter_mut().for_each(|c| *c /= nrm);
                    let r = fit(&e);
                    if r.0 < best.0 {
                        best = r;
                        best_e = e;
                        improved = true;
                    }
                }
            }
            if !improved {
                step /= 2.0;
            }
        }
    }
    let c0 = best.1;
    let mut max_res: f64 = 0.0;
    let mut rms_v = 0.0;
    for (d, v) in &pts {
        let m = fields::dot(d, &best_e).max(0.0).powf(1.0 + s);
        max_res = max_res.max((v - c0 * m).abs());
        rms_v += v * v;
    }
    let rel = if rms_v > 0.0 { (best.0 / rms_v).sqrt() } else { f64::INFINITY };
    Ok(ProfileFit {
        x0: x0.to_vec(),
        window,
        c0,
        e: best_e,
        residual: max_res,
        relative_residual: rel,
        regular: c0 > 0.05 * scale && rel < 0.25,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlowupReport {
    pub zooms: Vec<f64>,
    /// `max(0, -min δ²)` of the rescaled field for each zoom factor.
    pub deficits: Vec<f64>,
    pub interpolation_bound: f64,
    pub monotone: bool,
    pub hypothesis_checked: bool,
    pub hypothesis_min: Option<f64>,
}

/// Hypothesis check `L((u0(·+h) - u0)/|h|) ≥ 0` at sample points of
/// `{u0 > 0}`.
pub fn check_blowup_hypothesis(
    kernel: &KernelSpec,
    u0: &FieldRef,
    points: &[Point],
    steps: &[Vec<f64>],
    q: &QuadratureConfig,
) -> Result<f64, ObstacleError> {
    let n = kernel.dim;
    let op = Operator::new(kernel, q, q.rho_for(u0.fd_step()))?;
    let mut worst = f64::INFINITY;
    for h in steps {
        let dq = fields::diff_quotient(u0, h)?;
        for p in points {
            if u0.value(&p[..n]) <= 0.0 {
                continue;
            }
            let e = op.eval(dq.as_ref(), &p[..n]);
            let margin = e.value + 3.0 * e.error + 1e-10;
            if margin < 0.0 {
                return Err(ObstacleError::Hypothesis(format!(
                    "L(D_h u0)({:?}) = {:.3e} < 0 beyond its error {:.1e}",
                    &p[..n],
                    e.value,
                    e.error
                )));
            }
            worst = worst.min(e.value);
        }
    }
    Ok(worst)
}

/// Zoom study of `u^{(r)}(x) = r^{1+s} gap(x0 + x/r)` on `B_radius`: the
/// deficit is `r^{s-1} max(0, -min δ²_h gap)` over `B_{radius/r}(x0)` with
/// the steps `h` fixed in the original coordinates.
#[allow(clippy::too_many_arguments)]
pub fn check_blowup_convexity(
    gap: &dyn Field,
    x0: &[f64],
    s: f64,
    radius: f64,
    zooms: &[f64],
    steps: &[f64],
    directions: &[Vec<f64>],
    dx: f64,
) -> Result<BlowupReport, ObstacleError> {
    if zooms.is_empty() || steps.is_empty() || directions.is_empty() {
        return Err(ObstacleError::Parameter("zooms, steps and directions must be nonempty".into()));
    }
    let n = x0.len();
    let mut deficits = vec![];
    let mut sup: f64 = 0.0;
    for &r in zooms {
        let mut worst: f64 = 0.0;
        for p in ball_samples(x0, radius / r, dx) {
            let v0 = gap.value(&p[..n]);
            sup = sup.max(v0.abs());
            for e in directions {
                for &h in steps {
                    let mut xp = p;
                    let mut xm = p;
                    for a in 0..n {
                        xp[a] += h * e[a];
                        xm[a] -= h * e[a];
                    }
                    let d2 = (gap.value(&xp[..n]) + gap.value(&xm[..n]) - 2.0 * v0) / (h * h);
                    worst = worst.max(-d2);
                }
            }
        }
        deficits.push(r.powf(s - 1.0) * worst);
    }
    let hmin = steps.iter().cloned().fold(f64::INFINITY, f64::min);
    let interpolation_bound = 16.0 * f64::EPSILON * sup.max(1.0) / (hmin * hmin);
    let monotone = deficits.windows(2).all(|w| w[1] <= w[0] + interpolation_bound);
    Ok(BlowupReport {
        zooms: zooms.to_vec(),
        deficits,
        interpolation_bound,
        monotone,
        hypothesis_checked: false,
        hypothesis_min: None,
    })
}

/// `f̃(x) = f(x) + ∫_{|y| > R} u(y) K(x - y) dy`, the right-hand side for
/// which `u·1_{B_R}` solves the same equation at `x`.
pub fn truncate_problem(
    kernel: &KernelSpec,
    u: &dyn Field,
    f: &[f64],
    points: &[Point],
    radius: f64,
) -> Result<Vec<f64>, ObstacleError> {
    kernel.check()?;
    let n = kernel.dim;
    if f.len() != points.len() {
        return Err(ObstacleError::Parameter("rhs and points differ in length".into()));
    }
    let rule = ray_rule(n);
    Ok(points
        .par_iter()
        .zip(f.par_iter())
        .map(|(p, &fi)| {
            let x = &p[..n];
            let mut acc = 0.0;
            for (dir, w) in rule.directions.iter().zip(&rule.weights) {
                let theta = &dir[..n];
                let d = exit_distance_ball(x, theta, radius);
                acc += w * ray_integral(kernel, theta, d, &[], &|r| {
                    let mut y = [0.0; MAX_DIM];
                    for i in 0..n {
                        y[i] = x[i] + r * theta[i];
                    }
                    u.value(&y[..n])
                });
            }
            fi + acc
        })
        .collect())
}

/// Full study on a solved problem: free-boundary fits and semiconvexity in
/// `B_{1/2}`-analog.
pub fn measure(p: &ObstacleProblem, asm: &Assembled, report: &mut ObstacleSolveReport) -> Result<(), ObstacleError> {
    let n = p.grid.dim;
    let dx = p.grid.spacing();
    let half = 0.25 * (p.grid.hi - p.grid.lo);
    let center = vec![0.5 * (p.grid.lo + p.grid.hi); n];
    let denom = semiconvexity_denominator(p, asm, &report.solution)?;
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    report.semiconvexity = Some(measure_semiconvexity(&report.solution, &e, &[1, 2, 4], &center, half, denom)?);
    let gap = fields::difference(&report.solution.clone().into_ref(), &p.obstacle);
    let scale = report.solution.sup_norm().max(1e-300);
    let s = p.kernel.s();
    let radii: Vec<f64> = (2..=6).map(|k| 0.5f64.powi(k)).filter(|&r| r >= 4.0 * dx).collect();
    for fb in &report.free_boundary {
        if let Ok(fit) = fit_regularity_exponent(gap.as_ref(), &fb.location, &radii, dx) {
            report.regularity.push(fit);
        }
        if p.kernel.homogeneous {
            let w = (8.0 * dx).max(1.0 / 16.0);
            report.profiles.push(fit_blowup_profile(gap.as_ref(), &fb.location, s, w, dx, scale)?);
        }
    }
    Ok(())
}
