//! `inf_γ {L_γ u - c_γ} = 0` over a finite kernel family, by Howard's policy
//! iteration on the monotone discretisations of the obstacle module.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::fields::{self, Exterior, FieldRef, Grid, GridFunction};
use crate::kernels::KernelSpec;
use crate::obstacle::{
    self, c11_surrogate, measure_semiconvexity, Assembled, ObstacleError, ObstacleProblem, SemiconvexityReport,
};

#[derive(Debug, Error)]
pub enum BellmanError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Obstacle(#[from] ObstacleError),
    #[error(transparent)]
    Field(#[from] fields::FieldError),
    #[error("no convergence after {iterations} iterations (residual {residual:e}, policy cycled: {cycled})")]
    NoConvergence { iterations: usize, residual: f64, cycled: bool, history: Vec<f64> },
}

#[derive(Clone)]
pub struct Member {
    pub kernel: KernelSpec,
    pub c: FieldRef,
}

#[derive(Clone)]
pub struct BellmanProblem {
    pub family: Vec<Member>,
    pub grid: Grid,
    pub exterior: Exterior,
}

impl BellmanProblem {
    fn validate(&self) -> Result<(), BellmanError> {
        let Some(first) = self.family.first() else {
            return Err(BellmanError::Parameter("the kernel family is empty".into()));
        };
        for m in &self.family {
            if m.kernel.dim != first.kernel.dim || (m.kernel.s() - first.kernel.s()).abs() > 1e-12 {
                return Err(BellmanError::Parameter("family members must share dimension and order".into()));
            }
            if m.c.dim() != first.kernel.dim {
                return Err(BellmanError::Parameter("c_γ dimension mismatch".into()));
            }
        }
        Ok(())
    }

    /// Scales every `c_γ` and the exterior data by `lambda`.
    pub fn scaled(&self, lambda: f64) -> BellmanProblem {
        let exterior = match &self.exterior {
            Exterior::Zero => Exterior::Zero,
            Exterior::Constant(c) => Exterior::Constant(lambda * c),
            Exterior::Analytic { field, .. } => Exterior::analytic(fields::scale(field, lambda)),
            Exterior::Clamp => Exterior::Clamp,
        };
        BellmanProblem {
            family: self
                .family
                .iter()
                .map(|m| Member { kernel: m.kernel.clone(), c: fields::scale(&m.c, lambda) })
                .collect(),
            grid: self.grid.clone(),
            exterior,
        }
    }

    /// Single-member problem with member `k` only.
    pub fn single(&self, k: usize) -> BellmanProblem {
        BellmanProblem {
            family: vec![self.family[k].clone()],
            grid: self.grid.clone(),
            exterior: self.exterior.clone(),
        }
    }
}

pub struct Discrete {
    pub operators: Vec<Assembled>,
    /// `e_γ + c_γ` on the interior nodes.
    pub loads: Vec<DVector<f64>>,
}

pub fn assemble(p: &BellmanProblem) -> Result<Discrete, BellmanError> {
    p.validate()?;
    let n = p.grid.dim;
    let mut operators = vec![];
    let mut loads = vec![];
    for m in &p.family {
        let op = ObstacleProblem::new(
            m.kernel.clone(),
            p.grid.clone(),
            fields::constant(n, f64::NEG_INFINITY),
            fields::constant(n, 0.0),
            p.exterior.clone(),
        );
        let asm = obstacle::assemble(&op)?;
        let c = asm.sample_interior(m.c.as_ref());
        loads.push(&asm.exterior_load + c);
        operators.push(asm);
    }
    Ok(Discrete { operators, loads })
}

#[derive(Debug, Clone, Serialize)]
pub struct BellmanReport {
    #[serde(skip)]
    pub solution: GridFunction,
    pub values: Vec<f64>,
    /// `max_i |min_γ (L_{γ,h} u - c_γ)_i|`
    pub residual: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    /// Interior node index ↦ selected γ.
    pub policy: Vec<usize>,
    /// Gap between the best and second-best member at each node.
    pub margins: Vec<f64>,
    pub used_fallback: bool,
}

fn member_residuals(d: &Discrete, u: &DVector<f64>) -> Vec<DVector<f64>> {
    d.operators.iter().zip(&d.loads).map(|(a, b)| &a.matrix * u - b).collect()
}

/// Lowest index attaining the minimum within a relative margin.
fn argmin(values: &[f64]) -> usize {
    let m = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    values.iter().position(|&v| v <= m + 1e-13 * scale).unwrap_or(0)
}

fn residual_of(r: &[DVector<f64>]) -> f64 {
    let n = r[0].len();
    (0..n).map(|i| r.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min).abs()).fold(0.0, f64::max)
}

pub fn solve_policy_iteration(p: &BellmanProblem, tol: f64, max_iter: usize) -> Result<BellmanReport, BellmanError> {
    let d = assemble(p)?;
    solve_discrete(p, &d, tol, max_iter)
}

pub fn solve_discrete(
    p: &BellmanProblem,
    d: &Discrete,
    tol: f64,
    max_iter: usize,
) -> Result<BellmanReport, BellmanError> {
    let m = d.loads[0].len();
    let mut policy = vec![0usize; m];
    let mut seen: Vec<Vec<usize>> = vec![];
    let mut history = vec![];
    let mut u = DVector::zeros(m);
    let mut cycled = false;
    for it in 1..=max_iter {
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for i in 0..m {
            let g = policy[i];
            a.row_mut(i).copy_from(&d.operators[g].matrix.row(i));
            b[i] = d.loads[g][i];
        }
        u = a.lu().solve(&b).ok_or_else(|| BellmanError::Parameter("singular policy system".into()))?;
        let r = member_residuals(d, &u);
        let res = residual_of(&r);
        history.push(res);
        let next: Vec<usize> = (0..m)
            .map(|i| {
                let vals: Vec<f64> = r.iter().map(|v| v[i]).collect();
                let best = argmin(&vals);
                // switch only on a strict improvement, so ties cannot cycle
                if vals[policy[i]] <= vals[best] + 1e-14 * vals[best].abs().max(1.0) {
                    policy[i]
                } else {
                    best
                }
            })
            .collect();
        if next == policy {
            if res <= tol {
                let pol = (0..m).map(|i| argmin(&r.iter().map(|v| v[i]).collect::<Vec<_>>())).collect();
                return report(p, d, u, res, it, history, pol, false);
            }
            break;
        }
        if seen.contains(&next) {
            cycled = true;
            break;
        }
        seen.push(policy.clone());
        policy = next;
    }
    // nonlinear Gauss-Seidel: u_i = max_γ (b_γ - Σ_{j≠i} M_γij u_j) / M_γii
    let start = history.len();
    for it in 0..max_iter {
        for i in 0..m {
            let mut best = f64::NEG_INFINITY;
            for (a, b) in d.operators.iter().zip(&d.loads) {
                let row = a.matrix.row(i);
                let off = row.dot(&u.transpose()) - a.matrix[(i, i)] * u[i];
                best = best.max((b[i] - off) / a.matrix[(i, i)]);
            }
            u[i] = best;
        }
        if it % 10 == 9 {
            let res = residual_of(&member_residuals(d, &u));
            history.push(res);
            if res <= tol {
                let r = member_residuals(d, &u);
                let pol = (0..m).map(|i| argmin(&r.iter().map(|v| v[i]).collect::<Vec<_>>())).collect();
                return report(p, d, u, res, start + it + 1, history, pol, true);
            }
        }
    }
    Err(BellmanError::NoConvergence {
        iterations: history.len(),
        residual: residual_of(&member_residuals(d, &u)),
        cycled,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn report(
    p: &BellmanProblem,
    d: &Discrete,
    u: DVector<f64>,
    residual: f64,
    iterations: usize,
    history: Vec<f64>,
    policy: Vec<usize>,
    used_fallback: bool,
) -> Result<BellmanReport, BellmanError> {
    let gf = d.operators[0].to_grid_function(&u, p.exterior.clone())?;
    let r = member_residuals(d, &u);
    let margins = (0..u.len())
        .map(|i| {
            let best = r[policy[i]][i];
            r.iter()
                .enumerate()
                .filter(|(g, _)| *g != policy[i])
                .map(|(_, v)| v[i] - best)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(BellmanReport {
        values: gf.values.clone(),
        solution: gf,
        residual,
        iterations,
        history,
        policy,
        margins,
        used_fallback,
    })
}

/// Measured constant `-min δ²_h u / (sup_γ ‖c_γ‖_{C^{1,1}} + ‖u‖_∞)` on the
/// inner eighth of the domain.
pub fn verify_semiconvexity(
    sol: &BellmanReport,
    p: &BellmanProblem,
    e: &[f64],
    step_multiples: &[usize],
) -> Result<SemiconvexityReport, BellmanError> {
    let g = &p.grid;
    let center = vec![0.5 * (g.lo + g.hi); g.dim];
    let whole = (g.hi - g.lo) * (g.dim as f64).sqrt();
    let mut cnorm: f64 = 0.0;
    for m in &p.family {
        let cg = GridFunction::sample(g.clone(), m.c.as_ref(), Exterior::Zero)?;
        cnorm = cnorm.max(c11_surrogate(&cg, &center, whole));
    }
    let denom = cnorm + sol.solution.sup_norm();
    Ok(measure_semiconvexity(&sol.solution, e, step_multiples, &center, (g.hi - g.lo) / 16.0, denom)?)
}

/// The shipped two-kernel problem on `[-1,1]`: fractional s = 1/2 kernels
/// with constant profiles 1 and 3, shared `c = 1 - 4x²`, zero exterior.
pub fn shipped(intervals: usize) -> Result<BellmanProblem, BellmanError> {
    let grid = Grid::new(1, -1.0, 1.0, intervals + 1)?;
    let c = fields::analytic(1, "1 - 4*x^2").map_err(|e| BellmanError::Parameter(e.to_string()))?;
    Ok(BellmanProblem {
        family: vec![
            Member { kernel: KernelSpec::fractional_scaled(1, 0.5, 1.0), c: c.clone() },
            Member { kernel: KernelSpec::fractional_scaled(1, 0.5, 3.0), c },
        ],
        grid,
        exterior: Exterior::Zero,
    })
}
