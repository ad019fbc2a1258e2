//! Seeded ensembles of smooth test functions with analytic derivatives.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fields::{Field, FieldRef};
use crate::kernels::{Mat, Point, MAX_DIM};

/// `Σ a_k exp(-|x - c_k|² / (2 w_k²))`
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub dim: usize,
    pub amplitudes: Vec<f64>,
    pub centers: Vec<Point>,
    pub widths: Vec<f64>,
}

impl Field for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.amplitudes.len() {
            let d2: f64 = (0..self.dim).map(|i| (x[i] - self.centers[k][i]).powi(2)).sum();
            acc += self.amplitudes[k] * (-d2 / (2.0 * self.widths[k] * self.widths[k])).exp();
        }
        acc
    }

    fn gradient(&self, x: &[f64]) -> Point {
        let mut g = [0.0; MAX_DIM];
        for k in 0..self.amplitudes.len() {
            let w2 = self.widths[k] * self.widths[k];
            let d2: f64 = (0..self.dim).map(|i| (x[i] - self.centers[k][i]).powi(2)).sum();
            let e = self.amplitudes[k] * (-d2 / (2.0 * w2)).exp();
            for i in 0..self.dim {
                g[i] -= e * (x[i] - self.centers[k][i]) / w2;
            }
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        for k in 0..self.amplitudes.len() {
            let w2 = self.widths[k] * self.widths[k];
            let mut d = [0.0; MAX_DIM];
            for i in 0..self.dim {
                d[i] = x[i] - self.centers[k][i];
            }
            let d2: f64 = d.iter().map(|c| c * c).sum();
            let e = self.amplitudes[k] * (-d2 / (2.0 * w2)).exp();
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let id = if i == j { 1.0 } else { 0.0 };
                    h[i][j] += e * (d[i] * d[j] / (w2 * w2) - id / w2);
                }
            }
        }
        h
    }

    fn far_value(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `Σ a_k cos(ω_k·x + φ_k) · exp(-|x|² / (2 L²))`
#[derive(Debug, Clone)]
pub struct WindowedTrigSum {
    pub dim: usize,
    pub amplitudes: Vec<f64>,
    pub frequencies: Vec<Point>,
    pub phases: Vec<f64>,
    pub window: f64,
}

impl WindowedTrigSum {
    fn parts(&self, x: &[f64]) -> (f64, Point, Mat) {
        // trigonometric sum with derivatives
        let mut s = 0.0;
        let mut gs = [0.0; MAX_DIM];
        let mut hs = [[0.0; MAX_DIM]; MAX_DIM];
        for k in 0..self.amplitudes.len() {
            let w = &self.frequencies[k];
            let arg: f64 = (0..self.dim).map(|i| w[i] * x[i]).sum::<f64>() + self.phases[k];
            let (sn, cs) = arg.sin_cos();
            let a = self.amplitudes[k];
            s += a * cs;
            for i in 0..self.dim {
                gs[i] -= a * sn * w[i];
                for j in 0..self.dim {
                    hs[i][j] -= a * cs * w[i] * w[j];
                }
            }
        }
        (s, gs, hs)
    }
}

impl Field for WindowedTrigSum {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r2: f64 = x[..self.dim].iter().map(|c| c * c).sum();
        self.parts(x).0 * (-r2 / (2.0 * self.window * self.window)).exp()
    }

    fn gradient(&self, x: &[f64]) -> Point {
        let l2 = self.window * self.window;
        let r2: f64 = x[..self.dim].iter().map(|c| c * c).sum();
        let e = (-r2 / (2.0 * l2)).exp();
        let (s, gs, _) = self.parts(x);
        let mut g = [0.0; MAX_DIM];
        for i in 0..self.dim {
            g[i] = e * (gs[i] - s * x[i] / l2);
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Mat {
        let l2 = self.window * self.window;
        let r2: f64 = x[..self.dim].iter().map(|c| c * c).sum();
        let e = (-r2 / (2.0 * l2)).exp();
        let (s, gs, hs) = self.parts(x);
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..self.dim {
            for j in 0..self.dim {
                let id = if i == j { 1.0 } else { 0.0 };
                let he = x[i] * x[j] / (l2 * l2) - id / l2;
                let gei = -x[i] / l2;
                let gej = -x[j] / l2;
                h[i][j] = e * (hs[i][j] + gs[i] * gej + gs[j] * gei + s * he);
            }
        }
        h
    }

    fn far_value(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    GaussianMixture,
    TrigSum,
    /// Alternates between the two kinds.
    Mixed,
}

fn sup_estimate(f: &dyn Field) -> f64 {
    let n = f.dim();
    let m = match n {
        1 => 4001usize,
        2 => 161,
        _ => 41,
    };
    let mut sup: f64 = 0.0;
    let total = m.pow(n as u32);
    for k in 0..total {
        let mut c = k;
        let mut p = [0.0; MAX_DIM];
        for a in 0..n {
            p[a] = -2.0 + 4.0 * (c % m) as f64 / (m - 1) as f64;
            c /= m;
        }
        sup = sup.max(f.value(&p[..n]).abs());
    }
    sup
}

fn gaussian_mixture(rng: &mut ChaCha8Rng, dim: usize) -> GaussianMixture {
    let count = rng.gen_range(2..=4);
    let mut g = GaussianMixture { dim, amplitudes: vec![], centers: vec![], widths: vec![] };
    for _ in 0..count {
        let mut c = [0.0; MAX_DIM];
        for ci in c.iter_mut().take(dim) {
            *ci = rng.gen_range(-0.8..0.8);
        }
        g.centers.push(c);
        g.widths.push(rng.gen_range(0.2..0.5));
        g.amplitudes.push(rng.gen_range(-1.0..1.0));
    }
    g
}

fn trig_sum(rng: &mut ChaCha8Rng, dim: usize) -> WindowedTrigSum {
    let count = rng.gen_range(2..=4);
    let mut t = WindowedTrigSum { dim, amplitudes: vec![], frequencies: vec![], phases: vec![], window: 0.6 };
    for _ in 0..count {
        let mut w = [0.0; MAX_DIM];
        for wi in w.iter_mut().take(dim) {
            *wi = rng.gen_range(-5.0..5.0);
        }
        t.frequencies.push(w);
        t.phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
        t.amplitudes.push(rng.gen_range(-1.0..1.0));
    }
    t
}

/// `count` smooth functions normalised to sup ≈ 1, reproducible from `seed`.
pub fn ensemble(dim: usize, count: usize, seed: u64, kind: EnsembleKind) -> Vec<FieldRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let gauss = match kind {
                EnsembleKind::GaussianMixture => true,
                EnsembleKind::TrigSum => false,
                EnsembleKind::Mixed => i % 2 == 0,
            };
            if gauss {
                let mut g = gaussian_mixture(&mut rng, dim);
                let s = sup_estimate(&g);
                g.amplitudes.iter_mut().for_each(|a| *a /= s);
                Arc::new(g) as FieldRef
            } else {
                let mut t = trig_sum(&mut rng, dim);
                let s = sup_estimate(&t);
                t.amplitudes.iter_mut().for_each(|a| *a /= s);
                Arc::new(t) as FieldRef
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{fd_gradient, fd_hessian};

    #[test]
    fn analytic_derivatives_match_differences() {
        for f in ensemble(2, 4, 7, EnsembleKind::Mixed) {
            let x = [0.21, -0.37];
            let g = f.gradient(&x);
            let gf = fd_gradient(f.as_ref(), &x, 1e-3);
            let h = f.hessian(&x);
            let hf = fd_hessian(f.as_ref(), &x, 1e-3);
            for i in 0..2 {
                assert!((g[i] - gf[i]).abs() < 1e-7);
                for j in 0..2 {
                    assert!((h[i][j] - hf[i][j]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ensembles_are_reproducible_and_normalised() {
        let a = ensemble(1, 3, 11, EnsembleKind::Mixed);
        let b = ensemble(1, 3, 11, EnsembleKind::Mixed);
        for (f, g) in a.iter().zip(&b) {
            assert_eq!(f.value(&[0.123]), g.value(&[0.123]));
            assert!((sup_estimate(f.as_ref()) - 1.0).abs() < 1e-12);
        }
    }
}
