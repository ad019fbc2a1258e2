//! Gauss–Legendre rules and angular (sphere) quadrature.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [-1, 1], computed by Newton iteration
/// on the Legendre recurrence.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, z);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrate `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (mid + half * x, w * half))
    }
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (z * p - p0) / (z * z - 1.0);
    (p, d)
}

/// Composite Gauss–Legendre over `[a, b]` split into `panels` equal pieces.
pub fn composite<F: FnMut(f64) -> f64>(rule: &GaussLegendre, a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels).map(|k| rule.integrate(a + k as f64 * h, a + (k + 1) as f64 * h, &mut f)).sum()
}

/// Surface measure of the unit sphere in R^n (counting measure for n = 1).
pub fn sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => panic!("dimension {n} not supported"),
    }
}

/// A quadrature rule on the unit sphere: unit directions and weights summing
/// to the surface measure.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub dim: usize,
    pub directions: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    /// Full-sphere rule. For n = 2 the `m` directions are equally spaced at
    /// half-offset angles; for n = 3 a product of Gauss nodes in the polar
    /// cosine and `m` equally spaced azimuths. `m` is rounded up to even so
    /// the rule is closed under antipodes.
    pub fn full(dim: usize, m: usize) -> Self {
        let m = m.max(2).div_ceil(2) * 2;
        let mut directions = Vec::new();
        let mut weights = Vec::new();
        match dim {
            1 => {
                directions.push([1.0, 0.0, 0.0]);
                directions.push([-1.0, 0.0, 0.0]);
                weights.extend([1.0, 1.0]);
            }
            2 => {
                for k in 0..m {
                    let th = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                    directions.push([th.cos(), th.sin(), 0.0]);
                    weights.push(2.0 * PI / m as f64);
                }
            }
            3 => {
                let gl = GaussLegendre::new(m / 2);
                for (z, wz) in gl.nodes.iter().zip(&gl.weights) {
                    let rho = (1.0 - z * z).sqrt();
                    for k in 0..m {
                        let ph = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                        directions.push([rho * ph.cos(), rho * ph.sin(), *z]);
                        weights.push(wz * 2.0 * PI / m as f64);
                    }
                }
            }
            _ => panic!("dimension {dim} not supported"),
        }
        SphereRule { dim, directions, weights }
    }

    /// Half-sphere rule: one representative of each antipodal pair, weights
    /// unchanged (so summing `f(θ) + f(-θ)` over it integrates over the sphere).
    pub fn half(dim: usize, m: usize) -> Self {
        let full = Self::full(dim, m);
        let mut directions = Vec::new();
        let mut weights = Vec::new();
        for (d, w) in full.directions.iter().zip(&full.weights) {
            let key = if d[2] != 0.0 {
                d[2]
            } else if d[1] != 0.0 {
                d[1]
            } else {
                d[0]
            };
            if key > 0.0 {
                directions.push(*d);
                weights.push(*w);
            }
        }
        SphereRule { dim, directions, weights }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Quintic smoothstep on [0,1]: 6t⁵ − 15t⁴ + 10t³, clamped.
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (t * (6.0 * t - 15.0) + 10.0)
    }
}

pub fn smoothstep_d1(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        30.0 * t * t * (t - 1.0) * (t - 1.0)
    }
}

pub fn smoothstep_d2(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        60.0 * t * (2.0 * t - 1.0) * (t - 1.0)
    }
}
