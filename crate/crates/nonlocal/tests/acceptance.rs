//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always shown.
//! The process fails when a criterion outside `KNOWN_FAILURES` fails.

mod common;

use std::panic::catch_unwind;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{line, max_abs, point};
use nonlocal::bellman;
use nonlocal::bernstein::{
    check_interpolation, check_product_rule, evaluation_nodes, find_min_sigma, min_sigma_from_components,
    variant_components, Components, SearchOptions, Tolerance, Variant,
};
use nonlocal::ensemble::{ensemble, EnsembleKind};
use nonlocal::expr::Expr;
use nonlocal::fields::{analytic, constant, CutoffFunction, FieldRef, Grid, TimeCutoff};
use nonlocal::kernels::{check_cancellation, AngularProfile, KernelFamily, KernelSpec, Point, RadialProfile};
use nonlocal::obstacle::{
    self, assemble, check_blowup_convexity, fit_blowup_profile, measure, solve_assembled, Method, ObstacleProblem,
    SolveOptions,
};
use nonlocal::operator::{apply, apply_nonsym, Operator, QuadratureConfig};
use nonlocal::parabolic::{
    self, check_parabolic_key_estimate, measure_space_semiconvexity, stationary, ParabolicProblem,
};

/// Criteria whose measured values miss the target. Each is reported as FAIL
/// with its numbers; the reasons are recorded alongside the project notes.
const KNOWN_FAILURES: &[usize] = &[3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn q() -> QuadratureConfig {
    QuadratureConfig::default()
}

fn pi_opts() -> SolveOptions {
    SolveOptions { method: Method::PolicyIteration, ..Default::default() }
}

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi / lo
}

/// Nodes of the Bernstein evaluation grid on [-1.5, 1.5] with Δx = 1/32.
fn bernstein_points(eta: &CutoffFunction) -> Vec<Point> {
    let grid = Grid::new(1, -1.5, 1.5, 97).unwrap();
    evaluation_nodes(&grid, eta, 2)
}

fn training() -> Vec<FieldRef> {
    ensemble(1, 10, 1, EnsembleKind::Mixed)
}

fn validation() -> Vec<FieldRef> {
    ensemble(1, 50, 1001, EnsembleKind::Mixed)
}

struct Discipline {
    sigma_star: f64,
    /// σ* over training and validation together.
    sigma_all: f64,
    failing_members: usize,
    members: usize,
    worst_excess: f64,
    monotone: bool,
}

/// σ* from the training ensemble, then every validation member at σ* and
/// σ-monotonicity on every (member, node) pair at σ*, 2σ*, 4σ*.
fn key_estimate_discipline(k: &KernelSpec, v: &Variant, eta: &CutoffFunction, pts: &[Point]) -> Discipline {
    let tol = Tolerance::default();
    let comps = |us: &[FieldRef]| -> Vec<Vec<Components>> {
        us.iter().map(|u| variant_components(k, v, eta, u, &q(), pts).unwrap()).collect()
    };
    let train = comps(&training());
    let sigma = min_sigma_from_components(&train, pts, 1, tol, SearchOptions::default()).unwrap().sigma_star;
    let test = comps(&validation());
    let mut failing = 0;
    let mut worst = f64::NEG_INFINITY;
    for cs in &test {
        let e = cs.iter().map(|c| tol.excess(c, sigma)).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(e);
        if e > 0.0 {
            failing += 1;
        }
    }
    let monotone = train.iter().chain(&test).flatten().all(|c| {
        [(sigma, 2.0 * sigma), (2.0 * sigma, 4.0 * sigma)]
            .iter()
            .all(|&(a, b)| c.defect(b) <= c.defect(a) + tol.factor * (c.error(a) + c.error(b)) + tol.absolute)
    });
    let all: Vec<Vec<Components>> = train.iter().chain(&test).cloned().collect();
    let sigma_all = min_sigma_from_components(&all, pts, 1, tol, SearchOptions::default()).unwrap().sigma_star;
    Discipline {
        sigma_star: sigma,
        sigma_all,
        failing_members: failing,
        members: test.len(),
        worst_excess: worst,
        monotone,
    }
}

fn c01_product_rule() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut pass = true;
    let pts2: Vec<Point> =
        [-0.5, 0.0, 0.5].iter().flat_map(|&a| [-0.5, 0.0, 0.5].map(move |b| point(&[a, b]))).collect();
    for n in [1, 2] {
        let pts = if n == 1 { line(-0.9, 0.9, 13) } else { pts2.clone() };
        for s in [0.3, 0.5, 0.75] {
            let k = KernelSpec::fractional(n, s);
            for u in ensemble(n, 5, 17, EnsembleKind::Mixed) {
                let r = check_product_rule(&k, &u, &u, &q(), &pts).unwrap();
                let rel = r.max_residual / r.scale;
                worst_rel = worst_rel.max(rel);
                pass &= r.pass && rel <= 1e-6;
            }
        }
    }
    outcome(pass, format!("30 cases, worst residual / scale = {worst_rel:.2e}"))
}

fn c02_decomposition() -> Outcome {
    let mut pass = true;
    let mut notes = vec![];
    for n in [1, 2] {
        let k = KernelSpec::fractional(n, 0.5);
        let mut c1s = vec![];
        let mut c2s = vec![];
        for eps in [0.05, 0.1, 0.2] {
            let d = k.decompose(eps).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7 + n as u64);
            for _ in 0..10_000 {
                let r = eps * 10f64.powf(rng.gen_range(-3.0..2.0));
                let y: Vec<f64> = if n == 1 {
                    vec![if rng.gen::<bool>() { r } else { -r }]
                } else {
                    let t = rng.gen_range(0.0..std::f64::consts::TAU);
                    vec![r * t.cos(), r * t.sin()]
                };
                let whole = k.eval(&y).unwrap();
                let (near, far) = (d.near.eval(&y).unwrap(), d.far.eval(&y).unwrap());
                pass &= (near + far - whole).abs() <= 4.0 * f64::EPSILON * whole;
                if r >= eps {
                    pass &= near == 0.0;
                }
                if r <= 0.5 * eps {
                    pass &= far == 0.0 && near == whole;
                }
            }
            pass &= d.c1.is_finite() && d.c2.is_finite() && d.c3.is_finite();
            c1s.push(d.c1);
            c2s.push(d.c2);
        }
        let (a, b) = (spread(&c1s), spread(&c2s));
        pass &= a <= 2.0 && b <= 2.0;
        notes.push(format!("n={n}: c1 spread {a:.3}, c2 spread {b:.3}"));
    }
    outcome(pass, format!("60000 samples; {}", notes.join("; ")))
}

fn c03_key_estimate() -> Outcome {
    let eta = CutoffFunction::standard(1);
    let pts = bernstein_points(&eta);
    let v = Variant::FirstOrder { e: vec![1.0] };
    let mut pass = true;
    let mut notes = vec![];
    for s in [0.5, 0.75] {
        let d = key_estimate_discipline(&KernelSpec::fractional(1, s), &v, &eta, &pts);
        pass &= d.failing_members == 0 && d.monotone;
        notes.push(format!(
            "s={s}: σ*={:.4}, {}/{} validation members violate (worst excess {:.2e}, all 60 need σ={:.4}), monotone={}",
            d.sigma_star, d.failing_members, d.members, d.worst_excess, d.sigma_all, d.monotone
        ));
    }
    outcome(pass, notes.join("; "))
}

fn c04_variants() -> Outcome {
    let k = KernelSpec::fractional(1, 0.5);
    let dx = 1.0 / 32.0;
    let mut pass = true;
    let mut notes = vec![];
    let mut variants = vec![Variant::PosPart { e: vec![1.0] }];
    for h in [dx, 4.0 * dx, 1.0 / 16.0] {
        variants.push(Variant::DiffQuot { h: vec![h] });
    }
    for v in &variants {
        let eta = v.default_cutoff(1);
        let pts = bernstein_points(&eta);
        let d = key_estimate_discipline(&k, v, &eta, &pts);
        pass &= d.failing_members == 0 && d.monotone;
        let label = match v {
            Variant::DiffQuot { h } => format!("DiffQuot h={}", h[0]),
            other => other.tag().to_string(),
        };
        notes.push(format!(
            "{label}: σ*={:.4} {}/{} fail (all 60 need {:.4})",
            d.sigma_star, d.failing_members, d.members, d.sigma_all
        ));
    }

    let eta = CutoffFunction::standard(1);
    let pts = bernstein_points(&eta);
    let u = training().remove(0);
    let mut worst: f64 = 0.0;
    for h in [dx, 1.0 / 16.0] {
        let dq = variant_components(&k, &Variant::DiffQuot { h: vec![h] }, &eta, &u, &q(), &pts).unwrap();
        for alpha in [0.25, 0.5, 0.75] {
            let hq = variant_components(&k, &Variant::HolderQuot { h: vec![h], alpha }, &eta, &u, &q(), &pts).unwrap();
            let f = h.powf(2.0 - 2.0 * alpha);
            for sigma in [0.0, 1.0, 10.0] {
                for (a, b) in dq.iter().zip(&hq) {
                    let scale = b.l_main.abs() + b.r_main.abs() + sigma * (b.l_sigma.abs() + b.r_sigma.abs());
                    worst = worst.max((b.defect(sigma) - f * a.defect(sigma / f)).abs() / scale.max(1.0));
                }
            }
        }
    }
    pass &= worst <= 1e-12;
    notes.push(format!("Hölder reduction worst {worst:.1e}"));
    outcome(pass, notes.join("; "))
}

fn c05_robustness() -> Outcome {
    let eta = CutoffFunction::standard(1);
    let pts = bernstein_points(&eta);
    let v = Variant::FirstOrder { e: vec![1.0] };
    let train = training();
    let sigmas: Vec<f64> = [0.5, 0.7, 0.9, 0.95]
        .iter()
        .map(|&s| {
            let k = KernelSpec::fractional_scaled(1, s, 1.0 - s);
            find_min_sigma(&k, &v, &eta, &train, &q(), &pts, Tolerance::default(), SearchOptions::default())
                .unwrap()
                .sigma_star
        })
        .collect();
    let r = spread(&sigmas);
    outcome(r < 3.0, format!("σ* = {sigmas:.4?} over s = [0.5, 0.7, 0.9, 0.95], max/min = {r:.2}"))
}

fn c06_obstacle_solver() -> Outcome {
    let p = ObstacleProblem::shipped(1, 256).unwrap();
    let asm = assemble(&p).unwrap();
    let a = solve_assembled(&p, &asm, &SolveOptions::default()).unwrap();
    let b = solve_assembled(&p, &asm, &pi_opts()).unwrap();
    let agree = max_abs(a.values.iter().zip(&b.values).map(|(x, y)| x - y));

    let mut raised = p.clone();
    raised.obstacle = analytic(1, "1.05 - 2*x^2").unwrap();
    raised.rhs = constant(1, 0.1);
    let c = solve_assembled(&raised, &asm, &pi_opts()).unwrap();
    let below = b.values.iter().zip(&c.values).map(|(x, y)| x - y).fold(f64::NEG_INFINITY, f64::max);
    let pass = a.residual <= 1e-8 && b.residual <= 1e-8 && agree <= 1e-7 && below <= 1e-10;
    outcome(
        pass,
        format!(
            "N=256: residual PSOR {:.1e} PI {:.1e}, |PSOR-PI| {agree:.1e}, max(u-ũ) after raising data {below:.1e}",
            a.residual, b.residual
        ),
    )
}

struct ObstacleRun {
    problem: ObstacleProblem,
    report: obstacle::ObstacleSolveReport,
}

/// Shipped problem at Δx = 1/64, 1/128, 1/256, solved and measured once.
fn obstacle_runs() -> &'static [ObstacleRun] {
    static RUNS: OnceLock<Vec<ObstacleRun>> = OnceLock::new();
    RUNS.get_or_init(|| [128, 256, 512].iter().map(|&n| obstacle_run(n)).collect())
}

fn obstacle_run(intervals: usize) -> ObstacleRun {
    let p = ObstacleProblem::shipped(1, intervals).unwrap();
    let asm = assemble(&p).unwrap();
    let mut r = solve_assembled(&p, &asm, &pi_opts()).unwrap();
    measure(&p, &asm, &mut r).unwrap();
    ObstacleRun { problem: p, report: r }
}

fn c07_semiconvexity(runs: &[ObstacleRun]) -> Outcome {
    let cs: Vec<f64> = runs.iter().map(|r| r.report.semiconvexity.as_ref().unwrap().constant).collect();
    let finite = cs.iter().all(|c| c.is_finite() && *c > 0.0);
    let r = spread(&cs);
    outcome(finite && r <= 1.5, format!("C = {cs:.4?} at Δx = 1/64, 1/128, 1/256; max/min = {r:.3}"))
}

fn c08_exponent(finest: &ObstacleRun) -> Outcome {
    let betas: Vec<f64> = finest.report.regularity.iter().map(|f| f.beta).collect();
    let pass = betas.len() == 2 && betas.iter().all(|b| (1.4..=1.6).contains(b));
    outcome(pass, format!("β̂ = {betas:.4?} at the free-boundary points (Δx = 1/256)"))
}

fn c09_profile(finest: &ObstacleRun) -> Outcome {
    let p = &finest.problem;
    let r = &finest.report;
    let regular = r.profiles.len() == 2 && r.profiles.iter().all(|f| f.regular);
    let dx = p.grid.spacing();
    let gap = nonlocal::fields::difference(&r.solution.clone().into_ref(), &p.obstacle);
    let scale = r.solution.sup_norm();
    let mut excess = vec![];
    for fb in &r.free_boundary {
        let rel: Vec<f64> = [0.25, 0.125, 0.0625]
            .iter()
            .map(|&w| fit_blowup_profile(gap.as_ref(), &fb.location, 0.5, w, dx, scale).unwrap().relative_residual)
            .collect();
        for w in rel.windows(2) {
            excess.push((w[0] / w[1]).log2());
        }
    }
    let decreasing = !excess.is_empty() && excess.iter().all(|a| *a > 0.0);

    let g = analytic(1, "2*pos(x)^1.5").unwrap();
    let f = fit_blowup_profile(g.as_ref(), &[0.0], 0.5, 0.5, 1.0 / 128.0, 1.0).unwrap();
    let synthetic = (f.c0 - 2.0).abs() <= 1e-6 && f.regular;
    outcome(
        regular && decreasing && synthetic,
        format!(
            "regular={regular}, effective excess exponents {excess:.3?}, synthetic c0 error {:.1e}",
            (f.c0 - 2.0).abs()
        ),
    )
}

fn c10_blowup(finest: &ObstacleRun) -> Outcome {
    let p = &finest.problem;
    let r = &finest.report;
    let dx = p.grid.spacing();
    let zooms = [1.0, 2.0, 4.0, 8.0];
    let gap = nonlocal::fields::difference(&r.solution.clone().into_ref(), &p.obstacle);
    let mut monotone = !r.free_boundary.is_empty();
    let mut notes = vec![];
    for fb in &r.free_boundary {
        let b =
            check_blowup_convexity(gap.as_ref(), &fb.location, 0.5, 0.25, &zooms, &[dx, 2.0 * dx], &[vec![1.0]], dx)
                .unwrap();
        monotone &= b.monotone;
        notes.push(format!("{:.3e}", b.deficits.iter().cloned().fold(0.0, f64::max) + 0.0));
    }
    let g = analytic(1, "3*pos(x)^1.5").unwrap();
    let h = 1.0 / 128.0;
    let syn = check_blowup_convexity(g.as_ref(), &[0.0], 0.5, 0.5, &zooms, &[h, 2.0 * h], &[vec![1.0]], h).unwrap();
    let synthetic = syn.deficits.iter().all(|d| *d <= syn.interpolation_bound);
    outcome(
        monotone && synthetic,
        format!("zoom deficits nonincreasing={monotone} (largest {}), synthetic passes={synthetic}", notes.join(", ")),
    )
}

fn c11_bellman() -> Outcome {
    let tol = 1e-10;
    let p = bellman::shipped(128).unwrap();
    let r = bellman::solve_policy_iteration(&p, tol, 100).unwrap();
    let mut envelope = true;
    for k in 0..p.family.len() {
        let single = bellman::solve_policy_iteration(&p.single(k), tol, 10).unwrap();
        envelope &= r.values.iter().zip(&single.values).all(|(a, b)| *a >= b - 1e-9);
    }
    let cs: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&n| {
            let p = bellman::shipped(n).unwrap();
            let r = bellman::solve_policy_iteration(&p, tol, 100).unwrap();
            bellman::verify_semiconvexity(&r, &p, &[1.0], &[1, 2, 4]).unwrap().constant
        })
        .collect();
    let stable = cs.iter().all(|c| c.is_finite() && *c > 0.0) && spread(&cs) <= 1.5;
    let scaled = bellman::solve_policy_iteration(&p.scaled(2.5), tol, 100).unwrap();
    let invariant = (0..r.policy.len()).filter(|&i| r.margins[i] > 1e-8).all(|i| r.policy[i] == scaled.policy[i]);
    outcome(
        r.residual <= 1e-8 && envelope && stable && invariant,
        format!(
            "residual {:.1e}, envelope={envelope}, C = {cs:.4?} (max/min {:.3}), policy invariant under ×2.5={invariant}",
            r.residual,
            spread(&cs)
        ),
    )
}

fn c12_parabolic() -> Outcome {
    let k = KernelSpec::fractional(1, 0.5);
    let eta = CutoffFunction::standard(1);
    let pts = line(-0.75, 0.75, 13);
    let v = nonlocal::parabolic::ParabolicVariant::FirstOrder { e: vec![1.0] };
    let mut reduction = true;
    for w in ensemble(1, 3, 5, EnsembleKind::Mixed) {
        let par = check_parabolic_key_estimate(
            &k,
            &v,
            &TimeCutoff::flat(),
            &eta,
            &stationary(w.clone()),
            1.7,
            &q(),
            &[0.5],
            &pts,
            Tolerance::default(),
        )
        .unwrap();
        let ell = variant_components(&k, &Variant::FirstOrder { e: vec![1.0] }, &eta, &w, &q(), &pts).unwrap();
        for (i, c) in ell.iter().enumerate() {
            reduction &= (par.defect[i] - c.defect(1.7)).abs() <= 3.0 * (c.error(1.7) + par.error[i]) + 1e-10;
        }
    }

    let mut worst_residual: f64 = 0.0;
    let cs: Vec<f64> = [(64, 1.0 / 32.0), (64, 1.0 / 64.0), (128, 1.0 / 32.0), (128, 1.0 / 64.0)]
        .iter()
        .map(|&(n, dt)| {
            let p = ParabolicProblem::shipped(n, dt).unwrap();
            let sol = parabolic::solve(&p, &parabolic::default_options()).unwrap();
            worst_residual = worst_residual.max(sol.max_residual());
            measure_space_semiconvexity(&sol, &p, &[1.0], &[1, 2, 4]).unwrap().report.constant
        })
        .collect();
    let stable = cs.iter().all(|c| c.is_finite() && *c > 0.0) && spread(&cs) <= 1.5;
    outcome(
        reduction && worst_residual <= 1e-8 && stable,
        format!(
            "reduction={reduction}, worst level residual {worst_residual:.1e}, C = {cs:.4?} over (Δx, Δt) halvings (max/min {:.3})",
            spread(&cs)
        ),
    )
}

fn c13_nonsymmetric() -> Outcome {
    let pts = line(-0.8, 0.8, 9);
    let mut worst: f64 = 0.0;
    for s in [0.3, 0.5, 0.75] {
        let k = KernelSpec::fractional(1, s);
        for u in ensemble(1, 3, 23, EnsembleKind::Mixed) {
            let a = apply(&k, &u, &q(), &pts).unwrap();
            let b = apply_nonsym(&k, &u, &q(), &pts).unwrap();
            worst = worst.max(max_abs(a.values.iter().zip(&b.values).map(|(x, y)| x - y)));
        }
    }
    let mut skew = KernelSpec::fractional(1, 0.5);
    skew.family =
        KernelFamily::FractionalPower { profile: AngularProfile::Expression(Expr::parse("1 + 0.5*x1").unwrap()) };
    skew.symmetric = false;
    let cancel = check_cancellation(&skew);
    let rejected = !cancel.pass && Operator::new(&skew, &q(), 1e-3).is_err();

    let k = KernelSpec::fractional(1, 0.5);
    let v = Variant::Drift { e: vec![1.0], b: vec![0.5] };
    let eta = v.default_cutoff(1);
    let pts = bernstein_points(&eta);
    let train = training();
    let tol = Tolerance::default();
    let sigma = find_min_sigma(&k, &v, &eta, &train, &q(), &pts, tol, SearchOptions::default()).unwrap().sigma_star;
    let drift_pass = train
        .iter()
        .all(|u| nonlocal::bernstein::check_key_estimate(&k, &v, &eta, u, 1.1 * sigma, &q(), &pts, tol).unwrap().pass);
    outcome(
        worst <= 1e-8 && rejected && drift_pass,
        format!(
            "|apply - apply_nonsym| {worst:.1e}, skewed kernel rejected={rejected} (ratio {:.1e}), drift σ*={sigma:.4} passes at 1.1σ*={drift_pass}",
            cancel.worst_ratio
        ),
    )
}

fn c14_general_levy() -> Outcome {
    let k = KernelSpec::general_levy(1, RadialProfile::LogOscillation { s: 0.5, amplitude: 0.2 });
    let admissible = k.check().is_ok();
    let eta = CutoffFunction::standard(1);
    let pts = bernstein_points(&eta);
    let train = training();
    let mut worst_c: f64 = 0.0;
    let mut interp = true;
    for u in train.iter().take(3) {
        for delta in [0.2, 0.1, 0.05] {
            for pos in [false, true] {
                let r = check_interpolation(&k, delta, u, &[1.0], pos, &q(), &pts, 1.0).unwrap();
                interp &= r.pass;
                worst_c = worst_c.max(r.required_c);
            }
        }
    }
    let v = Variant::GeneralLevy { e: vec![1.0] };
    let tol = Tolerance::default();
    let sigma = find_min_sigma(&k, &v, &eta, &train, &q(), &pts, tol, SearchOptions::default()).unwrap().sigma_star;
    let key = train
        .iter()
        .all(|u| nonlocal::bernstein::check_key_estimate(&k, &v, &eta, u, 1.1 * sigma, &q(), &pts, tol).unwrap().pass);
    outcome(
        admissible && interp && key,
        format!(
            "profile admissible={admissible}, interpolation worst c {worst_c:.4}, σ*={sigma:.4} passes at 1.1σ*={key}"
        ),
    )
}

fn main() {
    let started = Instant::now();
    let criteria: [Criterion; 14] = [
        (1, "product rule", c01_product_rule),
        (2, "kernel decomposition", c02_decomposition),
        (3, "first-order key estimate", c03_key_estimate),
        (4, "positive-part and difference-quotient estimates", c04_variants),
        (5, "robustness as s approaches 1", c05_robustness),
        (6, "obstacle solver", c06_obstacle_solver),
        (7, "semiconvexity constant", || c07_semiconvexity(obstacle_runs())),
        (8, "optimal regularity exponent", || c08_exponent(&obstacle_runs()[2])),
        (9, "blow-up profile", || c09_profile(&obstacle_runs()[2])),
        (10, "blow-up convexity", || c10_blowup(&obstacle_runs()[2])),
        (11, "Bellman problem", c11_bellman),
        (12, "parabolic problem", c12_parabolic),
        (13, "nonsymmetric kernels and drift", c13_nonsymmetric),
        (14, "general Lévy kernels", c14_general_levy),
    ];

    let mut unexpected = vec![];
    let mut passed = 0;
    for (id, name, run) in &criteria {
        let t = Instant::now();
        let o = catch_unwind(*run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} ({:.1}s)", o.detail, t.elapsed().as_secs_f64());
        if o.pass {
            passed += 1;
        } else if !KNOWN_FAILURES.contains(id) {
            unexpected.push(*id);
        }
    }
    println!(
        "acceptance: {passed}/{} criteria pass in {:.1}s; known failures {KNOWN_FAILURES:?}",
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
