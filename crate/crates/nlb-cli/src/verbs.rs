use std::fmt::Write as _;
use std::sync::Arc;

use serde_json::{json, Value};

use nonlocal::bellman::{self, BellmanError, BellmanProblem, Member};
use nonlocal::bernstein::{
    self, BernsteinError, BernsteinReport, Components, CutoffSpec, SearchOptions, Tolerance, Variant,
};
use nonlocal::ensemble::ensemble;
use nonlocal::fields::{self, CutoffFunction, FieldRef, Grid, TimeCutoff};
use nonlocal::kernels::{check_cancellation, validate_class, Point, MAX_DIM};
use nonlocal::obstacle::{self, Method, ObstacleError, ObstacleProblem, SolveOptions};
use nonlocal::operator::{self, OperatorError};
use nonlocal::parabolic::{self, ParabolicError, ParabolicProblem, ParabolicVariant, SpaceTimeField};

use crate::config::{require, BernsteinBlock, Config, MethodName, Verb};
use crate::error::CliError;
use crate::report::{cell, Assertion, Outcome};
use crate::setup::{self, Ctx};

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serialisable")
}

fn operator_err(e: OperatorError) -> CliError {
    match e {
        OperatorError::Evaluation(m) => CliError::Failed(m),
        other => CliError::Precondition(other.to_string()),
    }
}

fn bernstein_err(e: BernsteinError) -> CliError {
    match e {
        BernsteinError::SearchFailure { .. } => CliError::Failed(e.to_string()),
        BernsteinError::Operator(o) => operator_err(o),
        other => CliError::Precondition(other.to_string()),
    }
}

fn obstacle_err(e: ObstacleError) -> CliError {
    match e {
        ObstacleError::NoConvergence { .. } | ObstacleError::Fit(_) | ObstacleError::Hypothesis(_) => {
            CliError::Failed(e.to_string())
        }
        other => CliError::Precondition(other.to_string()),
    }
}

fn bellman_err(e: BellmanError) -> CliError {
    match e {
        BellmanError::NoConvergence { .. } => CliError::Failed(e.to_string()),
        BellmanError::Obstacle(o) => obstacle_err(o),
        other => CliError::Precondition(other.to_string()),
    }
}

fn parabolic_err(e: ParabolicError) -> CliError {
    match e {
        ParabolicError::Obstacle(o) => obstacle_err(o),
        ParabolicError::Level { .. } => CliError::Failed(e.to_string()),
        other => CliError::Precondition(other.to_string()),
    }
}

fn unit(dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[0] = 1.0;
    e
}

fn coords(p: &Point, dim: usize) -> String {
    p[..dim].iter().map(|c| cell(*c)).collect::<Vec<_>>().join(",")
}

fn header(dim: usize) -> String {
    (1..=dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

pub fn run(verb: Verb, cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    match verb {
        Verb::KernelValidate => kernel_validate(cfg, ctx),
        Verb::OperatorEval => operator_eval(cfg, ctx),
        Verb::Bernstein => bernstein_verb(cfg, ctx),
        Verb::Obstacle => obstacle_verb(cfg, ctx),
        Verb::Bellman => bellman_verb(cfg, ctx),
        Verb::Parabolic => parabolic_verb(cfg, ctx),
        Verb::Suite => Err(CliError::Precondition("suites are dispatched by the runner".into())),
    }
}

fn kernel_validate(cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    let verb = Verb::KernelValidate;
    let k = ctx.kernel(require(&cfg.kernel, "kernel", verb)?)?;
    let seed = cfg.seed.ok_or_else(|| CliError::Precondition("kernel-validate needs a `seed`".into()))?;
    let v = cfg.validate.clone().unwrap_or_default();
    let report = validate_class(&k, v.samples.unwrap_or(1000), seed);
    let mut assertions = vec![];
    if v.expect_pass.unwrap_or(true) {
        let failed: Vec<&str> =
            report.conditions.iter().filter(|c| c.applicable && !c.pass).map(|c| c.name.as_str()).collect();
        assertions.push(Assertion::holds("class_conditions", report.pass).with_detail(if failed.is_empty() {
            "all applicable conditions hold".to_string()
        } else {
            format!("failing: {}", failed.join(", "))
        }));
    }
    let mut decomposition = vec![];
    if k.is_singular() {
        for eps in v.radii.clone().unwrap_or_else(|| vec![0.05, 0.1, 0.2]) {
            let d = k.decompose(eps).map_err(|e| CliError::Precondition(e.to_string()))?;
            decomposition.push(json!({ "radius": eps, "c1": d.c1, "c2": d.c2, "c3": d.c3 }));
        }
        let c1: Vec<f64> = decomposition.iter().map(|d| d["c1"].as_f64().unwrap_or(f64::NAN)).collect();
        let c2: Vec<f64> = decomposition.iter().map(|d| d["c2"].as_f64().unwrap_or(f64::NAN)).collect();
        let spread = |v: &[f64]| {
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            if lo > 0.0 && hi.is_finite() {
                hi / lo
            } else {
                f64::INFINITY
            }
        };
        if decomposition.len() >= 2 {
            let limit = v.stability_factor.unwrap_or(2.0);
            assertions.push(Assertion::at_most("decomposition_c1_spread", spread(&c1), limit));
            assertions.push(Assertion::at_most("decomposition_c2_spread", spread(&c2), limit));
        }
    }
    let cancellation = (!k.symmetric).then(|| check_cancellation(&k));
    Ok(Outcome {
        results: json!({
            "family": k.family_name(),
            "validation": to_json(&report),
            "decomposition": decomposition,
            "cancellation": cancellation.map(|c| to_json(&c)),
        }),
        assertions,
        csv: vec![],
    })
}

fn grid_nodes(grid: &Grid, collar: usize) -> Vec<Point> {
    (0..grid.len()).filter(|&k| grid.is_inner(k, collar)).map(|k| grid.node(k)).collect()
}

fn operator_eval(cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    let verb = Verb::OperatorEval;
    let k = ctx.kernel(require(&cfg.kernel, "kernel", verb)?)?;
    let n = k.dim;
    let g = setup::grid(require(&cfg.grid, "grid", verb)?, n)?;
    let ob = require(&cfg.operator, "operator", verb)?;
    let u = ctx.field(&ob.u, n)?;
    let q = setup::quadrature(cfg.quadrature.as_ref());
    let pts = grid_nodes(&g, ob.collar.unwrap_or(0));
    let eval = if k.drift.iter().any(|b| *b != 0.0) {
        operator::apply_with_drift(&k, &u, &q, &pts)
    } else if k.symmetric {
        operator::apply(&k, &u, &q, &pts)
    } else {
        operator::apply_nonsym(&k, &u, &q, &pts)
    }
    .map_err(operator_err)?;
    let mut assertions = vec![];
    let mut reference_diff = None;
    if let Some(r) = &ob.reference {
        let rf = ctx.field(r, n)?;
        let d = pts.iter().zip(&eval.values).map(|(p, v)| (v - rf.value(&p[..n])).abs()).fold(0.0, f64::max);
        reference_diff = Some(d);
        assertions.push(Assertion::at_most("reference_difference", d, ob.reference_tol.unwrap_or(1e-6)));
    }
    if let Some(m) = ob.error_max {
        assertions.push(Assertion::at_most("error_estimate", eval.max_error(), m));
    }
    let mut csv = Vec::new();
    eval.write_csv(&mut csv)?;
    Ok(Outcome {
        results: json!({
            "nodes": pts.len(),
            "max_error_estimate": eval.max_error(),
            "max_abs_value": eval.values.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            "reference_difference": reference_diff,
            "quadrature": to_json(&q),
        }),
        assertions,
        csv: vec![("operator".into(), String::from_utf8(csv).expect("utf8"))],
    })
}

enum Which {
    Elliptic(Variant),
    Parabolic(ParabolicVariant),
}

fn variant_from(b: &BernsteinBlock, dim: usize) -> Result<Which, CliError> {
    let e = b.e.clone().unwrap_or_else(|| unit(dim));
    let h = || b.h.clone().ok_or_else(|| CliError::Precondition(format!("variant {} needs `h`", b.variant)));
    let inner = {
        let r = b.inner.unwrap_or([0.375, 0.75]);
        CutoffSpec { r0: r[0], r1: r[1] }
    };
    let drift = || b.b.clone().ok_or_else(|| CliError::Precondition(format!("variant {} needs `b`", b.variant)));
    let alpha = b.alpha.unwrap_or(0.5);
    Ok(Which::Elliptic(match b.variant.as_str() {
        "FirstOrder" => Variant::FirstOrder { e },
        "PosPart" => Variant::PosPart { e },
        "DiffQuot" => Variant::DiffQuot { h: h()? },
        "DiffQuotPosPart" => Variant::DiffQuotPosPart { h: h()? },
        "DiffQuotImproved" => Variant::DiffQuotImproved { h: h()? },
        "DiffQuotImprovedPosPart" => Variant::DiffQuotImprovedPosPart { h: h()? },
        "HolderQuot" => Variant::HolderQuot { h: h()?, alpha },
        "HolderQuotPosPart" => Variant::HolderQuotPosPart { h: h()?, alpha },
        "SecondOrder" => Variant::SecondOrder { e, inner },
        "SecondOrderDiffQuot" => Variant::SecondOrderDiffQuot { h: h()?, inner },
        "Drift" => Variant::Drift { e, b: drift()? },
        "DriftPosPart" => Variant::DriftPosPart { e, b: drift()? },
        "GeneralLevy" => Variant::GeneralLevy { e },
        "GeneralLevyPosPart" => Variant::GeneralLevyPosPart { e },
        "Parabolic" => return Ok(Which::Parabolic(ParabolicVariant::FirstOrder { e })),
        "ParabolicPosPart" => return Ok(Which::Parabolic(ParabolicVariant::PosPart { e })),
        "ParabolicSecondOrder" => return Ok(Which::Parabolic(ParabolicVariant::SecondOrder { e, inner })),
        other => return Err(CliError::Precondition(format!("unknown variant `{other}`; see --list-variants"))),
    }))
}

fn members(
    b: &BernsteinBlock,
    block: Option<&crate::config::EnsembleBlock>,
    seed: Option<u64>,
    dim: usize,
    ctx: Ctx<'_>,
) -> Result<Vec<FieldRef>, CliError> {
    match (block, &b.u) {
        (Some(e), _) => Ok(ensemble(dim, e.count, setup::ensemble_seed(e, seed)?, setup::ensemble_kind(e)?)),
        (None, Some(u)) => Ok(vec![ctx.field(u, dim)?]),
        (None, None) => Err(CliError::Precondition("bernstein needs `u` or an `ensemble` block".into())),
    }
}

fn space_time(
    b: &BernsteinBlock,
    seed: Option<u64>,
    dim: usize,
    ctx: Ctx<'_>,
) -> Result<Vec<SpaceTimeField>, CliError> {
    if let Some(e) = &b.ensemble {
        let base = ensemble(dim, e.count, setup::ensemble_seed(e, seed)?, setup::ensemble_kind(e)?);
        return Ok(base
            .into_iter()
            .map(|w| parabolic::separable(Arc::new(|t: f64| 1.0 + 0.5 * (3.0 * t).sin()), w))
            .collect());
    }
    let u = b.u.as_ref().ok_or_else(|| CliError::Precondition("bernstein needs `u` or an `ensemble` block".into()))?;
    let ex = Arc::new(ctx.expr(u, dim)?);
    Ok(vec![Arc::new(move |t: f64| {
        let ex = ex.clone();
        fields::FnField::new(dim, move |x| ex.eval_tx(t, x)).into_ref()
    })])
}

fn member_csv(reports: &[BernsteinReport]) -> String {
    let mut s = String::new();
    let n = reports.first().and_then(|r| r.points.first()).map_or(1, Vec::len);
    let _ =
        writeln!(s, "member,{},lhs,rhs,defect,error", (1..=n).map(|i| format!("p{i}")).collect::<Vec<_>>().join(","));
    for (m, r) in reports.iter().enumerate() {
        for i in 0..r.points.len() {
            let c: Vec<String> = r.points[i].iter().map(|v| cell(*v)).collect();
            let _ = writeln!(
                s,
                "{m},{},{},{},{},{}",
                c.join(","),
                cell(r.lhs[i]),
                cell(r.rhs[i]),
                cell(r.defect[i]),
                cell(r.error[i])
            );
        }
    }
    s
}

fn summarise(reports: &[BernsteinReport]) -> Value {
    Value::Array(
        reports
            .iter()
            .enumerate()
            .map(|(m, r)| {
                json!({
                    "member": m,
                    "max_defect": r.max_defect,
                    "max_excess": r.max_excess,
                    "violating_nodes": r.violating_nodes,
                    "violating_points": r.violating_nodes.iter().map(|&i| r.points[i].clone()).collect::<Vec<_>>(),
                    "pass": r.pass,
                })
            })
            .collect(),
    )
}

fn violation_detail(reports: &[BernsteinReport]) -> Option<String> {
    reports.iter().enumerate().find(|(_, r)| !r.pass).map(|(m, r)| {
        let i = r.violating_nodes[0];
        format!(
            "member {m}, node {i} at {:?}: defect {:.6e} exceeds its tolerance (error estimate {:.3e}); {} violating nodes",
            r.points[i],
            r.defect[i],
            r.error[i],
            r.violating_nodes.len()
        )
    })
}

/// `defect(4σ) ≤ defect(2σ) ≤ defect(σ)` at every node within tolerance.
fn monotone_in_sigma(comps: &[Vec<Components>], sigma: f64, tol: Tolerance) -> bool {
    comps.iter().flatten().all(|c| {
        let d = [c.defect(sigma), c.defect(2.0 * sigma), c.defect(4.0 * sigma)];
        let slack = tol.factor * c.error(4.0 * sigma) + tol.absolute;
        d[1] <= d[0] + slack && d[2] <= d[1] + slack
    })
}

fn bernstein_verb(cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    let verb = Verb::Bernstein;
    let k = ctx.kernel(require(&cfg.kernel, "kernel", verb)?)?;
    let n = k.dim;
    let b = require(&cfg.bernstein, "bernstein", verb)?;
    let g = setup::grid(require(&cfg.grid, "grid", verb)?, n)?;
    let q = setup::quadrature(cfg.quadrature.as_ref());
    let tol = Tolerance { factor: b.factor.unwrap_or(3.0), absolute: b.absolute.unwrap_or(1e-12) };
    let opts = SearchOptions {
        sigma_max: b.sigma_max.unwrap_or(1e6),
        relative_tolerance: b.relative_tolerance.unwrap_or(1e-3),
    };
    let margin = b.margin.unwrap_or(1.0);
    let which = variant_from(b, n)?;
    let cutoff = |default: CutoffFunction| -> Result<CutoffFunction, CliError> {
        match b.cutoff {
            Some([r0, r1]) => {
                CutoffFunction::new(n, &[0.0; MAX_DIM][..n], r0, r1).map_err(|e| CliError::Precondition(e.to_string()))
            }
            None => Ok(default),
        }
    };
    let collar = b.collar.unwrap_or(2);
    match which {
        Which::Elliptic(variant) => {
            let eta = cutoff(variant.default_cutoff(n))?;
            let mut pts = bernstein::evaluation_nodes(&g, &eta, collar);
            if variant.tag().starts_with("DiffQuotImproved") {
                pts.retain(|p| fields::norm(&p[..n]) <= 0.25 + 1e-12);
            }
            let us = members(b, b.ensemble.as_ref(), cfg.seed, n, ctx)?;
            let comps: Vec<Vec<Components>> = us
                .iter()
                .map(|u| bernstein::variant_components(&k, &variant, &eta, u, &q, &pts))
                .collect::<Result<_, _>>()
                .map_err(bernstein_err)?;
            let report_at = |comps: &[Vec<Components>], sigma: f64| -> Vec<BernsteinReport> {
                comps.iter().map(|c| BernsteinReport::from_components(variant.tag(), sigma, &pts, n, c, tol)).collect()
            };
            let mut assertions = vec![];
            let mut results = json!({ "variant": to_json(&variant), "nodes": pts.len(), "members": us.len() });
            let reports = if let Some(sigma) = b.sigma {
                let reports = report_at(&comps, sigma);
                let ok = reports.iter().all(|r| r.pass);
                let mut a = Assertion::holds("key_estimate", ok);
                if let Some(d) = violation_detail(&reports) {
                    a = a.with_detail(d);
                }
                assertions.push(a);
                results["sigma"] = json!(sigma);
                reports
            } else {
                let search = bernstein::min_sigma_from_components(&comps, &pts, n, tol, opts).map_err(bernstein_err)?;
                let star = search.sigma_star;
                results["search"] = to_json(&search);
                results["sigma_checked"] = json!(margin * star);
                assertions
                    .push(Assertion::holds("sigma_monotonicity", monotone_in_sigma(&comps, star.max(1e-12), tol)));
                if let Some(vb) = &b.validation {
                    let vs = members(b, Some(vb), cfg.seed, n, ctx)?;
                    let vcomps: Vec<Vec<Components>> = vs
                        .iter()
                        .map(|u| bernstein::variant_components(&k, &variant, &eta, u, &q, &pts))
                        .collect::<Result<_, _>>()
                        .map_err(bernstein_err)?;
                    let reports = report_at(&vcomps, margin * star);
                    let failed = reports.iter().filter(|r| !r.pass).count();
                    let mut a = Assertion::at_most("validation_members_failing", failed as f64, 0.0);
                    if let Some(d) = violation_detail(&reports) {
                        a = a.with_detail(d);
                    }
                    assertions.push(a);
                    results["validation"] = summarise(&reports);
                    reports
                } else {
                    report_at(&comps, margin * star)
                }
            };
            results["per_member"] = summarise(&reports);
            Ok(Outcome { results, assertions, csv: vec![("defect".into(), member_csv(&reports))] })
        }
        Which::Parabolic(variant) => {
            let eta2 = cutoff(CutoffFunction::standard(n))?;
            let eta1 = TimeCutoff::standard();
            let times = b.times.clone().unwrap_or_else(|| (0..7).map(|i| 0.25 + 0.125 * i as f64).collect());
            let pts = bernstein::evaluation_nodes(&g, &eta2, collar);
            let us = space_time(b, cfg.seed, n, ctx)?;
            let mut results = json!({ "variant": to_json(&variant), "nodes": pts.len(), "times": times });
            let sigma = match b.sigma {
                Some(s) => s,
                None => {
                    let search =
                        parabolic::find_min_sigma(&k, &variant, &eta1, &eta2, &us, &q, &times, &pts, tol, opts)
                            .map_err(parabolic_err)?;
                    results["search"] = to_json(&search);
                    margin * search.sigma_star
                }
            };
            let reports: Vec<BernsteinReport> = us
                .iter()
                .map(|u| {
                    parabolic::check_parabolic_key_estimate(&k, &variant, &eta1, &eta2, u, sigma, &q, &times, &pts, tol)
                })
                .collect::<Result<_, _>>()
                .map_err(parabolic_err)?;
            results["sigma_checked"] = json!(sigma);
            results["per_member"] = summarise(&reports);
            let mut a = Assertion::holds("key_estimate", reports.iter().all(|r| r.pass));
            if let Some(d) = violation_detail(&reports) {
                a = a.with_detail(d);
            }
            Ok(Outcome { results, assertions: vec![a], csv: vec![("defect".into(), member_csv(&reports))] })
        }
    }
}

fn method_of(m: Option<MethodName>, omega: Option<f64>) -> Method {
    match m.unwrap_or(MethodName::Psor) {
        MethodName::Psor => Method::Psor { omega: omega.unwrap_or(1.5) },
        MethodName::Policy => Method::PolicyIteration,
    }
}

fn obstacle_verb(cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    let verb = Verb::Obstacle;
    let k = ctx.kernel(require(&cfg.kernel, "kernel", verb)?)?;
    let n = k.dim;
    let gb = require(&cfg.grid, "grid", verb)?;
    let g = setup::grid(gb, n)?;
    let ob = require(&cfg.obstacle, "obstacle", verb)?;
    let phi = ctx.field(&ob.obstacle, n)?;
    let f = ctx.field_or_zero(ob.rhs.as_ref(), n)?;
    let ext = ctx.exterior(gb.exterior.as_ref(), n)?;
    let p = ObstacleProblem::new(k, g.clone(), phi.clone(), f, ext);
    let asm = obstacle::assemble(&p).map_err(obstacle_err)?;
    let opts = SolveOptions {
        method: method_of(ob.method, ob.omega),
        tol: ob.tol.unwrap_or(1e-10),
        max_iter: ob.max_iter.unwrap_or(200_000),
    };
    let mut rep = obstacle::solve_assembled(&p, &asm, &opts).map_err(obstacle_err)?;
    let mut assertions =
        vec![Assertion::at_most("complementarity_residual", rep.residual, ob.residual_max.unwrap_or(1e-8))];
    let mut results = json!({});
    if ob.compare_methods.unwrap_or(false) {
        let other = match opts.method {
            Method::PolicyIteration => Method::Psor { omega: ob.omega.unwrap_or(1.5) },
            Method::Psor { .. } => Method::PolicyIteration,
        };
        let r2 = obstacle::solve_assembled(&p, &asm, &SolveOptions { method: other, ..opts }).map_err(obstacle_err)?;
        let d = rep.values.iter().zip(&r2.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        results["method_agreement"] =
            json!({ "other": to_json(&other), "max_difference": d, "other_residual": r2.residual });
        assertions.push(Assertion::at_most("method_agreement", d, ob.agreement_max.unwrap_or(1e-7)));
    }
    if ob.measure.unwrap_or(true) {
        obstacle::measure(&p, &asm, &mut rep).map_err(obstacle_err)?;
    }
    let mut csv = String::new();
    let _ = writeln!(csv, "{},u,phi,gap", header(n));
    for i in 0..g.len() {
        let x = g.node(i);
        let ph = phi.value(&x[..n]);
        let u = rep.values[i];
        let _ = writeln!(csv, "{},{},{},{}", coords(&x, n), cell(u), cell(ph), cell(u - ph));
    }
    let mut summary = to_json(&rep);
    if let Value::Object(m) = &mut summary {
        m.remove("values");
    }
    results["solve"] = summary;
    results["sup_norm"] = json!(rep.solution.sup_norm());
    results["active_nodes"] = json!(rep.active_set.len());
    Ok(Outcome { results, assertions, csv: vec![("fields".into(), csv)] })
}

fn bellman_verb(cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    let verb = Verb::Bellman;
    let bb = require(&cfg.bellman, "bellman", verb)?;
    let gb = require(&cfg.grid, "grid", verb)?;
    let family: Vec<Member> = bb
        .family
        .iter()
        .map(|m| Ok(Member { kernel: ctx.kernel(&m.kernel)?, c: ctx.field(&m.c, m.kernel.dim)? }))
        .collect::<Result<_, CliError>>()?;
    let n = family.first().map(|m| m.kernel.dim).ok_or_else(|| CliError::Precondition("empty family".into()))?;
    let grid = setup::grid(gb, n)?;
    let p = BellmanProblem { family, grid: grid.clone(), exterior: ctx.exterior(gb.exterior.as_ref(), n)? };
    let tol = bb.tol.unwrap_or(1e-10);
    let max_iter = bb.max_iter.unwrap_or(100);
    let d = bellman::assemble(&p).map_err(bellman_err)?;
    let rep = bellman::solve_discrete(&p, &d, tol, max_iter).map_err(bellman_err)?;
    let mut assertions = vec![Assertion::at_most("residual", rep.residual, bb.residual_max.unwrap_or(1e-8))];
    // envelope: each single-member solution lies below the Bellman solution
    let mut envelope_gap = f64::INFINITY;
    for g in 0..p.family.len() {
        let single = p.single(g);
        let dg = bellman::Discrete { operators: vec![d.operators[g].clone()], loads: vec![d.loads[g].clone()] };
        let w = bellman::solve_discrete(&single, &dg, tol, max_iter).map_err(bellman_err)?;
        for (u, wv) in rep.values.iter().zip(&w.values) {
            envelope_gap = envelope_gap.min(u - wv);
        }
    }
    assertions.push(Assertion::at_most(
        "envelope_violation",
        (-envelope_gap).max(0.0),
        bb.envelope_tol.unwrap_or(1e-9),
    ));
    let semi = bellman::verify_semiconvexity(&rep, &p, &unit(n), &[1, 2, 4]).map_err(bellman_err)?;
    let mut results = json!({
        "residual": rep.residual,
        "iterations": rep.iterations,
        "history": rep.history,
        "used_fallback": rep.used_fallback,
        "envelope_min_gap": envelope_gap,
        "semiconvexity": to_json(&semi),
    });
    let unknowns = &d.operators[0].unknowns;
    let mut policy_map = vec![-1i64; grid.len()];
    for (i, &k) in unknowns.iter().enumerate() {
        policy_map[k] = rep.policy[i] as i64;
    }
    results["policy"] = json!(policy_map);
    if let Some(lambda) = bb.scaling {
        if !(lambda > 0.0) {
            return Err(CliError::Precondition("`scaling` must be positive".into()));
        }
        let scaled = bellman::solve_policy_iteration(&p.scaled(lambda), tol, max_iter).map_err(bellman_err)?;
        let thr = 1e-8 * rep.margins.iter().cloned().filter(|m| m.is_finite()).fold(1.0, f64::max);
        let mismatches =
            (0..rep.policy.len()).filter(|&i| rep.margins[i] > thr && scaled.policy[i] != rep.policy[i]).count();
        results["scaling"] = json!({ "factor": lambda, "policy_mismatches": mismatches });
        assertions.push(Assertion::at_most("policy_scaling_mismatches", mismatches as f64, 0.0));
    }
    let mut csv = String::new();
    let _ = writeln!(csv, "{},u,policy", header(n));
    for k in 0..grid.len() {
        let _ = writeln!(csv, "{},{},{}", coords(&grid.node(k), n), cell(rep.values[k]), policy_map[k]);
    }
    Ok(Outcome { results, assertions, csv: vec![("fields".into(), csv)] })
}

fn parabolic_verb(cfg: &Config, ctx: Ctx<'_>) -> Result<Outcome, CliError> {
    let verb = Verb::Parabolic;
    let k = ctx.kernel(require(&cfg.kernel, "kernel", verb)?)?;
    let n = k.dim;
    let gb = require(&cfg.grid, "grid", verb)?;
    let pb = require(&cfg.parabolic, "parabolic", verb)?;
    let p = ParabolicProblem {
        kernel: k,
        grid: setup::grid(gb, n)?,
        exterior: ctx.exterior(gb.exterior.as_ref(), n)?,
        forcing: parabolic::forcing_from_expr(ctx.expr(&pb.forcing, n)?),
        initial: ctx.field_or_zero(pb.initial.as_ref(), n)?,
        dt: pb.dt,
        t_end: pb.t_end.unwrap_or(1.0),
    };
    let mut opts = parabolic::default_options();
    opts.tol = pb.tol.unwrap_or(opts.tol);
    let sol = parabolic::solve(&p, &opts).map_err(parabolic_err)?;
    let assertions =
        vec![Assertion::at_most("max_level_residual", sol.max_residual(), pb.residual_max.unwrap_or(1e-8))];
    let mut results = json!({ "levels": to_json(&sol) });
    if pb.measure.unwrap_or(true) {
        let m = parabolic::measure_space_semiconvexity(&sol, &p, &unit(n), &[1, 2, 4]).map_err(parabolic_err)?;
        results["semiconvexity"] = to_json(&m);
    }
    let mut csv = Vec::new();
    sol.write_csv(&mut csv)?;
    Ok(Outcome { results, assertions, csv: vec![("levels".into(), String::from_utf8(csv).expect("utf8"))] })
}
