//! Turns config blocks into library objects.

use std::sync::Arc;

use nonlocal::ensemble::EnsembleKind;
use nonlocal::expr::Expr;
use nonlocal::fields::{self, Exterior, FieldRef, Grid};
use nonlocal::kernels::{KernelSpec, RadialProfile};
use nonlocal::operator::QuadratureConfig;

use crate::config::{line_col, EnsembleBlock, ExprText, GridBlock, KernelBlock, KernelKind, Origin, QuadratureBlock};
use crate::error::CliError;

/// Source text of the config, for expression diagnostics.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub path: &'a str,
    pub text: &'a str,
}

impl Ctx<'_> {
    fn locate(&self, e: &ExprText, column: usize) -> String {
        match e.origin {
            Origin::Offset(o) => {
                let rest = &self.text[o.min(self.text.len())..];
                let quote = if rest.starts_with("\"\"\"") || rest.starts_with("'''") { 3 } else { 1 };
                let skip: usize = e.text.chars().take(column.saturating_sub(1)).map(char::len_utf8).sum();
                let (line, col) = line_col(self.text, o + quote + skip);
                format!("{}:{line}:{col}", self.path)
            }
            Origin::Flag(name) => format!("--{name}:1:{column}"),
        }
    }

    /// Parses an expression in `x1..x{dim}` (and `t`, `r`).
    pub fn expr(&self, e: &ExprText, dim: usize) -> Result<Expr, CliError> {
        let parsed = Expr::parse(&e.text)
            .map_err(|err| CliError::Parse { location: self.locate(e, err.column), message: err.message })?;
        if parsed.max_variable_index() > dim {
            return Err(CliError::Parse {
                location: self.locate(e, 1),
                message: format!(
                    "expression uses x{} but the problem has dimension {dim}",
                    parsed.max_variable_index()
                ),
            });
        }
        Ok(parsed)
    }

    pub fn field(&self, e: &ExprText, dim: usize) -> Result<FieldRef, CliError> {
        let ex = self.expr(e, dim)?;
        Ok(Arc::new(fields::AnalyticField::new(dim, ex)))
    }

    pub fn field_or_zero(&self, e: Option<&ExprText>, dim: usize) -> Result<FieldRef, CliError> {
        match e {
            Some(e) => self.field(e, dim),
            None => Ok(fields::constant(dim, 0.0)),
        }
    }

    /// Constant expressions become `Zero`/`Constant` exterior data.
    pub fn exterior(&self, e: Option<&ExprText>, dim: usize) -> Result<Exterior, CliError> {
        let Some(e) = e else { return Ok(Exterior::Zero) };
        let ex = self.expr(e, dim)?;
        if let Ok(v) = e.text.trim().parse::<f64>() {
            return Ok(if v == 0.0 { Exterior::Zero } else { Exterior::Constant(v) });
        }
        Ok(Exterior::Analytic { field: Arc::new(fields::AnalyticField::new(dim, ex)), source: Some(e.text.clone()) })
    }

    pub fn kernel(&self, k: &KernelBlock) -> Result<KernelSpec, CliError> {
        let need_s = || k.s.ok_or_else(|| CliError::Precondition(format!("kernel family {:?} needs `s`", k.family)));
        let mut spec = match k.family {
            KernelKind::Fractional => {
                let c = k.scale.unwrap_or(1.0);
                if c == 1.0 {
                    KernelSpec::fractional(k.dim, need_s()?)
                } else {
                    KernelSpec::fractional_scaled(k.dim, need_s()?, c)
                }
            }
            KernelKind::GeneralLevy => {
                let s = need_s()?;
                let profile = match k.amplitude.unwrap_or(0.0) {
                    a if a == 0.0 => RadialProfile::Power { s },
                    amplitude => RadialProfile::LogOscillation { s, amplitude },
                };
                KernelSpec::general_levy(k.dim, profile)
            }
            KernelKind::ConvolutionExponential => KernelSpec::convolution_exponential(k.dim, k.rate.unwrap_or(1.0)),
            KernelKind::Custom => {
                let density = k
                    .density
                    .as_ref()
                    .ok_or_else(|| CliError::Precondition("custom kernels need a `density` expression".into()))?;
                let (Some(l), Some(cl)) = (k.lambda, k.cap_lambda) else {
                    return Err(CliError::Precondition("custom kernels need `lambda` and `cap_lambda`".into()));
                };
                let mut spec = KernelSpec::custom(k.dim, need_s()?, self.expr(density, k.dim)?, l, cl);
                spec.symmetric = k.symmetric.unwrap_or(true);
                spec
            }
        };
        if k.family != KernelKind::Custom {
            if k.density.is_some() || k.symmetric.is_some() {
                return Err(CliError::Precondition("`density` and `symmetric` apply to custom kernels only".into()));
            }
            if let Some(l) = k.lambda {
                spec.lambda = l;
            }
            if let Some(cl) = k.cap_lambda {
                spec.cap_lambda = cl;
            }
        }
        if let Some(b) = &k.drift {
            spec = spec.with_drift(b);
        }
        if let Some(m) = &k.time_modulation {
            spec.time_modulation = Some(self.expr(m, k.dim)?);
        }
        spec.check().map_err(|e| CliError::Precondition(e.to_string()))?;
        Ok(spec)
    }
}

pub fn grid(g: &GridBlock, dim: usize) -> Result<Grid, CliError> {
    let lo = g.lo.unwrap_or(-1.0);
    let hi = g.hi.unwrap_or(1.0);
    if g.intervals < 2 {
        return Err(CliError::Precondition("grid needs at least two intervals".into()));
    }
    Grid::new(dim, lo, hi, g.intervals + 1).map_err(|e| CliError::Precondition(e.to_string()))
}

pub fn quadrature(q: Option<&QuadratureBlock>) -> QuadratureConfig {
    let mut c = QuadratureConfig::default();
    if let Some(q) = q {
        c.inner_radius = q.inner_radius.or(c.inner_radius);
        c.annulus_count = q.annulus_count.or(c.annulus_count);
        c.points_per_annulus = q.points_per_annulus.unwrap_or(c.points_per_annulus);
        c.angular_points = q.angular_points.unwrap_or(c.angular_points);
        c.max_angular_points = q.max_angular_points.unwrap_or(c.max_angular_points);
        c.far_cutoff = q.far_cutoff.unwrap_or(c.far_cutoff);
        c.angular_scale = q.angular_scale.unwrap_or(c.angular_scale);
    }
    c
}

pub fn ensemble_kind(e: &EnsembleBlock) -> Result<EnsembleKind, CliError> {
    match e.kind.as_deref().unwrap_or("mixed") {
        "mixed" => Ok(EnsembleKind::Mixed),
        "gaussian" => Ok(EnsembleKind::GaussianMixture),
        "trig" => Ok(EnsembleKind::TrigSum),
        other => Err(CliError::Precondition(format!("unknown ensemble kind `{other}` (mixed, gaussian, trig)"))),
    }
}

pub fn ensemble_seed(e: &EnsembleBlock, seed: Option<u64>) -> Result<u64, CliError> {
    e.seed.or(seed).ok_or_else(|| CliError::Precondition("ensembles need a `seed`".into()))
}
