//! Experiment configuration schema.
//!
//! Every table is optional at the parsing stage; [`require`] turns a missing
//! block into a precondition failure once the verb is known. Tolerances and
//! solver limits all have defaults listed next to their fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    KernelValidate,
    OperatorEval,
    Bernstein,
    Obstacle,
    Bellman,
    Parabolic,
    Suite,
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::KernelValidate => "kernel-validate",
            Verb::OperatorEval => "operator-eval",
            Verb::Bernstein => "bernstein",
            Verb::Obstacle => "obstacle",
            Verb::Bellman => "bellman",
            Verb::Parabolic => "parabolic",
            Verb::Suite => "suite",
        }
    }
}

/// Where an expression string came from, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    /// Byte offset of the string literal in the config file.
    Offset(usize),
    /// A command-line flag.
    Flag(&'static str),
}

/// An expression kept as text until the dimension is known.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprText {
    pub text: String,
    pub origin: Origin,
}

impl ExprText {
    pub fn flag(text: &str, name: &'static str) -> Self {
        ExprText { text: text.to_string(), origin: Origin::Flag(name) }
    }
}

impl<'de> Deserialize<'de> for ExprText {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = toml::Spanned::<String>::deserialize(d)?;
        let start = s.span().start;
        Ok(ExprText { text: s.into_inner(), origin: Origin::Offset(start) })
    }
}

impl Serialize for ExprText {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub verb: Option<Verb>,
    /// Mandatory for verbs that draw random ensembles or samples.
    pub seed: Option<u64>,
    pub kernel: Option<KernelBlock>,
    pub grid: Option<GridBlock>,
    pub quadrature: Option<QuadratureBlock>,
    pub output: Option<OutputBlock>,
    pub validate: Option<ValidateBlock>,
    pub operator: Option<OperatorBlock>,
    pub bernstein: Option<BernsteinBlock>,
    pub obstacle: Option<ObstacleBlock>,
    pub bellman: Option<BellmanBlock>,
    pub parabolic: Option<ParabolicBlock>,
    pub suite: Option<SuiteBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `c |y|^{-n-2s}`
    Fractional,
    /// `|y|^{-n} r^{-2s}(1 + a sin log r)`
    GeneralLevy,
    /// Unit-mass `exp(-rate |y|)` profile.
    ConvolutionExponential,
    /// Density expression in `x1..xn` and `r`.
    Custom,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub family: KernelKind,
    pub dim: usize,
    /// Order; required except for the convolution family.
    pub s: Option<f64>,
    /// Angular constant of the fractional family. Default 1.
    pub scale: Option<f64>,
    /// Log-oscillation amplitude of the Lévy family. Default 0.
    pub amplitude: Option<f64>,
    /// Rate of the convolution family. Default 1.
    pub rate: Option<f64>,
    pub density: Option<ExprText>,
    pub lambda: Option<f64>,
    pub cap_lambda: Option<f64>,
    /// Custom kernels only. Default true.
    pub symmetric: Option<bool>,
    pub drift: Option<Vec<f64>>,
    /// `m(t)` with `K^{(t)} = m(t) K`.
    pub time_modulation: Option<ExprText>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    /// Box `[lo, hi]ⁿ`. Defaults -1 and 1.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Cells per axis.
    pub intervals: usize,
    /// Exterior data: an expression, `"0"` by default.
    pub exterior: Option<ExprText>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureBlock {
    pub inner_radius: Option<f64>,
    pub annulus_count: Option<usize>,
    pub points_per_annulus: Option<usize>,
    pub angular_points: Option<usize>,
    pub max_angular_points: Option<usize>,
    pub far_cutoff: Option<f64>,
    pub angular_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Directory for `report.json` and CSV dumps, relative to the config.
    pub dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub fields: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    /// Default 1000.
    pub samples: Option<usize>,
    /// Decomposition radii. Default `[0.05, 0.1, 0.2]`.
    pub radii: Option<Vec<f64>>,
    /// Assert that every applicable class condition holds. Default true.
    pub expect_pass: Option<bool>,
    /// Largest allowed ratio between decomposition constants across radii.
    /// Default 2.
    pub stability_factor: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorBlock {
    pub u: ExprText,
    /// Closed form of `Lu` to compare against.
    pub reference: Option<ExprText>,
    /// Default 1e-6.
    pub reference_tol: Option<f64>,
    /// Assert `max error estimate ≤ error_max` when set.
    pub error_max: Option<f64>,
    /// Node band dropped at the faces. Default 0.
    pub collar: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub count: usize,
    /// `mixed` (default), `gaussian` or `trig`.
    pub kind: Option<String>,
    /// Overrides the top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BernsteinBlock {
    pub variant: String,
    pub e: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub b: Option<Vec<f64>>,
    /// Inner cutoff radii `[r0, r1]` of second-order variants. Default
    /// `[0.375, 0.75]`.
    pub inner: Option<[f64; 2]>,
    /// Cutoff radii `[r0, r1]` of the estimate; the variant default otherwise.
    pub cutoff: Option<[f64; 2]>,
    /// Single test function (in `t` and `x` for parabolic variants).
    pub u: Option<ExprText>,
    pub ensemble: Option<EnsembleBlock>,
    /// Fixed σ; when absent σ* is searched on the ensemble.
    pub sigma: Option<f64>,
    /// Held-out ensemble checked at `margin × σ*`.
    pub validation: Option<EnsembleBlock>,
    /// Default 1.
    pub margin: Option<f64>,
    /// Default 3.
    pub factor: Option<f64>,
    /// Default 1e-12.
    pub absolute: Option<f64>,
    /// Default 1e6.
    pub sigma_max: Option<f64>,
    /// Default 1e-3.
    pub relative_tolerance: Option<f64>,
    /// Default 2.
    pub collar: Option<usize>,
    /// Parabolic variants: time levels. Default `0.25, 0.375, …, 1`.
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Psor,
    Policy,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleBlock {
    pub obstacle: ExprText,
    /// Default `"0"`.
    pub rhs: Option<ExprText>,
    /// Default psor.
    pub method: Option<MethodName>,
    /// Default 1.5.
    pub omega: Option<f64>,
    /// Solver tolerance. Default 1e-10.
    pub tol: Option<f64>,
    /// Default 200000.
    pub max_iter: Option<usize>,
    /// Asserted complementarity residual. Default 1e-8.
    pub residual_max: Option<f64>,
    /// Solve with both methods and assert agreement. Default false.
    pub compare_methods: Option<bool>,
    /// Default 1e-7.
    pub agreement_max: Option<f64>,
    /// Free-boundary fits and semiconvexity. Default true.
    pub measure: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyMember {
    pub kernel: KernelBlock,
    pub c: ExprText,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BellmanBlock {
    pub family: Vec<FamilyMember>,
    /// Default 1e-10.
    pub tol: Option<f64>,
    /// Default 100.
    pub max_iter: Option<usize>,
    /// Default 1e-8.
    pub residual_max: Option<f64>,
    /// Slack of the nodewise envelope bound. Default 1e-9.
    pub envelope_tol: Option<f64>,
    /// Assert policy invariance under this scaling of every `c_γ`.
    pub scaling: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicBlock {
    /// Forcing in `t` and `x`.
    pub forcing: ExprText,
    /// Default `"0"`.
    pub initial: Option<ExprText>,
    pub dt: f64,
    /// Default 1.
    pub t_end: Option<f64>,
    /// Default 1e-10.
    pub tol: Option<f64>,
    /// Default 1e-8.
    pub residual_max: Option<f64>,
    /// Default true.
    pub measure: Option<bool>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteBlock {
    /// Config files, relative to the manifest.
    pub configs: Vec<PathBuf>,
}

/// A parsed config together with its source for diagnostics.
pub struct Loaded {
    pub config: Config,
    pub path: String,
    pub text: String,
    pub base_dir: PathBuf,
}

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.chars().count(), |p| before[p + 1..].chars().count()) + 1;
    (line, col)
}

pub fn parse(text: &str, path: &str) -> Result<Config, CliError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        CliError::Parse { location: format!("{path}:{line}:{column}"), message: e.message().to_string() }
    })
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Precondition(format!("cannot read {}: {e}", path.display())))?;
    let shown = path.display().to_string();
    let config = parse(&text, &shown)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, path: shown, text, base_dir })
}

pub fn require<'a, T>(block: &'a Option<T>, name: &str, verb: Verb) -> Result<&'a T, CliError> {
    block.as_ref().ok_or_else(|| CliError::Precondition(format!("verb `{}` needs a [{name}] block", verb.name())))
}
