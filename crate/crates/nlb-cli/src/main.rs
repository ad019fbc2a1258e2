//! `nlb`: runs one experiment per invocation from a TOML config and writes a
//! JSON report plus CSV field dumps.
//!
//! Exit status: 0 when every asserted check passes, 1 on an assertion
//! failure (including solver non-convergence), 2 on a config or expression
//! parse error, 3 on a precondition violation (missing block, invalid
//! parameter, unreadable file).

mod config;
mod error;
mod report;
mod setup;
mod verbs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Config, ExprText, GridBlock, KernelBlock, MethodName, ObstacleBlock, OutputBlock, Verb};
use error::CliError;
use report::{sha256_hex, Assertion, Outcome, Report};
use setup::Ctx;

#[derive(Parser)]
#[command(name = "nlb", version, about = "Experiments with nonlocal operators, estimates and obstacle problems")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the key-estimate variant catalogue and exit.
    #[arg(long)]
    list_variants: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel block: a TOML file or an inline table such as
    /// `{family="fractional", dim=1, s=0.5}`.
    #[arg(long)]
    kernel: Option<String>,
    /// Cells per axis.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path (JSON).
    #[arg(long, alias = "out")]
    report: Option<PathBuf>,
    /// CSV dump path.
    #[arg(long)]
    fields: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verb named in a config file.
    Run { config: PathBuf },
    KernelValidate {
        #[command(flatten)]
        common: Common,
    },
    OperatorEval {
        #[command(flatten)]
        common: Common,
        /// Field to apply the operator to.
        #[arg(long)]
        u: Option<String>,
    },
    Bernstein {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, conflicts_with = "find_sigma")]
        sigma: Option<f64>,
        /// Search σ* on the ensemble (drops a configured σ).
        #[arg(long)]
        find_sigma: bool,
        /// Ensemble size.
        #[arg(long)]
        count: Option<usize>,
    },
    Obstacle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        obstacle: Option<String>,
        #[arg(long)]
        rhs: Option<String>,
        #[arg(long)]
        exterior: Option<String>,
        #[arg(long, value_enum)]
        method: Option<MethodName>,
        #[arg(long)]
        tol: Option<f64>,
    },
    Bellman {
        #[command(flatten)]
        common: Common,
    },
    Parabolic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Run every config listed in a suite manifest.
    Suite {
        manifest: PathBuf,
        /// Directory for the per-config reports and the suite report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Loaded config plus where it came from.
struct Source {
    config: Config,
    path: String,
    text: String,
    file_sha: Option<String>,
    base_dir: PathBuf,
}

fn load_source(path: Option<&Path>) -> Result<Source, CliError> {
    match path {
        Some(p) => {
            let l = config::load(p)?;
            let sha = sha256_hex(l.text.as_bytes());
            Ok(Source { config: l.config, path: l.path, text: l.text, file_sha: Some(sha), base_dir: l.base_dir })
        }
        None => Ok(Source {
            config: Config::default(),
            path: "<flags>".into(),
            text: String::new(),
            file_sha: None,
            base_dir: PathBuf::new(),
        }),
    }
}

fn kernel_flag(arg: &str) -> Result<KernelBlock, CliError> {
    let p = Path::new(arg);
    let (text, shown) = if p.is_file() {
        let t = std::fs::read_to_string(p).map_err(|e| CliError::Precondition(format!("cannot read {arg}: {e}")))?;
        (t, arg.to_string())
    } else {
        (format!("kernel = {arg}"), "--kernel".to_string())
    };
    let c = config::parse(&text, &shown)?;
    if let Some(k) = c.kernel {
        return Ok(k);
    }
    // a file holding the kernel keys at top level
    toml::from_str::<KernelBlock>(&text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| config::line_col(&text, s.start));
        CliError::Parse { location: format!("{shown}:{line}:{column}"), message: e.message().to_string() }
    })
}

fn apply_common(cfg: &mut Config, c: &Common) -> Result<(), CliError> {
    if let Some(k) = &c.kernel {
        cfg.kernel = Some(kernel_flag(k)?);
    }
    if let Some(n) = c.grid {
        match &mut cfg.grid {
            Some(g) => g.intervals = n,
            None => cfg.grid = Some(GridBlock { lo: None, hi: None, intervals: n, exterior: None }),
        }
    }
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    Ok(())
}

fn output_of(cfg: &Config) -> OutputBlock {
    cfg.output.clone().unwrap_or_default()
}

/// Report and CSV destinations: flags relative to the working directory,
/// config entries relative to the config file.
fn destinations(cfg: &Config, base: &Path, c: Option<&Common>) -> (Option<PathBuf>, Option<PathBuf>) {
    let out = output_of(cfg);
    let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    let dir = out.dir.map(rel);
    let report = c
        .and_then(|c| c.report.clone())
        .or_else(|| out.report.map(rel))
        .or_else(|| dir.as_ref().map(|d| d.join("report.json")));
    let fields = c
        .and_then(|c| c.fields.clone())
        .or_else(|| out.fields.map(rel))
        .or_else(|| dir.as_ref().map(|d| d.join("fields.csv")));
    (report, fields)
}

fn csv_path(first: &Path, index: usize, suffix: &str) -> PathBuf {
    if index == 0 {
        return first.to_path_buf();
    }
    let stem = first.file_stem().map_or("fields".into(), |s| s.to_string_lossy().into_owned());
    first.with_file_name(format!("{stem}-{suffix}.csv"))
}

/// Runs one verb and writes its artefacts; returns the exit status.
fn execute(verb: Verb, src: &Source, common: Option<&Common>) -> i32 {
    let inputs = echo(&src.config);
    let effective = sha256_hex(serde_json::to_string(&inputs).expect("json").as_bytes());
    let ctx = Ctx { path: &src.path, text: &src.text };
    let (report_path, fields_path) = destinations(&src.config, &src.base_dir, common);
    let result = verbs::run(verb, &src.config, ctx);
    let (outcome, error, code) = match result {
        Ok(o) => {
            let code = if o.assertions.iter().all(|a| a.pass) { 0 } else { 1 };
            (o, None, code)
        }
        Err(e @ CliError::Failed(_)) => {
            let mut o = Outcome::default();
            o.assertions.push(Assertion::holds("completed", false).with_detail(e.to_string()));
            (o, Some(e.to_string()), 1)
        }
        Err(e) => {
            eprintln!("nlb: {e}");
            return e.exit_code();
        }
    };
    let report = Report {
        tool: "nlb",
        version: env!("CARGO_PKG_VERSION"),
        verb: verb.name().into(),
        config_sha256: src.file_sha.clone(),
        effective_sha256: effective,
        inputs,
        results: outcome.results,
        pass: code == 0,
        assertions: outcome.assertions,
        error,
    };
    for a in &report.assertions {
        eprintln!(
            "{} {}: value {:e}, limit {:e}{}",
            if a.pass { "PASS" } else { "FAIL" },
            a.name,
            a.value,
            a.limit,
            a.detail.as_ref().map_or(String::new(), |d| format!(" ({d})"))
        );
    }
    let written = (|| -> std::io::Result<()> {
        match &report_path {
            Some(p) => report.write(p)?,
            None => emit(&report.to_json()),
        }
        if let Some(fp) = &fields_path {
            if let Some(dir) = fp.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            for (i, (suffix, body)) in outcome.csv.iter().enumerate() {
                std::fs::write(csv_path(fp, i, suffix), body)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = written {
        eprintln!("nlb: cannot write outputs: {e}");
        return 3;
    }
    code
}

/// The config as JSON without the output block, so reports of the same
/// experiment written to different places are identical.
fn echo(cfg: &Config) -> serde_json::Value {
    let mut c = cfg.clone();
    c.output = None;
    serde_json::to_value(&c).expect("config is serialisable")
}

fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn resolve_verb(cfg: &mut Config, wanted: Verb) -> Result<(), CliError> {
    match cfg.verb {
        Some(v) if v != wanted => {
            Err(CliError::Precondition(format!("config is for verb `{}`, not `{}`", v.name(), wanted.name())))
        }
        _ => {
            cfg.verb = Some(wanted);
            Ok(())
        }
    }
}

fn run_suite(manifest: &Path, out: Option<&Path>) -> Result<i32, CliError> {
    let l = config::load(manifest)?;
    let suite = config::require(&l.config.suite, "suite", Verb::Suite)?;
    let out_dir = out.map(Path::to_path_buf).or_else(|| output_of(&l.config).dir.map(|d| l.base_dir.join(d)));
    let mut entries = vec![];
    let mut worst = 0;
    for rel in &suite.configs {
        let path = l.base_dir.join(rel);
        let stem = rel.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
        let code = match load_source(Some(&path)) {
            Ok(mut src) => match src.config.verb {
                Some(Verb::Suite) => {
                    eprintln!("nlb: nested suites are not supported ({})", path.display());
                    3
                }
                Some(v) => {
                    if let Some(d) = &out_dir {
                        let o = src.config.output.get_or_insert_with(OutputBlock::default);
                        o.dir = Some(d.join(&stem));
                        o.report = None;
                        o.fields = None;
                        src.base_dir = PathBuf::new();
                    }
                    eprintln!("== {} ({})", rel.display(), v.name());
                    execute(v, &src, None)
                }
                None => {
                    eprintln!("nlb: {} does not name a verb", path.display());
                    3
                }
            },
            Err(e) => {
                eprintln!("nlb: {e}");
                e.exit_code()
            }
        };
        let sha = std::fs::read(&path).ok().map(|b| sha256_hex(&b));
        entries.push(json!({ "config": rel, "config_sha256": sha, "exit_code": code, "pass": code == 0 }));
        worst = match (worst, code) {
            (0, c) => c,
            (w, 0) => w,
            (1, c) => c,
            (w, _) => w,
        };
    }
    let report = Report {
        tool: "nlb",
        version: env!("CARGO_PKG_VERSION"),
        verb: "suite".into(),
        config_sha256: Some(sha256_hex(l.text.as_bytes())),
        effective_sha256: sha256_hex(serde_json::to_string(&echo(&l.config)).expect("json").as_bytes()),
        inputs: echo(&l.config),
        results: json!({ "runs": entries }),
        assertions: entries
            .iter()
            .map(|e| Assertion::holds(e["config"].as_str().unwrap_or("?"), e["pass"].as_bool().unwrap_or(false)))
            .collect(),
        pass: worst == 0,
        error: None,
    };
    match &out_dir {
        Some(d) => report.write(&d.join("suite.json"))?,
        None => emit(&report.to_json()),
    }
    Ok(worst)
}

fn prepare(common: &Common, verb: Verb) -> Result<Source, CliError> {
    let mut src = load_source(common.config.as_deref())?;
    resolve_verb(&mut src.config, verb)?;
    apply_common(&mut src.config, common)?;
    Ok(src)
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Run { config } => {
            let src = load_source(Some(&config))?;
            match src.config.verb {
                Some(Verb::Suite) => run_suite(&config, None),
                Some(v) => Ok(execute(v, &src, None)),
                None => Err(CliError::Precondition("config does not name a `verb`".into())),
            }
        }
        Command::Suite { manifest, out } => run_suite(&manifest, out.as_deref()),
        Command::KernelValidate { common } => {
            let src = prepare(&common, Verb::KernelValidate)?;
            Ok(execute(Verb::KernelValidate, &src, Some(&common)))
        }
        Command::OperatorEval { common, u } => {
            let mut src = prepare(&common, Verb::OperatorEval)?;
            if let Some(u) = u {
                let e = ExprText::flag(&u, "u");
                match &mut src.config.operator {
                    Some(o) => o.u = e,
                    None => {
                        src.config.operator = Some(config::OperatorBlock {
                            u: e,
                            reference: None,
                            reference_tol: None,
                            error_max: None,
                            collar: None,
                        })
                    }
                }
            }
            Ok(execute(Verb::OperatorEval, &src, Some(&common)))
        }
        Command::Bernstein { common, variant, sigma, find_sigma, count } => {
            let mut src = prepare(&common, Verb::Bernstein)?;
            if let Some(v) = variant {
                match &mut src.config.bernstein {
                    Some(b) => b.variant = v,
                    None => {
                        let text = format!("[bernstein]\nvariant = {v:?}\n");
                        src.config.bernstein = config::parse(&text, "--variant")?.bernstein;
                    }
                }
            }
            if let Some(b) = &mut src.config.bernstein {
                if sigma.is_some() {
                    b.sigma = sigma;
                }
                if find_sigma {
                    b.sigma = None;
                }
                if let Some(c) = count {
                    match &mut b.ensemble {
                        Some(e) => e.count = c,
                        None => b.ensemble = Some(config::EnsembleBlock { count: c, kind: None, seed: None }),
                    }
                }
            }
            Ok(execute(Verb::Bernstein, &src, Some(&common)))
        }
        Command::Obstacle { common, obstacle, rhs, exterior, method, tol } => {
            let mut src = prepare(&common, Verb::Obstacle)?;
            if let Some(x) = exterior {
                let g = src
                    .config
                    .grid
                    .as_mut()
                    .ok_or_else(|| CliError::Precondition("--exterior needs a grid (--grid N)".into()))?;
                g.exterior = Some(ExprText::flag(&x, "exterior"));
            }
            if let Some(o) = obstacle {
                let e = ExprText::flag(&o, "obstacle");
                match &mut src.config.obstacle {
                    Some(b) => b.obstacle = e,
                    None => {
                        src.config.obstacle = Some(ObstacleBlock {
                            obstacle: e,
                            rhs: None,
                            method: None,
                            omega: None,
                            tol: None,
                            max_iter: None,
                            residual_max: None,
                            compare_methods: None,
                            agreement_max: None,
                            measure: None,
                        })
                    }
                }
            }
            if let Some(b) = &mut src.config.obstacle {
                if let Some(r) = rhs {
                    b.rhs = Some(ExprText::flag(&r, "rhs"));
                }
                if method.is_some() {
                    b.method = method;
                }
                if tol.is_some() {
                    b.tol = tol;
                }
            }
            Ok(execute(Verb::Obstacle, &src, Some(&common)))
        }
        Command::Bellman { common } => {
            let src = prepare(&common, Verb::Bellman)?;
            Ok(execute(Verb::Bellman, &src, Some(&common)))
        }
        Command::Parabolic { common, dt } => {
            let mut src = prepare(&common, Verb::Parabolic)?;
            if let (Some(dt), Some(p)) = (dt, &mut src.config.parabolic) {
                p.dt = dt;
            }
            Ok(execute(Verb::Parabolic, &src, Some(&common)))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 || rayon::ThreadPoolBuilder::new().num_threads(j).build_global().is_err() {
            eprintln!("nlb: invalid --jobs value");
            return ExitCode::from(3);
        }
    }
    if cli.list_variants {
        for (tag, formula) in nonlocal::bernstein::catalog() {
            emit(&format!("{tag:<24} {formula}\n"));
        }
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        eprintln!("nlb: no command given (see --help)");
        return ExitCode::from(3);
    };
    let code = dispatch(cmd).unwrap_or_else(|e| {
        eprintln!("nlb: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
