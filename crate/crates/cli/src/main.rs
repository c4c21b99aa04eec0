//! `sievei` command-line front end.
//!
//! Every option may also come from a flat `key=value` file given with
//! `--config`; keys are the long flag names without dashes, and flags on
//! the command line win. Exit codes: 0 success, 2 bad input or
//! configuration, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use sievei::basis::BasisTemplate;
use sievei::bootstrap::{
    bootstrap_score, bootstrap_sqlr, bootstrap_wald, BootOptions, BootstrapRun, WaldFlavor, WeightScheme,
};
use sievei::data_io::{load_dataset, write_table, write_table_to, Cell, Dataset, Schema, Table};
use sievei::exec::Execution;
use sievei::functionals::{Functional, FunctionalTemplate};
use sievei::inference::{invert_qlr_ci, invert_sqlr_ci, score_test, sqlr_test, wald_test, InferenceReport, Interval};
use sievei::mc::{
    h_grid, is_optimal, power_grid, qq_table, run_power_curve, run_size_experiment, run_variance_experiment, DgpKind,
    ExperimentConfig, SizeStat,
};
use sievei::models::{ModelTemplate, ResidualKind, Weighting};
use sievei::normal;
use sievei::psmd::{OptimConfig, SieveProblem};
use sievei::variance::{plugin_variances, slope_variance};

#[derive(Debug, Parser)]
#[command(
    name = "sievei",
    version,
    about = "Sieve minimum distance estimation and inference for NPIV / NPQIV models"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Flat key=value file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; output does not depend on it.
    #[arg(long, global = true, env = "SIEVEI_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate h and write coefficients, criterion and h on a grid.
    Fit(FitArgs),
    /// Test H0: phi(h) = null, optionally with bootstrap critical values.
    Test(TestArgs),
    /// Monte Carlo reproduction of the simulation designs.
    Mc(McArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Npiv,
    Npqiv,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelKind::Npiv)]
    model: ModelKind,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value = "pol:4")]
    qbasis: BasisTemplate,
    #[arg(long, default_value = "pol:6")]
    pbasis: BasisTemplate,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// `identity`, `sigma0`, or `known:C`; defaults to identity for NPIV and
    /// gamma (1 - gamma) for NPQIV.
    #[arg(long)]
    weighting: Option<String>,
    /// Use the tensor product over all instrument columns.
    #[arg(long)]
    tensor: bool,
    #[arg(long, default_value = "y1")]
    y1: String,
    #[arg(long, default_value = "y2")]
    y2: String,
    /// Comma-separated instrument columns.
    #[arg(long, default_value = "x")]
    x: String,
    /// Simplex restarts for nonsmooth models.
    #[arg(long, default_value_t = 5)]
    restarts: usize,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Grid points for the fitted h.
    #[arg(long, default_value_t = 101)]
    grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stat {
    Wald,
    Sqlr,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Boot {
    None,
    Iid,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VarianceChoice {
    V1,
    V2,
    Slope,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `eval:Y`, `expeval:Y`, `wderiv`, `quad` or `curv`.
    #[arg(long, default_value = "eval:0")]
    functional: FunctionalTemplate,
    #[arg(long)]
    null: Option<f64>,
    #[arg(long, value_enum, default_value_t = Stat::Sqlr)]
    stat: Stat,
    #[arg(long, value_enum, default_value_t = Boot::None)]
    boot: Boot,
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    /// Variance estimator for the Wald statistic.
    #[arg(long, value_enum, default_value_t = VarianceChoice::V1)]
    variance: VarianceChoice,
    /// Confidence level of the reported confidence set.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Also invert the statistic into a confidence set (Wald and SQLR).
    #[arg(long)]
    ci: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Design {
    NpqivSqlr,
    NpivVe,
    NpivVeNonlinear,
    Power,
}

#[derive(Debug, Args)]
struct McArgs {
    #[arg(long, value_enum)]
    design: Option<Design>,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 750)]
    n: usize,
    /// Bootstrap draws (power design, or `--boot` on npqiv-sqlr).
    #[arg(long = "B", default_value_t = 200)]
    b: usize,
    #[arg(long, value_enum, default_value_t = Boot::None)]
    boot: Boot,
    /// Overrides the design's basis and penalty.
    #[arg(long)]
    qbasis: Option<BasisTemplate>,
    #[arg(long)]
    pbasis: Option<BasisTemplate>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Replications for the reference variance in the variance designs.
    #[arg(long, default_value_t = 5000)]
    reference_reps: usize,
    /// Points on the power grid over [0, 8/sqrt(n)].
    #[arg(long, default_value_t = 5)]
    points: usize,
    /// Extra CSV with QQ-plot data of the t statistics (variance designs).
    #[arg(long)]
    qq: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
}

/// Failure classes that map to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<sievei::Error> for Failure {
    fn from(e: sievei::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Options that take a value before the subcommand name.
const GLOBAL_VALUED: [&str; 4] = ["--config", "--threads", "--seed", "--out"];

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a.starts_with('-') {
            i += if GLOBAL_VALUED.contains(&a.as_ref()) { 2 } else { 1 };
        } else {
            return Some(i);
        }
    }
    None
}

fn parse_config(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Known long names for a subcommand, globals included.
fn known_keys(sub: &str) -> Vec<(String, bool)> {
    let cmd = Cli::command();
    let mut keys: Vec<(String, bool)> = Vec::new();
    let mut add = |c: &clap::Command| {
        for a in c.get_arguments() {
            if let Some(l) = a.get_long() {
                keys.push((l.to_string(), !a.get_action().takes_values()));
            }
        }
    };
    add(&cmd);
    if let Some(s) = cmd.find_subcommand(sub) {
        add(s);
    }
    keys
}

/// Splices config values in front of the user's own flags so the latter
/// override them.
fn merged_args(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(sub_at) = subcommand_index(&args) else {
        return Ok(args);
    };
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 2;
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
            i += 1;
        } else {
            i += 1;
        }
    }
    let Some(config) = config else {
        return Ok(args);
    };
    let sub = args[sub_at].to_string_lossy().to_string();
    let keys = known_keys(&sub);
    let mut injected = Vec::new();
    for (k, v) in parse_config(&config)? {
        let Some((_, is_flag)) = keys.iter().find(|(name, _)| *name == k) else {
            return Err(Failure::Usage(format!("unknown config key `{k}` for `{sub}`")));
        };
        if k == "config" {
            return Err(Failure::Usage("config files cannot include other config files".into()));
        }
        if *is_flag {
            match v.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{k}"))),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(Failure::Usage(format!(
                        "config key `{k}` expects true or false, got `{v}`"
                    )))
                }
            }
        } else {
            injected.push(OsString::from(format!("--{k}={v}")));
        }
    }
    let mut out: Vec<OsString> = args[..=sub_at].to_vec();
    out.extend(injected);
    out.extend(args[sub_at + 1..].iter().cloned());
    Ok(out)
}

fn usage_error(sub: &str, msg: &str) -> Failure {
    let mut cmd = Cli::command();
    cmd.build();
    let usage = cmd
        .find_subcommand_mut(sub)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    Failure::Usage(format!("{msg}\n\n{usage}"))
}

fn weighting(m: &ModelArgs, kind: ResidualKind) -> CliResult<Weighting> {
    let w = match m.weighting.as_deref() {
        None => match kind {
            ResidualKind::Npiv => Weighting::Identity,
            ResidualKind::Npqiv { gamma } => Weighting::KnownScalar(gamma * (1.0 - gamma)),
        },
        Some("identity") => Weighting::Identity,
        Some("sigma0") => Weighting::SeriesSigma0,
        Some(other) => match other.strip_prefix("known:").map(str::parse::<f64>) {
            Some(Ok(c)) if c > 0.0 => Weighting::KnownScalar(c),
            _ => {
                return Err(Failure::Usage(format!(
                    "bad weighting `{other}`; use identity, sigma0 or known:C"
                )))
            }
        },
    };
    Ok(w)
}

fn model_template(m: &ModelArgs) -> CliResult<ModelTemplate> {
    let kind = match m.model {
        ModelKind::Npiv => ResidualKind::Npiv,
        ModelKind::Npqiv => ResidualKind::Npqiv { gamma: m.gamma },
    };
    if !(m.lambda >= 0.0) {
        return Err(Failure::Usage(format!("lambda must be non-negative, got {}", m.lambda)));
    }
    Ok(ModelTemplate {
        kind,
        qbasis: m.qbasis,
        pbasis: m.pbasis,
        lambda: m.lambda,
        weighting: weighting(m, kind)?,
        tensor: m.tensor,
    })
}

fn load(m: &ModelArgs, sub: &str) -> CliResult<Dataset> {
    let path = m.data.as_ref().ok_or_else(|| usage_error(sub, "missing --data"))?;
    let schema = Schema {
        y1: m.y1.clone(),
        y2: m.y2.clone(),
        x: m.x.split(',').map(|s| s.trim().to_string()).collect(),
    };
    Ok(load_dataset(path, &schema)?)
}

fn optim(restarts: usize, seed: u64) -> OptimConfig {
    OptimConfig {
        restarts,
        seed,
        ..Default::default()
    }
}

fn emit(table: &Table, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => write_table(table, p)?,
        None => write_table_to(table, std::io::stdout().lock())?,
    }
    Ok(())
}

fn text(s: impl Into<String>) -> Cell {
    Cell::Text(s.into())
}

fn opt_num(v: Option<f64>) -> Cell {
    v.map_or_else(|| text(""), Cell::Num)
}

fn cmd_fit(cli: &Cli, args: &FitArgs) -> CliResult<()> {
    let data = load(&args.model, "fit")?;
    let spec = model_template(&args.model)?.instantiate(&data)?;
    let problem = SieveProblem::new(&spec, &data)?;
    let fit = problem.fit(&optim(args.model.restarts, cli.seed), None, None)?;
    let mut t = Table::new(["field", "index", "y", "value"]);
    let mut scalar = |name: &str, v: Cell| t.push(vec![text(name), text(""), text(""), v]);
    scalar("qhat", Cell::Num(fit.qhat))?;
    scalar("penalized", Cell::Num(fit.penalized_value))?;
    scalar("lambda", Cell::Num(spec.lambda))?;
    scalar("n", Cell::Num(data.n() as f64))?;
    scalar("converged", text(fit.converged.to_string()))?;
    scalar("iterations", Cell::Num(fit.iterations as f64))?;
    scalar("method", text(format!("{:?}", fit.method).to_lowercase()))?;
    for (i, b) in fit.beta.iter().enumerate() {
        t.push(vec![text("beta"), Cell::Num(i as f64), text(""), Cell::Num(*b)])?;
    }
    for (i, (y, h)) in h_grid(&spec, &fit.beta, args.grid)?.into_iter().enumerate() {
        t.push(vec![text("h"), Cell::Num(i as f64), Cell::Num(y), Cell::Num(h)])?;
    }
    emit(&t, cli.out.as_deref())
}

fn boot_options(boot: Boot, b: usize, seed: u64) -> Option<BootOptions> {
    let scheme = match boot {
        Boot::None => return None,
        Boot::Iid => WeightScheme::IidExponential,
        Boot::Multinomial => WeightScheme::Multinomial,
    };
    Some(BootOptions {
        scheme,
        replications: b,
        seed,
        exec: Execution::Parallel,
    })
}

/// Share of bootstrap draws at least as extreme as `stat`.
fn boot_pvalue(run: &BootstrapRun, stat: f64, two_sided: bool) -> f64 {
    let draws = run.sorted();
    let hits = draws
        .iter()
        .filter(|v| if two_sided { v.abs() >= stat.abs() } else { **v >= stat })
        .count();
    hits as f64 / draws.len() as f64
}

fn cmd_test(cli: &Cli, args: &TestArgs) -> CliResult<()> {
    let data = load(&args.model, "test")?;
    let null = args.null.ok_or_else(|| usage_error("test", "missing --null"))?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::Usage(format!("level {} outside (0, 1)", args.level)));
    }
    if args.boot != Boot::None && args.b < 2 {
        return Err(Failure::Usage("--B must be at least 2".into()));
    }
    let spec = model_template(&args.model)?.instantiate(&data)?;
    let problem = SieveProblem::new(&spec, &data)?;
    let functional: Functional = args.functional.resolve(data.y2());
    let config = optim(args.model.restarts, cli.seed);
    let mut fit = problem.fit(&config, None, None)?;
    let restricted = match args.stat {
        Stat::Sqlr | Stat::Score => {
            let r = problem.fit_restricted(&functional, null, &config, None, Some(&fit.beta))?;
            if r.penalized_value < fit.penalized_value {
                // the restricted search found a deeper basin of a nonsmooth criterion
                log::info!("restarting the unrestricted fit from the restricted solution");
                fit = problem.fit(&config, None, Some(&r.beta))?;
            }
            Some(r)
        }
        Stat::Wald => None,
    };
    let phi_hat = functional.value(&spec.qbasis, &fit.beta)?;
    let boot = boot_options(args.boot, args.b, cli.seed);
    let n = data.n();
    let mut boot_crit = None;

    let report: InferenceReport = match args.stat {
        Stat::Wald => {
            let v = match args.variance {
                VarianceChoice::V1 => plugin_variances(&problem, &fit.beta, &functional)?.v1,
                VarianceChoice::V2 => plugin_variances(&problem, &fit.beta, &functional)?.v2,
                VarianceChoice::Slope => slope_variance(&problem, &fit, &functional, None, &config)?,
            };
            let mut r = wald_test(phi_hat, null, v, n, args.level)?;
            if let Some(b) = &boot {
                let run = bootstrap_wald(&problem, &fit, &functional, v, WaldFlavor::W1, b, &config)?;
                let c = run.abs_critical_value(args.level);
                let se = (v / n as f64).sqrt();
                r.pvalue = Some(boot_pvalue(&run, r.statistic, true));
                r.ci = Some(Interval::new(phi_hat - c * se, phi_hat + c * se));
                boot_crit = Some(c);
            }
            if !args.ci {
                r.ci = None;
            }
            r
        }
        Stat::Sqlr => {
            let restricted = restricted.expect("fitted above");
            let optimal = is_optimal(&spec);
            let mut r = sqlr_test(&fit, &restricted, n, optimal)?;
            r.estimate = Some(phi_hat);
            match &boot {
                Some(b) => {
                    let run = bootstrap_sqlr(&problem, &fit, &functional, b, &config)?;
                    let c = run.critical_value(args.level);
                    r.pvalue = Some(boot_pvalue(&run, r.statistic, false));
                    if args.ci {
                        r.ci = Some(invert_qlr_ci(&problem, &fit, &functional, c, &config)?);
                    }
                    boot_crit = Some(c);
                }
                None if args.ci => {
                    if !optimal {
                        return Err(Failure::Usage(
                            "chi-square confidence sets need the optimal weighting; add --boot".into(),
                        ));
                    }
                    r.ci = Some(invert_sqlr_ci(&problem, &fit, &functional, args.level, &config)?);
                }
                None => {}
            }
            r
        }
        Stat::Score => {
            let restricted = restricted.expect("fitted above");
            let mut r = score_test(&problem, &restricted, &functional)?;
            r.estimate = Some(phi_hat);
            if let Some(b) = &boot {
                let run = bootstrap_score(&problem, &restricted, &functional, b)?;
                r.pvalue = Some(boot_pvalue(&run, r.statistic, true));
                boot_crit = Some(run.abs_critical_value(args.level));
            }
            r
        }
    };

    let mut t = Table::new([
        "method",
        "null",
        "estimate",
        "statistic",
        "pvalue",
        "variance",
        "df",
        "boot",
        "B",
        "boot_critical",
        "level",
        "ci_lo",
        "ci_hi",
        "n",
        "chi2_critical",
    ]);
    let (lo, hi) = match report.ci {
        Some(ci) => (
            if ci.unbounded_lo {
                Cell::Num(f64::NEG_INFINITY)
            } else {
                Cell::Num(ci.lo)
            },
            if ci.unbounded_hi {
                Cell::Num(f64::INFINITY)
            } else {
                Cell::Num(ci.hi)
            },
        ),
        None => (text(""), text("")),
    };
    t.push(vec![
        text(report.method.to_string()),
        Cell::Num(null),
        opt_num(report.estimate),
        Cell::Num(report.statistic),
        opt_num(report.pvalue),
        opt_num(report.variance),
        Cell::Num(report.df as f64),
        text(format!("{:?}", args.boot).to_lowercase()),
        Cell::Num(if boot.is_some() { args.b as f64 } else { 0.0 }),
        opt_num(boot_crit),
        Cell::Num(args.level),
        lo,
        hi,
        Cell::Num(n as f64),
        Cell::Num(normal::chi2_1_quantile(args.level)),
    ])?;
    emit(&t, cli.out.as_deref())
}

fn cmd_mc(cli: &Cli, args: &McArgs) -> CliResult<()> {
    let design = args.design.ok_or_else(|| usage_error("mc", "missing --design"))?;
    let npqiv = ResidualKind::Npqiv { gamma: 0.5 };
    let (dgp, mut model, functional, phi0) = match design {
        Design::NpqivSqlr | Design::Power => (
            DgpKind::Npqiv { gamma: 0.5 },
            ModelTemplate {
                kind: npqiv,
                qbasis: BasisTemplate::Pol(4),
                pbasis: BasisTemplate::Pol(7),
                lambda: 2e-4,
                weighting: Weighting::KnownScalar(0.25),
                tensor: false,
            },
            Functional::point_eval(0.0),
            0.0,
        ),
        Design::NpivVe | Design::NpivVeNonlinear => {
            let nonlinear = design == Design::NpivVeNonlinear;
            (
                DgpKind::Npiv,
                ModelTemplate {
                    kind: ResidualKind::Npiv,
                    qbasis: BasisTemplate::Pol(4),
                    pbasis: BasisTemplate::Pol(if nonlinear { 6 } else { 16 }),
                    lambda: 1e-5,
                    weighting: Weighting::Identity,
                    tensor: false,
                },
                if nonlinear {
                    Functional::exp_point_eval(0.0)
                } else {
                    Functional::point_eval(0.0)
                },
                if nonlinear { 1.0 } else { 0.0 },
            )
        }
    };
    model.qbasis = args.qbasis.unwrap_or(model.qbasis);
    model.pbasis = args.pbasis.unwrap_or(model.pbasis);
    model.lambda = args.lambda.unwrap_or(model.lambda);
    let boot = match design {
        Design::Power => boot_options(
            if args.boot == Boot::None {
                Boot::Multinomial
            } else {
                args.boot
            },
            args.b,
            cli.seed,
        ),
        Design::NpqivSqlr => boot_options(args.boot, args.b, cli.seed),
        _ => None,
    }
    .map(|b| BootOptions {
        seed: b.seed ^ 0xb007,
        ..b
    });
    let cfg = ExperimentConfig {
        dgp,
        n: args.n,
        reps: args.reps,
        seed: cli.seed,
        model,
        functional,
        phi0,
        levels: vec![0.10, 0.05, 0.01],
        optim: optim(args.restarts, cli.seed),
        boot,
        // bootstrap refits start at the estimate; a lighter search suffices
        boot_optim: Some(OptimConfig {
            restarts: 0,
            xtol: 1e-6,
            ftol: 1e-8,
            smooth_start: false,
            seed: cli.seed,
            ..Default::default()
        }),
        exec: Execution::Parallel,
    };
    let table = match design {
        Design::NpqivSqlr => run_size_experiment(&cfg, SizeStat::Sqlr)?.to_table(&cfg.model),
        Design::NpivVe | Design::NpivVeNonlinear => {
            let res = run_variance_experiment(&cfg, args.reference_reps)?;
            if let Some(path) = &args.qq {
                write_table(&qq_table(&res.t1, &res.t2), path)?;
            }
            res.to_table(&cfg.model)
        }
        Design::Power => run_power_curve(&cfg, &power_grid(args.n, args.points, 8.0))?.to_table(args.n),
    };
    emit(&table, cli.out.as_deref())
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

fn run(args: Vec<OsString>) -> CliResult<()> {
    let args = merged_args(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Failure::Usage(e.render().to_string()));
        }
    };
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(&cli, a),
        Command::Test(a) => cmd_test(&cli, a),
        Command::Mc(a) => cmd_mc(&cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg.trim_start_matches("error: "));
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
