//! Command-line front end for the score-density library.
//!
//! Every subcommand resolves its full configuration up front (model,
//! schedule, seed, sample counts), stamps that resolved configuration
//! into the output header, and then runs the mapped library operation.
//! Given the same arguments the output is bit-identical across runs and
//! thread counts.
//!
//! Exit codes: `0` success, `1` selftest failures, `2` validation or
//! usage errors, `3` numeric/convergence errors.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use score_density::classifier::{classify, posterior_from_scores};
use score_density::density::{
    claim1_check, claim2_check, discrete_constant, limit_at_one, limit_at_zero,
    log_density_discrete, log_density_smoothed, ode_log_density, smoothed_constant,
    stein_diagnostic, theorem1_check, Predictor, DEFAULT_QUAD_NODES,
};
use score_density::elbo::{elbo_total, kl_gaussian};
use score_density::gan::{solve_equilibrium, verify_nash, DEFAULT_GAN_NODES};
use score_density::sampler::{gaussian_reverse_moments, reverse_sample, ScoreSource};
use score_density::{
    build_schedule, custom_schedule, Error, GaussianMixture, LabeledFamily, McConfig, Schedule,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "score-density",
    version,
    about = "Score-based log-density evaluation on Gaussian mixture targets",
    after_help = "Models and schedules are JSON files; omit --model for the \
                  standard normal in one dimension. Outputs carry a header \
                  with the resolved configuration so runs can be reproduced \
                  bit for bit."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Mixture model file (JSON); defaults to the 1D standard normal.
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    /// Labeled family file (JSON) for classification; defaults to two
    /// unit-variance classes at ±2 with uniform priors.
    #[arg(long, global = true)]
    family: Option<PathBuf>,

    /// Schedule file (JSON) taking precedence over --T/--c0/--c1.
    #[arg(long, global = true)]
    schedule: Option<PathBuf>,

    /// Number of discretization steps for the built-in schedule family.
    #[arg(long = "T", global = true, default_value_t = 1000)]
    steps: usize,

    /// Shape parameter c0 of the schedule family (beta_1 = T^-c0).
    #[arg(long, global = true, default_value_t = 2.0)]
    c0: f64,

    /// Shape parameter c1 of the schedule family (rate ceiling c1 ln T / T).
    #[arg(long, global = true, default_value_t = 2.0)]
    c1: f64,

    /// Evaluation point as comma-separated coordinates; defaults to the origin.
    #[arg(long, global = true)]
    point: Option<String>,

    /// Base RNG seed; all substreams derive from it deterministically.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Monte Carlo draws per expectation (particles for `sample`).
    #[arg(long, global = true, default_value_t = 10_000)]
    samples: usize,

    /// Disable antithetic pairing of the Gaussian draws.
    #[arg(long, global = true)]
    no_antithetic: bool,

    /// Regularization strength for the equilibrium subcommand.
    #[arg(long, global = true, default_value_t = 1.0)]
    lambda: f64,

    /// Endpoint cutoff for the smoothed and flow-based evaluations.
    #[arg(long, global = true, default_value_t = 1e-3)]
    delta: f64,

    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format: structured report or per-step table.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Cap the rayon thread pool (default: all cores). Results do not
    /// depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved schedule with per-step coefficients.
    Schedule,
    /// Evaluate the log-density at a point.
    Density {
        /// Evaluation route: the discrete identity, the smoothed
        /// integral, or the deterministic probability flow.
        #[arg(long, value_enum, default_value_t = Method::Discrete)]
        method: Method,
    },
    /// Check the time-difference identity between two interior times.
    Theorem1 {
        #[arg(long, default_value_t = 0.2)]
        t1: f64,
        #[arg(long, default_value_t = 0.6)]
        t2: f64,
    },
    /// Evaluate the expected log-density near both endpoints.
    Limits,
    /// Evaluate the weighted bound with reconstruction and terminal terms.
    Elbo,
    /// Classify a point against a labeled family.
    Classify,
    /// Solve the regularized equilibrium and verify it.
    Gan,
    /// Run the reverse sampler and report moments.
    Sample,
    /// Check the closed-form score identities at the evaluation point.
    Identities,
    /// Run the fast closed-form self checks (no heavy Monte Carlo).
    Selftest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Discrete,
    Smoothed,
    Ode,
}

/// Everything a run depends on, recorded into the output header.
struct Resolved {
    command: &'static str,
    model: GaussianMixture,
    model_source: String,
    schedule: Schedule,
    schedule_source: serde_json::Value,
    point: Vec<f64>,
    cfg: McConfig,
    extra: serde_json::Map<String, serde_json::Value>,
}

impl Resolved {
    fn header(&self) -> serde_json::Value {
        let mut config = serde_json::Map::new();
        config.insert("model".into(), json!(self.model_source));
        config.insert("schedule".into(), self.schedule_source.clone());
        config.insert("point".into(), json!(self.point));
        config.insert("samples".into(), json!(self.cfg.n_samples));
        config.insert("antithetic".into(), json!(self.cfg.antithetic));
        config.insert("stream_id".into(), json!(self.cfg.stream_id));
        for (k, v) in &self.extra {
            config.insert(k.clone(), v.clone());
        }
        json!({
            "version": VERSION,
            "command": self.command,
            "seed": self.cfg.seed,
            "config": serde_json::Value::Object(config),
        })
    }
}

fn parse_point(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("invalid coordinate {s:?} in --point"))
        })
        .collect()
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf, what: &str) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} file {}", path.display()))
}

fn resolve(cli: &Cli, command: &'static str) -> anyhow::Result<Resolved> {
    let (model, model_source) = match &cli.model {
        Some(path) => (
            load_json::<GaussianMixture>(path, "model")?,
            path.display().to_string(),
        ),
        None => (
            GaussianMixture::standard_normal(1),
            "standard_normal(d=1)".to_string(),
        ),
    };
    let (schedule, schedule_source) = match &cli.schedule {
        Some(path) => (
            load_json::<Schedule>(path, "schedule")?,
            json!(path.display().to_string()),
        ),
        None => (
            build_schedule(cli.steps, cli.c0, cli.c1)?,
            json!({"T": cli.steps, "c0": cli.c0, "c1": cli.c1}),
        ),
    };
    let point = match &cli.point {
        Some(text) => parse_point(text)?,
        None => vec![0.0; model.dim()],
    };
    let mut cfg = McConfig::new(cli.samples, cli.seed);
    if cli.no_antithetic {
        cfg = cfg.without_antithetic();
    }
    Ok(Resolved {
        command,
        model,
        model_source,
        schedule,
        schedule_source,
        point,
        cfg,
        extra: serde_json::Map::new(),
    })
}

fn default_family() -> LabeledFamily {
    let neg = GaussianMixture::mixture_1d(&[(1.0, -2.0, 1.0)]).expect("valid class");
    let pos = GaussianMixture::mixture_1d(&[(1.0, 2.0, 1.0)]).expect("valid class");
    LabeledFamily::new(vec![("neg".into(), neg, None), ("pos".into(), pos, None)])
        .expect("valid family")
}

/// One table row of a CSV payload: column names plus stringified cells.
struct Table {
    columns: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    /// Extra `# key=value` comment lines after the header (totals).
    footer: Vec<String>,
}

fn render_csv(header: &serde_json::Value, table: &Table) -> String {
    let mut out = format!("# {header}\n");
    for line in &table.footer {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&table.columns.join(","));
    out.push('\n');
    for row in &table.rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn render_json(header: &serde_json::Value, payload: serde_json::Value) -> String {
    let mut doc = header.as_object().cloned().unwrap_or_default();
    doc.insert("payload".into(), payload);
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))
        .expect("serializable report");
    text.push('\n');
    text
}

fn emit(out: &Option<PathBuf>, text: String) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing output file {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Renders a serializable report either as the JSON payload or through
/// the given table builder.
fn deliver<P: Serialize>(
    cli: &Cli,
    resolved: &Resolved,
    payload: &P,
    table: impl FnOnce(&P) -> Table,
) -> anyhow::Result<()> {
    let header = resolved.header();
    let text = match cli.format {
        Format::Json => render_json(&header, serde_json::to_value(payload)?),
        Format::Csv => render_csv(&header, &table(payload)),
    };
    emit(&cli.out, text)
}

fn fmt(v: f64) -> String {
    // Shortest-roundtrip formatting keeps CSV cells exact and reruns
    // bit-identical.
    format!("{v}")
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Parameter("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the thread pool")?;
    }
    match &cli.command {
        Command::Schedule => cmd_schedule(cli),
        Command::Density { method } => cmd_density(cli, *method),
        Command::Theorem1 { t1, t2 } => cmd_theorem1(cli, *t1, *t2),
        Command::Limits => cmd_limits(cli),
        Command::Elbo => cmd_elbo(cli),
        Command::Classify => cmd_classify(cli),
        Command::Gan => cmd_gan(cli),
        Command::Sample => cmd_sample(cli),
        Command::Identities => cmd_identities(cli),
        Command::Selftest => return cmd_selftest(),
    }?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct ScheduleRow {
    t_index: usize,
    beta: f64,
    alpha: f64,
    alpha_bar: f64,
    t_grid: f64,
    elbo_coefficient: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    vlb_coefficient: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap_bound: Option<f64>,
}

#[derive(Serialize)]
struct ScheduleReport {
    num_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    family: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate_ceiling: Option<f64>,
    steps: Vec<ScheduleRow>,
}

fn cmd_schedule(cli: &Cli) -> anyhow::Result<()> {
    let resolved = resolve(cli, "schedule")?;
    let s = &resolved.schedule;
    let steps = (1..=s.num_steps())
        .map(|t| -> anyhow::Result<ScheduleRow> {
            let gap = if t >= 2 { Some(s.coefficient_gap(t)?) } else { None };
            Ok(ScheduleRow {
                t_index: t,
                beta: s.beta(t),
                alpha: s.alpha(t),
                alpha_bar: s.alpha_bar(t),
                t_grid: s.t_grid(t),
                elbo_coefficient: s.elbo_coefficient(t),
                vlb_coefficient: gap.as_ref().map(|g| g.vlb),
                gap_bound: gap.as_ref().and_then(|g| g.bound),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = ScheduleReport {
        num_steps: s.num_steps(),
        family: s.family(),
        rate_ceiling: s.rate_ceiling(),
        steps,
    };
    deliver(cli, &resolved, &report, |r| Table {
        columns: vec![
            "t_index",
            "beta",
            "alpha",
            "alpha_bar",
            "t_grid",
            "elbo_coefficient",
            "vlb_coefficient",
            "gap_bound",
        ],
        rows: r
            .steps
            .iter()
            .map(|row| {
                vec![
                    row.t_index.to_string(),
                    fmt(row.beta),
                    fmt(row.alpha),
                    fmt(row.alpha_bar),
                    fmt(row.t_grid),
                    fmt(row.elbo_coefficient),
                    row.vlb_coefficient.map(fmt).unwrap_or_default(),
                    row.gap_bound.map(fmt).unwrap_or_default(),
                ]
            })
            .collect(),
        footer: Vec::new(),
    })
}

fn step_table(report: &score_density::density::DensityReport) -> Table {
    Table {
        columns: vec!["t_index", "t", "coefficient", "mean", "std_error"],
        rows: report
            .steps
            .iter()
            .map(|s| {
                vec![
                    s.t_index.map(|i| i.to_string()).unwrap_or_default(),
                    fmt(s.t),
                    fmt(s.coefficient),
                    fmt(s.term.mean),
                    fmt(s.term.std_error),
                ]
            })
            .collect(),
        footer: vec![
            format!("constant={}", report.constant),
            format!("total={}", report.total),
            format!("total_std_error={}", report.total_std_error),
        ],
    }
}

fn cmd_density(cli: &Cli, method: Method) -> anyhow::Result<()> {
    let mut resolved = resolve(cli, "density")?;
    let method_name = match method {
        Method::Discrete => "discrete",
        Method::Smoothed => "smoothed",
        Method::Ode => "ode",
    };
    resolved.extra.insert("method".into(), json!(method_name));
    match method {
        Method::Discrete => {
            let report = log_density_discrete(
                &resolved.model,
                &resolved.schedule,
                &resolved.point,
                &Predictor::Exact,
                &resolved.cfg,
            )?;
            deliver(cli, &resolved, &report, step_table)
        }
        Method::Smoothed => {
            resolved.extra.insert("delta".into(), json!(cli.delta));
            resolved
                .extra
                .insert("nodes".into(), json!(DEFAULT_QUAD_NODES));
            let report = log_density_smoothed(
                &resolved.model,
                &resolved.point,
                cli.delta,
                DEFAULT_QUAD_NODES,
                &resolved.cfg,
            )?;
            deliver(cli, &resolved, &report, step_table)
        }
        Method::Ode => {
            resolved.extra.insert("delta".into(), json!(cli.delta));
            resolved.extra.insert("n_steps".into(), json!(cli.steps));
            let report = ode_log_density(&resolved.model, &resolved.point, cli.steps, cli.delta)?;
            deliver(cli, &resolved, &report, |r| Table {
                columns: vec!["total", "x_end"],
                rows: vec![vec![
                    fmt(r.total),
                    r.x_end
                        .iter()
                        .map(|v| fmt(*v))
                        .collect::<Vec<_>>()
                        .join(";"),
                ]],
                footer: Vec::new(),
            })
        }
    }
}

fn cmd_theorem1(cli: &Cli, t1: f64, t2: f64) -> anyhow::Result<()> {
    let mut resolved = resolve(cli, "theorem1")?;
    resolved.extra.insert("t1".into(), json!(t1));
    resolved.extra.insert("t2".into(), json!(t2));
    resolved.extra.insert("quad_nodes".into(), json!(64));
    resolved.extra.insert("shared_noise".into(), json!(true));
    let check = theorem1_check(
        &resolved.model,
        &resolved.point,
        t1,
        t2,
        64,
        true,
        &resolved.cfg,
    )?;
    deliver(cli, &resolved, &check, |c| Table {
        columns: vec!["lhs", "lhs_std_error", "rhs", "rhs_std_error", "gap"],
        rows: vec![vec![
            fmt(c.lhs.mean),
            fmt(c.lhs.std_error),
            fmt(c.rhs),
            fmt(c.rhs_std_error),
            fmt(c.gap),
        ]],
        footer: Vec::new(),
    })
}

#[derive(Serialize)]
struct LimitReport {
    t: f64,
    estimate: score_density::McEstimate,
    target: f64,
    abs_error: f64,
}

fn cmd_limits(cli: &Cli) -> anyhow::Result<()> {
    let mut resolved = resolve(cli, "limits")?;
    let (t_hi, t_lo) = (1.0 - 1e-4, 1e-4);
    resolved.extra.insert("t_near_one".into(), json!(t_hi));
    resolved.extra.insert("t_near_zero".into(), json!(t_lo));
    let dim = resolved.model.dim() as f64;
    let at_one = limit_at_one(&resolved.model, &resolved.point, t_hi, &resolved.cfg)?;
    let entropy_target = -(1.0 + (2.0 * std::f64::consts::PI).ln()) * dim / 2.0;
    let at_zero = limit_at_zero(
        &resolved.model,
        &resolved.point,
        t_lo,
        &resolved.cfg.with_stream(resolved.cfg.stream_id + 1),
    )?;
    let density_target = resolved.model.log_density0(&resolved.point)?;
    let payload = vec![
        LimitReport {
            t: t_hi,
            abs_error: (at_one.mean - entropy_target).abs(),
            estimate: at_one,
            target: entropy_target,
        },
        LimitReport {
            t: t_lo,
            abs_error: (at_zero.mean - density_target).abs(),
            estimate: at_zero,
            target: density_target,
        },
    ];
    deliver(cli, &resolved, &payload, |rows| Table {
        columns: vec!["t", "estimate", "std_error", "target", "abs_error"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    fmt(r.t),
                    fmt(r.estimate.mean),
                    fmt(r.estimate.std_error),
                    fmt(r.target),
                    fmt(r.abs_error),
                ]
            })
            .collect(),
        footer: Vec::new(),
    })
}

fn cmd_elbo(cli: &Cli) -> anyhow::Result<()> {
    let resolved = resolve(cli, "elbo")?;
    let report = elbo_total(
        &resolved.model,
        &resolved.schedule,
        &resolved.point,
        &Predictor::Exact,
        &resolved.cfg,
    )?;
    deliver(cli, &resolved, &report, |r| Table {
        columns: vec!["t_index", "t", "coefficient", "mean", "std_error"],
        rows: r
            .terms
            .iter()
            .map(|s| {
                vec![
                    s.t_index.map(|i| i.to_string()).unwrap_or_default(),
                    fmt(s.t),
                    fmt(s.coefficient),
                    fmt(s.term.mean),
                    fmt(s.term.std_error),
                ]
            })
            .collect(),
        footer: vec![
            format!("total_l={}", r.total_l),
            format!("total_std_error={}", r.total_std_error),
            format!("c0_term={}", r.c0_term.mean),
            format!("lt_term={}", r.lt_term),
            format!("constant={}", r.constant),
        ],
    })
}

fn cmd_classify(cli: &Cli) -> anyhow::Result<()> {
    let mut resolved = resolve(cli, "classify")?;
    let (family, family_source) = match &cli.family {
        Some(path) => (
            load_json::<LabeledFamily>(path, "family")?,
            path.display().to_string(),
        ),
        None => (default_family(), "two_classes(±2, var 1)".to_string()),
    };
    resolved.extra.insert("family".into(), json!(family_source));
    if resolved.point.len() != family.dim() {
        return Err(Error::Dimension {
            expected: family.dim(),
            got: resolved.point.len(),
        }
        .into());
    }
    let report = classify(&family, &resolved.schedule, &resolved.point, &resolved.cfg)?;
    deliver(cli, &resolved, &report, |r| Table {
        columns: vec!["label", "score", "std_error", "posterior", "bayes_posterior"],
        rows: r
            .scores
            .iter()
            .zip(r.posterior.iter().zip(&r.bayes_posterior))
            .map(|(s, (p, b))| {
                vec![
                    s.label.clone(),
                    fmt(s.score),
                    fmt(s.std_error),
                    fmt(*p),
                    fmt(*b),
                ]
            })
            .collect(),
        footer: vec![format!("tv_distance={}", r.tv_distance)],
    })
}

#[derive(Serialize)]
struct GanReport {
    solution: score_density::gan::EquilibriumSolution,
    nash: score_density::gan::NashCheck,
}

fn cmd_gan(cli: &Cli) -> anyhow::Result<()> {
    let mut resolved = resolve(cli, "gan")?;
    resolved.extra.insert("lambda".into(), json!(cli.lambda));
    resolved
        .extra
        .insert("n_nodes".into(), json!(DEFAULT_GAN_NODES));
    let solution = solve_equilibrium(&resolved.model, cli.lambda, DEFAULT_GAN_NODES)?;
    let probes: Vec<f64> = (0..61).map(|i| -6.0 + i as f64 * 0.2).collect();
    let nash = verify_nash(&solution, &resolved.schedule, &probes)?;
    let report = GanReport { solution, nash };
    deliver(cli, &resolved, &report, |r| Table {
        columns: vec!["x", "value", "expected", "deviation"],
        rows: r
            .nash
            .points
            .iter()
            .map(|p| {
                vec![
                    fmt(p.x),
                    fmt(p.value),
                    fmt(r.nash.expected),
                    fmt(p.value - r.nash.expected),
                ]
            })
            .collect(),
        footer: vec![
            format!("lambda={}", r.solution.lambda),
            format!("z={}", r.solution.z),
            format!("mass={}", r.solution.mass),
            format!("range={}", r.nash.range),
        ],
    })
}

fn cmd_sample(cli: &Cli) -> anyhow::Result<()> {
    let resolved = resolve(cli, "sample")?;
    let run = reverse_sample(
        &resolved.model,
        &resolved.schedule,
        ScoreSource::Exact,
        resolved.cfg.n_samples,
        resolved.cfg.seed,
    )?;
    deliver(cli, &resolved, &run, |r| {
        let dim = r.samples.first().map(|s| s.len()).unwrap_or(0);
        Table {
            columns: vec!["particle", "coordinates"],
            rows: r
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    vec![
                        i.to_string(),
                        s.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(";"),
                    ]
                })
                .collect(),
            footer: vec![format!("dim={dim}"), format!("particles={}", r.samples.len())],
        }
    })
}

#[derive(Serialize)]
struct IdentityProbe {
    t: f64,
    trace_lhs: f64,
    trace_rhs: f64,
    trace_lower_bound: f64,
    path_analytic: f64,
    path_finite_difference: f64,
    tweedie_max_abs: f64,
}

#[derive(Serialize)]
struct IdentitiesReport {
    probes: Vec<IdentityProbe>,
    stein_lhs: score_density::McEstimate,
    stein_rhs: score_density::McEstimate,
}

fn cmd_identities(cli: &Cli) -> anyhow::Result<()> {
    let resolved = resolve(cli, "identities")?;
    let m = &resolved.model;
    let x = &resolved.point;
    let mut probes = Vec::new();
    for &t in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        let trace = claim2_check(m, t, x)?;
        let path = claim1_check(m, t, x, 1e-4)?;
        let slice = m.marginal(t)?;
        let score = slice.score(x);
        let posterior_mean = slice.posterior_mean_x0(x);
        let mut tweedie_max_abs = 0.0f64;
        for j in 0..m.dim() {
            let via = -(x[j] - (1.0 - t).sqrt() * posterior_mean[j]) / t;
            tweedie_max_abs = tweedie_max_abs.max((score[j] - via).abs());
        }
        probes.push(IdentityProbe {
            t,
            trace_lhs: trace.lhs,
            trace_rhs: trace.rhs,
            trace_lower_bound: trace.lower_bound,
            path_analytic: path.analytic,
            path_finite_difference: path.finite_difference,
            tweedie_max_abs,
        });
    }
    let stein = stein_diagnostic(m, 0.4, x, &resolved.cfg)?;
    let report = IdentitiesReport {
        probes,
        stein_lhs: stein.lhs,
        stein_rhs: stein.rhs,
    };
    deliver(cli, &resolved, &report, |r| Table {
        columns: vec![
            "t",
            "trace_lhs",
            "trace_rhs",
            "trace_lower_bound",
            "path_analytic",
            "path_finite_difference",
            "tweedie_max_abs",
        ],
        rows: r
            .probes
            .iter()
            .map(|p| {
                vec![
                    fmt(p.t),
                    fmt(p.trace_lhs),
                    fmt(p.trace_rhs),
                    fmt(p.trace_lower_bound),
                    fmt(p.path_analytic),
                    fmt(p.path_finite_difference),
                    fmt(p.tweedie_max_abs),
                ]
            })
            .collect(),
        footer: vec![
            format!("stein_lhs={}", r.stein_lhs.mean),
            format!("stein_rhs={}", r.stein_rhs.mean),
        ],
    })
}

// ---------------------------------------------------------------------
// Selftest.
// ---------------------------------------------------------------------

enum CheckOutcome {
    Pass,
    Fail(String),
    Skip(String),
}

type Check = (&'static str, fn() -> CheckOutcome);

fn check(ok: bool, detail: impl FnOnce() -> String) -> CheckOutcome {
    if ok {
        CheckOutcome::Pass
    } else {
        CheckOutcome::Fail(detail())
    }
}

fn selftest_checks() -> Vec<Check> {
    vec![
        ("schedule family invariants", || {
            let s = match build_schedule(1000, 2.0, 2.0) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let mut ok = (s.t_grid(s.num_steps() + 1) - 1.0).abs() < 1e-15;
            for t in 1..=s.num_steps() {
                ok &= s.beta(t) > 0.0 && s.beta(t) < 1.0;
                ok &= s.elbo_coefficient(t) > 0.0;
                if t > 1 {
                    ok &= s.alpha_bar(t) < s.alpha_bar(t - 1);
                    ok &= s.t_grid(t) > s.t_grid(t - 1);
                }
            }
            check(ok, || "monotonicity or range violated".into())
        }),
        ("schedule rejects corrupt rates", || {
            let bad = custom_schedule(&[1e-4, 1.5]).is_err();
            let empty = custom_schedule(&[]).is_err();
            let ceiling = build_schedule(2, 1.0, 3.0).is_err();
            check(bad && empty && ceiling, || {
                format!("bad={bad} empty={empty} ceiling={ceiling}")
            })
        }),
        ("schedule serde roundtrip", || {
            let s = match build_schedule(64, 1.0, 2.0) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let text = match serde_json::to_string(&s) {
                Ok(t) => t,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let back: Schedule = match serde_json::from_str(&text) {
                Ok(b) => b,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let ok = (1..=64).all(|t| back.beta(t) == s.beta(t)) && back.family() == s.family();
            check(ok, || "roundtrip changed the rates".into())
        }),
        ("stationary marginal is a fixed point", || {
            let m = GaussianMixture::standard_normal(2);
            let slice = match m.marginal(0.37) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let x = [0.8, -1.3];
            let score = slice.score(&x);
            let lp = slice.log_density(&x);
            let expected_lp =
                -(2.0 * std::f64::consts::PI).ln() - 0.5 * (x[0] * x[0] + x[1] * x[1]);
            let ok = (score[0] + x[0]).abs() < 1e-12
                && (score[1] + x[1]).abs() < 1e-12
                && (lp - expected_lp).abs() < 1e-12;
            check(ok, || format!("score {score:?}, log density {lp}"))
        }),
        ("posterior mean form of the score", || {
            let m = match GaussianMixture::mixture_1d(&[(0.6, -2.0, 1.0), (0.4, 2.0, 0.25)]) {
                Ok(m) => m,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let mut worst = 0.0f64;
            for &t in &[0.05, 0.3, 0.7, 0.95] {
                let slice = match m.marginal(t) {
                    Ok(s) => s,
                    Err(e) => return CheckOutcome::Fail(e.to_string()),
                };
                for &x in &[-3.0, -0.4, 1.1, 2.6] {
                    let score = slice.score(&[x]);
                    let pm = slice.posterior_mean_x0(&[x]);
                    let via = -(x - (1.0 - t).sqrt() * pm[0]) / t;
                    worst = worst.max((score[0] - via).abs());
                }
            }
            check(worst < 1e-10, || format!("max abs deviation {worst:.2e}"))
        }),
        ("hessian trace identity", || {
            let m = match GaussianMixture::mixture_1d(&[(0.6, -2.0, 1.0), (0.4, 2.0, 0.25)]) {
                Ok(m) => m,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let mut worst = 0.0f64;
            for &t in &[0.1, 0.5, 0.9] {
                for &x in &[-2.5, 0.2, 1.9] {
                    let c = match claim2_check(&m, t, &[x]) {
                        Ok(c) => c,
                        Err(e) => return CheckOutcome::Fail(e.to_string()),
                    };
                    worst = worst.max((c.lhs - c.rhs).abs() / c.lhs.abs().max(1.0));
                    if c.lhs < c.lower_bound - 1e-12 {
                        return CheckOutcome::Fail(format!(
                            "trace {} under bound {}",
                            c.lhs, c.lower_bound
                        ));
                    }
                }
            }
            check(worst < 1e-10, || format!("max relative gap {worst:.2e}"))
        }),
        ("softmax shift invariance", || {
            let scores = [-11.0, -13.5, -9.25];
            let priors = [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
            let base = match posterior_from_scores(&scores, &priors) {
                Ok(b) => b,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let shifted: Vec<f64> = scores.iter().map(|s| s + 500.0).collect();
            let moved = match posterior_from_scores(&shifted, &priors) {
                Ok(b) => b,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let worst = base
                .iter()
                .zip(&moved)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let sum: f64 = base.iter().sum();
            check(worst < 1e-14 && (sum - 1.0).abs() < 1e-14, || {
                format!("shift moved {worst:.2e}, sum {sum}")
            })
        }),
        ("gaussian kl closed form", || {
            let zero = kl_gaussian(&[0.3, -0.7], 0.8, &[0.3, -0.7], 0.8);
            let known = kl_gaussian(&[0.0], 1.0, &[1.0], 2.0);
            match (zero, known) {
                (Ok(z), Ok(k)) => {
                    // KL(N(0,1) ‖ N(1,2)) = (ln 2 + (1 + 1)/2 − 1)/2 = (ln 2)/2.
                    let expected = 0.5 * 2.0f64.ln();
                    check(z.abs() < 1e-15 && (k - expected).abs() < 1e-12, || {
                        format!("zero {z}, known {k} vs {expected}")
                    })
                }
                _ => CheckOutcome::Fail("kl_gaussian rejected valid input".into()),
            }
        }),
        ("constant consistency across representations", || {
            let ok = (1..=4).all(|d| {
                (discrete_constant(d, 1.0) - smoothed_constant(d)).abs() < 1e-12
                    && (discrete_constant(d, 1e-4) - d as f64 * discrete_constant(1, 1e-4)).abs()
                        < 1e-12
            });
            check(ok, || "constants disagree".into())
        }),
        ("classical equilibrium", || {
            let m = match GaussianMixture::mixture_1d(&[(0.6, -2.0, 1.0), (0.4, 2.0, 0.25)]) {
                Ok(m) => m,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let sol = match solve_equilibrium(&m, 0.0, DEFAULT_GAN_NODES) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let mut worst = 0.0f64;
            for i in 0..41 {
                let x = -6.0 + 0.3 * i as f64;
                worst = worst.max((sol.discriminator(x) - 0.5).abs());
            }
            check((sol.z - 2.0).abs() < 1e-9 && worst < 1e-9, || {
                format!("z {} and discriminator deviation {worst:.2e}", sol.z)
            })
        }),
        ("reverse moment recursion", || {
            let s = match build_schedule(200, 1.0, 1.0) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let trace = match gaussian_reverse_moments(&s, 0.0, 1.0, ScoreSource::Exact) {
                Ok(t) => t,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let (mean, var) = *trace.last().expect("nonempty trace");
            check(mean == 0.0 && (var - 1.0).abs() < 0.02, || {
                format!("final moments ({mean}, {var})")
            })
        }),
        ("probability flow stationary exactness", || {
            let m = GaussianMixture::standard_normal(1);
            match ode_log_density(&m, &[1.2], 200, 1e-3) {
                Ok(ode) => {
                    let analytic = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 1.2 * 1.2;
                    check((ode.total - analytic).abs() < 1e-9, || {
                        format!("flow {} vs analytic {analytic}", ode.total)
                    })
                }
                Err(e) => CheckOutcome::Fail(e.to_string()),
            }
        }),
        ("coefficient gap bound at T = 100", || {
            let s = match build_schedule(100, 2.0, 2.0) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            for t in 2..=100 {
                match s.coefficient_gap(t) {
                    Ok(g) => {
                        if g.within_bound() == Some(false) {
                            return CheckOutcome::Fail(format!(
                                "gap {} over bound {:?} at t = {t}",
                                g.gap, g.bound
                            ));
                        }
                    }
                    Err(e) => return CheckOutcome::Fail(e.to_string()),
                }
            }
            CheckOutcome::Pass
        }),
        ("thread-count independence", || {
            let cores = std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1);
            if cores < 2 {
                return CheckOutcome::Skip("single-core host".into());
            }
            let m = GaussianMixture::standard_normal(1);
            let s = match build_schedule(10, 1.0, 2.0) {
                Ok(s) => s,
                Err(e) => return CheckOutcome::Fail(e.to_string()),
            };
            let cfg = McConfig::new(64, 5);
            let run = |threads: usize| -> Result<f64, String> {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| e.to_string())?;
                pool.install(|| {
                    log_density_discrete(&m, &s, &[0.5], &Predictor::Exact, &cfg)
                        .map(|r| r.total)
                        .map_err(|e| e.to_string())
                })
            };
            match (run(1), run(2)) {
                (Ok(a), Ok(b)) => check(a.to_bits() == b.to_bits(), || {
                    format!("1 thread {a} vs 2 threads {b}")
                }),
                (Err(e), _) | (_, Err(e)) => CheckOutcome::Fail(e),
            }
        }),
    ]
}

fn cmd_selftest() -> anyhow::Result<ExitCode> {
    let started = std::time::Instant::now();
    let mut passed = 0usize;
    let mut failed = 0usize;
    let mut skipped = 0usize;
    for (name, run) in selftest_checks() {
        let outcome = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(outcome) => outcome,
            Err(_) => CheckOutcome::Fail("check panicked".into()),
        };
        match outcome {
            CheckOutcome::Pass => {
                passed += 1;
                println!("pass  {name}");
            }
            CheckOutcome::Fail(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
            CheckOutcome::Skip(reason) => {
                skipped += 1;
                println!("skip  {name}: {reason}");
            }
        }
    }
    println!(
        "selftest: {passed} passed, {failed} failed, {skipped} skipped in {:.2}s",
        started.elapsed().as_secs_f64()
    );
    Ok(if failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

// ---------------------------------------------------------------------

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric { .. }) | Some(Error::Convergence(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
