//! `mlsm`: simulate, fit and test multilayer latent space models.
//!
//! All node, layer and entry indices on the command line and in output
//! tables are 1-based.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlsm::estimate::scree;
use mlsm::inference::{gaussian_sigma0_hat, Which};
use mlsm::io::{self, RunConfig, TensorFormat, ValueKind};
use mlsm::simgen::{coverage_experiment, gen_network, gen_params, CoverageSpec};
use mlsm::{estimate, CoreKind, CoreSequence, Error, FamilyKind, FitResult, InferenceContext, SignConvention, Tensor3};

#[derive(Parser)]
#[command(name = "mlsm", version, about = "Multilayer latent space models for directed networks")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MLSM_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, global = true, value_enum)]
    family: Option<FamilyArg>,
    /// Gaussian noise variance.
    #[arg(long, global = true)]
    dispersion: Option<f64>,
    #[arg(long, global = true)]
    k1: Option<usize>,
    #[arg(long, global = true)]
    k2: Option<usize>,
    #[arg(long = "k-alpha", global = true)]
    k_alpha: Option<usize>,
    #[arg(long = "k-beta", global = true)]
    k_beta: Option<usize>,
    /// Row-norm bound C of the factor fits.
    #[arg(long = "c-bound", global = true)]
    c_bound: Option<f64>,
    #[arg(long = "max-iters", global = true)]
    max_iters: Option<usize>,
    #[arg(long, global = true, value_enum)]
    sign: Option<SignArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Poisson,
    Bernoulli,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Positive,
    Negative,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Triples,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoreArg {
    Diagonal,
    Dense,
}

#[derive(Subcommand)]
enum Command {
    /// Draw parameters and a network; writes `network.mlsm` (or
    /// `network.txt`), `truth/` and `config.json` into the output directory.
    Simulate(SimulateArgs),
    /// Fit a network; writes CSV estimates and `fit.json`.
    Fit(FitArgs),
    /// Confidence intervals for latent positions and connection matrices.
    Infer(InferArgs),
    /// Test consecutive layers for equal connection matrices.
    Changepoints(ChangepointArgs),
    /// Repeated simulate-fit-interval runs; writes coverage and error tables.
    Coverage(CoverageArgs),
    /// Singular values of the two-sided-centered unfoldings.
    Scree(ScreeArgs),
}

#[derive(Args)]
struct SizeArgs {
    /// Number of nodes.
    #[arg(long)]
    n: Option<usize>,
    /// Number of layers.
    #[arg(short = 'T', long = "layers")]
    t: Option<usize>,
    /// Scale of the connection-matrix draws.
    #[arg(long)]
    signal: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long, value_enum)]
    core: Option<CoreArg>,
    /// Share one connection matrix across layers.
    #[arg(long)]
    constant: bool,
    /// First layer carrying the jump; implies a shared matrix otherwise.
    #[arg(long = "break-layer")]
    break_layer: Option<usize>,
    /// Entry `i,j` receiving the jump.
    #[arg(long = "break-entry", default_value = "1,1")]
    break_entry: String,
    #[arg(long, default_value_t = 1.0)]
    jump: f64,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Fit directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Nodes whose positions get intervals.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    nodes: Vec<usize>,
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Args)]
struct ChangepointArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Fit directory; the network is fitted on the fly when absent.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct CoverageArgs {
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScreeArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Singular values kept per mode.
    #[arg(long, default_value_t = 20)]
    max: usize,
    #[arg(short, long)]
    out: PathBuf,
}

/// Exit code for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Unsupported(_) => 2,
        Error::Dimension(_) | Error::Domain { .. } | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        Error::RankDeficient(_)
        | Error::Degenerate(_)
        | Error::Diverged { .. }
        | Error::Normalization(_)
        | Error::SelectionRank { .. } => 4,
        Error::Conditioning { .. } => 5,
    }
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error.chain().find_map(|c| c.downcast_ref::<Error>()).map(exit_code).unwrap_or(3);
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn build_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| config_error(anyhow::Error::from(e).context(format!("loading {}", p.display()))))?,
        None => RunConfig::default(),
    };
    let m = &cli.model;
    if let Some(f) = m.family {
        let kind = match f {
            FamilyArg::Gaussian => FamilyKind::Gaussian,
            FamilyArg::Poisson => FamilyKind::Poisson,
            FamilyArg::Bernoulli => FamilyKind::Bernoulli,
        };
        cfg.family.kind = kind;
    }
    if let Some(d) = m.dispersion {
        cfg.family.dispersion = d;
    }
    let fit = &mut cfg.fit;
    fit.k1 = m.k1.unwrap_or(fit.k1);
    fit.k2 = m.k2.unwrap_or(fit.k2);
    fit.k_alpha = m.k_alpha.unwrap_or(fit.k_alpha);
    fit.k_beta = m.k_beta.unwrap_or(fit.k_beta);
    fit.max_iters = m.max_iters.unwrap_or(fit.max_iters);
    if m.c_bound.is_some() {
        fit.c_bound = m.c_bound;
    }
    if let Some(s) = m.sign {
        fit.sign_convention = match s {
            SignArg::Positive => SignConvention::PositiveMax,
            SignArg::Negative => SignConvention::NegativeMax,
        };
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let size = match &cli.command {
        Command::Simulate(a) => Some(&a.size),
        Command::Coverage(a) => Some(&a.size),
        _ => None,
    };
    if let Some(s) = size {
        cfg.n = s.n.unwrap_or(cfg.n);
        cfg.t = s.t.unwrap_or(cfg.t);
        if s.signal.is_some() {
            cfg.signal = s.signal;
        }
    }
    match &cli.command {
        Command::Simulate(a) => {
            if let Some(c) = a.core {
                cfg.core_kind = match c {
                    CoreArg::Diagonal => CoreKind::Diagonal,
                    CoreArg::Dense => CoreKind::Dense,
                };
            }
            if a.constant {
                cfg.core_sequence = CoreSequence::Constant;
            }
            if let Some(layer) = a.break_layer {
                let (i, j) = parse_entry(&a.break_entry).map_err(config_error)?;
                if layer < 2 {
                    return Err(config_error(anyhow::anyhow!("--break-layer must be at least 2")));
                }
                cfg.core_sequence = CoreSequence::Break {
                    layer: layer - 1,
                    i: i - 1,
                    j: j - 1,
                    jump: a.jump,
                };
            }
        }
        Command::Infer(a) => cfg.level = a.level.unwrap_or(cfg.level),
        Command::Changepoints(a) => cfg.alpha = a.alpha.unwrap_or(cfg.alpha),
        Command::Coverage(a) => {
            cfg.reps = a.reps.unwrap_or(cfg.reps);
            cfg.level = a.level.unwrap_or(cfg.level);
        }
        _ => {}
    }
    let input = match &cli.command {
        Command::Fit(a) => a.input.clone(),
        Command::Infer(a) => a.input.clone(),
        Command::Changepoints(a) => a.input.clone(),
        Command::Scree(a) => a.input.clone(),
        _ => None,
    };
    if input.is_some() {
        cfg.input = input;
    }
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn parse_entry(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(',').context("entry must be written i,j")?;
    let i: usize = a.trim().parse().context("bad row index")?;
    let j: usize = b.trim().parse().context("bad column index")?;
    anyhow::ensure!(i >= 1 && j >= 1, "entry indices are 1-based");
    Ok((i, j))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let cfg = build_config(&cli)?;
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(config_error)?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Fit(a) => fit_cmd(&cfg, a),
        Command::Infer(a) => infer(&cfg, a),
        Command::Changepoints(a) => changepoints(&cfg, a),
        Command::Coverage(a) => coverage(&cfg, a),
        Command::Scree(a) => scree_cmd(&cfg, a),
    }
}

fn read_input(cfg: &RunConfig) -> std::result::Result<Tensor3, Failure> {
    let path = cfg
        .input
        .as_ref()
        .ok_or_else(|| config_error(anyhow::anyhow!("no input tensor given (--input or \"input\" in the config)")))?;
    let file = io::read_tensor(path, None).with_context(|| format!("reading {}", path.display()))?;
    Ok(file.tensor)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> std::result::Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = cfg.gen_options();
    let truth = gen_params(&opts, &mut rng).map_err(|e| match e {
        Error::Argument(_) => config_error(e),
        other => other.into(),
    })?;
    let y = gen_network(&truth, &cfg.family, &mut rng)?;
    create_dir(&a.out)?;
    let (name, format) = match a.format {
        FormatArg::Binary => ("network.mlsm", TensorFormat::Binary),
        FormatArg::Triples => ("network.txt", TensorFormat::Triples),
    };
    io::write_tensor(&a.out.join(name), &y, format, ValueKind::from(cfg.family.kind))?;
    io::write_params(&a.out.join("truth"), &truth)?;
    let mut written = cfg.clone();
    written.signal = Some(opts.signal);
    written.input = Some(a.out.join(name));
    io::write_json(&a.out.join("config.json"), &written)?;
    println!("wrote {}", a.out.join(name).display());
    Ok(())
}

fn fit_network(cfg: &RunConfig, y: &Tensor3) -> std::result::Result<FitResult, Failure> {
    Ok(estimate(y, &cfg.family, &cfg.fit)?)
}

fn fit_cmd(cfg: &RunConfig, a: &FitArgs) -> std::result::Result<(), Failure> {
    let y = read_input(cfg)?;
    let fit = fit_network(cfg, &y)?;
    io::write_fit(&a.out, &fit, &cfg.family, &cfg.fit)?;
    for w in &fit.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "fitted n = {}, T = {}; converged: mode 1 {}, mode 2 {}",
        fit.n, fit.t, fit.diagnostics.mode1.converged, fit.diagnostics.mode2.converged
    );
    Ok(())
}

fn load_fit(dir: &Path, y: &Tensor3) -> std::result::Result<FitResult, Failure> {
    let (fit, _) = io::read_fit(dir).with_context(|| format!("reading fit directory {}", dir.display()))?;
    let [n, _, t] = y.dims();
    if fit.n != n || fit.t != t {
        return Err(Error::Dimension(format!("fit on n = {}, T = {} does not match data dims {:?}", fit.n, fit.t, y.dims())).into());
    }
    Ok(fit)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn infer(cfg: &RunConfig, a: &InferArgs) -> std::result::Result<(), Failure> {
    let y = read_input(cfg)?;
    let fit = load_fit(&a.fit, &y)?;
    let ctx = InferenceContext::new(&fit, &y, cfg.family, cfg.fit.tolerances)?;
    create_dir(&a.out)?;
    for (which, file) in [(Which::Theta, "ci_theta.csv"), (Which::Phi, "ci_phi.csv")] {
        let mut w = csv_writer(&a.out.join(file))?;
        w.write_record(["node", "coord", "estimate", "std_error", "lower", "upper", "level", "ellipsoid_radius_sq"])
            .context("writing interval table")?;
        for &node in &a.nodes {
            if node == 0 || node > fit.n {
                return Err(config_error(anyhow::anyhow!("node {node} outside 1..={}", fit.n)));
            }
            let ci = ctx.ci_position(which, node - 1, cfg.level)?;
            for c in 0..ci.estimate.len() {
                w.write_record([
                    node.to_string(),
                    (c + 1).to_string(),
                    ci.estimate[c].to_string(),
                    ci.std_error[c].to_string(),
                    ci.lower[c].to_string(),
                    ci.upper[c].to_string(),
                    cfg.level.to_string(),
                    ci.ellipsoid_radius_sq.to_string(),
                ])
                .context("writing interval table")?;
            }
        }
        w.flush().context("writing interval table")?;
    }
    let mut w = csv_writer(&a.out.join("ci_core.csv"))?;
    w.write_record(["t", "i", "j", "estimate", "std_error", "lower", "upper", "level"])
        .context("writing core table")?;
    for t in 0..fit.t {
        for i in 0..fit.k1() {
            for j in 0..fit.k2() {
                let ci = ctx.ci_core(i, j, t, cfg.level)?;
                w.write_record([
                    (t + 1).to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    ci.estimate.to_string(),
                    ci.std_error.to_string(),
                    ci.lower.to_string(),
                    ci.upper.to_string(),
                    cfg.level.to_string(),
                ])
                .context("writing core table")?;
            }
        }
    }
    w.flush().context("writing core table")?;
    println!("wrote intervals to {}", a.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct ChangepointSummary {
    alpha: f64,
    /// Layers t (1-based) where Λ_t differs from Λ_{t-1}.
    detected: Vec<usize>,
    sigma0_sq: Option<f64>,
}

fn changepoints(cfg: &RunConfig, a: &ChangepointArgs) -> std::result::Result<(), Failure> {
    let y = read_input(cfg)?;
    let fit = match &a.fit {
        Some(dir) => load_fit(dir, &y)?,
        None => fit_network(cfg, &y)?,
    };
    let ctx = InferenceContext::new(&fit, &y, cfg.family, cfg.fit.tolerances)?;
    let scan = ctx.changepoint_scan(cfg.alpha)?;
    create_dir(&a.out)?;
    let mut w = csv_writer(&a.out.join("changepoints.csv"))?;
    w.write_record(["t", "t_prime", "i", "j", "delta_hat", "se", "z", "p_value", "critical", "reject"])
        .context("writing test table")?;
    for lt in &scan.tests {
        for e in &lt.entries {
            w.write_record([
                (e.t + 1).to_string(),
                (e.t_prime + 1).to_string(),
                (e.i + 1).to_string(),
                (e.j + 1).to_string(),
                e.delta_hat.to_string(),
                e.se.to_string(),
                e.z.to_string(),
                e.p_value.to_string(),
                e.critical.to_string(),
                e.reject.to_string(),
            ])
            .context("writing test table")?;
        }
    }
    w.flush().context("writing test table")?;
    let sigma0_sq = match cfg.family.kind {
        FamilyKind::Gaussian => Some(gaussian_sigma0_hat(&y, &fit, &cfg.family)?),
        _ => None,
    };
    let summary = ChangepointSummary {
        alpha: cfg.alpha,
        detected: scan.detected.iter().map(|t| t + 1).collect(),
        sigma0_sq,
    };
    io::write_json(&a.out.join("changepoints.json"), &summary)?;
    if let Some(s) = sigma0_sq {
        println!("sigma0^2 = {s}");
    }
    let list: Vec<String> = summary.detected.iter().map(|t| t.to_string()).collect();
    println!("detected layers: {}", if list.is_empty() { "none".into() } else { list.join(",") });
    Ok(())
}

fn coverage(cfg: &RunConfig, a: &CoverageArgs) -> std::result::Result<(), Failure> {
    let spec = CoverageSpec {
        family: cfg.family,
        gen: cfg.gen_options(),
        fit: cfg.fit.clone(),
        reps: cfg.reps,
        level: cfg.level,
        seed: cfg.seed,
    };
    let report = coverage_experiment(&spec).map_err(|e| match e {
        Error::Argument(_) => config_error(e),
        other => other.into(),
    })?;
    create_dir(&a.out)?;
    let mut w = csv_writer(&a.out.join("coverage.csv"))?;
    w.write_record(["scenario", "n", "T", "target", "level", "coverage", "hits", "trials", "std_error", "signal", "dispersion", "seed"])
        .context("writing coverage table")?;
    for row in &report.rows {
        w.write_record([
            report.scenario.clone(),
            report.n.to_string(),
            report.t.to_string(),
            row.target.clone(),
            report.level.to_string(),
            row.coverage.to_string(),
            row.hits.to_string(),
            row.trials.to_string(),
            row.std_error.to_string(),
            report.signal.to_string(),
            report.dispersion.to_string(),
            report.seed.to_string(),
        ])
        .context("writing coverage table")?;
    }
    w.flush().context("writing coverage table")?;
    let mut w = csv_writer(&a.out.join("errors.csv"))?;
    for r in &report.records {
        w.serialize(r).context("writing error records")?;
    }
    w.flush().context("writing error records")?;
    for m in &report.failure_messages {
        eprintln!("warning: {m}");
    }
    for row in &report.rows {
        println!("{}: {:.3} ({} / {})", row.target, row.coverage, row.hits, row.trials);
    }
    Ok(())
}

fn scree_cmd(cfg: &RunConfig, a: &ScreeArgs) -> std::result::Result<(), Failure> {
    let y = read_input(cfg)?;
    let sv = scree(&y, &cfg.family, a.max)?;
    let mut w = csv_writer(&a.out)?;
    w.write_record(["mode", "index", "singular_value"]).context("writing scree table")?;
    for (m, vals) in sv.iter().enumerate() {
        for (k, v) in vals.iter().enumerate() {
            w.write_record([(m + 1).to_string(), (k + 1).to_string(), v.to_string()])
                .context("writing scree table")?;
        }
    }
    w.flush().context("writing scree table")?;
    Ok(())
}
