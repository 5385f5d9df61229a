use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use sparsity::experiments::{read_config_file, run, ExperimentConfig, ExperimentKind, Profile};
use sparsity::ingest::{
    read_activations, read_coefficients, read_dictionary, write_activations, write_atomic, write_coefficients,
    write_dictionary, write_metadata, Sidecar,
};
use sparsity::solver::{fit_matrix, infer_coefficients};
use sparsity::synth::{gen_gaussian, gen_heavy_tailed, gen_rademacher, gen_sparse_linear, normalize_for_loss, SynthConfig};
use sparsity::{center, Error, MetricReport, Result, SolverConfig, StepRule};

#[derive(Parser)]
#[command(name = "sparsity", version, about = "Sparse dictionary learning and sparsity metrics for activation vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic or control dataset as an activation file.
    Gen(GenArgs),
    /// Fit a dictionary to an activation file.
    Fit(FitArgs),
    /// Compute sparsity metrics for a fitted decomposition.
    Metrics(MetricsArgs),
    /// Run an experiment and write CSV and JSON tables.
    Exp(ExpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    SparseLinear,
    Gaussian,
    HeavyTailed,
    Rademacher,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "sparse-linear")]
    dataset: Dataset,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 8192)]
    n: usize,
    /// Expected active features per activation (sparse-linear only).
    #[arg(long, default_value_t = 8.0)]
    a: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Ground-truth feature count; defaults to 4d.
    #[arg(long)]
    m_true: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Center and scale to unit mean row norm.
    #[arg(long)]
    normalize: bool,
    /// Also write the ground-truth features and coefficients next to the output.
    #[arg(long)]
    truth: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepRuleArg {
    Fixed,
    Lipschitz,
}

#[derive(Args)]
struct SolverArgs {
    /// Fixed λ; with --adapt it is the starting value.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adapt λ to 0.1 of the average maximum coefficient.
    #[arg(long)]
    adapt: bool,
    #[arg(long)]
    adapt_rounds: Option<usize>,
    #[arg(long)]
    dict_factor: Option<usize>,
    #[arg(long)]
    phi_steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, value_enum)]
    step_rule: Option<StepRuleArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_alternations: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut cfg = SolverConfig {
            lambda: self.lambda,
            adapt_lambda: self.adapt,
            seed: self.seed,
            ..SolverConfig::default()
        };
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { cfg.$field = v; })* };
        }
        take!(adapt_rounds, dict_factor, phi_steps, step_size, batch_size, max_alternations, rel_tol);
        if let Some(rule) = self.step_rule {
            cfg.step_rule = match rule {
                StepRuleArg::Fixed => StepRule::Fixed,
                StepRuleArg::Lipschitz => StepRule::Lipschitz,
            };
        }
        cfg
    }
}

#[derive(Args)]
struct FitArgs {
    input: PathBuf,
    /// Directory for dictionary.actv, coefficients.txt and fit.json.
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Subtract the column means before fitting.
    #[arg(long)]
    center: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    /// Coefficients file; omit to infer coefficients at --lambda.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// λ for the loss metrics (and for inference). Defaults to the λ in the
    /// fit.json next to the dictionary.
    #[arg(long)]
    lambda: Option<f64>,
    /// Re-infer coefficients at --lambda even when a coefficients file is given.
    #[arg(long)]
    infer: bool,
    #[arg(long)]
    center: bool,
    #[arg(long, default_value_t = 1.0)]
    p: f64,
    /// Write the report here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpKind {
    Sweep,
    Discriminate,
    Ablate,
    Layers,
    Embeddings,
}

#[derive(Args)]
struct ExpArgs {
    #[arg(value_enum)]
    kind: ExpKind,
    /// Flat key = value configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Problem size preset: desk (d = 64, n = 8192) or full (d = 256, n = 16384).
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Override one configuration key; may be repeated.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated a values for the sweep.
    #[arg(long)]
    a_grid: Option<String>,
    /// Activation files for layers or embeddings.
    #[arg(long, num_args = 1..)]
    datasets: Vec<PathBuf>,
    /// Output stem; `.csv` and `.json` are appended.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

impl ProfileArg {
    fn name(self) -> &'static str {
        match self {
            ProfileArg::Desk => "desk",
            ProfileArg::Full => "full",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FitSummary {
    lambda: f64,
    dict_size: usize,
    objective_history: Vec<f64>,
    residual_norm_sq: f64,
    centered: bool,
    solver: SolverConfig,
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut sidecar = Sidecar::default();
    let x = match args.dataset {
        Dataset::SparseLinear => {
            let mut cfg = SynthConfig::new(args.d, args.a, args.sigma, args.n, args.seed);
            if let Some(m) = args.m_true {
                cfg.m_true = m;
            }
            let (x, truth) = gen_sparse_linear(&cfg)?;
            sidecar.set("generator", "sparse_linear");
            sidecar.set("a", args.a);
            sidecar.set("sigma", args.sigma);
            sidecar.set("m_true", cfg.m_true);
            sidecar.set("true_weighted_sparsity", truth.true_weighted_sparsity);
            if args.truth {
                write_dictionary(&sibling(&args.out, ".features.actv"), &truth.features)?;
                write_coefficients(&sibling(&args.out, ".coefficients.txt"), &truth.coefficients)?;
            }
            x
        }
        Dataset::Gaussian => {
            sidecar.set("generator", "gaussian");
            gen_gaussian(args.d, args.n, args.seed)?
        }
        Dataset::HeavyTailed => {
            sidecar.set("generator", "heavy_tailed");
            gen_heavy_tailed(args.d, args.n, args.seed)?
        }
        Dataset::Rademacher => {
            sidecar.set("generator", "rademacher");
            gen_rademacher(args.d, args.n, args.seed)?
        }
    };
    let x = if args.normalize { normalize_for_loss(&x)? } else { x };
    sidecar.set("seed", args.seed);
    sidecar.set("normalized", args.normalize);
    write_activations(&args.out, &x)?;
    write_metadata(&args.out, &sidecar)?;
    info!("wrote {} x {} activations to {}", x.n(), x.d(), args.out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = args.solver.config();
    cfg.validate()?;
    let x = read_activations(&args.input)?;
    let x = if args.center { center(&x).0 } else { x };
    let fit = fit_matrix(&x, &cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    write_dictionary(&args.out_dir.join("dictionary.actv"), &fit.dictionary)?;
    write_coefficients(&args.out_dir.join("coefficients.txt"), &fit.coefficients)?;
    let summary = FitSummary {
        lambda: fit.final_lambda,
        dict_size: fit.dictionary.m(),
        objective_history: fit.objective_history,
        residual_norm_sq: fit.residual_norm_sq,
        centered: args.center,
        solver: cfg,
    };
    write_atomic(&args.out_dir.join("fit.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!("{}", serde_json::json!({ "lambda": summary.lambda, "dict_size": summary.dict_size }));
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let x = read_activations(&args.activations)?;
    let x = if args.center { center(&x).0 } else { x };
    let dict = read_dictionary(&args.dictionary)?;
    let lambda = match args.lambda {
        Some(l) => l,
        None => {
            let summary = args.dictionary.with_file_name("fit.json");
            let text = fs::read_to_string(&summary).map_err(|e| {
                Error::InvalidConfig(format!("no --lambda given and {} is unreadable: {e}", summary.display()))
            })?;
            serde_json::from_str::<FitSummary>(&text)?.lambda
        }
    };
    let coeffs = match (&args.coefficients, args.infer) {
        (Some(path), false) => read_coefficients(path)?,
        _ => infer_coefficients(&x, &dict, lambda)?,
    };
    let report = MetricReport::compute(&x, &dict, &coeffs, lambda, args.p)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_exp(args: &ExpArgs) -> Result<()> {
    let kind = match args.kind {
        ExpKind::Sweep => ExperimentKind::Sweep,
        ExpKind::Discriminate => ExperimentKind::Discriminate,
        ExpKind::Ablate => ExperimentKind::Ablation,
        ExpKind::Layers => ExperimentKind::Layers,
        ExpKind::Embeddings => ExperimentKind::Embeddings,
    };
    let profile = args.profile.unwrap_or(ProfileArg::Desk);
    let mut cfg = ExperimentConfig::new(kind, profile.name().parse::<Profile>()?);
    if let Some(path) = &args.config {
        for (key, value) in read_config_file(path)? {
            cfg.set(&key, &value)?;
        }
    }
    // Flags are applied after the file so they win.
    if let Some(profile) = args.profile {
        cfg.set("profile", profile.name())?;
    }
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = &args.a_grid {
        cfg.set("a_grid", grid)?;
    }
    if !args.datasets.is_empty() {
        cfg.datasets = args.datasets.clone();
    }
    if let Some(out) = &args.output {
        cfg.output = Some(out.clone());
    }
    let result = run(&cfg)?;
    let stem = cfg.output.clone().unwrap_or_else(|| PathBuf::from(format!("results/{kind}")));
    let (csv_path, json_path) = result.write(&stem)?;
    let failed = result.failures().count();
    eprintln!(
        "wrote {} rows to {} and {}{}",
        result.rows.len(),
        csv_path.display(),
        json_path.display(),
        if failed > 0 { format!(" ({failed} failed rows)") } else { String::new() }
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Exp(args) => cmd_exp(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
