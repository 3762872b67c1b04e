//! Command-line surface: synthesize, evaluate, experiment1, cellcount.
//!
//! Every synthesize and experiment run is reproducible from its config
//! and seed; report files embed both. A JSON config file can stand in
//! for any synthesize or experiment flag, with explicit flags taking
//! precedence.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use crate::cipher::PivotPolicy;
use crate::error::{CipherError, Result};
use crate::inference::{dgp_model_spec, dgp_simulate, sss_report, ModelSpec, SssReport};
use crate::io;
use crate::metrics::{avg_kway_tvd, linf_error};
use crate::privacy::{NeighborModel, PrivacySpec};
use crate::rng::{tag, StreamFactory};
use crate::synth::{generate_replicates, Method, RunReport};
use crate::tables::{cell_count, Attribute, Dataset, QuerySet, Schema, TableSelection};

/// Soft ceiling on the full-domain size; every method materializes the
/// full joint, so bigger domains need an explicit --force.
pub const DOMAIN_GUARD_CELLS: u128 = 1 << 20;

const DEFAULT_LAMBDA: f64 = 1e-4;
const DEFAULT_REPLICATES: usize = 5;
const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Parser)]
#[command(
    name = "cipher",
    version,
    about = "Differentially private synthetic categorical microdata from sanitized contingency tables"
)]
struct Cli {
    /// Worker threads for replicate and grid parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate m synthetic replicates from a microdata CSV.
    Synthesize(SynthesizeArgs),
    /// Compare synthetic replicates against the original data.
    Evaluate(EvaluateArgs),
    /// Run the simulated benchmark grid over (n, epsilon, method).
    Experiment1(Experiment1Args),
    /// Count stored cells for a table selection (storage calculator).
    Cellcount(CellcountArgs),
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore failure: the global pool can only be set once, which
        // is harmless in tests that call main repeatedly.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let result = match cli.command {
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Experiment1(args) => cmd_experiment1(args),
        Command::Cellcount(args) => cmd_cellcount(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Cipher,
    Mwem,
    Full,
}

// ---------------------------------------------------------------- synthesize

#[derive(Args, Default)]
struct SynthesizeArgs {
    /// JSON config supplying any of the other flags (flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Original microdata CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Schema JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Query-set JSON (lists of attribute names).
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Use all k-way tables instead of a query file.
    #[arg(long, conflicts_with = "queries")]
    kway: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Total privacy budget.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of synthetic replicates.
    #[arg(short = 'm', long)]
    replicates: Option<usize>,
    /// Tikhonov regularization strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Pivot selection: random or first-attribute.
    #[arg(long)]
    pivot_policy: Option<PivotPolicy>,
    /// MWEM iteration count T.
    #[arg(long)]
    mwem_iters: Option<usize>,
    /// Output the average of MWEM's per-iteration distributions.
    #[arg(long)]
    mwem_average: bool,
    /// Neighboring-dataset model: add-remove or replace.
    #[arg(long)]
    neighbor: Option<NeighborModel>,
    /// Master RNG seed (drawn from entropy and recorded when omitted).
    #[arg(long)]
    seed: Option<u64>,
    /// Records per replicate (default: original n).
    #[arg(long)]
    synthetic_n: Option<usize>,
    /// Directory for synthetic_{l}.csv and report.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip noise injection (output is NOT private; for testing).
    #[arg(long)]
    disable_noise: bool,
    /// Proceed past the full-domain size guard.
    #[arg(long)]
    force: bool,
}

/// File twin of the synthesize flags.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthesizeConfig {
    data: Option<PathBuf>,
    schema: Option<PathBuf>,
    queries: Option<PathBuf>,
    kway: Option<usize>,
    method: Option<String>,
    epsilon: Option<f64>,
    replicates: Option<usize>,
    lambda: Option<f64>,
    pivot_policy: Option<String>,
    mwem_iters: Option<usize>,
    mwem_average: Option<bool>,
    neighbor: Option<String>,
    seed: Option<u64>,
    synthetic_n: Option<usize>,
    out_dir: Option<PathBuf>,
    disable_noise: Option<bool>,
    force: Option<bool>,
}

/// The fully resolved run parameters, embedded in report.json.
#[derive(Serialize)]
struct EffectiveSynthesize {
    data: PathBuf,
    schema: PathBuf,
    queries: Option<PathBuf>,
    kway: Option<usize>,
    method: String,
    epsilon: f64,
    replicates: usize,
    lambda: f64,
    pivot_policy: String,
    mwem_iters: Option<usize>,
    mwem_average: bool,
    neighbor: String,
    seed: u64,
    synthetic_n: Option<usize>,
    out_dir: Option<PathBuf>,
    disable_noise: bool,
    force: bool,
}

#[derive(Serialize)]
struct SynthesizeReportFile<'a> {
    config: &'a EffectiveSynthesize,
    report: &'a RunReport,
}

fn load_config<T: Default + for<'de> Deserialize<'de>>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CipherError::invalid(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CipherError::invalid(format!("{}: invalid config: {e}", p.display())))
        }
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| CipherError::invalid(format!("{flag} is required (flag or config file)")))
}

fn parse_from_config<T: std::str::FromStr<Err = CipherError>>(
    value: Option<String>,
    what: &str,
) -> Result<Option<T>> {
    match value {
        None => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|e: CipherError| CipherError::invalid(format!("config {what}: {e}"))),
    }
}

/// A synthesize run resolved down to concrete inputs.
struct PreparedSynthesize {
    effective: EffectiveSynthesize,
    dataset: Dataset,
    queries: QuerySet,
    method: Method,
    spec: PrivacySpec,
}

fn prepare_synthesize(args: SynthesizeArgs, file: SynthesizeConfig) -> Result<PreparedSynthesize> {
    let method_from_file = match file.method.as_deref() {
        None => None,
        Some(s) => Some(
            MethodArg::from_str(s, false)
                .map_err(|_| CipherError::invalid(format!("config method '{s}' is unknown")))?,
        ),
    };
    let pivot_from_file: Option<PivotPolicy> =
        parse_from_config(file.pivot_policy, "pivot_policy")?;
    let neighbor_from_file: Option<NeighborModel> = parse_from_config(file.neighbor, "neighbor")?;

    let effective = EffectiveSynthesize {
        data: require(args.data.or(file.data), "--data")?,
        schema: require(args.schema.or(file.schema), "--schema")?,
        queries: args.queries.or(file.queries),
        kway: args.kway.or(file.kway),
        method: String::new(),
        epsilon: require(args.epsilon.or(file.epsilon), "--epsilon")?,
        replicates: args.replicates.or(file.replicates).unwrap_or(DEFAULT_REPLICATES),
        lambda: args.lambda.or(file.lambda).unwrap_or(DEFAULT_LAMBDA),
        pivot_policy: String::new(),
        mwem_iters: args.mwem_iters.or(file.mwem_iters),
        mwem_average: args.mwem_average || file.mwem_average.unwrap_or(false),
        neighbor: String::new(),
        seed: args.seed.or(file.seed).unwrap_or_else(rand::random),
        synthetic_n: args.synthetic_n.or(file.synthetic_n),
        out_dir: args.out_dir.or(file.out_dir),
        disable_noise: args.disable_noise || file.disable_noise.unwrap_or(false),
        force: args.force || file.force.unwrap_or(false),
    };
    let method_arg = require(args.method.or(method_from_file), "--method")?;
    let pivot = args.pivot_policy.or(pivot_from_file).unwrap_or(PivotPolicy::Random);
    let neighbor = args.neighbor.or(neighbor_from_file).unwrap_or(NeighborModel::AddRemove);
    let mut effective = effective;
    effective.method = format!("{method_arg:?}").to_lowercase();
    effective.pivot_policy = pivot.to_string();
    effective.neighbor = neighbor.to_string();

    let schema = io::read_schema(&effective.schema)?;
    check_domain_guard(&schema, effective.force)?;
    let dataset = io::read_microdata(&effective.data, &schema)?;
    let queries = resolve_queries(
        &schema,
        &effective.queries,
        effective.kway,
        method_arg == MethodArg::Full,
    )?;

    let method = match method_arg {
        MethodArg::Cipher => Method::Cipher { lambda: effective.lambda, pivot },
        MethodArg::Mwem => Method::Mwem {
            iterations: require(effective.mwem_iters, "--mwem-iters")?,
            average: effective.mwem_average,
        },
        MethodArg::Full => Method::FullTable,
    };
    let spec = PrivacySpec {
        epsilon: effective.epsilon,
        replicates: effective.replicates,
        neighbor,
        seed: effective.seed,
    };
    Ok(PreparedSynthesize { effective, dataset, queries, method, spec })
}

/// Result of [`synthesize_from_config`]: the replicates plus the same
/// report document the CLI writes to report.json.
pub struct SynthesisProduct {
    pub replicates: Vec<Dataset>,
    pub report_json: String,
}

/// Runs the synthesize pipeline from the JSON document the `--config`
/// flag accepts, without touching the filesystem for outputs. Intended
/// for embedding (the C ABI goes through here).
pub fn synthesize_from_config(config_json: &str) -> Result<SynthesisProduct> {
    let file: SynthesizeConfig = serde_json::from_str(config_json)
        .map_err(|e| CipherError::invalid(format!("invalid config: {e}")))?;
    let prep = prepare_synthesize(SynthesizeArgs::default(), file)?;
    let output = generate_replicates(
        &prep.dataset,
        &prep.queries,
        &prep.spec,
        prep.method,
        prep.effective.synthetic_n,
        prep.effective.disable_noise,
    )?;
    let mut report_json = serde_json::to_string_pretty(&SynthesizeReportFile {
        config: &prep.effective,
        report: &output.report,
    })?;
    report_json.push('\n');
    Ok(SynthesisProduct { replicates: output.replicates, report_json })
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<()> {
    let file: SynthesizeConfig = load_config(&args.config)?;
    let prep = prepare_synthesize(args, file)?;
    let out_dir = require(prep.effective.out_dir.clone(), "--out-dir")?;

    let output = generate_replicates(
        &prep.dataset,
        &prep.queries,
        &prep.spec,
        prep.method,
        prep.effective.synthetic_n,
        prep.effective.disable_noise,
    )?;

    std::fs::create_dir_all(&out_dir)?;
    for (i, replicate) in output.replicates.iter().enumerate() {
        let path = out_dir.join(format!("synthetic_{}.csv", i + 1));
        io::write_microdata(&path, replicate)?;
    }
    let report_path = out_dir.join("report.json");
    io::write_json_atomic(
        &report_path,
        &SynthesizeReportFile { config: &prep.effective, report: &output.report },
    )?;
    println!(
        "wrote {} replicate(s) and report.json to {}",
        output.replicates.len(),
        out_dir.display()
    );
    Ok(())
}

fn check_domain_guard(schema: &Schema, force: bool) -> Result<()> {
    let cells = schema.domain_size()?;
    if cells > DOMAIN_GUARD_CELLS && !force {
        return Err(CipherError::invalid(format!(
            "the full domain has {cells} cells, above the {DOMAIN_GUARD_CELLS}-cell guard; \
             every method materializes the full joint, so this run may need a lot of memory. \
             Pass --force to proceed"
        )));
    }
    Ok(())
}

fn resolve_queries(
    schema: &Arc<Schema>,
    path: &Option<PathBuf>,
    kway: Option<usize>,
    full_method: bool,
) -> Result<QuerySet> {
    match (path, kway) {
        (Some(p), None) => io::read_queries(p, schema),
        (None, Some(k)) => QuerySet::all_kway(schema, k),
        (Some(_), Some(_)) => Err(CipherError::invalid("--queries and --kway conflict")),
        (None, None) if full_method => Ok(QuerySet::full(schema)),
        (None, None) => {
            Err(CipherError::invalid("this method needs --queries or --kway to define the tables"))
        }
    }
}

// ------------------------------------------------------------------ evaluate

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Tvd,
    Linf,
    Sss,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Original microdata CSV.
    #[arg(long)]
    original: PathBuf,
    /// Schema JSON shared by all files.
    #[arg(long)]
    schema: PathBuf,
    /// Synthetic replicate CSVs, in replicate order.
    #[arg(long, num_args = 1.., required = true)]
    synthetic: Vec<PathBuf>,
    /// Comma-separated metric list.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "tvd")]
    metrics: Vec<MetricArg>,
    /// Marginal arities for the TVD metric.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
    kway: Vec<usize>,
    /// Query-set JSON for the l-infinity metric.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Report l-infinity on the count scale instead of proportions.
    #[arg(long)]
    counts: bool,
    /// Outcome attribute for the SSS metric.
    #[arg(long)]
    outcome: Option<String>,
    /// Covariate attributes for the SSS metric.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Reference level override per covariate, e.g. V3=2 (repeatable).
    #[arg(long = "covariate-ref")]
    covariate_refs: Vec<String>,
    /// Two-sided significance level.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct LinfOutput {
    scale: &'static str,
    value: f64,
    queries: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct EvaluateOutput {
    original: String,
    synthetic: Vec<String>,
    n_original: usize,
    replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tvd: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    linf: Option<LinfOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sss: Option<SssReport>,
}

fn parse_covariate_refs(raw: &[String]) -> Result<Vec<(String, usize)>> {
    let mut refs = Vec::with_capacity(raw.len());
    for spec in raw {
        let Some((name, level)) = spec.split_once('=') else {
            return Err(CipherError::invalid(format!(
                "covariate reference '{spec}' must look like NAME=LEVEL"
            )));
        };
        let level: usize = level.trim().parse().map_err(|_| {
            CipherError::invalid(format!("covariate reference level in '{spec}' must be a 0-based integer"))
        })?;
        refs.push((name.trim().to_string(), level));
    }
    Ok(refs)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let schema = io::read_schema(&args.schema)?;
    let original = io::read_microdata(&args.original, &schema)?;
    let mut replicates = Vec::with_capacity(args.synthetic.len());
    for path in &args.synthetic {
        replicates.push(io::read_microdata(path, &schema)?);
    }

    let mut output = EvaluateOutput {
        original: args.original.display().to_string(),
        synthetic: args.synthetic.iter().map(|p| p.display().to_string()).collect(),
        n_original: original.len(),
        replicates: replicates.len(),
        tvd: None,
        linf: None,
        sss: None,
    };

    if args.metrics.contains(&MetricArg::Tvd) {
        let mut by_k = BTreeMap::new();
        for &k in &args.kway {
            if k == 0 || k > schema.len() {
                return Err(CipherError::invalid(format!(
                    "--kway {k} is outside 1..={}",
                    schema.len()
                )));
            }
            by_k.insert(k.to_string(), avg_kway_tvd(&original, &replicates, k)?);
        }
        output.tvd = Some(by_k);
    }

    if args.metrics.contains(&MetricArg::Linf) {
        let path = args.queries.as_ref().ok_or_else(|| {
            CipherError::invalid("the linf metric needs --queries to define the tables")
        })?;
        let queries = io::read_queries(path, &schema)?;
        let value = linf_error(&queries, &original, &replicates, args.counts)?;
        output.linf = Some(LinfOutput {
            scale: if args.counts { "counts" } else { "proportions" },
            value,
            queries: queries.names(&schema),
        });
    }

    if args.metrics.contains(&MetricArg::Sss) {
        let outcome = args.outcome.as_deref().ok_or_else(|| {
            CipherError::invalid("the sss metric needs --outcome and --covariates")
        })?;
        if args.covariates.is_empty() {
            return Err(CipherError::invalid("the sss metric needs --covariates"));
        }
        let refs = parse_covariate_refs(&args.covariate_refs)?;
        let spec = ModelSpec::from_names(&schema, outcome, &args.covariates, &refs)?;
        output.sss = Some(sss_report(&original, &replicates, &spec, args.alpha)?);
    }

    emit_json(&args.out, &output)
}

fn emit_json<T: Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    match out {
        Some(path) => io::write_json_atomic(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

// --------------------------------------------------------------- experiment1

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExperimentMethod {
    #[value(name = "full")]
    Full,
    #[value(name = "cipher-2way")]
    Cipher2,
    #[value(name = "cipher-3way")]
    Cipher3,
    #[value(name = "mwem-2way")]
    Mwem2,
    #[value(name = "mwem-3way")]
    Mwem3,
}

impl ExperimentMethod {
    const ALL: [ExperimentMethod; 5] = [
        ExperimentMethod::Full,
        ExperimentMethod::Cipher2,
        ExperimentMethod::Cipher3,
        ExperimentMethod::Mwem2,
        ExperimentMethod::Mwem3,
    ];

    fn label(&self) -> &'static str {
        match self {
            ExperimentMethod::Full => "full",
            ExperimentMethod::Cipher2 => "cipher-2way",
            ExperimentMethod::Cipher3 => "cipher-3way",
            ExperimentMethod::Mwem2 => "mwem-2way",
            ExperimentMethod::Mwem3 => "mwem-3way",
        }
    }

    fn is_mwem(&self) -> bool {
        matches!(self, ExperimentMethod::Mwem2 | ExperimentMethod::Mwem3)
    }

    fn query_arity(&self) -> Option<usize> {
        match self {
            ExperimentMethod::Full => None,
            ExperimentMethod::Cipher2 | ExperimentMethod::Mwem2 => Some(2),
            ExperimentMethod::Cipher3 | ExperimentMethod::Mwem3 => Some(3),
        }
    }
}

#[derive(Args)]
struct Experiment1Args {
    /// JSON config supplying any of the other flags (flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for per-cell results and summary.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Monte Carlo repetitions per grid cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Original sample sizes.
    #[arg(long, value_delimiter = ',')]
    sample_sizes: Vec<usize>,
    /// Privacy budgets (default: e^-2, e^-1, 1, e, e^2).
    #[arg(long, value_delimiter = ',')]
    epsilons: Vec<f64>,
    /// Synthetic replicates per run.
    #[arg(short = 'm', long)]
    replicates: Option<usize>,
    /// Methods to run.
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Vec<ExperimentMethod>,
    /// Fixed MWEM iteration count (default: built-in per-(n, epsilon) grid).
    #[arg(long)]
    mwem_iters: Option<usize>,
    /// Two-sided significance level for the SSS metric.
    #[arg(long)]
    alpha: Option<f64>,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    out_dir: Option<PathBuf>,
    reps: Option<usize>,
    sample_sizes: Option<Vec<usize>>,
    epsilons: Option<Vec<f64>>,
    replicates: Option<usize>,
    methods: Option<Vec<String>>,
    mwem_iters: Option<usize>,
    alpha: Option<f64>,
    seed: Option<u64>,
}

#[derive(Clone, Serialize)]
struct EffectiveExperiment {
    out_dir: PathBuf,
    reps: usize,
    sample_sizes: Vec<usize>,
    epsilons: Vec<f64>,
    replicates: usize,
    methods: Vec<String>,
    mwem_iters: Option<usize>,
    alpha: f64,
    seed: u64,
}

fn default_epsilons() -> Vec<f64> {
    vec![(-2.0f64).exp(), (-1.0f64).exp(), 1.0, 1.0f64.exp(), 2.0f64.exp()]
}

/// Tuned MWEM iteration counts, paired with the default epsilon grid
/// position by sample size.
fn default_mwem_iters(n: usize, epsilon: f64) -> Option<usize> {
    let position = default_epsilons().iter().position(|&e| (e - epsilon).abs() < 1e-9)?;
    match n {
        200 => Some([5, 15, 25, 60, 120][position]),
        500 => Some([10, 25, 50, 100, 200][position]),
        _ => None,
    }
}

#[derive(Clone, Copy, Serialize)]
struct Stat {
    mean: f64,
    sd: f64,
}

fn stat(values: &[f64]) -> Stat {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    Stat { mean, sd }
}

#[derive(Serialize)]
struct MethodSummary {
    method: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    mwem_iterations: Option<usize>,
    /// Mean and sd over repetitions of the k-way average TVD.
    tvd: BTreeMap<String, Stat>,
    linf_2way: Stat,
    linf_3way: Stat,
    /// SSS category totals over all repetitions and coefficients.
    sss_counts: BTreeMap<String, usize>,
    /// Replicate fits dropped for non-convergence, totalled.
    dropped_replicates: usize,
    /// Repetitions where the SSS pipeline failed entirely.
    sss_failures: usize,
}

#[derive(Serialize)]
struct CellSummary {
    n: usize,
    epsilon: f64,
    reps: usize,
    methods: Vec<MethodSummary>,
}

#[derive(Serialize)]
struct ExperimentSummary {
    config: EffectiveExperiment,
    cells: Vec<CellSummary>,
}

/// One repetition's measurements for one method.
struct MethodUnit {
    tvd: [f64; 3],
    linf_2way: f64,
    linf_3way: f64,
    sss_counts: Option<BTreeMap<String, usize>>,
    dropped: usize,
    sss_failed: bool,
}

fn cmd_experiment1(args: Experiment1Args) -> Result<()> {
    let file: ExperimentConfig = load_config(&args.config)?;
    let methods: Vec<ExperimentMethod> = if !args.methods.is_empty() {
        args.methods.clone()
    } else if let Some(names) = &file.methods {
        let mut parsed = Vec::with_capacity(names.len());
        for name in names {
            parsed.push(
                ExperimentMethod::from_str(name, false).map_err(|_| {
                    CipherError::invalid(format!("config method '{name}' is unknown"))
                })?,
            );
        }
        parsed
    } else {
        ExperimentMethod::ALL.to_vec()
    };

    let effective = EffectiveExperiment {
        out_dir: require(args.out_dir.or(file.out_dir), "--out-dir")?,
        reps: args.reps.or(file.reps).unwrap_or(50),
        sample_sizes: if args.sample_sizes.is_empty() {
            file.sample_sizes.unwrap_or_else(|| vec![200, 500])
        } else {
            args.sample_sizes.clone()
        },
        epsilons: if args.epsilons.is_empty() {
            file.epsilons.unwrap_or_else(default_epsilons)
        } else {
            args.epsilons.clone()
        },
        replicates: args.replicates.or(file.replicates).unwrap_or(DEFAULT_REPLICATES),
        methods: methods.iter().map(|m| m.label().to_string()).collect(),
        mwem_iters: args.mwem_iters.or(file.mwem_iters),
        alpha: args.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA),
        seed: args.seed.or(file.seed).unwrap_or(20260814),
    };
    if effective.reps == 0 {
        return Err(CipherError::invalid("--reps must be positive"));
    }
    if methods.is_empty() {
        return Err(CipherError::invalid("--methods must name at least one method"));
    }
    for &eps in &effective.epsilons {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(CipherError::invalid(format!("epsilon must be positive, got {eps}")));
        }
    }
    // Fail early if any MWEM cell has no iteration count.
    for m in &methods {
        if !m.is_mwem() {
            continue;
        }
        for &n in &effective.sample_sizes {
            for &eps in &effective.epsilons {
                if effective.mwem_iters.or_else(|| default_mwem_iters(n, eps)).is_none() {
                    return Err(CipherError::invalid(format!(
                        "no built-in MWEM iteration count for n={n}, epsilon={eps}; \
                         pass --mwem-iters"
                    )));
                }
            }
        }
    }

    let schema = dgp_schema_arc();
    let q2 = QuerySet::all_kway(&schema, 2)?;
    let q3 = QuerySet::all_kway(&schema, 3)?;
    let model = dgp_model_spec();
    let factory = StreamFactory::new(effective.seed);

    let cells: Vec<(usize, usize, f64)> = effective
        .sample_sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| {
            effective
                .epsilons
                .iter()
                .enumerate()
                .map(move |(j, &eps)| (i * 1000 + j, n, eps))
        })
        .collect();

    let units: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|&(cell_id, _, _)| (0..effective.reps).map(move |rep| (cell_id, rep)))
        .collect();

    use rayon::prelude::*;
    type FinishedUnit = ((usize, usize), Vec<MethodUnit>);
    let results: Result<Vec<FinishedUnit>> = units
        .par_iter()
        .map(|&(cell_id, rep)| {
            let &(_, n, eps) = cells
                .iter()
                .find(|&&(id, _, _)| id == cell_id)
                .expect("cell id from the same list");
            let out = run_experiment_unit(
                &factory, cell_id, rep, n, eps, &effective, &methods, &q2, &q3, &model,
            )?;
            Ok(((cell_id, rep), out))
        })
        .collect();
    let mut results = results?;
    results.sort_by_key(|&((cell_id, rep), _)| (cell_id, rep));

    std::fs::create_dir_all(&effective.out_dir)?;
    let mut summaries = Vec::new();
    for &(cell_id, n, eps) in &cells {
        let per_rep: Vec<&Vec<MethodUnit>> = results
            .iter()
            .filter(|&&((id, _), _)| id == cell_id)
            .map(|(_, units)| units)
            .collect();
        let mut method_summaries = Vec::new();
        for (mi, m) in methods.iter().enumerate() {
            let units: Vec<&MethodUnit> = per_rep.iter().map(|r| &r[mi]).collect();
            let mut tvd = BTreeMap::new();
            for k in 0..3 {
                let values: Vec<f64> = units.iter().map(|u| u.tvd[k]).collect();
                tvd.insert((k + 1).to_string(), stat(&values));
            }
            let linf2: Vec<f64> = units.iter().map(|u| u.linf_2way).collect();
            let linf3: Vec<f64> = units.iter().map(|u| u.linf_3way).collect();
            let mut sss_counts: BTreeMap<String, usize> = BTreeMap::new();
            let mut dropped = 0;
            let mut failures = 0;
            for unit in &units {
                dropped += unit.dropped;
                if unit.sss_failed {
                    failures += 1;
                }
                if let Some(counts) = &unit.sss_counts {
                    for (k, v) in counts {
                        *sss_counts.entry(k.clone()).or_insert(0) += v;
                    }
                }
            }
            method_summaries.push(MethodSummary {
                method: m.label(),
                mwem_iterations: if m.is_mwem() {
                    effective.mwem_iters.or_else(|| default_mwem_iters(n, eps))
                } else {
                    None
                },
                tvd,
                linf_2way: stat(&linf2),
                linf_3way: stat(&linf3),
                sss_counts,
                dropped_replicates: dropped,
                sss_failures: failures,
            });
        }
        let summary = CellSummary { n, epsilon: eps, reps: effective.reps, methods: method_summaries };
        let path = effective
            .out_dir
            .join(format!("cell_n{}_eps{}.json", n, format_epsilon(eps)));
        io::write_json_atomic(&path, &summary)?;
        summaries.push(summary);
    }

    let summary_path = effective.out_dir.join("summary.json");
    io::write_json_atomic(
        &summary_path,
        &ExperimentSummary { config: effective.clone(), cells: summaries },
    )?;
    println!(
        "wrote {} cell file(s) and summary.json to {}",
        cells.len(),
        effective.out_dir.display()
    );
    Ok(())
}

fn format_epsilon(eps: f64) -> String {
    format!("{eps:.6}").replace('.', "_")
}

fn dgp_schema_arc() -> Arc<Schema> {
    crate::inference::dgp_schema()
}

#[allow(clippy::too_many_arguments)]
fn run_experiment_unit(
    factory: &StreamFactory,
    cell_id: usize,
    rep: usize,
    n: usize,
    epsilon: f64,
    effective: &EffectiveExperiment,
    methods: &[ExperimentMethod],
    q2: &QuerySet,
    q3: &QuerySet,
    model: &ModelSpec,
) -> Result<Vec<MethodUnit>> {
    use rand::Rng;
    let mut stream = factory.stream(&[tag::EXPERIMENT, cell_id as u64, rep as u64]);
    let data = dgp_simulate(n, &mut stream)?;

    // Fixed-order seed draws keep each method's randomness stable no
    // matter which subset of methods is selected.
    let mut method_seeds = BTreeMap::new();
    for m in ExperimentMethod::ALL {
        method_seeds.insert(m.label(), stream.random::<u64>());
    }

    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let queries = match m.query_arity() {
            None => QuerySet::full(data.schema()),
            Some(2) => q2.clone(),
            Some(_) => q3.clone(),
        };
        let method = if m.is_mwem() {
            let iterations = effective
                .mwem_iters
                .or_else(|| default_mwem_iters(n, epsilon))
                .expect("validated before the grid started");
            Method::Mwem { iterations, average: false }
        } else if m.query_arity().is_some() {
            Method::Cipher { lambda: DEFAULT_LAMBDA, pivot: PivotPolicy::Random }
        } else {
            Method::FullTable
        };
        let spec = PrivacySpec {
            epsilon,
            replicates: effective.replicates,
            neighbor: NeighborModel::AddRemove,
            seed: method_seeds[m.label()],
        };
        let synthesis = generate_replicates(&data, &queries, &spec, method, None, false)?;

        let mut tvd = [0.0; 3];
        for (slot, k) in tvd.iter_mut().zip(1..=3usize) {
            *slot = avg_kway_tvd(&data, &synthesis.replicates, k)?;
        }
        let linf_2way = linf_error(q2, &data, &synthesis.replicates, false)?;
        let linf_3way = linf_error(q3, &data, &synthesis.replicates, false)?;

        let (sss_counts, dropped, sss_failed) =
            match sss_report(&data, &synthesis.replicates, model, effective.alpha) {
                Ok(report) => (Some(report.counts), report.dropped_replicates, false),
                // Small or heavily noised samples can defeat the fits
                // entirely; the cell records the failure and moves on.
                Err(_) => (None, 0, true),
            };

        out.push(MethodUnit { tvd, linf_2way, linf_3way, sss_counts, dropped, sss_failed });
    }
    Ok(out)
}

// ----------------------------------------------------------------- cellcount

#[derive(Args)]
struct CellcountArgs {
    /// Schema JSON; alternatively use --attributes/--levels.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Attribute count for a uniform synthetic schema.
    #[arg(long, requires = "levels", conflicts_with = "schema")]
    attributes: Option<usize>,
    /// Levels per attribute for a uniform synthetic schema.
    #[arg(long, requires = "attributes")]
    levels: Option<usize>,
    /// Count the single full table.
    #[arg(long, conflicts_with_all = ["kway", "queries"])]
    full: bool,
    /// Count all k-way marginal tables.
    #[arg(long, conflicts_with = "queries")]
    kway: Option<usize>,
    /// Count the tables of a query-set JSON.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CellcountOutput {
    attributes: usize,
    cardinalities: Vec<usize>,
    selection: String,
    tables: usize,
    cells: String,
}

fn cmd_cellcount(args: CellcountArgs) -> Result<()> {
    let schema = match (&args.schema, args.attributes, args.levels) {
        (Some(path), None, None) => io::read_schema(path)?,
        (None, Some(p), Some(k)) => {
            let attrs =
                (0..p).map(|i| Attribute::with_cardinality(format!("V{}", i + 1), k)).collect();
            Arc::new(Schema::new(attrs)?)
        }
        _ => {
            return Err(CipherError::invalid(
                "cellcount needs --schema or the pair --attributes/--levels",
            ))
        }
    };

    let (selection, label, tables) = if args.full {
        (TableSelection::Full, "full".to_string(), 1)
    } else if let Some(k) = args.kway {
        let count = crate::tables::k_subsets(schema.len(), k)?.len();
        (TableSelection::KWay(k), format!("{k}-way"), count)
    } else if let Some(path) = &args.queries {
        let queries = io::read_queries(path, &schema)?;
        let subsets = queries.subsets().to_vec();
        let count = subsets.len();
        (TableSelection::Queries(subsets), "queries".to_string(), count)
    } else {
        return Err(CipherError::invalid("cellcount needs one of --full, --kway, or --queries"));
    };

    let cells = cell_count(&schema, &selection)?;
    let output = CellcountOutput {
        attributes: schema.len(),
        cardinalities: schema.cardinalities(),
        selection: label,
        tables,
        cells: cells.to_string(),
    };
    emit_json(&args.out, &output)
}
