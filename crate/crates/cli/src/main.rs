use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lcmcr::experiments::{
    df_family_table, run_critique, run_scenario1, write_records_csv, ExperimentConfig, Scenario1Variant,
};
use lcmcr::fit::{fit, FitConfig};
use lcmcr::model::{validate, ModelSpec};
use lcmcr::popsize::{designate_target, estimate_overcoverage, TargetRule};
use lcmcr::sim::{preset_critique, preset_scenario1, simulate, CritiqueOverrides, GeneratingConfig};
use lcmcr::structure::{degrees_of_freedom, structure_report_with_rank, StructureReport};
use lcmcr::{CaptureCounts, Fit, Params};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "lcmcr", version, about = "Latent class capture-recapture toolkit")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "LCMCR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic population and write its capture counts.
    Simulate(SimulateArgs),
    /// Fit a latent class model by multi-start EM.
    Fit(FitArgs),
    /// Population size from a fit.
    Estimate(EstimateArgs),
    /// Parameter count and degrees of freedom of a model.
    Df(DfArgs),
    /// Replicated experiment pipelines.
    Experiment(ExperimentArgs),
    /// Check a model, and optionally parameters and counts, against it.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model as JSON.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    spec: Option<PathBuf>,
    /// Model in bracket notation, e.g. "[AX][BX][CDX]".
    #[arg(long)]
    model: Option<String>,
    /// Number of latent classes for `--model`.
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelSpec, CliError> {
        let spec = match (&self.spec, &self.model) {
            (Some(path), _) => read_json::<ModelSpec>(path)?,
            (None, Some(notation)) => ModelSpec::parse_notation(notation, self.classes)?,
            (None, None) => return Err(CliError::Usage("one of --spec or --model is required".into())),
        };
        spec.check()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Scenario1,
    Critique,
}

#[derive(Args, Default)]
struct OverrideArgs {
    /// Class weights (overcoverage, hard-to-reach, mainstream).
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    overcoverage_probs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    hard_to_reach_probs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    mainstream_probs: Option<Vec<f64>>,
}

impl OverrideArgs {
    fn overrides(&self) -> CritiqueOverrides {
        CritiqueOverrides {
            weights: self.weights.clone(),
            overcoverage_probs: self.overcoverage_probs.clone(),
            hard_to_reach_probs: self.hard_to_reach_probs.clone(),
            mainstream_probs: self.mainstream_probs.clone(),
        }
    }

    fn is_set(&self) -> bool {
        self.weights.is_some()
            || self.overcoverage_probs.is_some()
            || self.hard_to_reach_probs.is_some()
            || self.mainstream_probs.is_some()
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    /// Population size.
    #[arg(long, default_value_t = 100_000)]
    n: u64,
    #[arg(long)]
    seed: u64,
    /// Counts CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the complete table (profile,class,count).
    #[arg(long)]
    complete: Option<PathBuf>,
    /// Also write true class sizes and the generating model as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Class sizes are rounded expectations instead of a multinomial draw.
    #[arg(long)]
    fixed_classes: bool,
    /// Shared C-D log-scale interaction (scenario1 only).
    #[arg(long, allow_hyphen_values = true)]
    cd_interaction: Option<f64>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long, default_value_t = 20)]
    starts: usize,
    #[arg(long)]
    seed: u64,
    /// Fit JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the winning start's log-likelihood trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fit even with negative degrees of freedom.
    #[arg(long)]
    force: bool,
    /// Exit with status 2 when the winning start did not converge.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
}

#[derive(Args)]
struct EstimateArgs {
    /// Fit JSON written by `lcmcr fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    counts: PathBuf,
    /// `all`, `highest` (class with highest mean inclusion) or a list such as `1,2`.
    #[arg(long, default_value = "highest")]
    target: String,
    /// Also write the estimate as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DfArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Parameters (JSON) at which to run the numerical rank check.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Random points for the rank check.
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print JSON only.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Scenario1,
    Critique,
    DfTable,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: ExperimentKind,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 100_000)]
    n: u64,
    /// Population of 1,000,000.
    #[arg(long, conflicts_with = "n")]
    full: bool,
    /// Required except for df-table.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    starts: usize,
    /// Target classes: `all`, `highest` or a list.
    #[arg(long, default_value = "highest")]
    target: String,
    /// Shared C-D interaction for the scenario1 experiment.
    #[arg(long, allow_hyphen_values = true)]
    cd_interaction: Option<f64>,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replicate records as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    counts: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Lib(lcmcr::Error),
    Usage(String),
    NotConverged(String),
}

impl From<lcmcr::Error> for CliError {
    fn from(e: lcmcr::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_numerical() => 2,
            CliError::NotConverged(_) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::NotConverged(m) => f.write_str(m),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FitFile {
    schema_version: u32,
    spec: ModelSpec,
    config: FitConfig,
    fit: Fit,
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Lib(lcmcr::Error::Malformed(format!("{}: {e}", path.display()))))
}

fn read_counts(path: &Path, k: Option<usize>) -> Result<CaptureCounts, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(CaptureCounts::read_csv(BufReader::new(file), k)?)
}

/// Writer for `path`, or stdout.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, &Envelope {
        schema_version: SCHEMA_VERSION,
        body: value,
    })?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn parse_target(text: &str) -> Result<TargetRule, CliError> {
    match text {
        "all" => Ok(TargetRule::All),
        "highest" => Ok(TargetRule::HighestMeanInclusion),
        list => list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(TargetRule::Explicit)
            .map_err(|_| CliError::Usage(format!("bad target `{list}`: expected all, highest or a class list"))),
    }
}

fn simulate_cmd(args: &SimulateArgs) -> Result<(), CliError> {
    let config: GeneratingConfig = match args.preset {
        Preset::Scenario1 => {
            if args.overrides.is_set() {
                return Err(CliError::Usage("class overrides apply to the critique preset only".into()));
            }
            preset_scenario1(args.n, args.seed, args.cd_interaction)
        }
        Preset::Critique => {
            if args.cd_interaction.is_some() {
                return Err(CliError::Usage("--cd-interaction applies to the scenario1 preset only".into()));
            }
            preset_critique(args.n, args.seed, &args.overrides.overrides())?
        }
    };
    let config = GeneratingConfig {
        fixed_classes: args.fixed_classes,
        ..config
    };
    let sim = simulate(&config)?;
    let mut w = output(args.out.as_deref())?;
    sim.observed_counts.write_csv(&mut w)?;
    w.flush()?;
    if let Some(path) = &args.complete {
        sim.write_complete_csv(BufWriter::new(File::create(path)?))?;
    }
    if let Some(path) = &args.truth {
        #[derive(Serialize)]
        struct Truth<'a> {
            generating: &'a GeneratingConfig,
            true_class_sizes: &'a [u64],
            true_target_size: u64,
            target_classes: Vec<usize>,
        }
        write_json(
            Some(path),
            &Truth {
                generating: &config,
                true_class_sizes: &sim.true_class_sizes,
                true_target_size: sim.true_target_size,
                target_classes: config.target_classes(),
            },
        )?;
    }
    eprintln!(
        "simulated {} units, {} observed, true target size {}",
        args.n,
        sim.observed_counts.n(),
        sim.true_target_size
    );
    Ok(())
}

fn fit_cmd(args: &FitArgs) -> Result<(), CliError> {
    let spec = args.model.load()?;
    let counts = read_counts(&args.counts, Some(spec.num_registers()))?;
    let config = FitConfig {
        num_starts: args.starts,
        tol: args.tol,
        max_iter: args.max_iter,
        seed: args.seed,
        force: args.force,
        ..FitConfig::default()
    };
    let fitted = fit::<f64>(&spec, &counts, &config)?;
    if let Some(path) = &args.trace {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "iteration,cond_loglik")?;
        for (i, ll) in fitted.loglik_trace.iter().enumerate() {
            writeln!(w, "{i},{ll}")?;
        }
        w.flush()?;
    }
    eprintln!(
        "{}: log-likelihood {:.6} from start {} after {} iterations{}{}",
        spec.notation(),
        fitted.cond_loglik,
        fitted.start_index,
        fitted.iterations,
        if fitted.converged { "" } else { " (not converged)" },
        if fitted.is_boundary() { ", boundary estimate" } else { "" },
    );
    let converged = fitted.converged;
    let file = FitFile {
        schema_version: SCHEMA_VERSION,
        spec,
        config,
        fit: fitted,
    };
    let mut w = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    w.flush()?;
    if args.strict && !converged {
        return Err(CliError::NotConverged(format!(
            "winning start did not converge within {} iterations",
            args.max_iter
        )));
    }
    Ok(())
}

fn estimate_cmd(args: &EstimateArgs) -> Result<(), CliError> {
    let file: FitFile = read_json(&args.fit)?;
    let spec = file.spec;
    spec.check()?;
    let counts = read_counts(&args.counts, Some(spec.num_registers()))?;
    let rule = parse_target(&args.target)?;
    let targets = designate_target(&spec, &file.fit, &rule)?;
    let est = estimate_overcoverage(&spec, &file.fit.params, &counts, &targets)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{:<12} {:>14}  classes", "estimator", "total")?;
    writeln!(
        out,
        "{:<12} {:>14.2}  {}",
        "standard",
        est.total_all_classes,
        (0..spec.num_classes).map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    )?;
    writeln!(
        out,
        "{:<12} {:>14.2}  {}",
        "target-only",
        est.total_target_only,
        est.target_classes.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    )?;
    if let Some(path) = &args.out {
        write_json(Some(path), &est)?;
    }
    Ok(())
}

fn df_row(out: &mut impl Write, r: &StructureReport) -> io::Result<()> {
    let rank = r.jacobian_rank.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    writeln!(
        out,
        "{:<24} {:>10} {:>4} {:>10} {:>5}",
        r.notation,
        r.parameter_count,
        r.degrees_of_freedom,
        format!("{:?}", r.df_flag).to_lowercase(),
        rank
    )
}

fn df_header(out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{:<24} {:>10} {:>4} {:>10} {:>5}", "model", "parameters", "df", "flag", "rank")
}

fn df_cmd(args: &DfArgs) -> Result<(), CliError> {
    let spec = args.model.load()?;
    let report = match &args.params {
        Some(path) => {
            let params: Params = read_json(path)?;
            structure_report_with_rank(&spec, &params, args.points, args.seed)?
        }
        None => degrees_of_freedom(&spec)?,
    };
    if args.json {
        return write_json(None, &report);
    }
    let mut out = io::stdout().lock();
    df_header(&mut out)?;
    df_row(&mut out, &report)?;
    writeln!(out, "df = {}", report.degrees_of_freedom)?;
    if let Some(true) = report.rank_deficient {
        writeln!(out, "warning: Jacobian rank {} below {} parameters", report.jacobian_rank.unwrap_or(0), report.parameter_count)?;
    }
    Ok(())
}

fn experiment_cmd(args: &ExperimentArgs) -> Result<(), CliError> {
    if let ExperimentKind::DfTable = args.kind {
        let rows = df_family_table();
        if let Some(path) = &args.out {
            #[derive(Serialize)]
            struct Table<'a> {
                experiment_id: &'static str,
                rows: &'a [StructureReport],
            }
            write_json(Some(path), &Table {
                experiment_id: "df-table",
                rows: &rows,
            })?;
        }
        let mut out = io::stdout().lock();
        df_header(&mut out)?;
        for r in &rows {
            df_row(&mut out, r)?;
        }
        return Ok(());
    }
    let seed = args
        .seed
        .ok_or_else(|| CliError::Usage("--seed is required for this experiment".into()))?;
    let n = if args.full { 1_000_000 } else { args.n };
    let mut config = ExperimentConfig::new(args.reps, n, seed);
    config.fit.num_starts = args.starts;
    config.target_rule = parse_target(&args.target)?;
    let report = match args.kind {
        ExperimentKind::Scenario1 => {
            if args.overrides.is_set() {
                return Err(CliError::Usage("class overrides apply to the critique experiment only".into()));
            }
            let variant = match args.cd_interaction {
                Some(v) => Scenario1Variant::SharedCd(v),
                None => Scenario1Variant::Independence,
            };
            run_scenario1(&config, variant)?
        }
        ExperimentKind::Critique => {
            if args.cd_interaction.is_some() {
                return Err(CliError::Usage("--cd-interaction applies to the scenario1 experiment only".into()));
            }
            run_critique(&config, &args.overrides.overrides())?
        }
        ExperimentKind::DfTable => unreachable!(),
    };
    write_json(args.out.as_deref(), &report)?;
    if let Some(path) = &args.csv {
        write_records_csv(&report, BufWriter::new(File::create(path)?))?;
    }
    let agg = &report.aggregates;
    let pct = |v: Option<f64>| v.map(|b| format!("{:+.2}%", 100.0 * b)).unwrap_or_else(|| "n/a".into());
    eprintln!(
        "{}: {}/{} replicates included ({} not converged, {} failed, {} boundary); target-only bias mean {} median {}; standard bias mean {} median {}",
        report.experiment_id,
        agg.included,
        agg.replicates,
        agg.convergence_failures,
        agg.fit_errors,
        agg.boundary_estimates,
        pct(agg.mean_bias_target_only),
        pct(agg.median_bias_target_only),
        pct(agg.mean_bias_standard),
        pct(agg.median_bias_standard),
    );
    Ok(())
}

fn validate_cmd(args: &ValidateArgs) -> Result<(), CliError> {
    let spec = match (&args.model.spec, &args.model.model) {
        (Some(path), _) => read_json::<ModelSpec>(path)?,
        (None, Some(notation)) => ModelSpec::parse_notation(notation, args.model.classes)?,
        (None, None) => return Err(CliError::Usage("one of --spec or --model is required".into())),
    };
    let mut violations = spec.violations();
    if violations.is_empty() {
        if let Some(path) = &args.params {
            let params: Params = read_json(path)?;
            violations.extend(validate(&spec, &params));
        }
        if let Some(path) = &args.counts {
            read_counts(path, Some(spec.num_registers()))?;
        }
    }
    if violations.is_empty() {
        println!("ok: {}", spec.notation());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(CliError::Lib(lcmcr::Error::Invalid(violations)))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let work = || match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Df(a) => df_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Validate(a) => validate_cmd(a),
    };
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(work),
        None => work(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
