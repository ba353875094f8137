use clap::{Args, Parser, Subcommand};
use nbmix_cli::{run, CliError, CliResult, Command, ConditionMap, RunConfig};
use nbmix_core::TestKind;
use std::path::PathBuf;
use std::process::ExitCode;

/// Negative Binomial mixture models for RNA-seq counts.
///
/// Counts are used as given; normalize library sizes beforehand if needed.
#[derive(Debug, Parser)]
#[command(name = "nbmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Fit a mixture (or the best-BIC one over --k-range) and write fit.json.
    Fit(DataArgs),
    /// Fit every K of --k-range (default 1..6) and write criteria.tsv.
    SelectK(DataArgs),
    /// Fit, then run the two-condition tests and write results_<test>.tsv.
    Test(DataArgs),
    /// Run a simulation study and write metrics.tsv and ecdf.tsv.
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Number of mixture components.
    #[arg(long)]
    k: Option<usize>,
    /// Inclusive range of components, e.g. 1..6.
    #[arg(long, value_name = "A..B", value_parser = parse_range)]
    k_range: Option<(usize, usize)>,
    /// Tests to run, comma separated: difference, ratio, logratio.
    #[arg(long, value_delimiter = ',', default_values = ["difference", "ratio", "logratio"])]
    tests: Vec<TestKind>,
    /// Significance level for the adjusted p-value summary.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Seed for random restarts and simulations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable the n/(n-1) small-sample variance correction.
    #[arg(long)]
    no_bias_correct: bool,
    /// Worker threads (default: NBMIX_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "nbmix-out")]
    out: PathBuf,
    /// Relative log-likelihood change for convergence.
    #[arg(long)]
    tol: Option<f64>,
    /// Maximum EM iterations.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Random restarts in addition to the quantile start.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Count table (TSV or CSV): header of sample names, gene ids in the first column.
    input: PathBuf,
    /// Sample assignment, repeatable: --condition sample=condition.
    #[arg(long = "condition", value_name = "SAMPLE=COND")]
    conditions: Vec<String>,
    /// Two-column sample/condition file.
    #[arg(long, value_name = "PATH")]
    conditions_file: Option<PathBuf>,
    /// Keep genes with mean count strictly above this value.
    #[arg(long, default_value_t = 1.0)]
    min_mean_count: f64,
    /// Integer added to every count after filtering.
    #[arg(long, default_value_t = 0.0)]
    pseudocount: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Number of simulated datasets per replicate setting.
    #[arg(long, default_value_t = 100)]
    datasets: usize,
    /// Replicates per condition, comma separated, e.g. 3,5,10.
    #[arg(long, value_delimiter = ',', default_values = ["5"])]
    replicates: Vec<usize>,
    /// Genes per dataset.
    #[arg(long, default_value_t = 300)]
    genes: usize,
    /// Fraction of differentially expressed genes.
    #[arg(long)]
    frac_de: Option<f64>,
    /// Also compute the variance-accuracy curve over --k-range (default 1..6).
    #[arg(long)]
    variance_curve: bool,
    #[command(flatten)]
    common: Common,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got '{s}'"))?;
    let a = a.trim().parse().map_err(|_| format!("bad lower bound in '{s}'"))?;
    let b = b
        .trim()
        .trim_start_matches('=')
        .parse()
        .map_err(|_| format!("bad upper bound in '{s}'"))?;
    Ok((a, b))
}

fn env_threads() -> CliResult<Option<usize>> {
    match std::env::var("NBMIX_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("NBMIX_THREADS must be a positive integer, got '{v}'"))),
        _ => Ok(None),
    }
}

fn apply_common(cfg: &mut RunConfig, c: Common) -> CliResult<()> {
    cfg.k = c.k;
    cfg.k_range = c.k_range;
    cfg.tests = c.tests;
    cfg.level = c.level;
    cfg.seed = c.seed;
    cfg.bias_correct = !c.no_bias_correct;
    cfg.threads = match c.threads {
        Some(t) => Some(t),
        None => env_threads()?,
    };
    cfg.fit.seed = c.seed;
    if let Some(t) = c.tol {
        cfg.fit.tol = t;
    }
    if let Some(m) = c.max_iter {
        cfg.fit.max_iter = m;
    }
    if let Some(r) = c.restarts {
        cfg.fit.restarts = r;
    }
    Ok(())
}

fn data_config(command: Command, a: DataArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::new(command, a.common.out.clone());
    let mut map = ConditionMap::from_pairs(&a.conditions)?;
    if let Some(p) = &a.conditions_file {
        map = map.merge(ConditionMap::from_file(p)?)?;
    }
    if map.is_empty() {
        return Err(CliError::Config(
            "no condition assignments: use --condition or --conditions-file".into(),
        ));
    }
    cfg.input_path = Some(a.input);
    cfg.condition_map = map;
    cfg.min_mean_count = a.min_mean_count;
    cfg.pseudocount = a.pseudocount;
    apply_common(&mut cfg, a.common)?;
    Ok(cfg)
}

fn sim_config(a: SimArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::new(Command::Simulate, a.common.out.clone());
    apply_common(&mut cfg, a.common)?;
    let sim = cfg.simulation.as_mut().expect("simulate defaults");
    sim.n_datasets = a.datasets;
    sim.n_per_condition = a.replicates;
    sim.variance_curve = a.variance_curve;
    sim.design.p = a.genes;
    sim.design.seed = cfg.seed;
    if let Some(f) = a.frac_de {
        sim.design.frac_de = f;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match cli.command {
        Sub::Fit(a) => data_config(Command::Fit, a),
        Sub::SelectK(a) => data_config(Command::SelectK, a),
        Sub::Test(a) => data_config(Command::Test, a),
        Sub::Simulate(a) => sim_config(a),
    };
    match cfg.and_then(|cfg| run(&cfg).map(|o| (cfg, o))) {
        Ok((cfg, outcome)) => {
            if outcome.summary["fit"]["converged"] == false {
                eprintln!("warning: EM stopped at the iteration limit without converging");
            }
            for name in &outcome.outputs {
                println!("{}", cfg.output_dir.join(name).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
