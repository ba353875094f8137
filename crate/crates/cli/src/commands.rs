use crate::config::{Command, RunConfig};
use crate::error::{CliError, CliResult, InModule};
use crate::format::{opt, sci, sig6};
use crate::ingest::{filter_genes, ingest};
use nbmix_core::simlab::{self, ErrorStudyConfig};
use nbmix_core::{fit, run_tests, CountMatrix, FitResult, SelectionTable, TestTable};
use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;

/// Files written by a command plus a short machine-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct GeneReport<'a> {
    gene_id: &'a str,
    lambda: Vec<f64>,
    tau: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    k: usize,
    converged: bool,
    n_iter: usize,
    loglik: f64,
    aic: f64,
    bic: f64,
    icl_bic: f64,
    empty_component: bool,
    weights: &'a [f64],
    alphas: &'a [f64],
    n_genes: usize,
    n_samples: usize,
    conditions: &'a [String],
    dropped_genes: &'a [String],
    loglik_trace: &'a [f64],
    genes: Vec<GeneReport<'a>>,
}

fn fit_json(data: &CountMatrix, f: &FitResult, dropped: &[String]) -> String {
    let genes = (0..data.n_genes())
        .map(|i| GeneReport {
            gene_id: &data.gene_ids()[i],
            lambda: f.params.lambda.row(i).to_vec(),
            tau: f.tau.row(i),
        })
        .collect();
    let report = FitReport {
        k: f.n_components(),
        converged: f.converged,
        n_iter: f.n_iter,
        loglik: f.loglik(),
        aic: f.aic,
        bic: f.bic,
        icl_bic: f.icl_bic,
        empty_component: f.empty_component,
        weights: &f.params.weights,
        alphas: &f.params.alphas,
        n_genes: data.n_genes(),
        n_samples: data.n_samples(),
        conditions: data.condition_labels(),
        dropped_genes: dropped,
        loglik_trace: &f.loglik_trace,
        genes,
    };
    serde_json::to_string_pretty(&report).expect("serializable report") + "\n"
}

/// Criteria table, one row per K.
pub fn criteria_tsv(table: &SelectionTable) -> String {
    let mut out = String::from("k\tloglik\taic\tbic\ticl_bic\tn_iter\tconverged\terror\n");
    for r in &table.rows {
        let num = |x: f64| if x.is_nan() { "NA".to_string() } else { sci(x) };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.k,
            num(r.loglik),
            num(r.aic),
            num(r.bic),
            num(r.icl_bic),
            r.n_iter,
            r.converged,
            r.error.as_deref().unwrap_or("NA").replace(['\t', '\n'], " ")
        );
    }
    out
}

/// Per-gene test results: statistic as `%.6g`, p-values as `%.6e`, `NA`
/// where the test is undefined.
pub fn results_tsv(table: &TestTable) -> String {
    let mut out = String::from("gene_id\tstatistic\tp_value\tp_adjusted\tdefined\n");
    for r in &table.results {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.gene_id,
            opt(r.statistic, sig6),
            opt(r.p_value, sci),
            opt(r.p_adjusted, sci),
            r.defined()
        );
    }
    out
}

struct Writer<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
}

impl Writer<'_> {
    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

/// Ingests, filters and applies the pseudocount.
fn load(cfg: &RunConfig) -> CliResult<(CountMatrix, Vec<String>)> {
    let path = cfg.input_path.as_deref().expect("validated input path");
    let raw = ingest(path, &cfg.condition_map)?;
    let (data, dropped) = filter_genes(&raw, cfg.min_mean_count);
    if data.n_genes() == 0 {
        return Err(CliError::Config(format!(
            "no gene has mean count above {} ({} dropped)",
            cfg.min_mean_count,
            dropped.len()
        )));
    }
    let data = if cfg.pseudocount > 0.0 {
        data.with_pseudocount(cfg.pseudocount as u64)
    } else {
        data
    };
    Ok((data, dropped))
}

/// Fits the configured K, or every K of the range keeping the best BIC.
fn fit_configured(cfg: &RunConfig, data: &CountMatrix) -> CliResult<(FitResult, Option<SelectionTable>)> {
    let ks = cfg.k_values().expect("validated K");
    if let [k] = ks[..] {
        return Ok((fit(data, k, &cfg.fit).in_module("em-engine")?, None));
    }
    let fits: Vec<(usize, nbmix_core::Result<FitResult>)> = ks.iter().map(|&k| (k, fit(data, k, &cfg.fit))).collect();
    let table = SelectionTable::from_fits(&fits);
    let Some(best) = table.best_bic else {
        let source = fits
            .into_iter()
            .find_map(|(_, r)| r.err())
            .expect("no best K means every fit failed");
        return Err(CliError::Core {
            module: "em-engine",
            source,
        });
    };
    let (_, chosen) = fits.into_iter().find(|(k, _)| *k == best).expect("best K was fitted");
    Ok((chosen.expect("best K fit succeeded"), Some(table)))
}

fn fit_summary(f: &FitResult) -> serde_json::Value {
    json!({
        "k": f.n_components(),
        "converged": f.converged,
        "n_iter": f.n_iter,
        "loglik": f.loglik(),
        "bic": f.bic,
    })
}

fn selection_summary(t: &SelectionTable) -> serde_json::Value {
    json!({ "best_aic": t.best_aic, "best_bic": t.best_bic, "best_icl_bic": t.best_icl_bic })
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Outcome> {
    let (data, dropped) = load(cfg)?;
    let (f, table) = fit_configured(cfg, &data)?;
    let mut w = Writer {
        dir: &cfg.output_dir,
        outputs: Vec::new(),
    };
    w.write("fit.json", &fit_json(&data, &f, &dropped))?;
    let mut summary = json!({ "fit": fit_summary(&f), "n_genes": data.n_genes(), "n_dropped": dropped.len() });
    if let Some(t) = &table {
        w.write("criteria.tsv", &criteria_tsv(t))?;
        summary["selection"] = selection_summary(t);
    }
    Ok(Outcome {
        outputs: w.outputs,
        summary,
    })
}

pub fn cmd_select_k(cfg: &RunConfig) -> CliResult<Outcome> {
    let (data, dropped) = load(cfg)?;
    let (a, b) = match (cfg.k, cfg.k_range) {
        (Some(k), _) => (k, k),
        (None, Some(r)) => r,
        (None, None) => (1, 6.min(data.n_genes())),
    };
    let table = nbmix_core::select_k(&data, a..=b, &cfg.fit).in_module("em-engine")?;
    let mut w = Writer {
        dir: &cfg.output_dir,
        outputs: Vec::new(),
    };
    w.write("criteria.tsv", &criteria_tsv(&table))?;
    Ok(Outcome {
        outputs: w.outputs,
        summary: json!({
            "selection": selection_summary(&table),
            "n_genes": data.n_genes(),
            "n_dropped": dropped.len(),
        }),
    })
}

pub fn cmd_test(cfg: &RunConfig) -> CliResult<Outcome> {
    let (data, dropped) = load(cfg)?;
    let (f, table) = fit_configured(cfg, &data)?;
    let tables = run_tests(&f, &data, &cfg.tests, cfg.bias_correct).in_module("difftest")?;
    let mut w = Writer {
        dir: &cfg.output_dir,
        outputs: Vec::new(),
    };
    w.write("fit.json", &fit_json(&data, &f, &dropped))?;
    if let Some(t) = &table {
        w.write("criteria.tsv", &criteria_tsv(t))?;
    }
    let mut tests = serde_json::Map::new();
    for t in &tables {
        w.write(&format!("results_{}.tsv", t.kind), &results_tsv(t))?;
        tests.insert(
            t.kind.to_string(),
            json!({ "n_defined": t.n_defined(), "n_significant": t.n_significant(cfg.level) }),
        );
    }
    let mut summary = json!({
        "fit": fit_summary(&f),
        "n_genes": data.n_genes(),
        "n_dropped": dropped.len(),
        "numerator": data.condition_labels()[0],
        "level": cfg.level,
        "tests": tests,
    });
    if let Some(t) = &table {
        summary["selection"] = selection_summary(t);
    }
    Ok(Outcome {
        outputs: w.outputs,
        summary,
    })
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Outcome> {
    let sim = cfg.simulation.as_ref().expect("validated simulation settings");
    let k = cfg.k.unwrap_or(3);
    let studies = sim
        .n_per_condition
        .iter()
        .map(|&n| {
            let design = simlab::SimDesign {
                n_per_condition: n,
                seed: cfg.seed,
                ..sim.design.clone()
            };
            simlab::error_study(&ErrorStudyConfig {
                design,
                n_datasets: sim.n_datasets,
                k,
                kinds: cfg.tests.clone(),
                levels: sim.levels.clone(),
                bias_correct: cfg.bias_correct,
                fit: cfg.fit.clone(),
            })
            .in_module("simlab")
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut w = Writer {
        dir: &cfg.output_dir,
        outputs: Vec::new(),
    };
    w.write("metrics.tsv", &simlab::metrics_tsv(&studies))?;
    w.write("ecdf.tsv", &simlab::ecdf_tsv(&studies))?;
    let mut summary = json!({
        "k": k,
        "n_failed": studies.iter().map(|s| s.n_failed).collect::<Vec<_>>(),
    });
    if sim.variance_curve {
        let (a, b) = cfg.k_range.unwrap_or((1, 6));
        let design = simlab::SimDesign {
            n_per_condition: sim.n_per_condition[0],
            seed: cfg.seed,
            ..sim.design.clone()
        };
        let ks: Vec<usize> = (a..=b).collect();
        let rows = simlab::variance_accuracy_curve(&design, &ks, sim.n_datasets, &cfg.fit, cfg.bias_correct)
            .in_module("simlab")?;
        w.write("variance_curve.tsv", &simlab::variance_curve_tsv(&rows))?;
        summary["variance_curve_k"] = json!(ks);
    }
    Ok(Outcome {
        outputs: w.outputs,
        summary,
    })
}

fn manifest(cfg: &RunConfig, outcome: &Outcome) -> String {
    let m = json!({
        "tool": "nbmix",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command.as_str(),
        "config": cfg,
        "outputs": outcome.outputs,
        "summary": outcome.summary,
    });
    serde_json::to_string_pretty(&m).expect("serializable manifest") + "\n"
}

/// Validates `cfg`, runs the command on a pool of `cfg.threads` workers
/// (the global pool when unset) and writes `manifest.json` last.
pub fn run(cfg: &RunConfig) -> CliResult<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    let dispatch = || match cfg.command {
        Command::Fit => cmd_fit(cfg),
        Command::SelectK => cmd_select_k(cfg),
        Command::Test => cmd_test(cfg),
        Command::Simulate => cmd_simulate(cfg),
    };
    let mut outcome = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?
            .install(dispatch)?,
        None => dispatch()?,
    };
    let path = cfg.output_dir.join("manifest.json");
    outcome.outputs.push("manifest.json".into());
    std::fs::write(&path, manifest(cfg, &outcome)).map_err(|e| CliError::io(path, e))?;
    Ok(outcome)
}
