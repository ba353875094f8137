//! Simulation designs with a known truth, and the metrics used to judge the
//! mixture fits against it: variance accuracy per K, empirical type-I/II
//! error rates per gene, and the null p-value ECDF.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with a `u64`. Gene
//! parameters are drawn on stream 1 of the design seed; counts on stream 0
//! of the per-dataset seed `master_seed + h`.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::difftest::{gene_variance, run_tests, TestKind, TestTable};
use crate::em::{fit, FitConfig};
use crate::error::{NbmixError, Result};

/// Nominal levels reported for error rates.
pub const DEFAULT_LEVELS: [f64; 3] = [0.05, 0.01, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub p: usize,
    pub frac_de: f64,
    pub n_per_condition: usize,
    pub lambda_range: (f64, f64),
    pub lfc_mean: f64,
    pub lfc_sd: f64,
    pub alpha_range: (f64, f64),
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            p: 300,
            frac_de: 1.0 / 3.0,
            n_per_condition: 5,
            lambda_range: (0.0, 250.0),
            lfc_mean: 0.5,
            lfc_sd: 0.125,
            alpha_range: (0.5, 600.0),
            seed: 0,
        }
    }
}

impl SimDesign {
    /// Number of conditions; the designs are always two-condition.
    pub const D: usize = 2;

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NbmixError::InvalidConfig(msg));
        if self.p == 0 {
            return bad("p must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.frac_de) {
            return bad(format!("frac_de must lie in [0, 1], got {}", self.frac_de));
        }
        if self.n_per_condition == 0 {
            return bad("n_per_condition must be >= 1".into());
        }
        let (l0, l1) = self.lambda_range;
        if !(l0 >= 0.0 && l1 > l0 && l1.is_finite()) {
            return bad(format!("lambda_range must satisfy 0 <= lo < hi, got {l0}..{l1}"));
        }
        let (a0, a1) = self.alpha_range;
        if !(a0 > 0.0 && a1 > a0 && a1.is_finite()) {
            return bad(format!("alpha_range must satisfy 0 < lo < hi, got {a0}..{a1}"));
        }
        if !(self.lfc_sd >= 0.0 && self.lfc_mean.is_finite()) {
            return bad("lfc_sd must be >= 0 and lfc_mean finite".into());
        }
        Ok(())
    }

    pub fn n_de(&self) -> usize {
        (self.p as f64 * self.frac_de).round() as usize
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Per-gene generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTruth {
    pub is_de: Vec<bool>,
    /// p × 2 true means.
    pub true_lambda: Array2<f64>,
    pub true_alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub data: CountMatrix,
    pub truth: GeneTruth,
    /// p × 2 grid of Var(λ̂_ij) = λ(1 + λ/α)/n_j under the truth.
    pub true_variance: Array2<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws gene parameters: the first `n_de` genes get λ₂ = λ₁·e^{−φ} with
/// φ ~ N(lfc_mean, lfc_sd); the rest share λ₁ = λ₂. All λ₁ ~ U(lambda_range)
/// and α ~ U(alpha_range).
pub fn draw_truth(design: &SimDesign) -> Result<GeneTruth> {
    design.validate()?;
    let mut rng = rng_for(design.seed, 1);
    let lfc = Normal::new(design.lfc_mean, design.lfc_sd).map_err(|e| NbmixError::InvalidConfig(e.to_string()))?;
    let n_de = design.n_de();
    let mut true_lambda = Array2::zeros((design.p, SimDesign::D));
    let mut true_alpha = Vec::with_capacity(design.p);
    let mut is_de = Vec::with_capacity(design.p);
    for i in 0..design.p {
        let l1 = rng.random_range(design.lambda_range.0..design.lambda_range.1);
        let de = i < n_de;
        let l2 = if de { l1 * (-lfc.sample(&mut rng)).exp() } else { l1 };
        true_lambda[[i, 0]] = l1;
        true_lambda[[i, 1]] = l2;
        true_alpha.push(rng.random_range(design.alpha_range.0..design.alpha_range.1));
        is_de.push(de);
    }
    Ok(GeneTruth {
        is_de,
        true_lambda,
        true_alpha,
    })
}

/// One NB(λ, α) draw through its Poisson-Gamma representation.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, lambda: f64, alpha: f64) -> u64 {
    let u = Gamma::new(alpha, 1.0 / alpha).expect("alpha > 0").sample(rng);
    let rate = lambda * u;
    if rate > 0.0 && rate.is_finite() {
        Poisson::new(rate).expect("positive rate").sample(rng) as u64
    } else {
        0
    }
}

/// Draws a count matrix for `truth` with `n_per_condition` replicates.
pub fn simulate_counts(truth: &GeneTruth, n_per_condition: usize, seed: u64) -> CountMatrix {
    let mut rng = rng_for(seed, 0);
    let p = truth.true_alpha.len();
    let n = SimDesign::D * n_per_condition;
    let mut counts = Array2::zeros((p, n));
    for i in 0..p {
        for j in 0..SimDesign::D {
            for r in 0..n_per_condition {
                counts[[i, j * n_per_condition + r]] =
                    sample_nb(&mut rng, truth.true_lambda[[i, j]], truth.true_alpha[i]);
            }
        }
    }
    CountMatrix::from_blocks(counts, &[n_per_condition; SimDesign::D]).expect("generated shapes are consistent")
}

fn true_variance(truth: &GeneTruth, n_per_condition: usize) -> Array2<f64> {
    Array2::from_shape_fn(truth.true_lambda.dim(), |(i, j)| {
        let l = truth.true_lambda[[i, j]];
        l * (1.0 + l / truth.true_alpha[i]) / n_per_condition as f64
    })
}

/// New counts for an existing truth.
pub fn replicate_dataset(truth: &GeneTruth, n_per_condition: usize, seed: u64) -> SimDataset {
    SimDataset {
        data: simulate_counts(truth, n_per_condition, seed),
        truth: truth.clone(),
        true_variance: true_variance(truth, n_per_condition),
    }
}

/// Parameters and counts both drawn from `design.seed`.
pub fn generate_dataset(design: &SimDesign) -> Result<SimDataset> {
    let truth = draw_truth(design)?;
    Ok(replicate_dataset(&truth, design.n_per_condition, design.seed))
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Mean over genes and conditions of |V̂ar − Var|/Var, skipping entries whose
/// true variance is zero. The bias correction needs two replicates per condition.
pub fn relative_variance_error(dataset: &SimDataset, fit: &crate::em::FitResult, bias_correct: bool) -> f64 {
    let data = &dataset.data;
    let bias_correct = bias_correct && data.n_per_condition().iter().all(|&n| n >= 2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..data.n_genes() {
        let gv = gene_variance(data, fit, i, bias_correct);
        for (j, est) in gv.var_lambda_hat.iter().enumerate() {
            let truth = dataset.true_variance[[i, j]];
            if truth > 0.0 {
                total += (est - truth).abs() / truth;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceAccuracyRow {
    pub k: usize,
    pub mean: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_datasets: usize,
    pub n_failed: usize,
}

/// Relative variance error per K over `n_datasets` fresh datasets (seeds
/// `design.seed + h`), with mean ± 2·se bands.
pub fn variance_accuracy_curve(
    design: &SimDesign,
    k_values: &[usize],
    n_datasets: usize,
    config: &FitConfig,
    bias_correct: bool,
) -> Result<Vec<VarianceAccuracyRow>> {
    design.validate()?;
    if k_values.iter().any(|&k| k == 0 || k > design.p) {
        return Err(NbmixError::InvalidConfig(format!(
            "K values must lie in 1..={}",
            design.p
        )));
    }
    let per_dataset: Vec<Vec<Option<f64>>> = (0..n_datasets)
        .into_par_iter()
        .map(|h| -> Result<Vec<Option<f64>>> {
            let ds = generate_dataset(&design.with_seed(design.seed + h as u64))?;
            Ok(k_values
                .iter()
                .map(|&k| {
                    fit(&ds.data, k, config)
                        .ok()
                        .map(|f| relative_variance_error(&ds, &f, bias_correct))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(k_values
        .iter()
        .enumerate()
        .map(|(col, &k)| {
            let values: Vec<f64> = per_dataset.iter().filter_map(|row| row[col]).collect();
            let (mean, sd) = mean_and_sd(&values);
            let se = sd / (values.len() as f64).sqrt();
            VarianceAccuracyRow {
                k,
                mean,
                se,
                lower: mean - 2.0 * se,
                upper: mean + 2.0 * se,
                n_datasets: values.len(),
                n_failed: n_datasets - values.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateRow {
    pub level: f64,
    pub type1_mean: f64,
    pub type1_se: f64,
    /// Spread of the per-gene type-I rates.
    pub type1_sd: f64,
    pub type2_mean: f64,
    pub type2_se: f64,
    pub type2_sd: f64,
    pub n_null_genes: usize,
    pub n_de_genes: usize,
    /// Genes with no defined statistic in any dataset.
    pub n_never_defined: usize,
}

/// Per-gene rejection rates across datasets (raw p < level, over datasets
/// where the statistic is defined), then mean/sd/se across genes. Type-I
/// uses the null genes; type-II the DE genes' acceptance rates.
pub fn error_rates(results: &[&TestTable], is_de: &[bool], levels: &[f64]) -> Result<Vec<ErrorRateRow>> {
    if results.iter().any(|t| t.results.len() != is_de.len()) {
        return Err(NbmixError::Shape("result tables and truth differ in length".into()));
    }
    Ok(levels
        .iter()
        .map(|&level| {
            let mut type1 = Vec::new();
            let mut type2 = Vec::new();
            let mut never = 0;
            for (i, &de) in is_de.iter().enumerate() {
                let (mut defined, mut rejected) = (0usize, 0usize);
                for t in results {
                    if let Some(p) = t.results[i].p_value {
                        defined += 1;
                        if p < level {
                            rejected += 1;
                        }
                    }
                }
                if defined == 0 {
                    never += 1;
                    continue;
                }
                let rate = rejected as f64 / defined as f64;
                if de {
                    type2.push(1.0 - rate);
                } else {
                    type1.push(rate);
                }
            }
            let (t1m, t1sd) = mean_and_sd(&type1);
            let (t2m, t2sd) = mean_and_sd(&type2);
            ErrorRateRow {
                level,
                type1_mean: t1m,
                type1_se: t1sd / (type1.len() as f64).sqrt(),
                type1_sd: t1sd,
                type2_mean: t2m,
                type2_se: t2sd / (type2.len() as f64).sqrt(),
                type2_sd: t2sd,
                n_null_genes: type1.len(),
                n_de_genes: type2.len(),
                n_never_defined: never,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfSummary {
    pub grid: Vec<f64>,
    pub ecdf: Vec<f64>,
    /// sup |F_n(x) − x| over [0, 1]; NaN when there are no null p-values.
    pub ks_distance: f64,
    pub n: usize,
}

/// Kolmogorov distance of a sample from U(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// ECDF of the pooled null-gene raw p-values evaluated on `grid`.
pub fn null_pvalue_ecdf(results: &[&TestTable], is_de: &[bool], grid: &[f64]) -> EcdfSummary {
    let mut pooled: Vec<f64> = results
        .iter()
        .flat_map(|t| {
            t.results
                .iter()
                .zip(is_de)
                .filter(|(_, de)| !**de)
                .filter_map(|(r, _)| r.p_value)
        })
        .collect();
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len();
    let ecdf = grid
        .iter()
        .map(|&x| {
            if n == 0 {
                0.0
            } else {
                pooled.partition_point(|&p| p <= x) as f64 / n as f64
            }
        })
        .collect();
    EcdfSummary {
        grid: grid.to_vec(),
        ecdf,
        ks_distance: ks_uniform(&pooled),
        n,
    }
}

/// Evenly spaced grid 0, 1/m, …, 1.
pub fn uniform_grid(m: usize) -> Vec<f64> {
    (0..=m).map(|i| i as f64 / m as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStudyConfig {
    pub design: SimDesign,
    pub n_datasets: usize,
    pub k: usize,
    pub kinds: Vec<TestKind>,
    pub levels: Vec<f64>,
    pub bias_correct: bool,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: TestKind,
    pub rates: Vec<ErrorRateRow>,
    pub ecdf: EcdfSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStudy {
    pub n_per_condition: usize,
    pub n_datasets: usize,
    pub n_failed: usize,
    pub summaries: Vec<KindSummary>,
}

/// Fixed gene parameters from `design.seed`, `n_datasets` count replicates
/// with seeds `design.seed + h`, a K-component fit and the requested tests
/// on each, then error rates and null ECDFs per test.
pub fn error_study(cfg: &ErrorStudyConfig) -> Result<ErrorStudy> {
    let truth = draw_truth(&cfg.design)?;
    let n_j = cfg.design.n_per_condition;
    let tables: Vec<Option<Vec<TestTable>>> = (0..cfg.n_datasets)
        .into_par_iter()
        .map(|h| {
            let ds = replicate_dataset(&truth, n_j, cfg.design.seed + h as u64);
            fit(&ds.data, cfg.k, &cfg.fit)
                .and_then(|f| run_tests(&f, &ds.data, &cfg.kinds, cfg.bias_correct))
                .ok()
        })
        .collect();
    let ok: Vec<&Vec<TestTable>> = tables.iter().flatten().collect();
    let grid = uniform_grid(100);
    let summaries = cfg
        .kinds
        .iter()
        .enumerate()
        .map(|(col, &kind)| {
            let per_kind: Vec<&TestTable> = ok.iter().map(|t| &t[col]).collect();
            Ok(KindSummary {
                kind,
                rates: error_rates(&per_kind, &truth.is_de, &cfg.levels)?,
                ecdf: null_pvalue_ecdf(&per_kind, &truth.is_de, &grid),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ErrorStudy {
        n_per_condition: n_j,
        n_datasets: cfg.n_datasets,
        n_failed: cfg.n_datasets - ok.len(),
        summaries,
    })
}

/// Scientific notation with six significant digits, `NA` for NaN.
fn sci(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.5e}")
    }
}

/// Header plus one row per (test, level) of the error-rate summaries.
pub fn metrics_tsv(studies: &[ErrorStudy]) -> String {
    let mut out = String::from(
        "test\tn_per_condition\tlevel\ttype1_mean\ttype1_se\ttype1_sd\ttype2_mean\ttype2_se\ttype2_sd\tks_null\tn_datasets\tn_failed\n",
    );
    for study in studies {
        for summary in &study.summaries {
            for r in &summary.rates {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    summary.kind,
                    study.n_per_condition,
                    r.level,
                    sci(r.type1_mean),
                    sci(r.type1_se),
                    sci(r.type1_sd),
                    sci(r.type2_mean),
                    sci(r.type2_se),
                    sci(r.type2_sd),
                    sci(summary.ecdf.ks_distance),
                    study.n_datasets,
                    study.n_failed
                );
            }
        }
    }
    out
}

/// Null p-value ECDFs, one row per (test, n_per_condition, grid point).
pub fn ecdf_tsv(studies: &[ErrorStudy]) -> String {
    let mut out = String::from("test\tn_per_condition\tx\tecdf\n");
    for study in studies {
        for summary in &study.summaries {
            for (x, f) in summary.ecdf.grid.iter().zip(&summary.ecdf.ecdf) {
                let _ = writeln!(out, "{}\t{}\t{x}\t{}", summary.kind, study.n_per_condition, sci(*f));
            }
        }
    }
    out
}

pub fn variance_curve_tsv(rows: &[VarianceAccuracyRow]) -> String {
    let mut out = String::from("k\tmean_rel_error\tse\tlower\tupper\tn_datasets\tn_failed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.k,
            sci(r.mean),
            sci(r.se),
            sci(r.lower),
            sci(r.upper),
            r.n_datasets,
            r.n_failed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difftest::GeneTestResult;

    fn table(ps: &[Option<f64>]) -> TestTable {
        TestTable {
            kind: TestKind::Difference,
            results: ps
                .iter()
                .enumerate()
                .map(|(i, p)| GeneTestResult {
                    gene_id: format!("g{i}"),
                    test_kind: TestKind::Difference,
                    statistic: p.map(|_| 0.0),
                    p_value: *p,
                    p_adjusted: *p,
                })
                .collect(),
        }
    }

    #[test]
    fn no_de_means_equal_lambdas() {
        let design = SimDesign {
            frac_de: 0.0,
            p: 50,
            ..Default::default()
        };
        let ds = generate_dataset(&design).unwrap();
        for row in ds.truth.true_lambda.rows() {
            assert_eq!(row[0], row[1]);
        }
        assert!(ds.truth.is_de.iter().all(|d| !d));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let design = SimDesign {
            p: 40,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_dataset(&design).unwrap(), generate_dataset(&design).unwrap());
        assert_ne!(
            generate_dataset(&design).unwrap().data,
            generate_dataset(&design.with_seed(10)).unwrap().data
        );
    }

    #[test]
    fn de_fraction_and_fold_changes() {
        let design = SimDesign::default();
        let truth = draw_truth(&design).unwrap();
        assert_eq!(truth.is_de.iter().filter(|d| **d).count(), 100);
        for i in 0..100 {
            let phi = (truth.true_lambda[[i, 0]] / truth.true_lambda[[i, 1]]).ln();
            assert!(phi > 0.0 && phi < 1.2, "phi {phi}");
        }
        assert!(truth.true_alpha.iter().all(|a| (0.5..600.0).contains(a)));
        assert!(truth.true_lambda.iter().all(|l| (0.0..250.0).contains(l)));
    }

    #[test]
    fn true_variance_matches_generator() {
        let ds = generate_dataset(&SimDesign {
            p: 10,
            n_per_condition: 4,
            ..Default::default()
        })
        .unwrap();
        for i in 0..10 {
            let l = ds.truth.true_lambda[[i, 1]];
            let a = ds.truth.true_alpha[i];
            assert_eq!(ds.true_variance[[i, 1]], l * (1.0 + l / a) / 4.0);
        }
    }

    #[test]
    fn error_rate_extremes() {
        let t = table(&[Some(1.0), Some(1.0), Some(1.0)]);
        let rows = error_rates(&[&t, &t], &[false, true, false], &DEFAULT_LEVELS).unwrap();
        for r in rows {
            assert_eq!(r.type1_mean, 0.0);
            assert_eq!(r.type2_mean, 1.0);
        }
        let t = table(&[Some(0.0), None]);
        let rows = error_rates(&[&t], &[false, false], &[0.05]).unwrap();
        assert_eq!(rows[0].type1_mean, 1.0);
        assert_eq!(rows[0].n_never_defined, 1);
    }

    #[test]
    fn uniform_null_pvalues_hit_level() {
        let mut rng = rng_for(3, 0);
        let tables: Vec<TestTable> = (0..200)
            .map(|_| table(&(0..100).map(|_| Some(rng.random::<f64>())).collect::<Vec<_>>()))
            .collect();
        let refs: Vec<&TestTable> = tables.iter().collect();
        let rows = error_rates(&refs, &[false; 100], &[0.05]).unwrap();
        // 20 000 Bernoulli(0.05) draws: sd of the mean ≈ 0.0015
        assert!((rows[0].type1_mean - 0.05).abs() < 0.006, "{}", rows[0].type1_mean);
        let ecdf = null_pvalue_ecdf(&refs, &[false; 100], &uniform_grid(10));
        assert!(ecdf.ks_distance < 0.02);
        assert_eq!(ecdf.n, 20_000);
    }

    #[test]
    fn ecdf_of_zero_pvalues() {
        let t = table(&[Some(0.0), Some(0.0), Some(0.0)]);
        let e = null_pvalue_ecdf(&[&t], &[false, false, false], &[0.0, 0.5, 1.0]);
        assert_eq!(e.ecdf, vec![1.0, 1.0, 1.0]);
        assert_eq!(e.ks_distance, 1.0);
        let empty = null_pvalue_ecdf(&[&t], &[true, true, true], &[0.5]);
        assert!(empty.ks_distance.is_nan());
    }

    #[test]
    fn ks_against_hand_computation() {
        // sorted 0.1, 0.4, 0.8: max(1/3−0.1, 2/3−0.4, 1−0.8, 0.1, 0.4−1/3, 0.8−2/3) = 0.2666…
        let d = ks_uniform(&[0.8, 0.1, 0.4]);
        assert!((d - (2.0 / 3.0 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn invalid_design_rejected() {
        assert!(SimDesign {
            frac_de: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SimDesign {
            alpha_range: (0.0, 1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
