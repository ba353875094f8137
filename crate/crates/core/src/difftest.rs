//! Two-condition differential expression tests whose variances come from the
//! fitted mixture.
//!
//! Each replicate's variance is λ̂(1 + λ̂ Σ_k τ_ik/α_k): the component
//! over-dispersions weighted by the gene's posterior memberships. The three
//! statistics (difference, ratio, log ratio of the condition means) use this
//! variance directly or through the delta method, and are referred to a
//! standard normal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::em::FitResult;
use crate::error::{NbmixError, Result};
use crate::special::normal_sf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Difference,
    Ratio,
    LogRatio,
}

impl TestKind {
    pub const ALL: [TestKind; 3] = [TestKind::Difference, TestKind::Ratio, TestKind::LogRatio];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Difference => "difference",
            TestKind::Ratio => "ratio",
            TestKind::LogRatio => "logratio",
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestKind {
    type Err = NbmixError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "difference" | "diff" => Ok(TestKind::Difference),
            "ratio" => Ok(TestKind::Ratio),
            "logratio" | "log-ratio" | "log_ratio" => Ok(TestKind::LogRatio),
            other => Err(NbmixError::InvalidConfig(format!(
                "unknown test '{other}' (expected difference, ratio or logratio)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneVariance {
    /// Var(λ̂_ij) for each condition.
    pub var_lambda_hat: Vec<f64>,
    /// Σ_k τ_ik / α_k.
    pub overdisp_mix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTestResult {
    pub gene_id: String,
    pub test_kind: TestKind,
    /// `None` when the statistic is undefined for this gene.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
}

impl GeneTestResult {
    pub fn defined(&self) -> bool {
        self.statistic.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTable {
    pub kind: TestKind,
    pub results: Vec<GeneTestResult>,
}

impl TestTable {
    pub fn n_defined(&self) -> usize {
        self.results.iter().filter(|r| r.defined()).count()
    }

    /// Genes whose adjusted p-value is at most `level`.
    pub fn n_significant(&self, level: f64) -> usize {
        self.results
            .iter()
            .filter(|r| r.p_adjusted.is_some_and(|q| q <= level))
            .count()
    }
}

/// Posterior-weighted over-dispersion Σ_k τ_k / α_k.
pub fn overdispersion_mix(tau_row: &[f64], alphas: &[f64]) -> f64 {
    tau_row.iter().zip(alphas).map(|(t, a)| t / a).sum()
}

/// Var(λ̂_ij) = λ̂(1 + λ̂ Σ_k τ_k/α_k) / n_j, times n_j/(n_j − 1) when
/// `bias_correct` is set.
pub fn variance_lambda_hat(
    gene_counts_j: &[u64],
    lambda_hat: f64,
    tau_row: &[f64],
    alphas: &[f64],
    bias_correct: bool,
) -> Result<f64> {
    let n_j = gene_counts_j.len();
    if n_j == 0 {
        return Err(NbmixError::Shape("no replicates in condition".into()));
    }
    if bias_correct && n_j < 2 {
        return Err(NbmixError::InsufficientReplicates { condition: 0, n: n_j });
    }
    if tau_row.len() != alphas.len() {
        return Err(NbmixError::Shape(format!(
            "{} responsibilities for {} alphas",
            tau_row.len(),
            alphas.len()
        )));
    }
    Ok(variance_from_mix(
        lambda_hat,
        overdispersion_mix(tau_row, alphas),
        n_j,
        bias_correct,
    ))
}

fn variance_from_mix(lambda_hat: f64, mix: f64, n_j: usize, bias_correct: bool) -> f64 {
    let n = n_j as f64;
    let var = lambda_hat * (1.0 + lambda_hat * mix) / n;
    if bias_correct {
        var * n / (n - 1.0)
    } else {
        var
    }
}

/// Variances of every condition mean of gene `i` under a fitted mixture.
pub fn gene_variance(data: &CountMatrix, fit: &FitResult, i: usize, bias_correct: bool) -> GeneVariance {
    let mix = overdispersion_mix(
        fit.tau.tau.row(i).as_slice().expect("standard layout"),
        &fit.params.alphas,
    );
    let var_lambda_hat = data
        .n_per_condition()
        .iter()
        .enumerate()
        .map(|(j, &n_j)| variance_from_mix(fit.params.lambda[[i, j]], mix, n_j, bias_correct))
        .collect();
    GeneVariance {
        var_lambda_hat,
        overdisp_mix: mix,
    }
}

/// (λ̂₁ − λ̂₂)/√(Var₁ + Var₂); undefined when both variances vanish.
pub fn difference_test(lam1: f64, lam2: f64, var1: f64, var2: f64) -> Option<f64> {
    let var = var1 + var2;
    (var > 0.0).then(|| (lam1 - lam2) / var.sqrt())
}

/// (λ̂₁/λ̂₂ − 1)/√V with the delta-method variance
/// V = Var₁/λ̂₂² + λ̂₁²·Var₂/λ̂₂⁴; undefined when λ̂₂ = 0 or V = 0.
pub fn ratio_test(lam1: f64, lam2: f64, var1: f64, var2: f64) -> Option<f64> {
    if lam2 <= 0.0 {
        return None;
    }
    let l2sq = lam2 * lam2;
    let var = var1 / l2sq + lam1 * lam1 * var2 / (l2sq * l2sq);
    (var > 0.0).then(|| (lam1 / lam2 - 1.0) / var.sqrt())
}

/// (ln λ̂₁ − ln λ̂₂)/√(Var(y₁₊)/y₁₊² + Var(y₂₊)/y₂₊²); undefined when either
/// condition total is zero.
pub fn logratio_test(y_sum1: u64, y_sum2: u64, lam1: f64, lam2: f64, var_sum1: f64, var_sum2: f64) -> Option<f64> {
    if y_sum1 == 0 || y_sum2 == 0 || lam1 <= 0.0 || lam2 <= 0.0 {
        return None;
    }
    let (y1, y2) = (y_sum1 as f64, y_sum2 as f64);
    let var = var_sum1 / (y1 * y1) + var_sum2 / (y2 * y2);
    (var > 0.0).then(|| (lam1.ln() - lam2.ln()) / var.sqrt())
}

/// 2·(1 − Φ(|z|)).
pub fn two_sided_p(statistic: f64) -> f64 {
    (2.0 * normal_sf(statistic.abs())).min(1.0)
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(NbmixError::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        let q = p_values[idx] * (m as f64 / (rank + 1) as f64);
        running = running.min(q);
        adjusted[idx] = running.min(1.0);
    }
    Ok(adjusted)
}

/// Runs the requested tests on every gene of a two-condition dataset.
/// Condition 0 plays the role of the numerator. BH adjustment runs within
/// each test over the genes where the statistic is defined.
pub fn run_tests(
    fit: &FitResult,
    data: &CountMatrix,
    kinds: &[TestKind],
    bias_correct: bool,
) -> Result<Vec<TestTable>> {
    if data.n_conditions() != 2 {
        return Err(NbmixError::UnsupportedDesign(format!(
            "differential tests need exactly 2 conditions, got {}",
            data.n_conditions()
        )));
    }
    if fit.params.lambda.dim() != (data.n_genes(), 2) || fit.tau.n_genes() != data.n_genes() {
        return Err(NbmixError::Shape("fit does not match the data".into()));
    }
    let n_per = data.n_per_condition();
    if bias_correct {
        if let Some(j) = n_per.iter().position(|&n| n < 2) {
            return Err(NbmixError::InsufficientReplicates {
                condition: j,
                n: n_per[j],
            });
        }
    }
    let variances: Vec<GeneVariance> = (0..data.n_genes())
        .map(|i| gene_variance(data, fit, i, bias_correct))
        .collect();

    kinds
        .iter()
        .map(|&kind| {
            let stats: Vec<Option<f64>> = variances
                .iter()
                .enumerate()
                .map(|(i, gv)| {
                    let (l1, l2) = (fit.params.lambda[[i, 0]], fit.params.lambda[[i, 1]]);
                    let (v1, v2) = (gv.var_lambda_hat[0], gv.var_lambda_hat[1]);
                    match kind {
                        TestKind::Difference => difference_test(l1, l2, v1, v2),
                        TestKind::Ratio => ratio_test(l1, l2, v1, v2),
                        TestKind::LogRatio => {
                            let (n1, n2) = (n_per[0] as f64, n_per[1] as f64);
                            logratio_test(
                                data.condition_total(i, 0),
                                data.condition_total(i, 1),
                                l1,
                                l2,
                                n1 * n1 * v1,
                                n2 * n2 * v2,
                            )
                        }
                    }
                    .filter(|s| s.is_finite())
                })
                .collect();
            let p_values: Vec<Option<f64>> = stats.iter().map(|s| s.map(two_sided_p)).collect();
            let defined: Vec<f64> = p_values.iter().flatten().copied().collect();
            let mut adjusted = bh_adjust(&defined)?.into_iter();
            let results = stats
                .iter()
                .zip(&p_values)
                .zip(data.gene_ids())
                .map(|((s, p), id)| GeneTestResult {
                    gene_id: id.clone(),
                    test_kind: kind,
                    statistic: *s,
                    p_value: *p,
                    p_adjusted: p.map(|_| adjusted.next().expect("one adjusted value per defined p")),
                })
                .collect();
            Ok(TestTable { kind, results })
        })
        .collect()
}
