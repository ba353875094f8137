//! EM estimation of the K-component Negative Binomial mixture in which genes
//! share a dispersion through their component while each gene keeps its own
//! per-condition mean.
//!
//! Two latent layers drive the algorithm: the component label `z_i` of each
//! gene and the unit-mean Gamma rate `u_ijr` behind every count. The E-step
//! yields the responsibilities `tau[i, k]` and the Gamma posterior moments
//! `E(u | y, z)` and `E(ln u | y, z)`; the M-step then
//!
//! * sets `lambda[i, j]` to the per-condition sample mean (it does not depend
//!   on the responsibilities, so it is computed once),
//! * maximizes each component's expected complete-data term in `alpha_k`
//!   with a safeguarded Newton iteration on `ln alpha_k`,
//! * sets the weights to the column means of `tau`.
//!
//! After every M-step components are relabelled so that alphas ascend.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{NbmixError, Result};
use crate::nb::{e_ln_u_raw, e_u_raw, nb_log_pmf_raw};
use crate::special::{digamma_unchecked, trigamma_unchecked};

/// Search interval for the dispersion update.
pub const ALPHA_MIN: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1e6;

/// Clip range for the method-of-moments starting values.
const INIT_ALPHA_RANGE: (f64, f64) = (0.5, 600.0);

/// Column mass below which a component is treated as empty.
const EMPTY_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// p × d gene/condition means.
    pub lambda: Array2<f64>,
    pub weights: Vec<f64>,
    /// Component dispersions, ascending.
    pub alphas: Vec<f64>,
}

impl MixtureParams {
    pub fn n_components(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.alphas.len();
        if k == 0 || self.weights.len() != k {
            return Err(NbmixError::Shape(format!(
                "{} weights for {} components",
                self.weights.len(),
                k
            )));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(NbmixError::Domain(format!("alpha must be finite and > 0, got {a}")));
        }
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(NbmixError::Domain("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(NbmixError::Domain(format!("weights sum to {total}, expected 1")));
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(NbmixError::Domain("lambda must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Largest relative alpha change or absolute weight change.
    pub fn max_change(&self, other: &MixtureParams) -> f64 {
        let da = self
            .alphas
            .iter()
            .zip(&other.alphas)
            .map(|(a, b)| (a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
        let dw = self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs());
        da.chain(dw).fold(0.0, f64::max)
    }

    /// Relabels components so that alphas ascend; returns the permutation
    /// `order` with `new[k] = old[order[k]]`.
    fn canonicalize(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.alphas.len()).collect();
        order.sort_by(|&a, &b| self.alphas[a].total_cmp(&self.alphas[b]));
        self.alphas = order.iter().map(|&k| self.alphas[k]).collect();
        self.weights = order.iter().map(|&k| self.weights[k]).collect();
        order
    }
}

/// Posterior component memberships, one row per gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub tau: Array2<f64>,
}

impl Responsibilities {
    pub fn n_genes(&self) -> usize {
        self.tau.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.tau.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.tau.row(i).to_vec()
    }

    /// Classification entropy −Σ τ ln τ with 0 ln 0 = 0.
    pub fn entropy(&self) -> f64 {
        self.tau.iter().filter(|&&t| t > 0.0).map(|&t| -t * t.ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Converged once |Δ loglik| / (|loglik| + 1) falls below this ...
    pub tol: f64,
    /// ... and no alpha (relative) or weight (absolute) moved by more than this.
    pub param_tol: f64,
    pub max_iter: usize,
    /// Extra random starts besides the deterministic quantile start.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            param_tol: 1e-6,
            max_iter: 500,
            restarts: 0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(NbmixError::InvalidConfig(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.param_tol.is_nan() || self.param_tol <= 0.0 {
            return Err(NbmixError::InvalidConfig(format!(
                "param_tol must be > 0, got {}",
                self.param_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(NbmixError::InvalidConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic: f64,
    pub icl_bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MixtureParams,
    pub tau: Responsibilities,
    pub loglik_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub aic: f64,
    pub bic: f64,
    pub icl_bic: f64,
    /// Set when some component lost all of its mass during the fit.
    pub empty_component: bool,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the starting value")
    }

    pub fn n_components(&self) -> usize {
        self.params.n_components()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_shapes(data: &CountMatrix, params: &MixtureParams) -> Result<()> {
    let want = (data.n_genes(), data.n_conditions());
    if params.lambda.dim() != want {
        return Err(NbmixError::Shape(format!(
            "lambda is {:?}, data needs {:?}",
            params.lambda.dim(),
            want
        )));
    }
    params.validate()
}

/// ln Π_{j,r} NegBin(y_ijr; λ_ij, α) for one gene.
fn gene_component_log_density(gene_row: &[u64], lambda_row: &[f64], condition_of_sample: &[usize], alpha: f64) -> f64 {
    gene_row
        .iter()
        .zip(condition_of_sample)
        .map(|(&y, &j)| nb_log_pmf_raw(y, lambda_row[j], alpha))
        .sum()
}

/// ln Σ_k w_k Π_{j,r} NegBin(y_ijr; λ_ij, α_k) for a single gene.
///
/// `condition_of_sample[s]` maps each entry of `gene_row` to its index in `lambda_row`.
pub fn mixture_gene_log_density(
    gene_row: &[u64],
    lambda_row: &[f64],
    condition_of_sample: &[usize],
    alphas: &[f64],
    weights: &[f64],
) -> Result<f64> {
    if gene_row.len() != condition_of_sample.len() {
        return Err(NbmixError::Shape(format!(
            "{} counts but {} condition labels",
            gene_row.len(),
            condition_of_sample.len()
        )));
    }
    if condition_of_sample.iter().any(|&j| j >= lambda_row.len()) {
        return Err(NbmixError::Shape(format!(
            "condition index outside {} means",
            lambda_row.len()
        )));
    }
    if alphas.len() != weights.len() || alphas.is_empty() {
        return Err(NbmixError::Shape(format!(
            "{} alphas for {} weights",
            alphas.len(),
            weights.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(NbmixError::Domain(format!("alpha must be finite and > 0, got {a}")));
    }
    if lambda_row.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(NbmixError::Domain("lambda must be finite and >= 0".into()));
    }
    let terms: Vec<f64> = alphas
        .iter()
        .zip(weights)
        .map(|(&a, &w)| w.ln() + gene_component_log_density(gene_row, lambda_row, condition_of_sample, a))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// p × K matrix of ln w_k + ln f_k(y_i).
fn weighted_component_log_densities(data: &CountMatrix, params: &MixtureParams) -> Array2<f64> {
    let p = data.n_genes();
    let k = params.n_components();
    let cond = data.condition_of_sample();
    let ln_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
    let rows: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let row = data.gene_row(i);
            let row = row.as_slice().expect("standard layout");
            let lambda_row = params.lambda.row(i);
            let lambda_row = lambda_row.as_slice().expect("standard layout");
            params
                .alphas
                .iter()
                .zip(&ln_w)
                .map(|(&a, &lw)| lw + gene_component_log_density(row, lambda_row, cond, a))
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((p, k));
    for (i, r) in rows.into_iter().enumerate() {
        for (kk, v) in r.into_iter().enumerate() {
            out[[i, kk]] = v;
        }
    }
    out
}

/// Turns weighted component log-densities into (loglik, tau).
fn posterior_from_log_densities(data: &CountMatrix, weighted: &Array2<f64>) -> Result<(f64, Responsibilities)> {
    let mut tau = Array2::zeros(weighted.dim());
    let mut loglik = 0.0;
    for (i, row) in weighted.axis_iter(Axis(0)).enumerate() {
        let row = row.to_vec();
        let norm = log_sum_exp(&row);
        if !norm.is_finite() {
            return Err(NbmixError::Degenerate {
                gene: data.gene_ids()[i].clone(),
                reason: "every component assigns zero likelihood".into(),
            });
        }
        loglik += norm;
        for (k, v) in row.iter().enumerate() {
            tau[[i, k]] = (v - norm).exp();
        }
    }
    Ok((loglik, Responsibilities { tau }))
}

/// Observed-data log-likelihood Σ_i ln Σ_k w_k f_k(y_i).
pub fn total_log_likelihood(data: &CountMatrix, params: &MixtureParams) -> Result<f64> {
    check_shapes(data, params)?;
    let weighted = weighted_component_log_densities(data, params);
    Ok(weighted
        .axis_iter(Axis(0))
        .map(|row| log_sum_exp(row.as_slice().expect("standard layout")))
        .sum())
}

/// Posterior component memberships by Bayes' rule, in log space.
pub fn e_step(data: &CountMatrix, params: &MixtureParams) -> Result<Responsibilities> {
    check_shapes(data, params)?;
    let weighted = weighted_component_log_densities(data, params);
    posterior_from_log_densities(data, &weighted).map(|(_, tau)| tau)
}

/// Per-condition sample means, the closed-form mean update.
pub fn m_step_lambda(data: &CountMatrix) -> Array2<f64> {
    let p = data.n_genes();
    let d = data.n_conditions();
    let n_per = data.n_per_condition();
    Array2::from_shape_fn((p, d), |(i, j)| data.condition_total(i, j) as f64 / n_per[j] as f64)
}

/// Column means of tau.
pub fn m_step_weights(tau: &Responsibilities) -> Vec<f64> {
    let p = tau.n_genes() as f64;
    tau.tau.axis_iter(Axis(1)).map(|col| col.sum() / p).collect()
}

/// Sufficient statistics of one component's dispersion objective:
/// `mass` = Σ_i τ_ik · (#informative counts), `sum_ln_u` = Σ τ E(ln u), `sum_u` = Σ τ E(u).
#[derive(Debug, Clone, Copy, Default)]
struct AlphaStats {
    column_mass: f64,
    mass: f64,
    sum_ln_u: f64,
    sum_u: f64,
}

impl AlphaStats {
    /// g_k(α) = mass·(α ln α − lnΓ(α)) + (α − 1)·Σ E(ln u) − α·Σ E(u)
    fn objective(&self, alpha: f64) -> f64 {
        self.mass * (alpha * alpha.ln() - crate::special::ln_gamma_unchecked(alpha)) + (alpha - 1.0) * self.sum_ln_u
            - alpha * self.sum_u
    }

    fn derivative(&self, alpha: f64) -> f64 {
        self.mass * (alpha.ln() + 1.0 - digamma_unchecked(alpha)) + self.sum_ln_u - self.sum_u
    }
}

/// Counts with λ_ij = 0 carry no information on α (their likelihood is one
/// for every dispersion) and are left out of the sums.
fn alpha_stats(
    data: &CountMatrix,
    lambda: &Array2<f64>,
    tau: &Responsibilities,
    alphas_prev: &[f64],
) -> Vec<AlphaStats> {
    let p = data.n_genes();
    let k = alphas_prev.len();
    let cond = data.condition_of_sample();
    let per_gene: Vec<Vec<AlphaStats>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let row = data.gene_row(i);
            (0..k)
                .map(|kk| {
                    let t = tau.tau[[i, kk]];
                    let a = alphas_prev[kk];
                    let mut s = AlphaStats {
                        column_mass: t,
                        ..Default::default()
                    };
                    if t == 0.0 {
                        return s;
                    }
                    let (mut n_inf, mut ln_u, mut u) = (0.0, 0.0, 0.0);
                    for (&y, &j) in row.iter().zip(cond) {
                        let l = lambda[[i, j]];
                        if l == 0.0 {
                            continue;
                        }
                        n_inf += 1.0;
                        ln_u += e_ln_u_raw(y, l, a);
                        u += e_u_raw(y, l, a);
                    }
                    s.mass = t * n_inf;
                    s.sum_ln_u = t * ln_u;
                    s.sum_u = t * u;
                    s
                })
                .collect()
        })
        .collect();
    let mut totals = vec![AlphaStats::default(); k];
    for gene in per_gene {
        for (acc, s) in totals.iter_mut().zip(gene) {
            acc.column_mass += s.column_mass;
            acc.mass += s.mass;
            acc.sum_ln_u += s.sum_ln_u;
            acc.sum_u += s.sum_u;
        }
    }
    totals
}

/// Solves ln α − ψ(α) = c on [ALPHA_MIN, ALPHA_MAX] by Newton steps in
/// t = ln α, falling back to bisection whenever a step leaves the bracket.
fn solve_dispersion(c: f64) -> f64 {
    let h = |t: f64| {
        let a = t.exp();
        t - digamma_unchecked(a) - c
    };
    let (mut lo, mut hi) = (ALPHA_MIN.ln(), ALPHA_MAX.ln());
    // h is strictly decreasing in t
    if h(lo) <= 0.0 {
        return ALPHA_MIN;
    }
    if h(hi) >= 0.0 {
        return ALPHA_MAX;
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let a = t.exp();
        let f = t - digamma_unchecked(a) - c;
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let slope = 1.0 - a * trigamma_unchecked(a);
        let mut next = t - f / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs().max(1.0) || hi - lo <= 1e-15 * t.abs().max(1.0) {
            t = next;
            break;
        }
        t = next;
    }
    t.exp()
}

/// Dispersion update: for each component maximize the expected complete-data
/// term g_k(α), with the Gamma posterior moments evaluated at `alphas_prev`.
/// Components without posterior mass keep their previous value.
pub fn m_step_alpha(
    data: &CountMatrix,
    lambda: &Array2<f64>,
    tau: &Responsibilities,
    alphas_prev: &[f64],
) -> Result<Vec<f64>> {
    if tau.n_genes() != data.n_genes() || tau.n_components() != alphas_prev.len() {
        return Err(NbmixError::Shape(format!(
            "tau is {:?}, expected ({}, {})",
            tau.tau.dim(),
            data.n_genes(),
            alphas_prev.len()
        )));
    }
    if lambda.dim() != (data.n_genes(), data.n_conditions()) {
        return Err(NbmixError::Shape(format!("lambda is {:?}", lambda.dim())));
    }
    let stats = alpha_stats(data, lambda, tau, alphas_prev);
    stats
        .iter()
        .zip(alphas_prev)
        .enumerate()
        .map(|(k, (s, &prev))| {
            if s.column_mass < EMPTY_COMPONENT_MASS || s.mass <= 0.0 {
                return Ok(prev);
            }
            if !(s.sum_ln_u.is_finite() && s.sum_u.is_finite()) {
                return Err(NbmixError::Degenerate {
                    gene: format!("component {k}"),
                    reason: "non-finite dispersion objective".into(),
                });
            }
            // g'(α) = 0  ⇔  ln α − ψ(α) = (Σ E(u) − Σ E(ln u)) / mass − 1
            let c = (s.sum_u - s.sum_ln_u) / s.mass - 1.0;
            let alpha = solve_dispersion(c.max(0.0));
            if !s.objective(alpha).is_finite() {
                return Err(NbmixError::Degenerate {
                    gene: format!("component {k}"),
                    reason: "non-finite dispersion objective".into(),
                });
            }
            Ok(alpha)
        })
        .collect()
}

/// Derivative of component `k`'s dispersion objective at `alpha`, with the
/// posterior moments taken at `alphas_prev`. Exposed for diagnostics.
pub fn alpha_objective_derivative(
    data: &CountMatrix,
    lambda: &Array2<f64>,
    tau: &Responsibilities,
    alphas_prev: &[f64],
    k: usize,
    alpha: f64,
) -> f64 {
    alpha_stats(data, lambda, tau, alphas_prev)[k].derivative(alpha)
}

/// The dispersion objective g_k itself (see [`alpha_objective_derivative`]).
pub fn alpha_objective(
    data: &CountMatrix,
    lambda: &Array2<f64>,
    tau: &Responsibilities,
    alphas_prev: &[f64],
    k: usize,
    alpha: f64,
) -> f64 {
    alpha_stats(data, lambda, tau, alphas_prev)[k].objective(alpha)
}

/// Number of free parameters: every λ_ij, K dispersions, K − 1 weights.
pub fn n_free_parameters(p: usize, d: usize, k: usize) -> usize {
    p * d + 2 * k - 1
}

pub fn information_criteria(loglik: f64, p: usize, d: usize, k: usize, tau: &Responsibilities) -> InformationCriteria {
    let h = n_free_parameters(p, d, k) as f64;
    let aic = -2.0 * loglik + 2.0 * h;
    let bic = -2.0 * loglik + h * (p as f64).ln();
    let icl_bic = bic + 2.0 * tau.entropy();
    InformationCriteria { aic, bic, icl_bic }
}

/// Per-gene method-of-moments dispersion from the within-condition residual
/// variance, clipped to the initialization range. Genes with zero mean are skipped.
fn moment_dispersions(data: &CountMatrix, lambda: &Array2<f64>) -> Vec<f64> {
    let n = data.n_samples();
    let d = data.n_conditions();
    let cond = data.condition_of_sample();
    (0..data.n_genes())
        .filter_map(|i| {
            let row = data.gene_row(i);
            let mean = row.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
            if mean == 0.0 {
                return None;
            }
            let (ss, dof) = if n > d {
                let ss: f64 = row
                    .iter()
                    .zip(cond)
                    .map(|(&y, &j)| (y as f64 - lambda[[i, j]]).powi(2))
                    .sum();
                (ss, (n - d) as f64)
            } else if n > 1 {
                let ss: f64 = row.iter().map(|&y| (y as f64 - mean).powi(2)).sum();
                (ss, (n - 1) as f64)
            } else {
                return Some(INIT_ALPHA_RANGE.1);
            };
            let excess = ss / dof - mean;
            let a = if excess > 0.0 {
                mean * mean / excess
            } else {
                INIT_ALPHA_RANGE.1
            };
            Some(a.clamp(INIT_ALPHA_RANGE.0, INIT_ALPHA_RANGE.1))
        })
        .collect()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Quantile start: alphas at the (k − ½)/K quantiles of the per-gene moment
/// estimates, uniform weights. Tied starting values are spread by 10% so
/// that the components are distinguishable.
pub fn initial_params(data: &CountMatrix, k: usize) -> MixtureParams {
    let lambda = m_step_lambda(data);
    let mut est = moment_dispersions(data, &lambda);
    if est.is_empty() {
        est.push(1.0);
    }
    est.sort_by(f64::total_cmp);
    let mut alphas: Vec<f64> = (1..=k)
        .map(|kk| quantile_sorted(&est, (kk as f64 - 0.5) / k as f64))
        .collect();
    for kk in 1..k {
        if alphas[kk] <= alphas[kk - 1] * 1.1 {
            alphas[kk] = alphas[kk - 1] * 1.1;
        }
    }
    MixtureParams {
        lambda,
        weights: vec![1.0 / k as f64; k],
        alphas,
    }
}

fn random_params(lambda: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> MixtureParams {
    let (lo, hi) = (INIT_ALPHA_RANGE.0.ln(), INIT_ALPHA_RANGE.1.ln());
    let mut alphas: Vec<f64> = (0..k).map(|_| rng.random_range(lo..hi).exp()).collect();
    alphas.sort_by(f64::total_cmp);
    MixtureParams {
        lambda: lambda.clone(),
        weights: vec![1.0 / k as f64; k],
        alphas,
    }
}

/// One EM iteration from `params` given its responsibilities `tau`.
fn em_update(data: &CountMatrix, params: &MixtureParams, tau: &Responsibilities) -> Result<(MixtureParams, bool)> {
    let alphas = m_step_alpha(data, &params.lambda, tau, &params.alphas)?;
    let weights = m_step_weights(tau);
    let empty = weights
        .iter()
        .any(|&w| w * (tau.n_genes() as f64) < EMPTY_COMPONENT_MASS);
    let mut next = MixtureParams {
        lambda: params.lambda.clone(),
        weights,
        alphas,
    };
    next.canonicalize();
    Ok((next, empty))
}

/// Runs a single full EM iteration (E-step then M-step) from `params`.
pub fn em_iteration(data: &CountMatrix, params: &MixtureParams) -> Result<MixtureParams> {
    let tau = e_step(data, params)?;
    em_update(data, params, &tau).map(|(p, _)| p)
}

fn run_em(data: &CountMatrix, start: MixtureParams, config: &FitConfig) -> Result<FitResult> {
    let mut params = start;
    params.canonicalize();
    let (mut loglik, mut tau) = posterior_from_log_densities(data, &weighted_component_log_densities(data, &params))?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut empty_component = false;
    let mut n_iter = 0;
    while n_iter < config.max_iter {
        let (next, empty) = em_update(data, &params, &tau)?;
        empty_component |= empty;
        let (next_loglik, next_tau) =
            posterior_from_log_densities(data, &weighted_component_log_densities(data, &next))?;
        n_iter += 1;
        let change = (next_loglik - loglik).abs() / (loglik.abs() + 1.0);
        let step = params.max_change(&next);
        params = next;
        tau = next_tau;
        loglik = next_loglik;
        trace.push(loglik);
        if change < config.tol && step < config.param_tol {
            converged = true;
            break;
        }
    }
    let ic = information_criteria(loglik, data.n_genes(), data.n_conditions(), params.n_components(), &tau);
    Ok(FitResult {
        params,
        tau,
        loglik_trace: trace,
        n_iter,
        converged,
        aic: ic.aic,
        bic: ic.bic,
        icl_bic: ic.icl_bic,
        empty_component,
    })
}

/// Fits a `k`-component mixture from the quantile start, plus
/// `config.restarts` random starts; the highest final log-likelihood wins.
pub fn fit(data: &CountMatrix, k: usize, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if k == 0 {
        return Err(NbmixError::InvalidConfig("K must be >= 1".into()));
    }
    if data.n_genes() < k {
        return Err(NbmixError::InvalidConfig(format!(
            "K = {k} exceeds the number of genes ({})",
            data.n_genes()
        )));
    }
    let start = initial_params(data, k);
    let lambda = start.lambda.clone();
    let mut best = run_em(data, start, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.restarts {
        let candidate = run_em(data, random_params(&lambda, k, &mut rng), config)?;
        if candidate.loglik() > best.loglik() {
            best = candidate;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub k: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub icl_bic: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
    pub best_aic: Option<usize>,
    pub best_bic: Option<usize>,
    pub best_icl_bic: Option<usize>,
}

fn argmin_k(rows: &[SelectionRow], key: impl Fn(&SelectionRow) -> f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.error.is_none())
        .min_by(|a, b| key(a).total_cmp(&key(b)))
        .map(|r| r.k)
}

impl SelectionTable {
    pub fn from_fits(fits: &[(usize, Result<FitResult>)]) -> Self {
        let rows: Vec<SelectionRow> = fits
            .iter()
            .map(|(k, res)| match res {
                Ok(f) => SelectionRow {
                    k: *k,
                    loglik: f.loglik(),
                    aic: f.aic,
                    bic: f.bic,
                    icl_bic: f.icl_bic,
                    n_iter: f.n_iter,
                    converged: f.converged,
                    error: None,
                },
                Err(e) => SelectionRow {
                    k: *k,
                    loglik: f64::NAN,
                    aic: f64::NAN,
                    bic: f64::NAN,
                    icl_bic: f64::NAN,
                    n_iter: 0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        Self {
            best_aic: argmin_k(&rows, |r| r.aic),
            best_bic: argmin_k(&rows, |r| r.bic),
            best_icl_bic: argmin_k(&rows, |r| r.icl_bic),
            rows,
        }
    }
}

/// Fits every K in `k_range` (inclusive) and tabulates the criteria.
pub fn select_k(
    data: &CountMatrix,
    k_range: std::ops::RangeInclusive<usize>,
    config: &FitConfig,
) -> Result<SelectionTable> {
    config.validate()?;
    if *k_range.start() == 0 || k_range.is_empty() || *k_range.end() > data.n_genes() {
        return Err(NbmixError::InvalidConfig(format!(
            "K range {}..{} must lie within 1..{}",
            k_range.start(),
            k_range.end(),
            data.n_genes()
        )));
    }
    let fits: Vec<(usize, Result<FitResult>)> = k_range.map(|k| (k, fit(data, k, config))).collect();
    Ok(SelectionTable::from_fits(&fits))
}
