//! Negative Binomial kernel in the (mean, dispersion) parametrization and the
//! Gamma posterior moments of the Poisson-Gamma latent rate.

use serde::{Deserialize, Serialize};

use crate::error::{NbmixError, Result};
use crate::special::{digamma_unchecked, ln_gamma_unchecked, ln_rising_factorial};

/// NB parameters: mean `lambda` and dispersion `alpha`, with variance
/// `lambda * (1 + lambda / alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NBParams {
    lambda: f64,
    alpha: f64,
}

impl NBParams {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(NbmixError::Domain(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(NbmixError::Domain(format!("alpha must be finite and > 0, got {alpha}")));
        }
        Ok(Self { lambda, alpha })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mean(&self) -> f64 {
        self.lambda
    }

    pub fn variance(&self) -> f64 {
        self.lambda * (1.0 + self.lambda / self.alpha)
    }
}

/// Log-probability of `y` under NB(λ, α), gamma-function form.
///
/// λ = 0 is a point mass at zero: returns 0 for `y == 0` and −∞ otherwise.
pub fn nb_log_pmf(y: u64, params: NBParams) -> f64 {
    nb_log_pmf_raw(y, params.lambda, params.alpha)
}

#[inline]
pub(crate) fn nb_log_pmf_raw(y: u64, lambda: f64, alpha: f64) -> f64 {
    if lambda == 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let yf = y as f64;
    let ln_ratio = ln_rising_factorial(y, alpha) - ln_gamma_unchecked(yf + 1.0);
    // α ln(α / (λ + α)) = −α ln(1 + λ/α)
    let zero_term = -alpha * (lambda / alpha).ln_1p();
    let count_term = if y == 0 {
        0.0
    } else {
        yf * (lambda.ln() - (lambda + alpha).ln())
    };
    ln_ratio + count_term + zero_term
}

/// Posterior mean of the latent Gamma rate: E(u | y, z_k) = (y + α)/(λ + α).
pub fn e_u_given_y_z(y: u64, lambda: f64, alpha: f64) -> Result<f64> {
    check_posterior_args(lambda, alpha)?;
    Ok(e_u_raw(y, lambda, alpha))
}

#[inline]
pub(crate) fn e_u_raw(y: u64, lambda: f64, alpha: f64) -> f64 {
    (y as f64 + alpha) / (lambda + alpha)
}

/// Posterior log-mean of the latent rate: E(ln u | y, z_k) = ψ(y + α) − ln(λ + α).
pub fn e_ln_u_given_y_z(y: u64, lambda: f64, alpha: f64) -> Result<f64> {
    check_posterior_args(lambda, alpha)?;
    Ok(e_ln_u_raw(y, lambda, alpha))
}

#[inline]
pub(crate) fn e_ln_u_raw(y: u64, lambda: f64, alpha: f64) -> f64 {
    digamma_unchecked(y as f64 + alpha) - (lambda + alpha).ln()
}

fn check_posterior_args(lambda: f64, alpha: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) || !(alpha > 0.0 && alpha.is_finite()) {
        return Err(NbmixError::Domain(format!(
            "posterior moments need lambda >= 0 and alpha > 0, got lambda={lambda}, alpha={alpha}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::EULER_GAMMA;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Poisson};

    fn nb(lambda: f64, alpha: f64) -> NBParams {
        NBParams::new(lambda, alpha).unwrap()
    }

    #[test]
    fn geometric_case() {
        assert_relative_eq!(nb_log_pmf(0, nb(2.0, 1.0)), (1.0f64 / 3.0).ln(), max_relative = 1e-13);
        assert_relative_eq!(nb_log_pmf(1, nb(2.0, 1.0)), (2.0f64 / 9.0).ln(), max_relative = 1e-13);
    }

    #[test]
    fn matches_direct_gamma_form() {
        // Γ(7)/(Γ(6)Γ(2)) · (10/12)^5 · (2/12)^2
        let direct = (720.0 / 120.0) * (10.0f64 / 12.0).powi(5) * (2.0f64 / 12.0).powi(2);
        assert_relative_eq!(nb_log_pmf(5, nb(10.0, 2.0)), direct.ln(), max_relative = 1e-13);
        assert_relative_eq!(
            nb_log_pmf(5, nb(10.0, 2.0)),
            -2.703_367_253_197_828,
            max_relative = 1e-12
        );
    }

    #[test]
    fn binomial_coefficient_form_agrees_for_integer_alpha() {
        // C(y + α − 1, α − 1) p^y (1 − p)^α with p = λ/(λ+α)
        let choose = |n: u64, k: u64| -> f64 { (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product() };
        for &(y, lambda, alpha) in &[(0u64, 3.0, 1u64), (4, 2.5, 3), (11, 20.0, 5), (30, 7.0, 12)] {
            let a = alpha as f64;
            let p = lambda / (lambda + a);
            let direct = choose(y + alpha - 1, alpha - 1) * p.powi(y as i32) * (1.0 - p).powi(alpha as i32);
            assert_relative_eq!(nb_log_pmf(y, nb(lambda, a)).exp(), direct, max_relative = 1e-11);
        }
    }

    #[test]
    fn zero_mean_is_point_mass() {
        assert_eq!(nb_log_pmf(0, nb(0.0, 3.0)), 0.0);
        assert_eq!(nb_log_pmf(2, nb(0.0, 3.0)), f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(NBParams::new(1.0, 0.0), Err(NbmixError::Domain(_))));
        assert!(matches!(NBParams::new(-0.5, 1.0), Err(NbmixError::Domain(_))));
        assert!(e_u_given_y_z(1, -1.0, 2.0).is_err());
        assert!(e_ln_u_given_y_z(1, 1.0, 0.0).is_err());
    }

    #[test]
    fn normalizes() {
        for &(lambda, alpha) in &[
            (0.3, 0.5),
            (5.0, 1.0),
            (120.0, 2.0),
            (500.0, 0.5),
            (500.0, 600.0),
            (250.0, 37.0),
        ] {
            let p = nb(lambda, alpha);
            let mut total = 0.0;
            let mut y = 0u64;
            // run well past the mean until the pmf is negligible and decreasing
            loop {
                let term = nb_log_pmf(y, p).exp();
                total += term;
                if y as f64 > lambda && term < 1e-17 {
                    break;
                }
                y += 1;
            }
            assert!((1.0 - 1e-8..=1.0 + 1e-12).contains(&total), "{lambda} {alpha}: {total}");
        }
    }

    #[test]
    fn poisson_limit() {
        let poisson_ln = |y: u64, l: f64| y as f64 * l.ln() - l - ln_gamma_unchecked(y as f64 + 1.0);
        for &lambda in &[0.5, 3.0, 20.0] {
            for y in 0..=50u64 {
                let diff = nb_log_pmf(y, nb(lambda, 1e8)).exp() - poisson_ln(y, lambda).exp();
                assert!(diff.abs() < 1e-6, "y={y} lambda={lambda} diff={diff}");
            }
        }
    }

    #[test]
    fn variance_identity() {
        let p = nb(12.0, 3.0);
        assert_relative_eq!(p.variance(), 12.0 * (1.0 + 4.0));
        assert_eq!(p.mean(), 12.0);
    }

    #[test]
    fn gamma_poisson_composition_moments() {
        let (lambda, alpha) = (8.0, 2.5);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gamma = Gamma::new(alpha, 1.0 / alpha).unwrap();
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let rate = lambda * gamma.sample(&mut rng);
                if rate > 0.0 {
                    Poisson::new(rate).unwrap().sample(&mut rng)
                } else {
                    0.0
                }
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target_var = nb(lambda, alpha).variance();
        let se_mean = (target_var / n as f64).sqrt();
        assert!((mean - lambda).abs() < 3.0 * se_mean, "mean {mean}");
        // var of the sample variance ≈ (μ4 − σ⁴)/n; bound μ4 by the empirical fourth moment
        let m4 = draws.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / n as f64;
        let se_var = ((m4 - var * var) / n as f64).sqrt();
        assert!((var - target_var).abs() < 3.0 * se_var, "var {var} vs {target_var}");
    }

    #[test]
    fn posterior_mean_examples() {
        assert_relative_eq!(e_u_given_y_z(3, 3.0, 7.0).unwrap(), 1.0);
        assert_relative_eq!(e_u_given_y_z(0, 0.0, 2.0).unwrap(), 1.0);
        assert_relative_eq!(e_u_given_y_z(8, 4.0, 2.0).unwrap(), 10.0 / 6.0, max_relative = 1e-15);
    }

    #[test]
    fn posterior_log_mean_examples() {
        assert_relative_eq!(
            e_ln_u_given_y_z(0, 0.0, 1.0).unwrap(),
            -EULER_GAMMA,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            e_ln_u_given_y_z(1, 1.0, 1.0).unwrap(),
            1.0 - EULER_GAMMA - 2f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            e_ln_u_given_y_z(8, 4.0, 2.0).unwrap(),
            0.459_993_119_838_666_1,
            max_relative = 1e-11
        );
    }

    #[test]
    fn posterior_log_mean_monte_carlo() {
        // U ~ Gamma(shape 10, rate 6)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = Gamma::new(10.0f64, 1.0 / 6.0).unwrap();
        let n = 1_000_000;
        let logs: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng).ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let want = e_ln_u_given_y_z(8, 4.0, 2.0).unwrap();
        assert!((mean - want).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {want}");
    }

    #[test]
    fn jensen_gap_is_non_negative() {
        for y in [0u64, 1, 3, 17, 250] {
            for &lambda in &[0.0, 0.4, 9.0, 180.0] {
                for &alpha in &[0.01, 0.5, 4.0, 600.0, 1e5] {
                    let eln = e_ln_u_given_y_z(y, lambda, alpha).unwrap();
                    let eu = e_u_given_y_z(y, lambda, alpha).unwrap();
                    assert!(eln <= eu.ln() + 1e-12, "y={y} l={lambda} a={alpha}");
                }
            }
        }
    }
}
