//! Negative Binomial mixture models for gene-level read counts.
//!
//! Genes share dispersion through a K-component mixture fitted by EM; the
//! fitted posterior memberships then feed variance estimates for
//! two-condition differential expression tests.

pub mod data;
pub mod difftest;
pub mod em;
pub mod error;
pub mod nb;
pub mod simlab;
pub mod special;

pub use data::CountMatrix;
pub use difftest::{
    bh_adjust, difference_test, logratio_test, ratio_test, run_tests, two_sided_p, variance_lambda_hat, GeneTestResult,
    GeneVariance, TestKind, TestTable,
};
pub use em::{
    e_step, fit, information_criteria, m_step_alpha, m_step_lambda, m_step_weights, mixture_gene_log_density, select_k,
    total_log_likelihood, FitConfig, FitResult, InformationCriteria, MixtureParams, Responsibilities, SelectionRow,
    SelectionTable,
};
pub use error::{NbmixError, Result};
pub use nb::{e_ln_u_given_y_z, e_u_given_y_z, nb_log_pmf, NBParams};
pub use simlab::{SimDataset, SimDesign};
pub use special::{digamma, log_gamma};
