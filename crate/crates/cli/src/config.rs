use crate::error::{CliError, CliResult};
use crate::ingest::ConditionMap;
use nbmix_core::simlab::SimDesign;
use nbmix_core::{FitConfig, TestKind};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    SelectK,
    Test,
    Simulate,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::SelectK => "select-k",
            Command::Test => "test",
            Command::Simulate => "simulate",
        }
    }
}

/// Simulation study settings; the design's `n_per_condition` is replaced by
/// each entry of `n_per_condition` in turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub design: SimDesign,
    pub n_per_condition: Vec<usize>,
    pub n_datasets: usize,
    pub levels: Vec<f64>,
    /// Also run the variance-accuracy curve over `k_range`.
    pub variance_curve: bool,
}

/// Fully resolved run configuration, echoed into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub input_path: Option<PathBuf>,
    pub condition_map: ConditionMap,
    pub k: Option<usize>,
    pub k_range: Option<(usize, usize)>,
    pub tests: Vec<TestKind>,
    pub level: f64,
    pub seed: u64,
    pub min_mean_count: f64,
    pub pseudocount: f64,
    pub bias_correct: bool,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub fit: FitConfig,
    pub simulation: Option<SimulationConfig>,
}

impl RunConfig {
    /// Defaults for `command` writing to `output_dir`.
    pub fn new(command: Command, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            input_path: None,
            condition_map: ConditionMap::default(),
            k: None,
            k_range: None,
            tests: TestKind::ALL.to_vec(),
            level: 0.05,
            seed: 0,
            min_mean_count: 1.0,
            pseudocount: 0.0,
            bias_correct: true,
            output_dir: output_dir.into(),
            threads: None,
            fit: FitConfig::default(),
            simulation: (command == Command::Simulate).then(|| SimulationConfig {
                design: SimDesign::default(),
                n_per_condition: vec![SimDesign::default().n_per_condition],
                n_datasets: 100,
                levels: nbmix_core::simlab::DEFAULT_LEVELS.to_vec(),
                variance_curve: false,
            }),
        }
    }

    /// K values to fit: the single `k`, else `k_range`.
    pub fn k_values(&self) -> Option<Vec<usize>> {
        match (self.k, self.k_range) {
            (Some(k), _) => Some(vec![k]),
            (None, Some((a, b))) => Some((a..=b).collect()),
            (None, None) => None,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must lie in (0, 1), got {}", self.level));
        }
        if !(self.min_mean_count >= 0.0 && self.min_mean_count.is_finite()) {
            return bad(format!(
                "min_mean_count must be finite and >= 0, got {}",
                self.min_mean_count
            ));
        }
        if !(self.pseudocount >= 0.0 && self.pseudocount.fract() == 0.0 && self.pseudocount < 1e15) {
            return bad(format!(
                "pseudocount must be a non-negative integer, got {}",
                self.pseudocount
            ));
        }
        if self.k.is_some() && self.k_range.is_some() {
            return bad("give either k or k_range, not both".into());
        }
        if self.k == Some(0) {
            return bad("k must be >= 1".into());
        }
        if let Some((a, b)) = self.k_range {
            if a == 0 || a > b {
                return bad(format!("k_range {a}..{b} must satisfy 1 <= A <= B"));
            }
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        self.fit.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match self.command {
            Command::Fit | Command::Test if self.k_values().is_none() => {
                return bad(format!("{} needs k or k_range", self.command.as_str()));
            }
            Command::Test if self.tests.is_empty() => return bad("no tests requested".into()),
            Command::Simulate => {
                let Some(sim) = &self.simulation else {
                    return bad("simulate needs simulation settings".into());
                };
                sim.design.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if sim.n_per_condition.is_empty() || sim.n_per_condition.contains(&0) {
                    return bad("replicate counts must be >= 1".into());
                }
                if sim.n_datasets == 0 {
                    return bad("n_datasets must be >= 1".into());
                }
                if sim.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
                    return bad("levels must lie in (0, 1)".into());
                }
                if self.tests.is_empty() {
                    return bad("no tests requested".into());
                }
                if let Some((_, b)) = self.k_range {
                    if sim.variance_curve && b > 6 {
                        return bad("variance curve K values must lie in 1..6".into());
                    }
                }
            }
            _ => {}
        }
        if self.command != Command::Simulate && self.input_path.is_none() {
            return bad(format!("{} needs an input count table", self.command.as_str()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        let mut c = RunConfig::new(Command::Test, "out");
        c.input_path = Some("counts.tsv".into());
        c.k = Some(2);
        c
    }

    #[test]
    fn defaults_validate() {
        base().validate().unwrap();
        RunConfig::new(Command::Simulate, "out").validate().unwrap();
    }

    #[test]
    fn invariants() {
        for level in [0.0, 1.0, f64::NAN] {
            let mut c = base();
            c.level = level;
            assert!(c.validate().is_err());
        }
        let mut c = base();
        c.min_mean_count = -1.0;
        assert!(c.validate().is_err());
        let mut c = base();
        c.pseudocount = 0.5;
        assert!(c.validate().is_err());
        let mut c = base();
        c.k = None;
        assert!(c.validate().is_err());
        c.k_range = Some((3, 2));
        assert!(c.validate().is_err());
        c.k_range = Some((1, 4));
        assert_eq!(c.k_values().unwrap(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn round_trips_through_json() {
        let c = base();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(text.contains("\"command\":\"test\""));
    }
}
