//! Experiment configuration file (TOML).
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::econ::EconomicParams;
use crate::error::{Error, Result};
use crate::mdn::MdnSettings;
use crate::outage::ChainSpec;
use crate::simlab::{default_threshold_grid, Scenario, SimConfig};
use crate::trajdata::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub p_o_grid: Vec<f64>,
    pub p_v_grid: Vec<f64>,
    /// Seeds `seed, seed + 1, ...`.
    pub n_seeds: usize,
    /// Baseline thresholds for a single `simulate` run.
    pub p_o: f64,
    pub p_v: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            p_o_grid: default_threshold_grid(),
            p_v_grid: default_threshold_grid(),
            n_seeds: 10,
            p_o: 0.5,
            p_v: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub ledger_csv: PathBuf,
    pub benchmark_csv: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "dataset.csv".into(),
            checkpoint: "mdn.ckpt".into(),
            loss_csv: "loss.csv".into(),
            ledger_csv: "ledger.csv".into(),
            benchmark_csv: "benchmark.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed.
    pub seed: u64,
    pub economics: EconomicParams,
    pub mdn: MdnSettings,
    pub pipeline: PipelineConfig,
    pub sim: SimConfig,
    pub benchmark: BenchmarkConfig,
    pub paths: PathsConfig,
    pub outage: ChainSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario().validate()?;
        let p = &self.pipeline;
        if !(p.resample_interval_s > 0.0 && p.gap_factor > 0.0 && p.vmax_mps > 0.0) {
            return Err(Error::Config("pipeline intervals and speeds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&p.speed_percentile) || !(0.0..=1.0).contains(&p.train_fraction) {
            return Err(Error::Config("pipeline percentiles and fractions must lie in [0, 1]".into()));
        }
        let b = &self.benchmark;
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if b.p_o_grid.is_empty() || b.p_v_grid.is_empty() || b.n_seeds == 0 {
            return Err(Error::Config("benchmark grids and n_seeds must be nonempty".into()));
        }
        if !b.p_o_grid.iter().chain(&b.p_v_grid).chain([&b.p_o, &b.p_v]).all(in_unit) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            sim: self.sim.clone(),
            economics: self.economics,
            chain: self.outage.clone(),
            mdn: self.mdn,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.benchmark.n_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Applies the desk-scale preset to the simulation section.
    pub fn apply_desk_scale(&mut self) {
        let desk = SimConfig::desk_scale();
        self.sim.population = desk.population;
        self.sim.evaluation_steps = desk.evaluation_steps;
        self.sim.n_rollouts = desk.n_rollouts;
        self.sim.train_epochs = desk.train_epochs;
    }
}
