//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dosing_ope::annotate::{AggregationMode, AverageStage, DEFAULT_DOMAIN_TEXT};
use dosing_ope::bandit::Task;
use dosing_ope::estimators::RewardModelConfig;
use dosing_ope::harness::TruthMode;
use dosing_ope::llm::LlmEndpointConfig;
use dosing_ope::policy::CloneConfig;
use dosing_ope::sim::{SimConfig, SplitKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the cohort comes from. Exactly one source per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_patients: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise_sd: Option<f64>,
        /// Full simulator settings; the task defaults when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        simulator: Option<Box<SimConfig>>,
    },
    Ingest {
        /// Cohort CSV in the dataset schema.
        cohort: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulate {
            n_patients: None,
            noise_sd: None,
            simulator: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    /// Simulator expected lab, no noise.
    Oracle,
    /// Simulator expected lab plus Gaussian noise.
    Noisy,
    /// A chat-completion endpoint.
    Llm,
    /// A bundled local HTTP server that imitates an endpoint.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub kind: AnnotatorKind,
    /// Noise for the `noisy` annotator (mEq/L).
    pub noise_sd: f64,
    /// One `noisy` source per seed; oracle annotators use the first.
    pub seeds: Vec<u64>,
    pub endpoint: LlmEndpointConfig,
    pub cache_dir: Option<PathBuf>,
    /// Serve only from the cache.
    pub offline: bool,
    pub domain_text: String,
    /// Response per mEq used by the mock server's canned clinician.
    pub mock_gain: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            kind: AnnotatorKind::Oracle,
            noise_sd: 0.3,
            seeds: vec![0],
            endpoint: LlmEndpointConfig::default(),
            cache_dir: None,
            offline: false,
            domain_text: DEFAULT_DOMAIN_TEXT.to_string(),
            mock_gain: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub selection: u64,
    pub bootstrap: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    pub split: SplitKind,
    pub dosage_threshold: Option<f64>,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub annotator: AnnotatorConfig,
    pub aggregation: AggregationMode,
    pub average_stage: AverageStage,
    /// Annotation counts per source at which DM⁺ is evaluated.
    pub schedule: Vec<usize>,
    pub headline: Option<usize>,
    pub n_boot: usize,
    pub seeds: Seeds,
    pub truth: TruthMode,
    pub entropy_step: usize,
    pub include_is: bool,
    /// Stamped on annotations so reruns are byte-identical; the wall clock
    /// when absent.
    pub fixed_timestamp: Option<u64>,
    pub clone: CloneConfig,
    pub reward_model: RewardModelConfig,
    /// Run everything on one thread.
    pub sequential: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            task: Task::Potassium,
            split: SplitKind::Dosage,
            dosage_threshold: None,
            output_dir: PathBuf::from("out"),
            data: DataSource::default(),
            annotator: AnnotatorConfig::default(),
            aggregation: AggregationMode::Pool,
            average_stage: AverageStage::Lab,
            schedule: vec![0, 100, 200, 300, 400, 500],
            headline: None,
            n_boot: 500,
            seeds: Seeds::default(),
            truth: TruthMode::Oracle,
            entropy_step: 50,
            include_is: true,
            fixed_timestamp: None,
            clone: CloneConfig::default(),
            reward_model: RewardModelConfig::default(),
            sequential: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Simulator settings after applying the config's overrides, or `None`
    /// for ingested data.
    pub fn simulator(&self) -> Option<SimConfig> {
        match &self.data {
            DataSource::Simulate {
                n_patients,
                noise_sd,
                simulator,
            } => {
                let mut sim = simulator
                    .as_deref()
                    .cloned()
                    .unwrap_or_else(|| SimConfig::default_for(self.task));
                if let Some(n) = n_patients {
                    sim.n_patients = *n;
                }
                if let Some(sd) = noise_sd {
                    sim.noise_sd = *sd;
                }
                Some(sim)
            }
            DataSource::Ingest { .. } => None,
        }
    }

    /// Sets every seed from one base value.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seeds.selection = seed;
        self.seeds.bootstrap = seed;
        self.clone.seed = seed;
        self.annotator.seeds = if self.annotator.seeds.len() > 1 {
            (0..self.annotator.seeds.len() as u64)
                .map(|i| seed.wrapping_add(i))
                .collect()
        } else {
            vec![seed]
        };
        if let DataSource::Simulate { simulator, .. } = &mut self.data {
            let mut sim = simulator
                .take()
                .unwrap_or_else(|| Box::new(SimConfig::default_for(self.task)));
            sim.seed = seed;
            *simulator = Some(sim);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "invalid configuration: field `schema_version`: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            );
        }
        if self.n_boot == 0 {
            bail!("invalid configuration: field `n_boot`: must be at least 1");
        }
        if self.schedule.is_empty() {
            bail!("invalid configuration: field `schedule`: must list at least one count");
        }
        if self.entropy_step == 0 {
            bail!("invalid configuration: field `entropy_step`: must be at least 1");
        }
        if self.annotator.seeds.is_empty() {
            bail!("invalid configuration: field `annotator.seeds`: must not be empty");
        }
        if !(self.annotator.noise_sd >= 0.0 && self.annotator.noise_sd.is_finite()) {
            bail!("invalid configuration: field `annotator.noise_sd`: must be finite and >= 0");
        }
        self.annotator
            .endpoint
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid configuration: field `annotator.endpoint`: {e}"))?;
        if let Some(sim) = self.simulator() {
            if sim.task != self.task {
                bail!(
                    "invalid configuration: field `data.simulator.task`: {} does not match task {}",
                    sim.task,
                    self.task
                );
            }
            sim.validate()?;
        }
        if matches!(self.data, DataSource::Ingest { .. })
            && matches!(self.annotator.kind, AnnotatorKind::Oracle | AnnotatorKind::Noisy)
        {
            bail!("invalid configuration: field `annotator.kind`: oracle annotators need simulated data");
        }
        if matches!(self.data, DataSource::Ingest { .. }) && self.truth == TruthMode::Oracle {
            bail!("invalid configuration: field `truth`: oracle truth needs simulated data; use \"target_empirical\"");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.annotator.kind = AnnotatorKind::Noisy;
        cfg.annotator.seeds = vec![1, 2];
        cfg.fixed_timestamp = Some(1_700_000_000);
        cfg.data = DataSource::Simulate {
            n_patients: Some(200),
            noise_sd: None,
            simulator: Some(Box::new(SimConfig::default_for(Task::Potassium))),
        };
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let ingest = ExperimentConfig {
            data: DataSource::Ingest { cohort: "c.csv".into() },
            ..ExperimentConfig::default()
        };
        let back: ExperimentConfig = toml::from_str(&ingest.to_toml().unwrap()).unwrap();
        assert_eq!(back, ingest);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("schema_version = 1\ntask = \"sodium\"\n").unwrap();
        assert_eq!(cfg.task, Task::Sodium);
        assert_eq!(cfg.simulator().unwrap().n_patients, 1187);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_fields_are_named() {
        let cfg = ExperimentConfig {
            n_boot: 0,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("n_boot"));
        let mut sim = SimConfig::default_for(Task::Potassium);
        sim.features.age.sd = -1.0;
        let cfg = ExperimentConfig {
            data: DataSource::Simulate {
                n_patients: None,
                noise_sd: None,
                simulator: Some(Box::new(sim)),
            },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("features.age.sd"));
        let cfg = ExperimentConfig {
            data: DataSource::Ingest { cohort: "x.csv".into() },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
