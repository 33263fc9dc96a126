use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use calmocap_core::calibration::NOMINAL_LEVELS;
use calmocap_core::camera::CameraRig;
use calmocap_core::chain::KinematicChain;
use calmocap_core::gait::{StrataScheme, StrideConvention};
use calmocap_core::inference::FitConfig;
use calmocap_core::observation::ObservationSet;
use calmocap_core::synth::{simulate, Fixture, GaitScenario, GroundTruthBundle};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the observations of an experiment come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Built-in fixture simulated with the experiment seed.
    Fixture {
        name: String,
        /// Overrides the fixture's trial duration [s].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<f64>,
    },
    /// Scenario JSON file; the scenario's own seed drives the simulation.
    Scenario { path: PathBuf },
    /// Directory written by `simulate`: `chain.json`, `rig.json`,
    /// `observations.jsonl` and `truth.json`.
    Dataset { dir: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Posterior samples per heel event.
    pub metric_samples: usize,
    pub strata: StrataScheme,
    pub nominal_levels: Vec<f64>,
    /// Pose coordinates whose kinematic calibration is reported.
    pub monitored: Vec<String>,
    pub stride_convention: StrideConvention,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let monitored = ["l", "r"]
            .iter()
            .flat_map(|s| ["hip_flex", "hip_add", "knee", "ankle"].map(|j| format!("{j}_{s}")))
            .collect();
        Self {
            metric_samples: 1000,
            strata: StrataScheme::default(),
            nominal_levels: NOMINAL_LEVELS.to_vec(),
            monitored,
            stride_convention: StrideConvention::Lengthwise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub name: String,
    pub source: Source,
    /// Fit settings; the synthetic preset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn fixture(fixture: Fixture, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: fixture.name().into(),
            source: Source::Fixture { name: fixture.name().into(), duration: None },
            fit: None,
            analysis: AnalysisConfig::default(),
            out: None,
            seed,
        }
    }

    /// Reads a spec file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut spec: Self =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut spec.source {
            Source::Scenario { path } => rebase(path),
            Source::Dataset { dir } => rebase(dir),
            Source::Fixture { .. } => {}
        }
        if let Some(out) = &mut spec.out {
            rebase(out);
        }
        Ok(spec)
    }

    /// SHA-256 of the spec's JSON form with the output directory removed.
    pub fn hash(&self) -> String {
        let bare = Self { out: None, ..self.clone() };
        let bytes = serde_json::to_vec(&bare).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn fit_config(&self, dim: usize) -> FitConfig {
        self.fit.clone().unwrap_or_else(|| FitConfig::synthetic(dim))
    }

    /// Checks everything that can be checked without running the pipeline.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match &self.source {
            Source::Fixture { name, duration } => {
                fixture_by_name(name)?;
                if let Some(d) = duration {
                    if !(*d > 0.0) {
                        return Err(CliError::config("fixture duration must be positive"));
                    }
                }
            }
            Source::Scenario { path } => {
                if !path.is_file() {
                    return Err(CliError::config(format!("scenario file {} not found", path.display())));
                }
            }
            Source::Dataset { dir } => {
                for file in DATASET_FILES {
                    if !dir.join(file).is_file() {
                        return Err(CliError::config(format!("dataset file {} not found", dir.join(file).display())));
                    }
                }
            }
        }
        if let Some(fit) = &self.fit {
            fit.validate().map_err(CliError::config)?;
        }
        let a = &self.analysis;
        if a.metric_samples < 2 {
            return Err(CliError::config("analysis.metric_samples must be at least 2"));
        }
        if a.nominal_levels.is_empty() || a.nominal_levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(CliError::config("nominal levels must lie in (0, 1)"));
        }
        if a.strata.bins < 1 {
            return Err(CliError::config("strata.bins must be at least 1"));
        }
        if a.monitored.is_empty() {
            return Err(CliError::config("at least one monitored coordinate is required"));
        }
        Ok(())
    }
}

pub const DATASET_FILES: [&str; 4] = ["chain.json", "rig.json", "observations.jsonl", "truth.json"];

pub fn fixture_by_name(name: &str) -> Result<Fixture, CliError> {
    Fixture::all()
        .into_iter()
        .find(|f| f.name() == name)
        .ok_or_else(|| CliError::config(format!("unknown fixture `{name}`")))
}

/// Observations with their reference data.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenario: Option<GaitScenario>,
    pub chain: KinematicChain,
    pub rig: CameraRig,
    pub observations: ObservationSet,
    pub truth: GroundTruthBundle,
}

impl Dataset {
    pub fn load(spec: &ExperimentSpec) -> Result<Self, CliError> {
        let scenario = match &spec.source {
            Source::Fixture { name, duration } => {
                let mut s = fixture_by_name(name)?.scenario(spec.seed);
                if let Some(d) = duration {
                    s.duration = *d;
                }
                s
            }
            Source::Scenario { path } => {
                let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                GaitScenario::from_json(&text).map_err(CliError::config)?
            }
            Source::Dataset { dir } => return Self::read_dir(dir),
        };
        let sim = simulate(&scenario).map_err(CliError::config)?;
        Ok(Self {
            scenario: Some(sim.scenario),
            chain: sim.chain,
            rig: sim.rig,
            observations: sim.observations,
            truth: sim.truth,
        })
    }

    fn read_dir(dir: &Path) -> Result<Self, CliError> {
        fn json<T: serde::de::DeserializeOwned>(path: PathBuf) -> Result<T, CliError> {
            let text = fs::read_to_string(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        }
        let chain: KinematicChain = json(dir.join("chain.json"))?;
        let rig: CameraRig = json(dir.join("rig.json"))?;
        let truth: GroundTruthBundle = json(dir.join("truth.json"))?;
        let scenario = dir.join("scenario.json");
        let scenario = if scenario.is_file() { Some(json(scenario)?) } else { None };
        let path = dir.join("observations.jsonl");
        let file = fs::File::open(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let observations = ObservationSet::read_jsonl(BufReader::new(file), Some(rig.len()))
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(Self { scenario, chain, rig, observations, truth })
    }

    /// Indices of `names` among the pose coordinates.
    pub fn coordinates(&self, names: &[String]) -> Result<Vec<usize>, CliError> {
        let all = self.chain.coordinate_names();
        names
            .iter()
            .map(|n| {
                all.iter()
                    .position(|a| a == n)
                    .ok_or_else(|| CliError::config(format!("monitored coordinate `{n}` not in chain")))
            })
            .collect()
    }
}
