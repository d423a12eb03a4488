//! Experiment configuration: TOML file, then flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssm_circuits::circuit::GradientPass;
use ssm_circuits::ioi::TemplateId;
use ssm_circuits::metrics::Metric;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// The trained toy-task model, trained on first use and cached.
    Toy,
    /// Hand-set model whose shift layer copies names one position forward.
    Planted,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub source: ModelKind,
    pub path: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    /// Planted model depth and shift layer.
    pub planted_layers: usize,
    pub planted_layer: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            source: ModelKind::Toy,
            path: None,
            sidecar: None,
            planted_layers: 4,
            planted_layer: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub templates: Vec<String>,
    pub corruptions: Vec<u8>,
    pub count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            templates: TemplateId::SHARED_POSITIONS
                .iter()
                .map(|t| template_name(*t))
                .collect(),
            corruptions: vec![1, 2, 3, 4, 5],
            count: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// Hook suffix patched by `ablate-grid`.
    pub hook: String,
    /// Layer for `conv-slice`, `cosine-lens` and `steer-grid`; `steer-grid`
    /// picks the most salient layer when unset.
    pub layer: Option<usize>,
    pub channel: Option<usize>,
    /// Index of the prompt shown by `cosine-lens`.
    pub prompt: usize,
    pub thresh: f64,
    /// Fraction of the clean metric to reach.
    pub target: f64,
    /// Integrated-gradient steps; below 2 means plain EAP.
    pub iters: usize,
    pub gradient_pass: GradientPass,
    pub min_samples: usize,
    /// Prompts used to build name averages for `steer-grid`.
    pub store_count: usize,
    pub steps: Option<usize>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            hook: "hook_layer_input".into(),
            layer: None,
            channel: None,
            prompt: 0,
            thresh: 1e-4,
            target: 0.85,
            iters: 10,
            gradient_pass: GradientPass::Patched,
            min_samples: 3,
            store_count: 2048,
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub metric: String,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub params: Params,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            metric: Metric::NormalizedLogitDiff.name().into(),
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            params: Params::default(),
        }
    }
}

pub fn template_name(t: TemplateId) -> String {
    format!("{t:?}").to_lowercase()
}

fn parse_template(s: &str) -> Option<TemplateId> {
    TemplateId::ALL
        .into_iter()
        .find(|t| template_name(*t) == s.to_lowercase())
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn metric(&self) -> Result<Metric, CliError> {
        self.metric
            .parse()
            .map_err(|_| CliError::Config(format!("metric: unknown metric `{}`", self.metric)))
    }

    pub fn templates(&self) -> Result<Vec<TemplateId>, CliError> {
        self.dataset
            .templates
            .iter()
            .map(|s| {
                parse_template(s).ok_or_else(|| {
                    CliError::Config(format!("dataset.templates: unknown template `{s}`"))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        self.metric()?;
        if self.templates()?.is_empty() {
            return bad("dataset.templates", "must not be empty");
        }
        if self.dataset.corruptions.is_empty()
            || self
                .dataset
                .corruptions
                .iter()
                .any(|c| !(1..=5).contains(c))
        {
            return bad("dataset.corruptions", "classes must be in 1..=5");
        }
        if self.dataset.count == 0 {
            return bad("dataset.count", "must be positive");
        }
        if self.model.source == ModelKind::Checkpoint && self.model.path.is_none() {
            return bad("model.path", "required when model.source is checkpoint");
        }
        if !(self.params.thresh >= 0.0) {
            return bad("params.thresh", "must be ≥ 0");
        }
        if !self.params.target.is_finite() {
            return bad("params.target", "must be finite");
        }
        if self.params.min_samples == 0 {
            return bad("params.min_samples", "must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the experiment name and the canonical JSON of the config.
    pub fn hash(&self, experiment: &str) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        sha256_hex(format!("{experiment}\0{body}").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c: ExperimentConfig = toml::from_str("seed = 3\n[dataset]\ncount = 10\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.dataset.count, 10);
        assert_eq!(c.dataset.corruptions, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = toml::from_str::<ExperimentConfig>("[dataset]\ncuont = 10\n").unwrap_err();
        assert!(e.message().contains("cuont"));
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.dataset.templates = vec!["later".into()];
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("dataset.templates"));
        let mut c = ExperimentConfig::default();
        c.model.source = ModelKind::Checkpoint;
        assert!(c.validate().unwrap_err().to_string().contains("model.path"));
    }

    #[test]
    fn hash_tracks_content_and_experiment() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash("eap"), b.hash("eap"));
        assert_ne!(a.hash("eap"), a.hash("acdc"));
        b.seed = 1;
        assert_ne!(a.hash("eap"), b.hash("eap"));
    }
}
