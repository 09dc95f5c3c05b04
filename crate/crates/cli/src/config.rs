use std::path::{Path, PathBuf};

use engage_core::personalization::PersonalizationConfig;
use engage_core::{Channel, ClassifierSpec, Family, Thresholds};
use serde::Deserialize;

use crate::failure::Failure;

/// The `--config` document, TOML or JSON. Every field is optional; command
/// line flags win over it.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub classifier: Option<ClassifierSpec>,
    pub channel: Option<Channel>,
    pub manifest: Option<PathBuf>,
    pub thresholds: Option<Thresholds>,
    pub identity_threshold: Option<f64>,
    pub personalization: Option<PersonalizationConfig>,
    pub pool_fraction: Option<f64>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
    }

    /// Classifier spec from `--family` or the config file, with the
    /// global seed applied when given.
    pub fn spec(&self, family: Option<Family>, seed: Option<u64>) -> Result<ClassifierSpec, Failure> {
        let mut spec = match (family, &self.classifier) {
            (Some(f), Some(c)) if c.family == f => c.clone(),
            (Some(f), _) => ClassifierSpec::new(f),
            (None, Some(c)) => c.clone(),
            (None, None) => ClassifierSpec::new(Family::RandomForest),
        };
        if let Some(seed) = seed {
            spec = spec.with_seed(seed);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn channel(&self, flag: Option<Channel>) -> Channel {
        flag.or(self.channel).unwrap_or(Channel::Attention)
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds.unwrap_or_default()
    }
}
