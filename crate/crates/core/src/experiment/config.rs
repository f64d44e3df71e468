use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, load_planetoid, load_webkb, Graph, SplitPolicy, SyntheticSpec};
use crate::nn::{ModelConfig, ModelKind, TrainConfig};
use crate::prune::PruneConfig;

/// Deepest stack a sweep runs without `allow_deep`.
pub const MAX_DEPTH: usize = 64;

/// Where a sweep's graph comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "format")]
pub enum DatasetSpec {
    /// `<id> <features...> <label>` rows plus `<cited> <citing>` rows.
    Planetoid { name: String, content: PathBuf, cites: PathBuf },
    /// Node and edge files of the WebKB collection.
    Webkb { name: String, nodes: PathBuf, edges: PathBuf },
    Synthetic { name: String, spec: SyntheticSpec },
}

impl DatasetSpec {
    pub fn name(&self) -> &str {
        match self {
            DatasetSpec::Planetoid { name, .. } | DatasetSpec::Webkb { name, .. } | DatasetSpec::Synthetic { name, .. } => {
                name
            }
        }
    }

    pub fn synthetic(&self) -> Option<&SyntheticSpec> {
        match self {
            DatasetSpec::Synthetic { spec, .. } => Some(spec),
            _ => None,
        }
    }

    /// Loads a file dataset; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Graph> {
        let at = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        match self {
            DatasetSpec::Planetoid { content, cites, .. } => {
                let (g, report) = load_planetoid(&at(content), &at(cites))?;
                log::info!("{}: {:?}", self.name(), report);
                Ok(g)
            }
            DatasetSpec::Webkb { nodes, edges, .. } => {
                let (g, report) = load_webkb(&at(nodes), &at(edges))?;
                log::info!("{}: {:?}", self.name(), report);
                Ok(g)
            }
            DatasetSpec::Synthetic { spec, .. } => generate_synthetic(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    #[serde(default)]
    pub homophily: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// One experiment: a dataset, a model family and the grid to sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub allow_deep: bool,
    pub sweep: SweepConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitPolicy,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: Option<PruneConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("experiment config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sweep.depths.is_empty() || self.sweep.seeds.is_empty() {
            return bad("sweep needs at least one depth and one seed".into());
        }
        if let Some(&d) = self.sweep.depths.iter().find(|&&d| d == 0) {
            return bad(format!("depth {d} is not a valid stack"));
        }
        if let Some(&d) = self.sweep.depths.iter().find(|&&d| d > MAX_DEPTH) {
            if !self.allow_deep {
                return bad(format!("depth {d} exceeds {MAX_DEPTH}; enable allow_deep to run it"));
            }
        }
        let is_dynamo = self.model.kind == ModelKind::DynamoGat;
        if is_dynamo != self.prune.is_some() {
            return bad(format!(
                "a [prune] section is required for {} and only for it, got model {}",
                ModelKind::DynamoGat.name(),
                self.model.kind.name()
            ));
        }
        if !self.sweep.homophily.is_empty() && self.dataset.synthetic().is_none() {
            return bad("a homophily sweep needs a synthetic dataset".into());
        }
        if let Some(h) = self.sweep.homophily.iter().find(|h| !(0.0..=1.0).contains(*h)) {
            return bad(format!("homophily {h} outside [0, 1]"));
        }
        if let Some(spec) = self.dataset.synthetic() {
            spec.validate()?;
        }
        self.model.validate()?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
name = "toy"
output_dir = "out"

[sweep]
depths = [2, 4]
seeds = [0, 1]

[dataset]
format = "synthetic"
name = "syn"
spec = { n_nodes = 40, n_classes = 2, target_avg_degree = 4.0, target_homophily = 0.8, feature_dim = 4, class_feature_separation = 2.0, seed = 3 }

[model]
kind = "dynamo-gat"
depth = 2

[prune]
r0 = 0.2
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.prune.as_ref().unwrap().r0, 0.2);
        assert_eq!(cfg.train, TrainConfig::default());
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_inconsistent_sweeps() {
        let base = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let mut c = base.clone();
        c.prune = None;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.sweep.depths = vec![128];
        assert!(c.validate().is_err());
        c.allow_deep = true;
        assert!(c.validate().is_ok());
        let mut c = base.clone();
        c.sweep.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = base;
        c.sweep.homophily = vec![1.5];
        assert!(c.validate().is_err());
    }
}
