//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xdr_core::data::{DatasetSpec, Split};
use xdr_core::model::CascadeConfig;
use xdr_core::patches::{PatchNorm, SignificanceTest, DEFAULT_BLOCK};
use xdr_core::train::{MaskPolicy, OptimizerKind};
use xdr_core::MaskParams;

use crate::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub mask_policy: MaskPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            mask_policy: MaskPolicy::PerSample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Datasets to train on in `xdomain`; empty means all.
    pub train_domains: Vec<String>,
    /// Datasets to test on; empty means all.
    pub test_domains: Vec<String>,
    pub mask_policy: MaskPolicy,
    pub error_gain: f64,
    /// Test slices per (model, dataset) exported as PNG by `report`.
    pub report_slices: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            train_domains: Vec::new(),
            test_domains: Vec::new(),
            mask_policy: MaskPolicy::PerSample,
            error_gain: 5.0,
            report_slices: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSource {
    pub dataset: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchStatsSection {
    pub patch_size: usize,
    pub split: Split,
    pub targets: Vec<PatchSource>,
    pub sources: Vec<PatchSource>,
    pub patch_norm: PatchNorm,
    pub test: SignificanceTest,
    pub block_size: usize,
}

impl Default for PatchStatsSection {
    fn default() -> Self {
        Self {
            patch_size: 7,
            split: Split::Train,
            targets: Vec::new(),
            sources: Vec::new(),
            patch_norm: PatchNorm::None,
            test: SignificanceTest::Wilcoxon,
            block_size: DEFAULT_BLOCK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub datasets: Vec<DatasetSpec>,
    pub mask: MaskParams,
    pub cascade: CascadeConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub patch_stats: PatchStatsSection,
    pub output_dir: Option<PathBuf>,
    pub global_seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| ValidationError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let mut ids: Vec<&str> = Vec::new();
        for d in &self.datasets {
            d.validate().map_err(|e| ValidationError(e.to_string()))?;
            if ids.contains(&d.id.as_str()) {
                bail!(ValidationError(format!("duplicate dataset id '{}'", d.id)));
            }
            ids.push(&d.id);
        }
        self.cascade
            .validate()
            .map_err(|e| ValidationError(e.to_string()))?;
        for id in self
            .eval
            .train_domains
            .iter()
            .chain(&self.eval.test_domains)
            .chain(self.patch_stats.targets.iter().map(|p| &p.dataset))
            .chain(self.patch_stats.sources.iter().map(|p| &p.dataset))
        {
            if !ids.contains(&id.as_str()) {
                bail!(ValidationError(format!("unknown dataset id '{id}'")));
            }
        }
        if !(self.eval.error_gain.is_finite() && self.eval.error_gain >= 0.0) {
            bail!(ValidationError("eval.error_gain must be >= 0".into()));
        }
        Ok(())
    }

    pub fn dataset(&self, id: &str) -> anyhow::Result<&DatasetSpec> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| ValidationError(format!("unknown dataset id '{id}'")).into())
    }

    pub fn train_domains(&self) -> Vec<String> {
        pick(&self.eval.train_domains, &self.datasets)
    }

    pub fn test_domains(&self) -> Vec<String> {
        pick(&self.eval.test_domains, &self.datasets)
    }

    /// SHA-256 of the canonical JSON form (after flag overrides).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

fn pick(chosen: &[String], all: &[DatasetSpec]) -> Vec<String> {
    if chosen.is_empty() {
        all.iter().map(|d| d.id.clone()).collect()
    } else {
        chosen.to_vec()
    }
}
