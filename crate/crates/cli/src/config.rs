//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tbvad_core::embedder::Backend;
use tbvad_core::eval::{PipelineConfig, SynthConfig};
use tbvad_core::knowledge::Aspect;

use crate::failure::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Base URL of the text-generation service.
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub top_k: usize,
    pub counterfactual: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { top_k: 2, counterfactual: false }
    }
}

/// Everything a command may consume. Unknown keys are rejected at every level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub generation: GenerationConfig,
    pub explain: ExplainConfig,
    /// Run-log location; defaults to `tbvad-run.log` next to the output.
    pub run_log: Option<PathBuf>,
}

/// Flag values that override configuration keys.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub aspects: Option<Vec<Aspect>>,
    pub embed_endpoint: Option<String>,
    pub gen_endpoint: Option<String>,
    pub top_k: Option<usize>,
    pub counterfactual: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.pipeline.train.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(aspects) = &o.aspects {
            self.pipeline.aspects = Aspect::canonical(aspects);
        }
        if let Some(url) = &o.embed_endpoint {
            self.pipeline.embedder.backend = Backend::Remote;
            self.pipeline.embedder.endpoint = Some(url.clone());
        }
        if let Some(url) = &o.gen_endpoint {
            self.generation.endpoint = Some(url.clone());
        }
        if let Some(k) = o.top_k {
            self.explain.top_k = k;
        }
        if o.counterfactual {
            self.explain.counterfactual = true;
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.pipeline
            .validate()
            .map_err(|e| Failure::usage(format!("configuration: {e}")))?;
        self.synth
            .validate()
            .map_err(|e| Failure::usage(format!("configuration (synth): {e}")))?;
        if self.explain.top_k == 0 {
            return Err(Failure::usage("--topk must be at least 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the merged configuration's canonical JSON.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
