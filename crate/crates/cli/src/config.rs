//! TOML run configuration. Relative paths resolve against the config
//! file's directory; command-line flags override file values.

use std::path::{Path, PathBuf};

use sae_unlearn::adversarial::AttackConfig;
use sae_unlearn::feature_selection::CountMode;
use sae_unlearn::model::ModelConfig;
use sae_unlearn::rmu::RmuConfig;
use sae_unlearn::steering::{HookAction, RefusalTrigger};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub sae: SaeSection,
    pub corpus: CorpusSection,
    pub questions: QuestionSection,
    pub selection: SelectionSection,
    pub steering: SteeringSection,
    pub sweep: SweepSection,
    pub attack: AttackSection,
    pub rmu: RmuSection,
}

/// Exactly one of `path` (a saved toy model) or `toy` (a freshly seeded
/// toy architecture).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub path: Option<PathBuf>,
    pub toy: Option<ModelConfig>,
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub path: Option<PathBuf>,
}

/// Plain-text corpora, one document per line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub forget: Option<PathBuf>,
    pub retain: Option<PathBuf>,
}

/// JSON-lines question files. Retain suites are pooled; subjects are
/// weighted by their question counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuestionSection {
    pub forget: Option<PathBuf>,
    pub retain: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub retain_threshold: f64,
    pub top_k: usize,
    pub activity_threshold: f64,
    pub mode: CountMode,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            retain_threshold: 1e-4,
            top_k: 20,
            activity_threshold: 0.0,
            mode: CountMode::PerToken,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    /// Steering CSV read by eval, attack and steer-generate and written by select.
    pub path: Option<PathBuf>,
    pub action: HookAction,
    pub coefficient: f64,
    pub clamp_value: Option<f64>,
    pub refusal_id: Option<usize>,
    pub refusal_trigger: RefusalTrigger,
    /// Directory of `{latent_idx}.json` description payloads.
    pub descriptions: Option<PathBuf>,
    pub description_cache: Option<PathBuf>,
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self {
            path: None,
            action: HookAction::ClampCond,
            coefficient: -300.0,
            clamp_value: Some(0.05),
            refusal_id: None,
            refusal_trigger: RefusalTrigger::PerPosition,
            descriptions: None,
            description_cache: None,
        }
    }
}

/// Grid axes; an empty axis falls back to the selection/steering value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub top_k: Vec<f64>,
    pub coefficient: Vec<f64>,
    pub clamp_value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// JSON file with `id`, `question` and `answer`.
    pub target: Option<PathBuf>,
    pub tries_per_iteration: usize,
    pub candidates_per_index: usize,
    pub iterations: usize,
    pub suffix_length: usize,
    pub patience: Option<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        Self {
            target: None,
            tries_per_iteration: d.tries_per_iteration,
            candidates_per_index: d.candidates_per_index,
            iterations: d.iterations,
            suffix_length: d.suffix_length,
            patience: d.patience,
        }
    }
}

impl AttackSection {
    pub fn to_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            tries_per_iteration: self.tries_per_iteration,
            candidates_per_index: self.candidates_per_index,
            iterations: self.iterations,
            suffix_length: self.suffix_length,
            seed,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmuSection {
    pub steering_scale: f64,
    pub retain_weight: f64,
    pub target_layer: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RmuSection {
    fn default() -> Self {
        let d = RmuConfig::default();
        Self {
            steering_scale: d.steering_scale,
            retain_weight: d.retain_weight,
            target_layer: d.target_layer,
            steps: d.steps,
            learning_rate: d.learning_rate,
        }
    }
}

impl RmuSection {
    pub fn to_config(&self, seed: u64) -> RmuConfig {
        RmuConfig {
            steering_scale: self.steering_scale,
            retain_weight: self.retain_weight,
            target_layer: self.target_layer,
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.output_dir);
        rebase(base, &mut self.model.path);
        rebase(base, &mut self.model.vocab);
        rebase(base, &mut self.sae.path);
        rebase(base, &mut self.corpus.forget);
        rebase(base, &mut self.corpus.retain);
        rebase(base, &mut self.questions.forget);
        for p in &mut self.questions.retain {
            let mut o = Some(std::mem::take(p));
            rebase(base, &mut o);
            *p = o.unwrap_or_default();
        }
        rebase(base, &mut self.steering.path);
        rebase(base, &mut self.steering.descriptions);
        rebase(base, &mut self.steering.description_cache);
        rebase(base, &mut self.attack.target);
    }
}
