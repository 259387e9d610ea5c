//! Latent activation frequencies, harmful-latent selection and the
//! zero-activation diagnostic.

mod descriptions;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenId};
use crate::sae::SparseAutoencoder;

pub use descriptions::{
    neuronpedia_ids, DescriptionCache, DescriptionClient, DescriptionSource, FixtureSource, HttpSource,
    LatentDescription, NEURONPEDIA_TEMPLATE,
};

/// What one count unit is.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Fraction of token positions where the latent is active.
    #[default]
    PerToken,
    /// Fraction of documents containing at least one active position.
    PerDocument,
}

/// Sparse `latent → frequency` map; absent latents have frequency 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrequencyTable {
    pub corpus_id: String,
    pub token_count: u64,
    pub activity_threshold: f64,
    #[serde(default)]
    pub mode: CountMode,
    pub freq: BTreeMap<usize, f64>,
}

impl FeatureFrequencyTable {
    pub fn get(&self, latent: usize) -> f64 {
        self.freq.get(&latent).copied().unwrap_or(0.0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        if table.token_count == 0 || table.freq.values().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data {
                line: None,
                message: format!("{} is not a valid frequency table", path.display()),
            });
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub retain_threshold: f64,
    pub top_k: usize,
    pub activity_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            retain_threshold: 1e-4,
            top_k: 20,
            activity_threshold: 0.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Argument("top_k must be at least 1".into()));
        }
        if !(self.retain_threshold >= 0.0 && self.retain_threshold.is_finite()) {
            return Err(Error::Argument("retain_threshold must be finite and non-negative".into()));
        }
        if !self.activity_threshold.is_finite() {
            return Err(Error::Argument("activity_threshold must be finite".into()));
        }
        Ok(())
    }
}

struct Counts {
    hits: Vec<u64>,
    positions: u64,
    documents: u64,
}

impl Counts {
    fn zero(d: usize) -> Self {
        Self {
            hits: vec![0; d],
            positions: 0,
            documents: 0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
        self.positions += other.positions;
        self.documents += other.documents;
        self
    }
}

/// Per-latent counts of `active(value)` over the corpus, sharded by document.
fn count_latents<M: LanguageModel + ?Sized>(
    model: &M,
    sae: &SparseAutoencoder,
    corpus: &[Vec<TokenId>],
    mode: CountMode,
    active: impl Fn(f32) -> bool + Sync,
) -> Result<Counts> {
    let d = sae.d_sae();
    if corpus.iter().all(|doc| doc.is_empty()) {
        return Err(Error::Argument("corpus has no tokens".into()));
    }
    corpus
        .par_iter()
        .filter(|doc| !doc.is_empty())
        .map(|doc| -> Result<Counts> {
            let acts = model.capture_activations(doc, sae.layer)?;
            let latents = sae.encode(&acts)?;
            let mut c = Counts::zero(d);
            c.positions = latents.n_positions() as u64;
            c.documents = 1;
            match mode {
                CountMode::PerToken => {
                    for row in latents.values.rows() {
                        for (h, &v) in c.hits.iter_mut().zip(row) {
                            *h += active(v) as u64;
                        }
                    }
                }
                CountMode::PerDocument => {
                    for (h, col) in c.hits.iter_mut().zip(latents.values.columns()) {
                        *h = col.iter().any(|&v| active(v)) as u64;
                    }
                }
            }
            Ok(c)
        })
        .try_reduce(|| Counts::zero(d), |a, b| Ok(a.merge(b)))
}

/// Fraction of token positions (or documents) where each latent exceeds
/// `activity_threshold`.
pub fn activation_frequencies<M: LanguageModel + ?Sized>(
    model: &M,
    sae: &SparseAutoencoder,
    corpus: &[Vec<TokenId>],
    activity_threshold: f64,
    corpus_id: &str,
    mode: CountMode,
) -> Result<FeatureFrequencyTable> {
    let threshold = activity_threshold as f32;
    let counts = count_latents(model, sae, corpus, mode, |v| v > threshold)?;
    let denom = match mode {
        CountMode::PerToken => counts.positions,
        CountMode::PerDocument => counts.documents,
    } as f64;
    let freq = counts
        .hits
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 0)
        .map(|(i, &h)| (i, h as f64 / denom))
        .collect();
    Ok(FeatureFrequencyTable {
        corpus_id: corpus_id.to_string(),
        token_count: counts.positions,
        activity_threshold,
        mode,
        freq,
    })
}

/// Latents active on the forget corpus whose retain frequency is strictly
/// below `retain_threshold`, the `top_k` most forget-frequent first (ties by
/// ascending index).
pub fn select_features(
    forget: &FeatureFrequencyTable,
    retain: &FeatureFrequencyTable,
    config: &SelectionConfig,
) -> Result<Vec<usize>> {
    config.validate()?;
    if forget.activity_threshold != retain.activity_threshold {
        return Err(Error::Argument(format!(
            "tables use different activity thresholds ({} vs {})",
            forget.activity_threshold, retain.activity_threshold
        )));
    }
    if forget.mode != retain.mode {
        return Err(Error::Argument("tables use different count modes".into()));
    }
    let mut candidates: Vec<(usize, f64)> = forget
        .freq
        .iter()
        .filter(|(&i, &f)| f > 0.0 && retain.get(i) < config.retain_threshold)
        .map(|(&i, &f)| (i, f))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(candidates.into_iter().take(config.top_k).map(|(i, _)| i).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroActivationStats {
    pub token_count: u64,
    /// Probability over token positions that each latent is nonzero.
    pub nonzero_prob: Vec<f64>,
    /// Latents that are exactly zero at one position or more.
    pub zero_at_least_once: usize,
    pub fraction_zero_at_least_once: f64,
    pub never_active: usize,
}

pub fn zero_activation_stats<M: LanguageModel + ?Sized>(
    model: &M,
    sae: &SparseAutoencoder,
    corpus: &[Vec<TokenId>],
) -> Result<ZeroActivationStats> {
    let counts = count_latents(model, sae, corpus, CountMode::PerToken, |v| v != 0.0)?;
    let n = counts.positions;
    let nonzero_prob: Vec<f64> = counts.hits.iter().map(|&h| h as f64 / n as f64).collect();
    let zero_at_least_once = counts.hits.iter().filter(|&&h| h < n).count();
    let never_active = counts.hits.iter().filter(|&&h| h == 0).count();
    Ok(ZeroActivationStats {
        token_count: n,
        fraction_zero_at_least_once: zero_at_least_once as f64 / counts.hits.len().max(1) as f64,
        nonzero_prob,
        zero_at_least_once,
        never_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(pairs: &[(usize, f64)]) -> FeatureFrequencyTable {
        FeatureFrequencyTable {
            corpus_id: "t".into(),
            token_count: 100,
            activity_threshold: 0.0,
            mode: CountMode::PerToken,
            freq: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn retain_threshold_excludes_shared_latent() {
        let forget = table(&[(0, 0.5), (1, 0.4)]);
        let retain = table(&[(0, 0.2), (1, 0.00005)]);
        let cfg = SelectionConfig {
            top_k: 1,
            ..Default::default()
        };
        assert_eq!(select_features(&forget, &retain, &cfg).unwrap(), vec![1]);
    }

    #[test]
    fn zero_threshold_selects_nothing() {
        let cfg = SelectionConfig {
            retain_threshold: 0.0,
            ..Default::default()
        };
        assert!(select_features(&table(&[(3, 0.9)]), &table(&[]), &cfg).unwrap().is_empty());
    }

    #[test]
    fn ties_broken_by_index() {
        let forget = table(&[(9, 0.3), (2, 0.3), (5, 0.3), (1, 0.1)]);
        let cfg = SelectionConfig {
            top_k: 3,
            ..Default::default()
        };
        assert_eq!(select_features(&forget, &table(&[]), &cfg).unwrap(), vec![2, 5, 9]);
    }

    #[test]
    fn zero_top_k_rejected() {
        let cfg = SelectionConfig {
            top_k: 0,
            ..Default::default()
        };
        assert!(matches!(select_features(&table(&[]), &table(&[]), &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn mismatched_thresholds_rejected() {
        let mut retain = table(&[]);
        retain.activity_threshold = 0.1;
        assert!(select_features(&table(&[]), &retain, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn table_json_round_trip() {
        let t = table(&[(4, 0.25), (17, 1.0)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        t.save(&p).unwrap();
        assert_eq!(FeatureFrequencyTable::load(&p).unwrap(), t);
    }
}
