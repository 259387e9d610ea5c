//! Latent description lookup with a persistent cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholders: `{model}`, `{source}`, `{release}`, `{sae_id}`, `{index}`.
pub const NEURONPEDIA_TEMPLATE: &str = "https://www.neuronpedia.org/api/feature/{model}/{source}/{index}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDescription {
    pub latent_idx: usize,
    pub description: String,
    pub source: String,
    /// Seconds since the Unix epoch.
    pub fetched_at: u64,
}

/// A remote or on-disk provider of latent labels.
///
/// Unreachable entries are reported as [`Error::Fetch`]; payloads that
/// arrive but cannot be understood as [`Error::Decode`].
pub trait DescriptionSource: Send + Sync {
    fn name(&self) -> String;
    fn fetch(&self, release: &str, sae_id: &str, latent_idx: usize) -> Result<String>;
}

#[derive(Deserialize)]
struct Explanation {
    description: Option<String>,
}

#[derive(Deserialize)]
struct FeaturePayload {
    explanations: Option<Vec<Explanation>>,
}

/// First non-empty `explanations[].description` of a feature payload.
pub(crate) fn decode_payload(text: &str, latent_idx: usize) -> Result<String> {
    let payload: FeaturePayload = serde_json::from_str(text)
        .map_err(|e| Error::Decode(format!("latent {latent_idx}: {e}")))?;
    payload
        .explanations
        .unwrap_or_default()
        .into_iter()
        .filter_map(|e| e.description)
        .map(|d| d.trim().to_string())
        .find(|d| !d.is_empty())
        .ok_or_else(|| Error::Decode(format!("latent {latent_idx}: payload has no description")))
}

/// Neuronpedia model and source ids for a Gemma Scope release and SAE id,
/// e.g. `gemma-scope-2b-pt-res-canonical` + `layer_7/width_16k/canonical`
/// → (`gemma-2-2b`, `7-gemmascope-res-16k`).
pub fn neuronpedia_ids(release: &str, sae_id: &str) -> Option<(String, String)> {
    let rest = release.strip_prefix("gemma-scope-")?;
    let mut parts = rest.split('-');
    let size = parts.next()?;
    let _variant = parts.next()?;
    let kind = parts.next()?;
    let mut layer = None;
    let mut width = None;
    for seg in sae_id.split('/') {
        if let Some(l) = seg.strip_prefix("layer_") {
            layer = Some(l);
        } else if let Some(w) = seg.strip_prefix("width_") {
            width = Some(w);
        }
    }
    Some((format!("gemma-2-{size}"), format!("{}-gemmascope-{kind}-{}", layer?, width?)))
}

/// HTTP GET per latent against a URL template.
pub struct HttpSource {
    template: String,
    agent: ureq::Agent,
}

impl HttpSource {
    pub fn new(template: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            template: template.into(),
            agent,
        }
    }

    pub fn neuronpedia() -> Self {
        Self::new(NEURONPEDIA_TEMPLATE, Duration::from_secs(20))
    }

    pub fn url(&self, release: &str, sae_id: &str, latent_idx: usize) -> String {
        let (model, source) = neuronpedia_ids(release, sae_id).unwrap_or_else(|| (release.into(), sae_id.into()));
        self.template
            .replace("{model}", &model)
            .replace("{source}", &source)
            .replace("{release}", release)
            .replace("{sae_id}", sae_id)
            .replace("{index}", &latent_idx.to_string())
    }
}

impl DescriptionSource for HttpSource {
    fn name(&self) -> String {
        self.template.clone()
    }

    fn fetch(&self, release: &str, sae_id: &str, latent_idx: usize) -> Result<String> {
        let url = self.url(release, sae_id, latent_idx);
        let unavailable = |message: String| Error::Fetch {
            missing: vec![latent_idx],
            message,
        };
        let mut response = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| unavailable(format!("GET {url}: {e}")))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| unavailable(format!("reading {url}: {e}")))?;
        decode_payload(&text, latent_idx)
    }
}

/// Directory of `{latent_idx}.json` files in the remote payload shape.
#[derive(Debug, Clone)]
pub struct FixtureSource {
    dir: PathBuf,
}

impl FixtureSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl DescriptionSource for FixtureSource {
    fn name(&self) -> String {
        format!("fixture:{}", self.dir.display())
    }

    fn fetch(&self, _release: &str, _sae_id: &str, latent_idx: usize) -> Result<String> {
        let path = self.dir.join(format!("{latent_idx}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::Fetch {
            missing: vec![latent_idx],
            message: format!("{}: {e}", path.display()),
        })?;
        decode_payload(&text, latent_idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    release: String,
    sae_id: String,
    #[serde(flatten)]
    description: LatentDescription,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    entries: Vec<CacheEntry>,
}

type CacheKey = (String, String, usize);

/// Descriptions keyed by (release, sae_id, latent_idx). Entries are never
/// overwritten once present.
#[derive(Debug, Default)]
pub struct DescriptionCache {
    path: Option<PathBuf>,
    entries: BTreeMap<CacheKey, LatentDescription>,
}

impl DescriptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file; a missing file starts an empty cache there.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut cache = Self {
            path: Some(path.clone()),
            entries: BTreeMap::new(),
        };
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: CacheFile = serde_json::from_str(&text)?;
            for e in file.entries {
                cache
                    .entries
                    .insert((e.release, e.sae_id, e.description.latent_idx), e.description);
            }
        }
        Ok(cache)
    }

    pub fn get(&self, release: &str, sae_id: &str, latent_idx: usize) -> Option<&LatentDescription> {
        self.entries
            .get(&(release.to_string(), sae_id.to_string(), latent_idx))
    }

    pub fn insert(&mut self, release: &str, sae_id: &str, description: LatentDescription) {
        self.entries
            .entry((release.to_string(), sae_id.to_string(), description.latent_idx))
            .or_insert(description);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let file = CacheFile {
            entries: self
                .entries
                .iter()
                .map(|((release, sae_id, _), d)| CacheEntry {
                    release: release.clone(),
                    sae_id: sae_id.clone(),
                    description: d.clone(),
                })
                .collect(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }
}

/// Cache-first description client. Calls to the source are serialized.
pub struct DescriptionClient {
    source: Option<Box<dyn DescriptionSource>>,
    cache: Mutex<DescriptionCache>,
    calls: AtomicUsize,
}

impl DescriptionClient {
    pub fn new(source: Box<dyn DescriptionSource>, cache: DescriptionCache) -> Self {
        Self {
            source: Some(source),
            cache: Mutex::new(cache),
            calls: AtomicUsize::new(0),
        }
    }

    /// Serves only what the cache already holds.
    pub fn offline(cache: DescriptionCache) -> Self {
        Self {
            source: None,
            cache: Mutex::new(cache),
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of requests made to the source so far.
    pub fn source_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// One description per index, in order. New entries are persisted even
    /// when some indices could not be fetched.
    pub fn fetch_latent_descriptions(
        &self,
        release: &str,
        sae_id: &str,
        indices: &[usize],
    ) -> Result<Vec<LatentDescription>> {
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        let mut missing = Vec::new();
        let mut messages = Vec::new();
        let mut fetched_any = false;
        let mut outcome = Ok(());
        for &idx in indices {
            if cache.get(release, sae_id, idx).is_some() {
                continue;
            }
            let Some(source) = &self.source else {
                missing.push(idx);
                continue;
            };
            self.calls.fetch_add(1, Ordering::SeqCst);
            match source.fetch(release, sae_id, idx) {
                Ok(description) => {
                    let fetched_at = SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0);
                    cache.insert(
                        release,
                        sae_id,
                        LatentDescription {
                            latent_idx: idx,
                            description,
                            source: source.name(),
                            fetched_at,
                        },
                    );
                    fetched_any = true;
                }
                Err(Error::Fetch { message, .. }) => {
                    missing.push(idx);
                    messages.push(message);
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        if fetched_any {
            cache.save()?;
        }
        outcome?;
        if !missing.is_empty() {
            let message = if messages.is_empty() {
                "no description source available and the cache has no entry".to_string()
            } else {
                messages.join("; ")
            };
            return Err(Error::Fetch { missing, message });
        }
        Ok(indices
            .iter()
            .map(|&i| cache.get(release, sae_id, i).cloned().expect("present"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemma_scope_ids() {
        assert_eq!(
            neuronpedia_ids("gemma-scope-2b-pt-res-canonical", "layer_7/width_16k/canonical"),
            Some(("gemma-2-2b".into(), "7-gemmascope-res-16k".into()))
        );
        assert_eq!(neuronpedia_ids("toy", "toy/seed_1"), None);
    }

    #[test]
    fn url_template_filled() {
        let s = HttpSource::neuronpedia();
        assert_eq!(
            s.url("gemma-scope-2b-pt-res-canonical", "layer_7/width_16k/canonical", 11766),
            "https://www.neuronpedia.org/api/feature/gemma-2-2b/7-gemmascope-res-16k/11766"
        );
    }

    #[test]
    fn payload_decoding() {
        assert_eq!(
            decode_payload(r#"{"explanations":[{"description":" x "}]}"#, 1).unwrap(),
            "x"
        );
        assert!(matches!(decode_payload("not json", 1), Err(Error::Decode(_))));
        assert!(matches!(decode_payload(r#"{"explanations":[]}"#, 1), Err(Error::Decode(_))));
    }
}
