//! Versioned label descriptions.
//!
//! Each cluster's members are already ranked by distance to the centroid.
//! Version `v` of a cluster's description is generated from the window
//! `member_ids[v * group_size .. (v + 1) * group_size]`, so versions never
//! share source images. Clusters too small for a window simply have fewer
//! versions.
//!
//! Generated text is cached under a content key of
//! `(cluster_id, version, sorted source_ids, generator_tag, prompt_hash)`.
//! The cache can live on disk (one JSON file per key), which makes
//! generation resumable after an interruption.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, GenerationRequest, Generator, ImagePayload};
use crate::clustering::{Cluster, ClusterSet};
use crate::pool::run_jobs;
use crate::prompts::{self, TEMPLATE_VERSION};
use crate::store::EmbeddingStore;

pub const DEFAULT_GROUP_SIZE: usize = 4;
pub const DESCRIPTION_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("cluster `{cluster_id}` has {members} members; version {version} is out of range")]
    VersionOutOfRange {
        cluster_id: String,
        version: usize,
        members: usize,
    },
    #[error("record `{0}` is not in the store")]
    UnknownRecord(String),
    #[error("a description needs at least one image")]
    NoImages,
    #[error("versions must be at least 1")]
    ZeroVersions,
    #[error("{context}: {source}")]
    Backend {
        context: String,
        #[source]
        source: BackendError,
    },
    #[error("description file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Window of `group_size` centroid-ranked members for `version`, truncated
/// at the end of the list.
pub fn select_version_images(
    cluster: &Cluster,
    version: usize,
    group_size: usize,
) -> Result<Vec<String>, DescribeError> {
    let start = version.saturating_mul(group_size);
    if group_size == 0 || start >= cluster.member_ids.len() {
        return Err(DescribeError::VersionOutOfRange {
            cluster_id: cluster.cluster_id.clone(),
            version,
            members: cluster.member_ids.len(),
        });
    }
    let end = (start + group_size).min(cluster.member_ids.len());
    Ok(cluster.member_ids[start..end].to_vec())
}

pub fn prompt_hash(prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(TEMPLATE_VERSION.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Cache key for one generation.
pub fn content_key(
    cluster_id: &str,
    version: usize,
    source_ids: &[String],
    generator_tag: &str,
    prompt_hash: &str,
) -> String {
    let mut ids = source_ids.to_vec();
    ids.sort();
    let canonical = serde_json::json!([cluster_id, version, ids, generator_tag, prompt_hash]);
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Sends the images followed by the description prompt for `label`.
/// Returns the reply with surrounding whitespace removed.
pub fn generate_description(
    images: &[ImagePayload],
    label: &str,
    backend: &dyn Generator,
) -> Result<String, BackendError> {
    let request = GenerationRequest::new(prompts::description_prompt(label))
        .with_images(images.to_vec())
        .with_decoding(DESCRIPTION_MAX_TOKENS, 0.0)
        .tag("kind", "description")
        .tag("label", label);
    run_request(&request, backend)
}

fn run_request(
    request: &GenerationRequest,
    backend: &dyn Generator,
) -> Result<String, BackendError> {
    let text = backend.generate(request)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(BackendError::EmptyResponse);
    }
    Ok(text.to_string())
}

/// Label-only description without reference images.
pub fn generate_global(label: &str, backend: &dyn Generator) -> Result<String, BackendError> {
    let request = GenerationRequest::new(prompts::global_description_prompt(label))
        .with_decoding(DESCRIPTION_MAX_TOKENS, 0.0)
        .tag("kind", "global")
        .tag("label", label);
    run_request(&request, backend)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDescription {
    pub cluster_id: String,
    pub version: usize,
    pub source_ids: Vec<String>,
    pub text: String,
    pub generator_tag: String,
    pub prompt_hash: String,
}

impl LabelDescription {
    pub fn content_key(&self) -> String {
        content_key(
            &self.cluster_id,
            self.version,
            &self.source_ids,
            &self.generator_tag,
            &self.prompt_hash,
        )
    }

    /// `clusterId#version`
    pub fn reference(&self) -> String {
        format!("{}#{}", self.cluster_id, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescription {
    pub label: String,
    pub text: String,
    pub generator_tag: String,
    pub prompt_hash: String,
}

/// Descriptions keyed by `(cluster_id, version)` plus per-label global ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptionStore {
    pub descriptions: BTreeMap<(String, usize), LabelDescription>,
    pub global: BTreeMap<String, GlobalDescription>,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    #[serde(default)]
    source_ids: Vec<String>,
    text: String,
    generator_tag: String,
    prompt_hash: String,
}

const GLOBAL_PREFIX: &str = "global#";

impl DescriptionStore {
    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty() && self.global.is_empty()
    }

    pub fn insert(&mut self, d: LabelDescription) {
        self.descriptions
            .insert((d.cluster_id.clone(), d.version), d);
    }

    pub fn get(&self, cluster_id: &str, version: usize) -> Option<&LabelDescription> {
        self.descriptions.get(&(cluster_id.to_string(), version))
    }

    /// All versions of a cluster, ascending.
    pub fn versions(&self, cluster_id: &str) -> Vec<&LabelDescription> {
        self.descriptions
            .range((cluster_id.to_string(), 0)..=(cluster_id.to_string(), usize::MAX))
            .map(|(_, d)| d)
            .collect()
    }

    pub fn global_text(&self, label: &str) -> Option<&str> {
        self.global.get(label).map(|g| g.text.as_str())
    }

    /// JSON object keyed `clusterId#version` and `global#label`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for d in self.descriptions.values() {
            let entry = FileEntry {
                source_ids: d.source_ids.clone(),
                text: d.text.clone(),
                generator_tag: d.generator_tag.clone(),
                prompt_hash: d.prompt_hash.clone(),
            };
            map.insert(
                d.reference(),
                serde_json::to_value(entry).expect("entry serializes"),
            );
        }
        for g in self.global.values() {
            let entry = FileEntry {
                source_ids: Vec::new(),
                text: g.text.clone(),
                generator_tag: g.generator_tag.clone(),
                prompt_hash: g.prompt_hash.clone(),
            };
            map.insert(
                format!("{GLOBAL_PREFIX}{}", g.label),
                serde_json::to_value(entry).expect("entry serializes"),
            );
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, String> {
        let map: BTreeMap<String, FileEntry> =
            serde_json::from_value(value).map_err(|e| e.to_string())?;
        let mut store = Self::default();
        for (key, e) in map {
            if let Some(label) = key.strip_prefix(GLOBAL_PREFIX) {
                store.global.insert(
                    label.to_string(),
                    GlobalDescription {
                        label: label.to_string(),
                        text: e.text,
                        generator_tag: e.generator_tag,
                        prompt_hash: e.prompt_hash,
                    },
                );
                continue;
            }
            let (cluster_id, version) = key
                .rsplit_once('#')
                .and_then(|(c, v)| Some((c.to_string(), v.parse::<usize>().ok()?)))
                .ok_or_else(|| format!("bad key `{key}`"))?;
            store.insert(LabelDescription {
                cluster_id,
                version,
                source_ids: e.source_ids,
                text: e.text,
                generator_tag: e.generator_tag,
                prompt_hash: e.prompt_hash,
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), DescribeError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(&self.to_json()).expect("json serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DescribeError> {
        let file_err = |message: String| DescribeError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path)?;
        let value = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        Self::from_json(value).map_err(file_err)
    }
}

/// Content-addressed store of generated text, optionally backed by a
/// directory. Thread-safe.
#[derive(Debug, Default)]
pub struct DescriptionCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, String>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct CachedText {
    text: String,
}

impl DescriptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    /// Looks up `key`, counting a hit or a miss.
    pub fn get(&self, key: &str) -> Option<String> {
        let found = self.peek(key);
        let counter = if found.is_some() {
            &self.hits
        } else {
            &self.misses
        };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    fn peek(&self, key: &str) -> Option<String> {
        if let Some(t) = self.mem.lock().expect("cache lock").get(key) {
            return Some(t.clone());
        }
        let path = self.path(key)?;
        let text = fs::read_to_string(path).ok()?;
        let cached: CachedText = serde_json::from_str(&text).ok()?;
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), cached.text.clone());
        Some(cached.text)
    }

    /// Counts a hit without a lookup (entry already present in the target store).
    fn record_hit(&self) {
        self.hits.fetch_add(1, Ordering::Relaxed);
    }

    pub fn put(&self, key: &str, text: &str) -> Result<(), std::io::Error> {
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), text.to_string());
        if let Some(path) = self.path(key) {
            let dir = path.parent().expect("cache file has a parent");
            fs::create_dir_all(dir)?;
            let tmp = dir.join(format!(".{key}.tmp"));
            let body =
                serde_json::to_string(&CachedText { text: text.into() }).expect("serializes");
            fs::write(&tmp, body)?;
            fs::rename(tmp, path)?;
        }
        Ok(())
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    /// Descriptions that needed no backend call.
    pub cached: usize,
    /// Backend calls made.
    pub generated: usize,
}

impl GenerationStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.cached + self.generated;
        if total == 0 {
            1.0
        } else {
            self.cached as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub versions: usize,
    pub group_size: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Concurrent backend requests.
    pub max_in_flight: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            versions: 1,
            group_size: DEFAULT_GROUP_SIZE,
            max_tokens: DESCRIPTION_MAX_TOKENS,
            temperature: 0.0,
            max_in_flight: 1,
        }
    }
}

struct Job {
    label: String,
    cluster_id: String,
    version: usize,
    source_ids: Vec<String>,
    images: Vec<ImagePayload>,
    prompt: String,
    prompt_hash: String,
    key: String,
}

/// Generates versions `0..opts.versions` for every cluster, skipping windows
/// past the end of a cluster. Entries already in `out` with the same content
/// key, and texts found in `cache`, cost no backend call. On failure the
/// descriptions produced so far are kept in `out` and in the cache.
pub fn generate_all(
    clusters: &ClusterSet,
    store: &EmbeddingStore,
    backend: &dyn Generator,
    cache: &DescriptionCache,
    opts: &GenerateOptions,
    out: &mut DescriptionStore,
) -> Result<GenerationStats, DescribeError> {
    if opts.versions == 0 {
        return Err(DescribeError::ZeroVersions);
    }
    let generator_tag = backend.tag();
    let mut stats = GenerationStats::default();
    let mut jobs = Vec::new();
    for cluster in &clusters.clusters {
        let prompt = prompts::description_prompt(&cluster.label);
        let phash = prompt_hash(&prompt);
        for version in 0..opts.versions {
            let source_ids = match select_version_images(cluster, version, opts.group_size) {
                Ok(ids) => ids,
                Err(DescribeError::VersionOutOfRange { .. }) => break,
                Err(e) => return Err(e),
            };
            let key = content_key(
                &cluster.cluster_id,
                version,
                &source_ids,
                &generator_tag,
                &phash,
            );
            if out
                .get(&cluster.cluster_id, version)
                .is_some_and(|d| d.content_key() == key)
            {
                cache.record_hit();
                stats.cached += 1;
                continue;
            }
            let images = source_ids
                .iter()
                .map(|id| {
                    store
                        .get(id)
                        .map(|r| ImagePayload::uri(r.uri.clone()))
                        .ok_or_else(|| DescribeError::UnknownRecord(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            jobs.push(Job {
                label: cluster.label.clone(),
                cluster_id: cluster.cluster_id.clone(),
                version,
                source_ids,
                images,
                prompt: prompt.clone(),
                prompt_hash: phash.clone(),
                key,
            });
        }
    }

    let generated = AtomicUsize::new(0);
    let results = run_jobs(&jobs, opts.max_in_flight, |job| {
        if let Some(text) = cache.get(&job.key) {
            return Ok(text);
        }
        let request = GenerationRequest::new(job.prompt.clone())
            .with_images(job.images.clone())
            .with_decoding(opts.max_tokens, opts.temperature)
            .tag("kind", "description")
            .tag("label", job.label.clone())
            .tag("cluster_id", job.cluster_id.clone())
            .tag("version", job.version.to_string());
        generated.fetch_add(1, Ordering::Relaxed);
        let text = run_request(&request, backend).map_err(|source| DescribeError::Backend {
            context: format!("cluster {} version {}", job.cluster_id, job.version),
            source,
        })?;
        cache.put(&job.key, &text)?;
        Ok(text)
    });

    stats.generated = generated.load(Ordering::Relaxed);
    stats.cached += jobs.len().saturating_sub(stats.generated);
    let mut first_err = None;
    for (job, result) in jobs.into_iter().zip(results) {
        match result {
            Some(Ok(text)) => out.insert(LabelDescription {
                cluster_id: job.cluster_id,
                version: job.version,
                source_ids: job.source_ids,
                text,
                generator_tag: generator_tag.clone(),
                prompt_hash: job.prompt_hash,
            }),
            Some(Err(e)) => {
                first_err.get_or_insert(e);
            }
            None => {}
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

/// Adds a global description for every label, reusing cached text.
pub fn generate_globals(
    labels: &[String],
    backend: &dyn Generator,
    cache: &DescriptionCache,
    out: &mut DescriptionStore,
) -> Result<GenerationStats, DescribeError> {
    let generator_tag = backend.tag();
    let mut stats = GenerationStats::default();
    for label in labels {
        let prompt = prompts::global_description_prompt(label);
        let phash = prompt_hash(&prompt);
        let key = content_key(
            &format!("{GLOBAL_PREFIX}{label}"),
            0,
            &[],
            &generator_tag,
            &phash,
        );
        if let Some(existing) = out.global.get(label) {
            if existing.generator_tag == generator_tag && existing.prompt_hash == phash {
                cache.record_hit();
                stats.cached += 1;
                continue;
            }
        }
        let text = match cache.get(&key) {
            Some(t) => {
                stats.cached += 1;
                t
            }
            None => {
                stats.generated += 1;
                let t =
                    generate_global(label, backend).map_err(|source| DescribeError::Backend {
                        context: format!("global description for {label}"),
                        source,
                    })?;
                cache.put(&key, &t)?;
                t
            }
        };
        out.global.insert(
            label.clone(),
            GlobalDescription {
                label: label.clone(),
                text,
                generator_tag: generator_tag.clone(),
                prompt_hash: phash,
            },
        );
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockGenerator;

    fn cluster(n: usize) -> Cluster {
        Cluster {
            cluster_id: "awe:0".into(),
            label: "awe".into(),
            centroid: vec![1.0, 0.0],
            member_ids: (1..=n).map(|i| format!("m{i:02}")).collect(),
            objective: 0.0,
        }
    }

    #[test]
    fn windows_of_four() {
        let c = cluster(12);
        assert_eq!(
            select_version_images(&c, 0, 4).unwrap(),
            ["m01", "m02", "m03", "m04"]
        );
        assert_eq!(
            select_version_images(&c, 1, 4).unwrap(),
            ["m05", "m06", "m07", "m08"]
        );
        assert_eq!(
            select_version_images(&c, 2, 4).unwrap(),
            ["m09", "m10", "m11", "m12"]
        );
    }

    #[test]
    fn truncation_and_exhaustion() {
        assert_eq!(select_version_images(&cluster(5), 1, 4).unwrap(), ["m05"]);
        assert!(matches!(
            select_version_images(&cluster(4), 1, 4),
            Err(DescribeError::VersionOutOfRange {
                version: 1,
                members: 4,
                ..
            })
        ));
    }

    #[test]
    fn description_request_shape() {
        let mock = MockGenerator::template("DESC({label},{n_images})");
        let images = vec![ImagePayload::uri("x.jpg"); 4];
        assert_eq!(
            generate_description(&images, "awe", &mock).unwrap(),
            "DESC(awe,4)"
        );
        let req = &mock.requests()[0];
        assert!(req
            .prompt
            .contains("Based on these examples, what are the common features"));
        assert_eq!(req.images.len(), 4);
    }

    #[test]
    fn empty_reply_is_an_error() {
        let mock = MockGenerator::constant("   ");
        assert!(matches!(
            generate_description(&[ImagePayload::uri("x")], "awe", &mock),
            Err(BackendError::EmptyResponse)
        ));
    }

    #[test]
    fn global_has_no_images() {
        let mock = MockGenerator::template("GLOBAL({label})");
        assert_eq!(generate_global("fear", &mock).unwrap(), "GLOBAL(fear)");
        assert!(mock.requests()[0].images.is_empty());
    }

    #[test]
    fn content_key_ignores_source_order_only() {
        let a = content_key("c", 0, &["b".into(), "a".into()], "g", "p");
        let b = content_key("c", 0, &["a".into(), "b".into()], "g", "p");
        assert_eq!(a, b);
        assert_ne!(a, content_key("c", 0, &["a".into(), "b".into()], "g2", "p"));
        assert_ne!(a, content_key("c", 0, &["a".into(), "b".into()], "g", "p2"));
        assert_ne!(a, content_key("c", 1, &["a".into(), "b".into()], "g", "p"));
    }

    #[test]
    fn store_json_round_trip() {
        let mut s = DescriptionStore::default();
        s.insert(LabelDescription {
            cluster_id: "a:b:0".into(),
            version: 2,
            source_ids: vec!["x".into()],
            text: "t".into(),
            generator_tag: "g".into(),
            prompt_hash: "h".into(),
        });
        s.global.insert(
            "fear".into(),
            GlobalDescription {
                label: "fear".into(),
                text: "g".into(),
                generator_tag: "g".into(),
                prompt_hash: "h".into(),
            },
        );
        let json = s.to_json();
        assert!(json.get("a:b:0#2").is_some());
        assert!(json.get("global#fear").is_some());
        assert_eq!(DescriptionStore::from_json(json).unwrap(), s);
    }
}
