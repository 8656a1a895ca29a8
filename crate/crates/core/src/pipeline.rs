//! Run configuration and the pipeline commands.
//!
//! Every artifact lands under `output_dir`:
//!
//! ```text
//! clusters/k{K}_seed{S}.json
//! descriptions/k{K}_seed{S}.json      descriptions/global.json
//! predictions/{split}/{run}_seed{S}.jsonl
//! reports/{run}.json                   reports/{run}.txt
//! tune/{mode}.json                     tune/{mode}.txt
//! cache/descriptions/<key>.json
//! artifacts.json                       (sha256 of every artifact above)
//! ```
//!
//! `{run}` is the mode name, suffixed with `_k{K}` for modes that use
//! clusters. Derived artifacts carry a `.inputs` sidecar holding a hash of
//! everything they were computed from; a command whose inputs are unchanged
//! reuses the artifact instead of recomputing it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    build_embedder, build_generator, BackendError, BackendProfile, Generator, GoldLabels,
    ImagePayload,
};
use crate::classifier::{
    Classifier, ClassifyError, Context, ModeKind, Prediction, RunMode, Task, TestItem,
};
use crate::clustering::{ClusterError, ClusterSet};
use crate::describe::{
    generate_all, generate_globals, DescribeError, DescriptionCache, DescriptionStore,
    GenerateOptions, GenerationStats, DEFAULT_GROUP_SIZE,
};
use crate::metrics::{gold_sets, prediction_sets, Averaging, EvalReport, MetricsError, Scores};
use crate::pool::try_map;
use crate::prompts::TEMPLATE_VERSION;
use crate::store::manifest::{read_manifest, ManifestError};
use crate::store::{
    EmbeddingRecord, EmbeddingStore, HnswParams, Split, StoreBuilder, StoreError, META_FILE,
};
use crate::tuner::{tune_k, TuneError, TuneResult};

pub const DEFAULT_SEEDS: [u64; 6] = [21, 42, 63, 84, 105, 126];
pub const DEFAULT_K_CANDIDATES: [usize; 3] = [2, 4, 6];
pub const ARTIFACTS_FILE: &str = "artifacts.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing context: {0}")]
    MissingContext(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("clustering: {0}")]
    Cluster(#[from] ClusterError),
    #[error("describe: {0}")]
    Describe(#[from] DescribeError),
    #[error("classify: {0}")]
    Classify(#[from] ClassifyError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("tuning k={k} seed={seed}: {source}")]
    Tune {
        k: usize,
        seed: u64,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for data problems, 4 for backend failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Backend(BackendError::Config(_)) => 2,
            PipelineError::Backend(_) => 4,
            PipelineError::Describe(DescribeError::Backend { .. }) => 4,
            PipelineError::Classify(ClassifyError::Backend { .. }) => 4,
            PipelineError::Tune { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}
fn default_k_candidates() -> Vec<usize> {
    DEFAULT_K_CANDIDATES.to_vec()
}
fn default_in_flight() -> usize {
    4
}
fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}
fn default_initial_seeds() -> usize {
    3
}
fn default_split() -> Split {
    Split::Test
}
fn default_mode() -> ModeKind {
    ModeKind::EmogistN
}

/// Everything a run needs, serializable as TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub store_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: ModeKind,
    /// Votes per prediction for `emogist_e` (default 3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_votes: Option<usize>,
    /// Clusters per label for cluster/describe/classify.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_k_candidates")]
    pub k_candidates: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// How many leading `seeds` the tuner starts with; the rest extend ties.
    #[serde(default = "default_initial_seeds")]
    pub initial_seeds: usize,
    pub task: Task,
    /// Description versions per cluster (default 3 for `emogist_e`, else 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub versions: Option<usize>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Split classified by `classify` and scored by `evaluate`.
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<BackendProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<BackendProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<BackendProfile>,
    #[serde(default)]
    pub hnsw: HnswParams,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl RunConfig {
    pub fn new(store_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, task: Task) -> Self {
        Self {
            store_dir: store_dir.into(),
            manifest: None,
            output_dir: output_dir.into(),
            mode: default_mode(),
            ensemble_votes: None,
            k: None,
            k_candidates: default_k_candidates(),
            seeds: default_seeds(),
            initial_seeds: default_initial_seeds(),
            task,
            versions: None,
            group_size: default_group_size(),
            split: default_split(),
            embedder: None,
            generator: None,
            classifier: None,
            hnsw: HnswParams::default(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.task.labels().is_empty() {
            return bad("task needs at least one label");
        }
        let distinct: BTreeSet<&String> = self.task.labels().iter().collect();
        if distinct.len() != self.task.labels().len() {
            return bad("task labels must be distinct");
        }
        if matches!(self.task, Task::Multiclass { .. }) && self.task.labels().len() < 2 {
            return bad("a multiclass task needs at least two labels");
        }
        if self.mode == ModeKind::IclAll && matches!(self.task, Task::BinarySet { .. }) {
            return bad("icl_all only supports multiclass tasks");
        }
        if self.k == Some(0) || self.k_candidates.contains(&0) {
            return bad("k must be at least 1");
        }
        if self.versions == Some(0) || self.ensemble_votes == Some(0) {
            return bad("versions and ensemble_votes must be at least 1");
        }
        if self.group_size == 0 || self.max_in_flight == 0 || self.initial_seeds == 0 {
            return bad("group_size, max_in_flight and initial_seeds must be at least 1");
        }
        Ok(())
    }

    pub fn run_mode(&self) -> RunMode {
        let mode = RunMode::new(self.mode);
        match self.ensemble_votes {
            Some(v) if self.mode == ModeKind::EmogistE => mode.with_votes(v),
            _ => mode,
        }
    }

    pub fn versions(&self) -> usize {
        self.versions.unwrap_or(match self.mode {
            ModeKind::EmogistE => self.run_mode().ensemble_votes,
            _ => 1,
        })
    }

    fn require_k(&self) -> Result<usize, PipelineError> {
        self.k
            .ok_or_else(|| PipelineError::Config(format!("mode {} needs `k`", self.mode)))
    }

    fn k_per_label(&self, k: usize) -> BTreeMap<String, usize> {
        self.task.labels().iter().map(|l| (l.clone(), k)).collect()
    }

    /// File stem shared by prediction logs and reports.
    pub fn run_name(&self, k: Option<usize>) -> String {
        match k {
            Some(k) if self.mode.uses_clusters() => format!("{}_k{k}", self.mode),
            _ => self.mode.to_string(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fingerprint(parts: &[&str]) -> String {
    sha256_hex(
        serde_json::to_string(parts)
            .expect("strings serialize")
            .as_bytes(),
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("artifact")
    ));
    fs::write(&tmp, bytes).map_err(|e| file_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| file_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_atomic(path, (text + "\n").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".inputs");
    PathBuf::from(s)
}

/// Whether `path` exists and was produced from `inputs`.
fn is_fresh(path: &Path, inputs: &str) -> bool {
    path.exists() && fs::read_to_string(sidecar(path)).is_ok_and(|s| s.trim() == inputs)
}

fn mark_fresh(path: &Path, inputs: &str) -> Result<(), PipelineError> {
    write_atomic(&sidecar(path), format!("{inputs}\n").as_bytes())
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| file_err(path, e))?))
}

/// Clusters, descriptions and the hashes of their files, for one seed.
type SeedContext = (Option<ClusterSet>, Option<DescriptionStore>, Vec<String>);

/// Test images and gold labels, from the store or, without one, from the manifest.
struct Dataset {
    store: Option<EmbeddingStore>,
    /// (id, uri, labels, split) in manifest order.
    items: Vec<(String, String, BTreeSet<String>, Split)>,
    fingerprint: String,
}

impl Dataset {
    fn gold(&self) -> GoldLabels {
        self.items
            .iter()
            .map(|(id, _, labels, _)| (id.clone(), labels.clone()))
            .collect()
    }

    fn split_items(&self, split: Split) -> Vec<TestItem<'_>> {
        self.items
            .iter()
            .filter(|it| it.3 == split)
            .map(|(id, uri, _, _)| TestItem {
                id,
                uri,
                vector: self
                    .store
                    .as_ref()
                    .and_then(|s| s.get(id))
                    .map(|r| r.vector.as_slice()),
            })
            .collect()
    }

    fn store(&self) -> Result<&EmbeddingStore, PipelineError> {
        self.store.as_ref().ok_or_else(|| {
            PipelineError::MissingContext("no embedding store; run `ingest` first".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub dim: usize,
    pub per_split: BTreeMap<Split, usize>,
    /// Vectors obtained from the embedder.
    pub embedded: usize,
    /// True when the existing store already matched the manifest.
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub seed: u64,
    pub clusters: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DescribeSummary {
    pub descriptions: usize,
    pub global: usize,
    pub stats: GenerationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub seed: u64,
    pub predictions: usize,
    pub abstained: usize,
    pub path: PathBuf,
    pub reused: bool,
}

pub struct Pipeline {
    cfg: RunConfig,
    cache: DescriptionCache,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let cache = DescriptionCache::on_disk(cfg.output_dir.join("cache").join("descriptions"));
        Ok(Self { cfg, cache })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &DescriptionCache {
        &self.cache
    }

    fn out(&self, parts: &[&str]) -> PathBuf {
        parts
            .iter()
            .fold(self.cfg.output_dir.clone(), |p, s| p.join(s))
    }

    pub fn clusters_path(&self, k: usize, seed: u64) -> PathBuf {
        self.out(&["clusters", &format!("k{k}_seed{seed}.json")])
    }

    pub fn descriptions_path(&self, k: usize, seed: u64) -> PathBuf {
        self.out(&["descriptions", &format!("k{k}_seed{seed}.json")])
    }

    pub fn global_path(&self) -> PathBuf {
        self.out(&["descriptions", "global.json"])
    }

    pub fn predictions_path(&self, split: Split, k: Option<usize>, seed: u64) -> PathBuf {
        self.out(&[
            "predictions",
            &split.to_string(),
            &format!("{}_seed{seed}.jsonl", self.cfg.run_name(k)),
        ])
    }

    pub fn report_path(&self, k: Option<usize>, ext: &str) -> PathBuf {
        self.out(&["reports", &format!("{}.{ext}", self.cfg.run_name(k))])
    }

    pub fn tune_path(&self, ext: &str) -> PathBuf {
        self.out(&["tune", &format!("{}.{ext}", self.cfg.mode)])
    }

    fn store_exists(&self) -> bool {
        self.cfg.store_dir.join(META_FILE).exists()
    }

    fn load_dataset(&self) -> Result<Dataset, PipelineError> {
        if self.store_exists() {
            let store = EmbeddingStore::load(&self.cfg.store_dir, self.cfg.hnsw)?;
            let items = store
                .records()
                .iter()
                .map(|r| (r.id.clone(), r.uri.clone(), r.labels.clone(), r.split))
                .collect();
            let fingerprint = fingerprint(&[
                &file_hash(&self.cfg.store_dir.join(META_FILE))?,
                &file_hash(&self.cfg.store_dir.join(crate::store::VECTORS_FILE))?,
            ]);
            return Ok(Dataset {
                store: Some(store),
                items,
                fingerprint,
            });
        }
        let Some(manifest) = &self.cfg.manifest else {
            return Err(PipelineError::Config(format!(
                "no store at {} and no manifest configured",
                self.cfg.store_dir.display()
            )));
        };
        let entries = read_manifest(manifest)?;
        let items = entries
            .into_iter()
            .map(|e| (e.id, e.uri, e.labels.into_iter().collect(), e.split))
            .collect();
        Ok(Dataset {
            store: None,
            items,
            fingerprint: file_hash(manifest)?,
        })
    }

    fn generator(
        &self,
        profile: Option<&BackendProfile>,
        what: &str,
        gold: &GoldLabels,
    ) -> Result<Arc<dyn Generator>, PipelineError> {
        let profile =
            profile.ok_or_else(|| PipelineError::Config(format!("no `{what}` backend profile")))?;
        Ok(build_generator(profile, Some(gold))?)
    }

    /// Reads the manifest, embeds entries without vectors and writes the store.
    pub fn ingest(&self) -> Result<IngestSummary, PipelineError> {
        let manifest = self
            .cfg
            .manifest
            .as_ref()
            .ok_or_else(|| PipelineError::Config("ingest needs `manifest`".into()))?;
        if !manifest.exists() {
            return Err(PipelineError::Config(format!(
                "manifest {} does not exist",
                manifest.display()
            )));
        }
        let entries = read_manifest(manifest)?;
        let embedder_tag = self
            .cfg
            .embedder
            .as_ref()
            .map(|p| serde_json::to_string(p).expect("profile serializes"));
        let inputs = fingerprint(&[&file_hash(manifest)?, embedder_tag.as_deref().unwrap_or("")]);
        let marker = self.cfg.store_dir.join(META_FILE);
        if is_fresh(&marker, &inputs) {
            let store = EmbeddingStore::load(&self.cfg.store_dir, self.cfg.hnsw)?;
            return Ok(summarize(&store, 0, true));
        }

        let missing: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].vector.is_none())
            .collect();
        let mut vectors: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        if !missing.is_empty() {
            let profile = self.cfg.embedder.as_ref().ok_or_else(|| {
                PipelineError::Config(format!(
                    "{} manifest entries have no vector and no `embedder` is configured",
                    missing.len()
                ))
            })?;
            let embedder = build_embedder(profile)?;
            let got = try_map(&missing, self.cfg.max_in_flight, |&i| {
                embedder.embed(&ImagePayload::uri(entries[i].uri.clone()))
            })?;
            vectors.extend(missing.iter().copied().zip(got));
        }
        let dim = entries
            .iter()
            .enumerate()
            .find_map(|(i, e)| e.vector.as_ref().or(vectors.get(&i)).map(Vec::len))
            .ok_or(StoreError::EmptyStore)?;
        let mut builder = StoreBuilder::with_params(dim, self.cfg.hnsw);
        let embedded = vectors.len();
        for (i, e) in entries.into_iter().enumerate() {
            let vector = match e.vector {
                Some(v) => v,
                None => vectors.remove(&i).expect("embedded above"),
            };
            builder.insert(EmbeddingRecord::new(
                e.id, e.uri, e.labels, e.split, vector,
            )?)?;
        }
        let store = builder.freeze();
        store.save(&self.cfg.store_dir)?;
        mark_fresh(&marker, &inputs)?;
        self.write_artifact_index()?;
        Ok(summarize(&store, embedded, false))
    }

    /// Loads or computes the cluster set for `(k, seed)`.
    fn clusters_for(
        &self,
        data: &Dataset,
        k: usize,
        seed: u64,
    ) -> Result<ClusterSet, PipelineError> {
        let path = self.clusters_path(k, seed);
        let inputs = fingerprint(&[
            &data.fingerprint,
            &k.to_string(),
            &seed.to_string(),
            &self.cfg.task.labels().join("\n"),
        ]);
        if is_fresh(&path, &inputs) {
            return read_json(&path);
        }
        let set = ClusterSet::build(data.store()?, &self.cfg.k_per_label(k), seed)?;
        write_json(&path, &set)?;
        mark_fresh(&path, &inputs)?;
        Ok(set)
    }

    /// Per-label k-means for the configured k and every seed.
    pub fn cluster(&self) -> Result<Vec<ClusterSummary>, PipelineError> {
        let k = self.cfg.require_k()?;
        let data = self.load_dataset()?;
        data.store()?;
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            let set = self.clusters_for(&data, k, seed)?;
            out.push(ClusterSummary {
                k,
                seed,
                clusters: set.clusters.len(),
                path: self.clusters_path(k, seed),
            });
        }
        self.write_artifact_index()?;
        Ok(out)
    }

    fn describe_for(
        &self,
        data: &Dataset,
        clusters: &ClusterSet,
        k: usize,
        seed: u64,
        generator: &dyn Generator,
    ) -> Result<(DescriptionStore, GenerationStats), PipelineError> {
        let path = self.descriptions_path(k, seed);
        let mut descriptions = if path.exists() {
            DescriptionStore::load(&path)?
        } else {
            DescriptionStore::default()
        };
        let opts = GenerateOptions {
            versions: self.cfg.versions(),
            group_size: self.cfg.group_size,
            max_in_flight: self.cfg.max_in_flight,
            ..GenerateOptions::default()
        };
        let opts = apply_decoding(opts, self.cfg.generator.as_ref());
        let result = generate_all(
            clusters,
            data.store()?,
            generator,
            &self.cache,
            &opts,
            &mut descriptions,
        );
        // keep partial progress even when generation fails
        descriptions.save(&path)?;
        Ok((descriptions, result?))
    }

    fn globals(
        &self,
        generator: &dyn Generator,
    ) -> Result<(DescriptionStore, GenerationStats), PipelineError> {
        let path = self.global_path();
        let mut store = if path.exists() {
            DescriptionStore::load(&path)?
        } else {
            DescriptionStore::default()
        };
        let result = generate_globals(self.cfg.task.labels(), generator, &self.cache, &mut store);
        store.save(&path)?;
        Ok((store, result?))
    }

    /// Generates the descriptions the configured mode needs.
    pub fn describe(&self) -> Result<DescribeSummary, PipelineError> {
        let mut summary = DescribeSummary::default();
        match self.cfg.mode {
            ModeKind::GlobalExp => {
                let data = self.load_dataset()?;
                let generator =
                    self.generator(self.cfg.generator.as_ref(), "generator", &data.gold())?;
                let (store, stats) = self.globals(generator.as_ref())?;
                summary.global = store.global.len();
                summary.stats = stats;
            }
            ModeKind::EmogistN | ModeKind::EmogistE => {
                let k = self.cfg.require_k()?;
                let data = self.load_dataset()?;
                let generator =
                    self.generator(self.cfg.generator.as_ref(), "generator", &data.gold())?;
                for &seed in &self.cfg.seeds {
                    let clusters = self.clusters_for(&data, k, seed)?;
                    let (store, stats) =
                        self.describe_for(&data, &clusters, k, seed, generator.as_ref())?;
                    summary.descriptions += store.len();
                    summary.stats.cached += stats.cached;
                    summary.stats.generated += stats.generated;
                }
            }
            _ => {}
        }
        self.write_artifact_index()?;
        Ok(summary)
    }

    /// Context files `classify` reads for one seed; never generates them.
    fn existing_context(
        &self,
        data: &Dataset,
        k: Option<usize>,
        seed: u64,
    ) -> Result<SeedContext, PipelineError> {
        match self.cfg.mode {
            ModeKind::GlobalExp => {
                let path = self.global_path();
                if !path.exists() {
                    return Err(PipelineError::MissingContext(format!(
                        "{} not found; run `describe` first",
                        path.display()
                    )));
                }
                Ok((
                    None,
                    Some(DescriptionStore::load(&path)?),
                    vec![file_hash(&path)?],
                ))
            }
            ModeKind::EmogistN | ModeKind::EmogistE => {
                let k = k.expect("cluster modes carry k");
                let cpath = self.clusters_path(k, seed);
                let dpath = self.descriptions_path(k, seed);
                for p in [&cpath, &dpath] {
                    if !p.exists() {
                        return Err(PipelineError::MissingContext(format!(
                            "{} not found; run `cluster` and `describe` first",
                            p.display()
                        )));
                    }
                }
                data.store()?;
                Ok((
                    Some(read_json(&cpath)?),
                    Some(DescriptionStore::load(&dpath)?),
                    vec![file_hash(&cpath)?, file_hash(&dpath)?],
                ))
            }
            ModeKind::IclSim | ModeKind::IclAll => {
                data.store()?;
                Ok((None, None, Vec::new()))
            }
            ModeKind::ZeroShot => Ok((None, None, Vec::new())),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        data: &Dataset,
        split: Split,
        k: Option<usize>,
        seed: u64,
        clusters: Option<&ClusterSet>,
        descriptions: Option<&DescriptionStore>,
        context_hashes: &[String],
        generator: &dyn Generator,
    ) -> Result<(Vec<Prediction>, ClassifySummary), PipelineError> {
        let path = self.predictions_path(split, k, seed);
        let mode = self.cfg.run_mode();
        let mut parts = vec![
            data.fingerprint.clone(),
            serde_json::to_string(&mode).expect("mode serializes"),
            serde_json::to_string(&self.cfg.task).expect("task serializes"),
            split.to_string(),
            seed.to_string(),
            generator.tag(),
            TEMPLATE_VERSION.to_string(),
        ];
        parts.extend(context_hashes.iter().cloned());
        let inputs = fingerprint(&parts.iter().map(String::as_str).collect::<Vec<_>>());
        if is_fresh(&path, &inputs) {
            let preds = read_predictions(&path)?;
            let summary = classify_summary(&preds, seed, path, true);
            return Ok((preds, summary));
        }
        let ctx = Context {
            store: data.store.as_ref(),
            clusters,
            descriptions,
            seed,
        };
        let mut classifier = Classifier::new(mode, generator, ctx);
        if let Some(p) = &self.cfg.classifier {
            classifier.max_tokens = p.max_tokens.unwrap_or(classifier.max_tokens);
            classifier.temperature = p.temperature.unwrap_or(classifier.temperature);
        }
        let items = data.split_items(split);
        if items.is_empty() {
            return Err(PipelineError::MissingContext(format!(
                "no records in the {split} split"
            )));
        }
        let preds = classifier.classify_all(&items, &self.cfg.task, self.cfg.max_in_flight)?;
        write_predictions(&path, &preds)?;
        mark_fresh(&path, &inputs)?;
        let summary = classify_summary(&preds, seed, path, false);
        Ok((preds, summary))
    }

    fn mode_k(&self) -> Result<Option<usize>, PipelineError> {
        if self.cfg.mode.uses_clusters() {
            self.cfg.require_k().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Runs the configured mode over the configured split, once per seed.
    pub fn classify(&self) -> Result<Vec<ClassifySummary>, PipelineError> {
        let k = self.mode_k()?;
        let data = self.load_dataset()?;
        let contexts = self
            .cfg
            .seeds
            .iter()
            .map(|&seed| self.existing_context(&data, k, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let generator = self.generator(self.cfg.classifier.as_ref(), "classifier", &data.gold())?;
        // catch configuration gaps before spending any backend call
        for (clusters, descriptions, _) in &contexts {
            let ctx = Context {
                store: data.store.as_ref(),
                clusters: clusters.as_ref(),
                descriptions: descriptions.as_ref(),
                seed: 0,
            };
            Classifier::new(self.cfg.run_mode(), generator.as_ref(), ctx).check(&self.cfg.task)?;
        }
        let mut out = Vec::new();
        for (&seed, (clusters, descriptions, hashes)) in self.cfg.seeds.iter().zip(&contexts) {
            let (_, summary) = self.predict(
                &data,
                self.cfg.split,
                k,
                seed,
                clusters.as_ref(),
                descriptions.as_ref(),
                hashes,
                generator.as_ref(),
            )?;
            out.push(summary);
        }
        self.write_artifact_index()?;
        Ok(out)
    }

    fn score(&self, data: &Dataset, preds: &[Prediction]) -> Result<Scores, PipelineError> {
        let labels = self.cfg.task.labels();
        let gold_all = data.gold();
        let ids: BTreeSet<&str> = preds.iter().map(|p| p.test_id.as_str()).collect();
        let gold = gold_sets(
            ids.iter()
                .filter_map(|id| gold_all.get_key_value(*id).map(|(k, v)| (k.as_str(), v))),
            labels,
        );
        if gold.len() != ids.len() {
            let unknown = ids
                .iter()
                .find(|id| !gold_all.contains_key(**id))
                .expect("some id lacks gold");
            return Err(
                MetricsError::Misaligned(format!("`{unknown}` is not in the dataset")).into(),
            );
        }
        let pred = prediction_sets(preds);
        Ok(Averaging::for_task(&self.cfg.task).score(&pred, &gold, labels)?)
    }

    /// Scores prediction logs against gold. Without explicit `logs`, reads
    /// the per-seed logs of the configured run and writes its report.
    pub fn evaluate(&self, logs: Option<&[PathBuf]>) -> Result<EvalReport, PipelineError> {
        let data = self.load_dataset()?;
        let k = self.mode_k()?;
        let runs: Vec<(u64, PathBuf)> = match logs {
            Some(paths) => paths
                .iter()
                .enumerate()
                .map(|(i, p)| (seed_from_path(p).unwrap_or(i as u64), p.clone()))
                .collect(),
            None => self
                .cfg
                .seeds
                .iter()
                .map(|&s| (s, self.predictions_path(self.cfg.split, k, s)))
                .collect(),
        };
        let mut per_seed = BTreeMap::new();
        for (seed, path) in &runs {
            if !path.exists() {
                return Err(PipelineError::MissingContext(format!(
                    "{} not found; run `classify` first",
                    path.display()
                )));
            }
            let preds = read_predictions(path)?;
            per_seed.insert(*seed, self.score(&data, &preds)?);
        }
        let report = EvalReport::new(
            &self.cfg.task,
            self.cfg.run_name(k),
            Averaging::for_task(&self.cfg.task),
            per_seed,
        )?;
        if logs.is_none() {
            write_json(&self.report_path(k, "json"), &report)?;
            write_atomic(&self.report_path(k, "txt"), report.to_table().as_bytes())?;
            self.write_artifact_index()?;
        }
        Ok(report)
    }

    /// Picks k for the configured EmoGist mode on the validation split.
    pub fn tune(&self) -> Result<TuneResult, PipelineError> {
        if !self.cfg.mode.uses_clusters() {
            return Err(PipelineError::Config(format!(
                "mode {} has no k to tune",
                self.cfg.mode
            )));
        }
        let data = self.load_dataset()?;
        data.store()?;
        let gold = data.gold();
        let describer = self.generator(self.cfg.generator.as_ref(), "generator", &gold)?;
        let classifier = self.generator(self.cfg.classifier.as_ref(), "classifier", &gold)?;
        let n_initial = self.cfg.initial_seeds.min(self.cfg.seeds.len());
        let (initial, extension) = self.cfg.seeds.split_at(n_initial);
        let eval = |k: usize, seed: u64| -> Result<f64, PipelineError> {
            let clusters = self.clusters_for(&data, k, seed)?;
            let (descriptions, _) =
                self.describe_for(&data, &clusters, k, seed, describer.as_ref())?;
            let hashes = vec![
                file_hash(&self.clusters_path(k, seed))?,
                file_hash(&self.descriptions_path(k, seed))?,
            ];
            let (preds, _) = self.predict(
                &data,
                Split::Validation,
                Some(k),
                seed,
                Some(&clusters),
                Some(&descriptions),
                &hashes,
                classifier.as_ref(),
            )?;
            Ok(self.score(&data, &preds)?.f1)
        };
        let result =
            tune_k(&self.cfg.k_candidates, initial, extension, eval).map_err(|e| match e {
                TuneError::Eval { k, seed, source } => PipelineError::Tune {
                    k,
                    seed,
                    source: Box::new(source),
                },
                other => PipelineError::Config(other.to_string()),
            })?;
        write_json(&self.tune_path("json"), &result)?;
        write_atomic(&self.tune_path("txt"), result.to_table().as_bytes())?;
        self.write_artifact_index()?;
        Ok(result)
    }

    /// Rewrites `artifacts.json` with the sha256 of every artifact under
    /// `output_dir`, except the description cache and input sidecars.
    pub fn write_artifact_index(&self) -> Result<(), PipelineError> {
        let root = &self.cfg.output_dir;
        if !root.exists() {
            return Ok(());
        }
        let mut index = BTreeMap::new();
        let mut stack = vec![root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| file_err(&dir, e))? {
                let path = entry.map_err(|e| file_err(&dir, e))?.path();
                let rel = path
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel == "cache"
                    || rel == ARTIFACTS_FILE
                    || rel.ends_with(".inputs")
                    || rel.ends_with(".tmp")
                {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                } else {
                    index.insert(rel, file_hash(&path)?);
                }
            }
        }
        write_json(&root.join(ARTIFACTS_FILE), &index)
    }
}

fn apply_decoding(mut opts: GenerateOptions, profile: Option<&BackendProfile>) -> GenerateOptions {
    if let Some(p) = profile {
        opts.max_tokens = p.max_tokens.unwrap_or(opts.max_tokens);
        opts.temperature = p.temperature.unwrap_or(opts.temperature);
    }
    opts
}

fn summarize(store: &EmbeddingStore, embedded: usize, reused: bool) -> IngestSummary {
    let mut per_split = BTreeMap::new();
    for r in store.records() {
        *per_split.entry(r.split).or_insert(0) += 1;
    }
    IngestSummary {
        records: store.len(),
        dim: store.dim(),
        per_split,
        embedded,
        reused,
    }
}

fn classify_summary(
    preds: &[Prediction],
    seed: u64,
    path: PathBuf,
    reused: bool,
) -> ClassifySummary {
    ClassifySummary {
        seed,
        predictions: preds.len(),
        abstained: preds.iter().filter(|p| p.abstained).count(),
        path,
        reused,
    }
}

/// `..._seed{S}.jsonl` -> `S`
fn seed_from_path(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    stem.rsplit_once("_seed")?.1.parse().ok()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| file_err(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}
