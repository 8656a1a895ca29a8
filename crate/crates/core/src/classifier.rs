//! Test-time prediction for every run mode.
//!
//! | mode        | context placed before the question                     |
//! |-------------|--------------------------------------------------------|
//! | `zero_shot` | nothing                                                |
//! | `global_exp`| label description written without reference images    |
//! | `icl_sim`   | 4 most similar train images with their answers         |
//! | `icl_all`   | one train image per class (multiclass only)            |
//! | `emogist_n` | description of the nearest cluster, version 0          |
//! | `emogist_e` | one vote per description version of the nearest cluster|
//!
//! In binary tasks the nearest cluster is searched among the queried
//! label's clusters only; in multiclass tasks among all clusters.
//!
//! Abstentions: a binary prediction whose votes all abstain is final `No`
//! with `abstained` set. A multiclass one has no final answer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationRequest, Generator, ImagePayload};
use crate::clustering::{ClusterError, ClusterSet, Scope};
use crate::describe::DescriptionStore;
use crate::pool::try_map;
use crate::prompts;
use crate::rng::SeededRng;
use crate::store::{EmbeddingRecord, EmbeddingStore, Filter, Split, StoreError};

pub const ICL_EXAMPLES: usize = 4;
pub const CLASSIFY_MAX_TOKENS: u32 = 16;
pub const DEFAULT_ENSEMBLE_VOTES: usize = 3;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("mode {mode} needs {what}")]
    MissingContext { mode: ModeKind, what: String },
    #[error("mode {mode} does not support {task} tasks")]
    UnsupportedTask { mode: ModeKind, task: &'static str },
    #[error("a multiclass task needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("ensemble_votes must be at least 1")]
    ZeroVotes,
    #[error("no votes to count")]
    EmptyVotes,
    #[error("record `{0}` has no embedding in the store")]
    NoEmbedding(String),
    #[error("{test_id}: {source}")]
    Backend {
        test_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    ZeroShot,
    GlobalExp,
    IclSim,
    IclAll,
    EmogistN,
    EmogistE,
}

impl ModeKind {
    pub const ALL: [ModeKind; 6] = [
        ModeKind::ZeroShot,
        ModeKind::GlobalExp,
        ModeKind::IclSim,
        ModeKind::IclAll,
        ModeKind::EmogistN,
        ModeKind::EmogistE,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::ZeroShot => "zero_shot",
            ModeKind::GlobalExp => "global_exp",
            ModeKind::IclSim => "icl_sim",
            ModeKind::IclAll => "icl_all",
            ModeKind::EmogistN => "emogist_n",
            ModeKind::EmogistE => "emogist_e",
        }
    }

    pub fn uses_clusters(self) -> bool {
        matches!(self, ModeKind::EmogistN | ModeKind::EmogistE)
    }

    pub fn uses_store(self) -> bool {
        matches!(self, ModeKind::IclSim | ModeKind::IclAll) || self.uses_clusters()
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMode {
    pub kind: ModeKind,
    pub ensemble_votes: usize,
}

impl RunMode {
    pub fn new(kind: ModeKind) -> Self {
        let ensemble_votes = if kind == ModeKind::EmogistE {
            DEFAULT_ENSEMBLE_VOTES
        } else {
            1
        };
        Self {
            kind,
            ensemble_votes,
        }
    }

    pub fn with_votes(mut self, votes: usize) -> Self {
        self.ensemble_votes = votes;
        self
    }
}

/// The classification task of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Each test image is judged Yes/No against every label independently.
    BinarySet { labels: Vec<String> },
    /// Each test image gets exactly one label from the list.
    Multiclass { labels: Vec<String> },
}

impl Task {
    pub fn labels(&self) -> &[String] {
        match self {
            Task::BinarySet { labels } | Task::Multiclass { labels } => labels,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::BinarySet { .. } => "binary-set",
            Task::Multiclass { .. } => "multiclass",
        }
    }
}

/// What a single prediction was asked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictionTask {
    Binary { label: String },
    Multiclass { labels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    /// `clusterId#version`, `global#label`, or the example ids for ICL modes.
    pub context_ref: Option<String>,
    pub raw_text: String,
    /// `Yes`/`No` or a label; `None` is an abstention.
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub test_id: String,
    pub task: PredictionTask,
    pub mode: ModeKind,
    /// Cluster whose descriptions were used (EmoGist modes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<String>,
    pub votes: Vec<Vote>,
    #[serde(rename = "final")]
    pub final_answer: Option<String>,
    pub abstained: bool,
}

impl Prediction {
    /// Whether a binary prediction came out Yes.
    pub fn is_yes(&self) -> bool {
        self.final_answer.as_deref() == Some(YES)
    }
}

pub const YES: &str = "Yes";
pub const NO: &str = "No";

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
}

/// `Some(true)` for yes, `Some(false)` for no, `None` to abstain.
pub fn parse_binary(text: &str) -> Option<bool> {
    let first = tokens(text)
        .map(str::to_lowercase)
        .find(|t| t != "answer")?;
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn normalize_words(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '_' {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Matches a free-text answer against the label list: exact match after
/// normalization first, then a label that appears as a whole phrase in the
/// answer, provided exactly one does.
pub fn parse_class(text: &str, labels: &[impl AsRef<str>]) -> Option<String> {
    let norm = normalize_words(text);
    if let Some(l) = labels.iter().find(|l| normalize_words(l.as_ref()) == norm) {
        return Some(l.as_ref().to_string());
    }
    let padded = format!(" {norm} ");
    let found: Vec<&str> = labels
        .iter()
        .map(AsRef::as_ref)
        .filter(|l| {
            let nl = normalize_words(l);
            !nl.is_empty() && padded.contains(&format!(" {nl} "))
        })
        .collect();
    match found.as_slice() {
        [one] => Some(one.to_string()),
        _ => None,
    }
}

/// Most frequent non-abstaining answer. Among tied answers the one cast
/// first (lowest version) wins. `Ok(None)` when every vote abstains.
pub fn majority_vote<T: PartialEq + Clone>(
    votes: &[Option<T>],
) -> Result<Option<T>, ClassifyError> {
    if votes.is_empty() {
        return Err(ClassifyError::EmptyVotes);
    }
    let mut best: Option<(usize, &T)> = None;
    for (i, v) in votes.iter().enumerate() {
        let Some(v) = v else { continue };
        if votes[..i].iter().any(|p| p.as_ref() == Some(v)) {
            continue;
        }
        let count = votes.iter().filter(|p| p.as_ref() == Some(v)).count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, v));
        }
    }
    Ok(best.map(|(_, v)| v.clone()))
}

/// A test image as the classifier sees it.
#[derive(Debug, Clone, Copy)]
pub struct TestItem<'a> {
    pub id: &'a str,
    pub uri: &'a str,
    pub vector: Option<&'a [f32]>,
}

impl<'a> From<&'a EmbeddingRecord> for TestItem<'a> {
    fn from(r: &'a EmbeddingRecord) -> Self {
        Self {
            id: &r.id,
            uri: &r.uri,
            vector: Some(&r.vector),
        }
    }
}

/// Frozen inputs a mode may draw on.
#[derive(Debug, Clone, Copy, Default)]
pub struct Context<'a> {
    pub store: Option<&'a EmbeddingStore>,
    pub clusters: Option<&'a ClusterSet>,
    pub descriptions: Option<&'a DescriptionStore>,
    /// Run seed; drives exemplar choice and is forwarded to the backend.
    pub seed: u64,
}

pub struct Classifier<'a> {
    mode: RunMode,
    backend: &'a dyn Generator,
    ctx: Context<'a>,
    pub max_tokens: u32,
    pub temperature: f64,
}

struct Query {
    images: Vec<ImagePayload>,
    prompt: String,
    context_ref: Option<String>,
}

impl<'a> Classifier<'a> {
    pub fn new(mode: RunMode, backend: &'a dyn Generator, ctx: Context<'a>) -> Self {
        Self {
            mode,
            backend,
            ctx,
            max_tokens: CLASSIFY_MAX_TOKENS,
            temperature: 0.0,
        }
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    fn missing(&self, what: &str) -> ClassifyError {
        ClassifyError::MissingContext {
            mode: self.mode.kind,
            what: what.to_string(),
        }
    }

    /// Fails fast if the mode cannot run `task` with the given context, so
    /// no backend call is spent on a run that cannot finish.
    pub fn check(&self, task: &Task) -> Result<(), ClassifyError> {
        if self.mode.ensemble_votes == 0 {
            return Err(ClassifyError::ZeroVotes);
        }
        let labels = task.labels();
        if let Task::Multiclass { labels } = task {
            if labels.len() < 2 {
                return Err(ClassifyError::TooFewLabels(labels.len()));
            }
        }
        let kind = self.mode.kind;
        if kind == ModeKind::IclAll && matches!(task, Task::BinarySet { .. }) {
            return Err(ClassifyError::UnsupportedTask {
                mode: kind,
                task: "binary-set",
            });
        }
        if kind.uses_store() && self.ctx.store.is_none() {
            return Err(self.missing("an embedding store"));
        }
        match kind {
            ModeKind::GlobalExp => {
                let d = self
                    .ctx
                    .descriptions
                    .ok_or_else(|| self.missing("global descriptions"))?;
                if let Some(l) = labels.iter().find(|l| d.global_text(l).is_none()) {
                    return Err(self.missing(&format!("a global description for `{l}`")));
                }
            }
            ModeKind::EmogistN | ModeKind::EmogistE => {
                let clusters = self.ctx.clusters.ok_or_else(|| self.missing("clusters"))?;
                let d = self
                    .ctx
                    .descriptions
                    .ok_or_else(|| self.missing("descriptions"))?;
                for l in labels {
                    if !clusters.k_per_label.contains_key(l) {
                        return Err(self.missing(&format!("clusters for `{l}`")));
                    }
                }
                if let Some(c) = clusters
                    .clusters
                    .iter()
                    .find(|c| d.get(&c.cluster_id, 0).is_none())
                {
                    return Err(
                        self.missing(&format!("a description of cluster `{}`", c.cluster_id))
                    );
                }
            }
            ModeKind::IclAll => {
                for l in labels {
                    self.exemplar(l)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn store(&self) -> Result<&'a EmbeddingStore, ClassifyError> {
        self.ctx
            .store
            .ok_or_else(|| self.missing("an embedding store"))
    }

    fn vector(&self, item: &TestItem<'_>) -> Result<Vec<f32>, ClassifyError> {
        if let Some(v) = item.vector {
            return Ok(v.to_vec());
        }
        self.store()?
            .get(item.id)
            .map(|r| r.vector.clone())
            .ok_or_else(|| ClassifyError::NoEmbedding(item.id.to_string()))
    }

    fn test_image(item: &TestItem<'_>) -> ImagePayload {
        ImagePayload::uri(item.uri)
    }

    /// Description versions of the nearest cluster in `scope`, capped at
    /// the ensemble size.
    fn cluster_context(
        &self,
        item: &TestItem<'_>,
        scope: Scope<'_>,
    ) -> Result<(String, Vec<(String, String)>), ClassifyError> {
        let clusters = self.ctx.clusters.ok_or_else(|| self.missing("clusters"))?;
        let descriptions = self
            .ctx
            .descriptions
            .ok_or_else(|| self.missing("descriptions"))?;
        let query: Vec<f64> = self.vector(item)?.iter().map(|&x| f64::from(x)).collect();
        let cluster = clusters.nearest_centroid(&query, scope)?;
        let wanted = match self.mode.kind {
            ModeKind::EmogistN => 1,
            _ => self.mode.ensemble_votes,
        };
        let versions: Vec<(String, String)> = descriptions
            .versions(&cluster.cluster_id)
            .into_iter()
            .take(wanted)
            .map(|d| (d.reference(), d.text.clone()))
            .collect();
        if versions.is_empty() {
            return Err(self.missing(&format!(
                "a description of cluster `{}`",
                cluster.cluster_id
            )));
        }
        Ok((cluster.cluster_id.clone(), versions))
    }

    fn similar_examples(
        &self,
        item: &TestItem<'_>,
    ) -> Result<Vec<&'a EmbeddingRecord>, ClassifyError> {
        let store = self.store()?;
        let filter = Filter::split(Split::Train).excluding(item.id);
        let hits = store.search_knn(&self.vector(item)?, ICL_EXAMPLES, Some(&filter))?;
        Ok(hits
            .iter()
            .map(|h| store.get(&h.id).expect("hit ids come from the store"))
            .collect())
    }

    /// The train exemplar shown for `label` in `icl_all`, fixed per (seed, label).
    fn exemplar(&self, label: &str) -> Result<&'a EmbeddingRecord, ClassifyError> {
        let store = self.store()?;
        let mut pool: Vec<&EmbeddingRecord> = store
            .records()
            .iter()
            .filter(|r| r.split == Split::Train && r.has_label(label))
            .collect();
        if pool.is_empty() {
            return Err(self.missing(&format!("a train example labeled `{label}`")));
        }
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = SeededRng::new(label_seed(self.ctx.seed, label));
        Ok(pool[rng.below(pool.len())])
    }

    fn ask(
        &self,
        q: &Query,
        item: &TestItem<'_>,
        tags: &[(&str, String)],
    ) -> Result<String, ClassifyError> {
        let mut req = GenerationRequest::new(q.prompt.clone())
            .with_images(q.images.clone())
            .with_decoding(self.max_tokens, self.temperature)
            .with_seed(Some(self.ctx.seed))
            .tag("mode", self.mode.kind.as_str())
            .tag("test_id", item.id);
        for (k, v) in tags {
            req = req.tag(k, v.clone());
        }
        self.backend
            .generate(&req)
            .map_err(|source| ClassifyError::Backend {
                test_id: item.id.to_string(),
                source,
            })
    }

    fn binary_queries(
        &self,
        item: &TestItem<'_>,
        label: &str,
    ) -> Result<(Option<String>, Vec<Query>), ClassifyError> {
        let plain = |prompt: String, context_ref: Option<String>| Query {
            images: vec![Self::test_image(item)],
            prompt,
            context_ref,
        };
        Ok(match self.mode.kind {
            ModeKind::ZeroShot => (None, vec![plain(prompts::binary_prompt(label, None), None)]),
            ModeKind::GlobalExp => {
                let text = self
                    .ctx
                    .descriptions
                    .and_then(|d| d.global_text(label))
                    .ok_or_else(|| self.missing(&format!("a global description for `{label}`")))?;
                let q = plain(
                    prompts::binary_prompt(label, Some(text)),
                    Some(format!("global#{label}")),
                );
                (None, vec![q])
            }
            ModeKind::IclSim => {
                let examples = self.similar_examples(item)?;
                let answers: Vec<bool> = examples.iter().map(|r| r.has_label(label)).collect();
                let mut images: Vec<ImagePayload> = examples
                    .iter()
                    .map(|r| ImagePayload::uri(r.uri.clone()))
                    .collect();
                images.push(Self::test_image(item));
                let q = Query {
                    images,
                    prompt: prompts::binary_icl_prompt(label, &answers),
                    context_ref: Some(join_ids(&examples)),
                };
                (None, vec![q])
            }
            ModeKind::IclAll => {
                return Err(ClassifyError::UnsupportedTask {
                    mode: ModeKind::IclAll,
                    task: "binary-set",
                })
            }
            ModeKind::EmogistN | ModeKind::EmogistE => {
                let (cid, versions) = self.cluster_context(item, Scope::Label(label))?;
                let qs = versions
                    .into_iter()
                    .map(|(r, text)| plain(prompts::binary_prompt(label, Some(&text)), Some(r)))
                    .collect();
                (Some(cid), qs)
            }
        })
    }

    fn multiclass_queries(
        &self,
        item: &TestItem<'_>,
        labels: &[String],
    ) -> Result<(Option<String>, Vec<Query>), ClassifyError> {
        let plain = |prompt: String, context_ref: Option<String>| Query {
            images: vec![Self::test_image(item)],
            prompt,
            context_ref,
        };
        Ok(match self.mode.kind {
            ModeKind::ZeroShot => (
                None,
                vec![plain(prompts::multiclass_prompt(labels, None), None)],
            ),
            ModeKind::GlobalExp => {
                let d = self
                    .ctx
                    .descriptions
                    .ok_or_else(|| self.missing("global descriptions"))?;
                let parts = labels
                    .iter()
                    .map(|l| {
                        d.global_text(l)
                            .map(|t| format!("{l}: {t}"))
                            .ok_or_else(|| self.missing(&format!("a global description for `{l}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let preamble = parts.join("\n\n");
                let q = plain(
                    prompts::multiclass_prompt(labels, Some(&preamble)),
                    Some("global".into()),
                );
                (None, vec![q])
            }
            ModeKind::IclSim | ModeKind::IclAll => {
                let examples = if self.mode.kind == ModeKind::IclSim {
                    self.similar_examples(item)?
                } else {
                    labels
                        .iter()
                        .map(|l| self.exemplar(l))
                        .collect::<Result<_, _>>()?
                };
                let example_labels: Vec<&str> = examples
                    .iter()
                    .map(|r| {
                        labels
                            .iter()
                            .find(|l| r.has_label(l))
                            .or_else(|| r.labels.iter().next())
                            .map(String::as_str)
                            .unwrap_or("")
                    })
                    .collect();
                let mut images: Vec<ImagePayload> = examples
                    .iter()
                    .map(|r| ImagePayload::uri(r.uri.clone()))
                    .collect();
                images.push(Self::test_image(item));
                let q = Query {
                    images,
                    prompt: prompts::multiclass_icl_prompt(labels, &example_labels),
                    context_ref: Some(join_ids(&examples)),
                };
                (None, vec![q])
            }
            ModeKind::EmogistN | ModeKind::EmogistE => {
                let (cid, versions) = self.cluster_context(item, Scope::Global)?;
                let qs = versions
                    .into_iter()
                    .map(|(r, text)| {
                        plain(prompts::multiclass_prompt(labels, Some(&text)), Some(r))
                    })
                    .collect();
                (Some(cid), qs)
            }
        })
    }

    pub fn classify_binary(
        &self,
        item: &TestItem<'_>,
        label: &str,
    ) -> Result<Prediction, ClassifyError> {
        let (cluster_id, queries) = self.binary_queries(item, label)?;
        let tags = [("task", "binary".to_string()), ("label", label.to_string())];
        let mut votes = Vec::with_capacity(queries.len());
        for q in &queries {
            let raw = self.ask(q, item, &tags)?;
            let answer = parse_binary(&raw).map(|y| if y { YES } else { NO }.to_string());
            votes.push(Vote {
                context_ref: q.context_ref.clone(),
                raw_text: raw,
                answer,
            });
        }
        let answers: Vec<Option<String>> = votes.iter().map(|v| v.answer.clone()).collect();
        let winner = majority_vote(&answers)?;
        Ok(Prediction {
            test_id: item.id.to_string(),
            task: PredictionTask::Binary {
                label: label.to_string(),
            },
            mode: self.mode.kind,
            cluster_id,
            votes,
            abstained: winner.is_none(),
            final_answer: Some(winner.unwrap_or_else(|| NO.to_string())),
        })
    }

    pub fn classify_multiclass(
        &self,
        item: &TestItem<'_>,
        labels: &[String],
    ) -> Result<Prediction, ClassifyError> {
        if labels.len() < 2 {
            return Err(ClassifyError::TooFewLabels(labels.len()));
        }
        let (cluster_id, queries) = self.multiclass_queries(item, labels)?;
        let tags = [
            ("task", "multiclass".to_string()),
            ("labels", labels.join("\n")),
        ];
        let mut votes = Vec::with_capacity(queries.len());
        for q in &queries {
            let raw = self.ask(q, item, &tags)?;
            let answer = parse_class(&raw, labels);
            votes.push(Vote {
                context_ref: q.context_ref.clone(),
                raw_text: raw,
                answer,
            });
        }
        let answers: Vec<Option<String>> = votes.iter().map(|v| v.answer.clone()).collect();
        let winner = majority_vote(&answers)?;
        Ok(Prediction {
            test_id: item.id.to_string(),
            task: PredictionTask::Multiclass {
                labels: labels.to_vec(),
            },
            mode: self.mode.kind,
            cluster_id,
            votes,
            abstained: winner.is_none(),
            final_answer: winner,
        })
    }

    /// Classifies every item for `task`, using up to `workers` concurrent
    /// requests. Output is ordered by item, then by label for binary tasks.
    pub fn classify_all(
        &self,
        items: &[TestItem<'_>],
        task: &Task,
        workers: usize,
    ) -> Result<Vec<Prediction>, ClassifyError> {
        self.check(task)?;
        match task {
            Task::BinarySet { labels } => {
                let jobs: Vec<(usize, &str)> = (0..items.len())
                    .flat_map(|i| labels.iter().map(move |l| (i, l.as_str())))
                    .collect();
                try_map(&jobs, workers, |&(i, l)| self.classify_binary(&items[i], l))
            }
            Task::Multiclass { labels } => try_map(items, workers, |item| {
                self.classify_multiclass(item, labels)
            }),
        }
    }
}

fn join_ids(records: &[&EmbeddingRecord]) -> String {
    records
        .iter()
        .map(|r| r.id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn label_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the run seed
    let h = label.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    seed ^ h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_parsing() {
        assert_eq!(parse_binary("Yes."), Some(true));
        assert_eq!(parse_binary("answer: NO"), Some(false));
        assert_eq!(parse_binary("  Answer: yes, it does"), Some(true));
        assert_eq!(parse_binary("It depends"), None);
        assert_eq!(parse_binary(""), None);
        assert_eq!(parse_binary("Nope"), None);
    }

    #[test]
    fn class_parsing() {
        let fi = [
            "amusement",
            "anger",
            "awe",
            "contentment",
            "disgust",
            "excitement",
            "fear",
            "sadness",
        ];
        assert_eq!(
            parse_class("contentment", &fi).as_deref(),
            Some("contentment")
        );
        assert_eq!(parse_class("  Awe. ", &fi).as_deref(), Some("awe"));
        assert_eq!(
            parse_class("The label is: awe", &fi).as_deref(),
            Some("awe")
        );
        assert_eq!(parse_class("happy", &fi), None);
        assert_eq!(parse_class("awe or fear", &fi), None);
        assert_eq!(parse_class("``fear\"", &fi).as_deref(), Some("fear"));
    }

    #[test]
    fn votes() {
        let y = Some(true);
        let n = Some(false);
        assert_eq!(majority_vote(&[y, y, n]).unwrap(), y);
        assert_eq!(majority_vote(&[y, n, y]).unwrap(), y);
        assert_eq!(majority_vote(&[n, None, y]).unwrap(), n);
        assert_eq!(majority_vote::<bool>(&[None, None, None]).unwrap(), None);
        assert!(majority_vote::<bool>(&[]).is_err());
        let awe = Some("awe");
        let fear = Some("fear");
        assert_eq!(majority_vote(&[awe, fear, awe]).unwrap(), awe);
        assert_eq!(majority_vote(&[awe, fear, None]).unwrap(), awe);
        assert_eq!(majority_vote(&[None, fear, awe]).unwrap(), fear);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ModeKind::ALL {
            assert_eq!(m.as_str().parse::<ModeKind>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert_eq!(RunMode::new(ModeKind::EmogistE).ensemble_votes, 3);
        assert_eq!(RunMode::new(ModeKind::EmogistN).ensemble_votes, 1);
    }
}
