//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use emogist::backends::{BackendKind, BackendProfile, MockSpec};
use emogist::classifier::{ModeKind, Task};
use emogist::pipeline::RunConfig;
use emogist::rng::SeededRng;
use emogist::store::manifest::{write_manifest, ManifestEntry};
use emogist::store::{EmbeddingRecord, EmbeddingStore, Split, StoreBuilder};

pub const FI_LABELS: [&str; 8] = [
    "amusement",
    "anger",
    "awe",
    "contentment",
    "disgust",
    "excitement",
    "fear",
    "sadness",
];

pub fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Uniform in [-1, 1)^dim.
pub fn random_vector(rng: &mut SeededRng, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|_| (rng.next_f64() * 2.0 - 1.0) as f32)
        .collect()
}

pub fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f32> {
    let v = random_vector(rng, dim);
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// One record of a blob manifest.
pub struct BlobRecord {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub vector: Vec<f32>,
}

/// Each label sits on its own axis (label i at +e_i, dimension 2 * labels),
/// with small noise. Ids are `{label}-{split}-{nn}`.
pub fn blob_records(
    labels: &[&str],
    per_split: &[(Split, usize)],
    noise: f64,
    seed: u64,
) -> Vec<BlobRecord> {
    let dim = labels.len() * 2;
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for (li, label) in labels.iter().enumerate() {
        for &(split, n) in per_split {
            for j in 0..n {
                let mut v: Vec<f32> = (0..dim)
                    .map(|_| ((rng.next_f64() * 2.0 - 1.0) * noise) as f32)
                    .collect();
                v[li] += 1.0;
                out.push(BlobRecord {
                    id: format!("{label}-{split}-{j:02}"),
                    label: label.to_string(),
                    split,
                    vector: v,
                });
            }
        }
    }
    out
}

pub fn blob_store(records: &[BlobRecord]) -> EmbeddingStore {
    let mut b = StoreBuilder::new(records[0].vector.len());
    for r in records {
        b.insert(
            EmbeddingRecord::new(
                r.id.clone(),
                format!("mem://{}", r.id),
                [r.label.clone()],
                r.split,
                r.vector.clone(),
            )
            .unwrap(),
        )
        .unwrap();
    }
    b.freeze()
}

pub fn write_blob_manifest(path: &Path, records: &[BlobRecord]) {
    let entries: Vec<ManifestEntry> = records
        .iter()
        .map(|r| ManifestEntry {
            id: r.id.clone(),
            uri: format!("mem://{}", r.id),
            labels: vec![r.label.clone()],
            split: r.split,
            vector: Some(r.vector.clone()),
        })
        .collect();
    write_manifest(path, &entries).unwrap();
}

pub fn generator(spec: MockSpec) -> BackendProfile {
    BackendProfile::mock(BackendKind::Generator, spec)
}

/// Config for a mock run: descriptions carry `<<label>>`, and the classifier
/// answers correctly only when that marker is in the prompt.
pub fn oracle_config(dir: &Path, task: Task, mode: ModeKind, k: usize) -> RunConfig {
    let mut cfg = RunConfig::new(dir.join("store"), dir.join("out"), task);
    cfg.manifest = Some(dir.join("manifest.jsonl"));
    cfg.mode = mode;
    cfg.k = Some(k);
    cfg.generator = Some(generator(MockSpec::Template {
        template: "Images felt as <<{label}>> ({cluster_id} v{version}, {n_images} images).".into(),
    }));
    cfg.classifier = Some(generator(MockSpec::MarkerOracle {
        marker: "<<{label}>>".into(),
    }));
    cfg
}

/// Counts of each distinct value, for readable failure messages.
pub fn histogram<T: Ord + Clone>(xs: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut h = BTreeMap::new();
    for x in xs {
        *h.entry(x).or_insert(0) += 1;
    }
    h
}
