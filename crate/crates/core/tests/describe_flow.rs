//! Description generation over real clusters with mock generators.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{blob_records, blob_store, strings, FI_LABELS};
use emogist::backends::{GenerationRequest, Generator, MockGenerator};
use emogist::clustering::ClusterSet;
use emogist::describe::{
    generate_all, generate_globals, DescribeError, DescriptionCache, DescriptionStore,
    GenerateOptions,
};
use emogist::store::{EmbeddingStore, Split};

fn fixture(train_per_label: usize) -> EmbeddingStore {
    blob_store(&blob_records(
        &FI_LABELS,
        &[(Split::Train, train_per_label)],
        0.3,
        7,
    ))
}

fn uniform_k(k: usize) -> BTreeMap<String, usize> {
    FI_LABELS.iter().map(|l| (l.to_string(), k)).collect()
}

fn echo() -> MockGenerator {
    MockGenerator::template("about {label} from {cluster_id} v{version}")
}

fn opts(versions: usize) -> GenerateOptions {
    GenerateOptions {
        versions,
        max_in_flight: 4,
        ..GenerateOptions::default()
    }
}

#[test]
fn one_description_per_cluster() {
    let store = fixture(16);
    let clusters = ClusterSet::build(&store, &uniform_k(4), 42).unwrap();
    let gen = echo();
    let mut out = DescriptionStore::default();
    let stats = generate_all(
        &clusters,
        &store,
        &gen,
        &DescriptionCache::in_memory(),
        &opts(1),
        &mut out,
    )
    .unwrap();
    assert_eq!(clusters.clusters.len(), 32);
    assert_eq!(out.len(), 32);
    assert_eq!(stats.generated, 32);
    assert_eq!(gen.call_count(), 32);
    for c in &clusters.clusters {
        let d = out.get(&c.cluster_id, 0).unwrap();
        assert_eq!(
            d.text,
            format!("about {} from {} v0", c.label, c.cluster_id)
        );
        assert_eq!(
            d.source_ids,
            c.member_ids[..4.min(c.member_ids.len())].to_vec()
        );
    }
}

#[test]
fn small_cluster_gets_fewer_versions() {
    let store = blob_store(&blob_records(&["awe"], &[(Split::Train, 7)], 0.3, 3));
    let k = BTreeMap::from([("awe".to_string(), 1)]);
    let clusters = ClusterSet::build(&store, &k, 1).unwrap();
    let gen = echo();
    let mut out = DescriptionStore::default();
    generate_all(
        &clusters,
        &store,
        &gen,
        &DescriptionCache::in_memory(),
        &opts(3),
        &mut out,
    )
    .unwrap();
    let versions = out.versions("awe:0");
    assert_eq!(versions.len(), 2);
    assert_eq!(versions[0].source_ids.len(), 4);
    assert_eq!(versions[1].source_ids.len(), 3);
}

#[test]
fn versions_use_disjoint_images() {
    let store = fixture(24);
    let clusters = ClusterSet::build(&store, &uniform_k(2), 42).unwrap();
    let mut out = DescriptionStore::default();
    generate_all(
        &clusters,
        &store,
        &echo(),
        &DescriptionCache::in_memory(),
        &opts(3),
        &mut out,
    )
    .unwrap();
    for c in &clusters.clusters {
        let mut seen = BTreeSet::new();
        for d in out.versions(&c.cluster_id) {
            for id in &d.source_ids {
                assert!(seen.insert(id.clone()), "{id} reused in {}", c.cluster_id);
                assert!(c.member_ids.contains(id));
            }
        }
    }
}

#[test]
fn rerun_costs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let store = fixture(12);
    let clusters = ClusterSet::build(&store, &uniform_k(2), 42).unwrap();
    let cache = DescriptionCache::on_disk(dir.path());
    let mut out = DescriptionStore::default();
    generate_all(&clusters, &store, &echo(), &cache, &opts(2), &mut out).unwrap();
    let first = out.to_json();

    // same store in memory: skipped outright
    let gen = echo();
    let stats = generate_all(&clusters, &store, &gen, &cache, &opts(2), &mut out).unwrap();
    assert_eq!(gen.call_count(), 0);
    assert_eq!(stats.generated, 0);
    assert_eq!(stats.hit_rate(), 1.0);

    // fresh store, fresh process: served from the disk cache
    let gen = echo();
    let mut fresh = DescriptionStore::default();
    let stats = generate_all(
        &clusters,
        &store,
        &gen,
        &DescriptionCache::on_disk(dir.path()),
        &opts(2),
        &mut fresh,
    )
    .unwrap();
    assert_eq!(gen.call_count(), 0);
    assert_eq!(stats.cached, out.len());
    assert_eq!(fresh.to_json(), first);
}

#[test]
fn changed_generator_regenerates() {
    let store = fixture(8);
    let clusters = ClusterSet::build(&store, &uniform_k(1), 42).unwrap();
    let cache = DescriptionCache::in_memory();
    let mut out = DescriptionStore::default();
    generate_all(&clusters, &store, &echo(), &cache, &opts(1), &mut out).unwrap();

    let other = MockGenerator::template("other take on {label}");
    let stats = generate_all(&clusters, &store, &other, &cache, &opts(1), &mut out).unwrap();
    assert_eq!(stats.generated, 8);
    assert_eq!(out.get("fear:0", 0).unwrap().text, "other take on fear");
    assert_eq!(out.get("fear:0", 0).unwrap().generator_tag, other.tag());
}

#[test]
fn partial_progress_survives_failure() {
    let store = fixture(8);
    let clusters = ClusterSet::build(&store, &uniform_k(1), 42).unwrap();
    let cache = DescriptionCache::in_memory();
    let mut out = DescriptionStore::default();
    // sequential so the failure point is deterministic
    let serial = GenerateOptions {
        max_in_flight: 1,
        ..opts(1)
    };
    let flaky = MockGenerator::scripted(["one", "two", "three"]);
    let err = generate_all(&clusters, &store, &flaky, &cache, &serial, &mut out).unwrap_err();
    assert!(matches!(err, DescribeError::Backend { .. }), "{err}");
    assert_eq!(out.len(), 3);

    // the retry, with the same generator, only pays for what is missing
    let gen = MockGenerator::scripted(["four", "five", "six", "seven", "eight"]);
    let stats = generate_all(&clusters, &store, &gen, &cache, &serial, &mut out).unwrap();
    assert_eq!(gen.call_count(), 5);
    assert_eq!(stats.generated, 5);
    assert_eq!(out.len(), 8);
}

#[test]
fn description_requests_carry_the_cluster_images() {
    let store = fixture(8);
    let clusters = ClusterSet::build(&store, &uniform_k(2), 42).unwrap();
    let gen = echo();
    let mut out = DescriptionStore::default();
    generate_all(
        &clusters,
        &store,
        &gen,
        &DescriptionCache::in_memory(),
        &opts(1),
        &mut out,
    )
    .unwrap();
    let requests: Vec<GenerationRequest> = gen.requests();
    for r in &requests {
        let cid = &r.tags["cluster_id"];
        let d = out.get(cid, 0).unwrap();
        let uris: Vec<String> = d
            .source_ids
            .iter()
            .map(|id| format!("mem://{id}"))
            .collect();
        let sent: Vec<String> = r.images.iter().map(|i| i.describe()).collect();
        assert_eq!(sent, uris);
        assert!(r.prompt.contains(&r.tags["label"]));
    }
}

#[test]
fn one_global_per_label() {
    let gen = MockGenerator::template("globally {label}");
    let cache = DescriptionCache::in_memory();
    let mut out = DescriptionStore::default();
    let labels = strings(&FI_LABELS);
    let stats = generate_globals(&labels, &gen, &cache, &mut out).unwrap();
    assert_eq!(stats.generated, 8);
    assert_eq!(out.global.len(), 8);
    for r in gen.requests() {
        assert!(r.images.is_empty());
    }
    assert_eq!(out.global_text("awe"), Some("globally awe"));
    generate_globals(&labels, &gen, &cache, &mut out).unwrap();
    assert_eq!(gen.call_count(), 8);
}
