//! Each run mode against a small clustered fixture and mock backends.

mod common;

use std::collections::BTreeMap;

use common::{blob_records, blob_store, strings, FI_LABELS};
use emogist::backends::MockGenerator;
use emogist::classifier::{Classifier, ClassifyError, Context, ModeKind, RunMode, Task, TestItem};
use emogist::clustering::ClusterSet;
use emogist::describe::{
    generate_all, generate_globals, DescriptionCache, DescriptionStore, GenerateOptions,
};
use emogist::store::{EmbeddingStore, Filter, Split};

struct Fixture {
    store: EmbeddingStore,
    clusters: ClusterSet,
    descriptions: DescriptionStore,
}

const SEED: u64 = 42;

fn fixture() -> Fixture {
    let store = blob_store(&blob_records(
        &FI_LABELS,
        &[(Split::Train, 30), (Split::Test, 3)],
        0.4,
        11,
    ));
    let k: BTreeMap<String, usize> = FI_LABELS.iter().map(|l| (l.to_string(), 2)).collect();
    let clusters = ClusterSet::build(&store, &k, SEED).unwrap();
    let mut descriptions = DescriptionStore::default();
    let opts = GenerateOptions {
        versions: 3,
        ..GenerateOptions::default()
    };
    let gen = MockGenerator::template("DESC[{cluster_id} v{version}]");
    let cache = DescriptionCache::in_memory();
    generate_all(&clusters, &store, &gen, &cache, &opts, &mut descriptions).unwrap();
    let globals = MockGenerator::template("GLOBAL[{label}]");
    generate_globals(&strings(&FI_LABELS), &globals, &cache, &mut descriptions).unwrap();
    Fixture {
        store,
        clusters,
        descriptions,
    }
}

impl Fixture {
    fn context(&self) -> Context<'_> {
        Context {
            store: Some(&self.store),
            clusters: Some(&self.clusters),
            descriptions: Some(&self.descriptions),
            seed: SEED,
        }
    }

    fn test_items(&self) -> Vec<TestItem<'_>> {
        self.store
            .records()
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(TestItem::from)
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, &y)| x * f64::from(y)).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b
        .iter()
        .map(|&y| f64::from(y) * f64::from(y))
        .sum::<f64>()
        .sqrt();
    dot / (na * nb)
}

#[test]
fn zero_shot_sends_no_context() {
    let fx = fixture();
    let gen = MockGenerator::constant("No");
    let c = Classifier::new(RunMode::new(ModeKind::ZeroShot), &gen, fx.context());
    let items = fx.test_items();
    let preds = c
        .classify_all(
            &items[..4],
            &Task::BinarySet {
                labels: strings(&FI_LABELS),
            },
            2,
        )
        .unwrap();
    assert_eq!(preds.len(), 32);
    for r in gen.requests() {
        assert_eq!(r.images.len(), 1);
        assert!(
            !r.prompt.contains("DESC[") && !r.prompt.contains("GLOBAL["),
            "{}",
            r.prompt
        );
    }
    assert!(preds
        .iter()
        .all(|p| p.votes[0].context_ref.is_none() && p.cluster_id.is_none()));
}

#[test]
fn zero_shot_needs_no_store() {
    let gen = MockGenerator::constant("awe");
    let c = Classifier::new(RunMode::new(ModeKind::ZeroShot), &gen, Context::default());
    let item = TestItem {
        id: "x",
        uri: "https://example.org/x.jpg",
        vector: None,
    };
    let p = c.classify_multiclass(&item, &strings(&FI_LABELS)).unwrap();
    assert_eq!(p.final_answer.as_deref(), Some("awe"));
}

#[test]
fn icl_sim_uses_nearest_train_examples() {
    let fx = fixture();
    let gen = MockGenerator::constant("No");
    let c = Classifier::new(RunMode::new(ModeKind::IclSim), &gen, fx.context());
    // a train image as the query must not see itself
    let query = fx.store.get("fear-train-03").unwrap();
    let p = c.classify_binary(&TestItem::from(query), "fear").unwrap();

    let filter = Filter::split(Split::Train).excluding(&query.id);
    let expected: Vec<String> = fx
        .store
        .exact_search(&query.vector, 4, Some(&filter))
        .unwrap()
        .into_iter()
        .map(|h| h.id)
        .collect();
    assert_eq!(
        p.votes[0].context_ref.as_deref(),
        Some(expected.join(",").as_str())
    );
    assert!(!expected.contains(&query.id));

    let r = &gen.requests()[0];
    assert_eq!(r.images.len(), 5);
    assert_eq!(r.images[4].describe(), query.uri);
    for (img, id) in r.images.iter().zip(&expected) {
        assert_eq!(img.describe(), format!("mem://{id}"));
        assert_eq!(fx.store.get(id).unwrap().split, Split::Train);
    }
}

#[test]
fn icl_all_shows_one_exemplar_per_label() {
    let fx = fixture();
    let labels = strings(&FI_LABELS);
    let run = |seed: u64| {
        let gen = MockGenerator::constant("awe");
        let ctx = Context {
            seed,
            ..fx.context()
        };
        let c = Classifier::new(RunMode::new(ModeKind::IclAll), &gen, ctx);
        let item = fx.test_items()[0];
        c.classify_multiclass(&item, &labels).unwrap();
        gen.requests()[0].clone()
    };
    let r = run(SEED);
    assert_eq!(r.images.len(), 9);
    for (img, label) in r.images.iter().zip(&labels) {
        let id = img.describe().trim_start_matches("mem://").to_string();
        let rec = fx.store.get(&id).unwrap();
        assert!(rec.has_label(label) && rec.split == Split::Train);
    }
    assert_eq!(run(SEED).images, r.images);
    let other = run(SEED + 1);
    assert_ne!(other.images, r.images);

    // binary tasks are not defined for this mode
    let gen = MockGenerator::constant("No");
    let c = Classifier::new(RunMode::new(ModeKind::IclAll), &gen, fx.context());
    let err = c.check(&Task::BinarySet { labels }).unwrap_err();
    assert!(matches!(err, ClassifyError::UnsupportedTask { .. }));
}

#[test]
fn emogist_picks_the_most_similar_cluster_of_the_label() {
    let fx = fixture();
    let gen = MockGenerator::constant("No");
    let c = Classifier::new(RunMode::new(ModeKind::EmogistN), &gen, fx.context());
    for item in fx.test_items() {
        let v = item.vector.unwrap();
        for label in FI_LABELS {
            let p = c.classify_binary(&item, label).unwrap();
            let best = fx
                .clusters
                .clusters
                .iter()
                .filter(|cl| cl.label == label)
                .max_by(|a, b| cosine(&a.centroid, v).total_cmp(&cosine(&b.centroid, v)))
                .unwrap();
            assert_eq!(p.cluster_id.as_deref(), Some(best.cluster_id.as_str()));
            let want = format!("DESC[{} v0]", best.cluster_id);
            assert!(gen.requests().last().unwrap().prompt.contains(&want));
        }
    }
}

#[test]
fn emogist_multiclass_searches_all_labels() {
    let fx = fixture();
    let gen = MockGenerator::constant("fear");
    let c = Classifier::new(RunMode::new(ModeKind::EmogistN), &gen, fx.context());
    for item in fx.test_items() {
        let v = item.vector.unwrap();
        let p = c.classify_multiclass(&item, &strings(&FI_LABELS)).unwrap();
        let best = fx
            .clusters
            .clusters
            .iter()
            .max_by(|a, b| cosine(&a.centroid, v).total_cmp(&cosine(&b.centroid, v)))
            .unwrap();
        assert_eq!(p.cluster_id.as_deref(), Some(best.cluster_id.as_str()));
        // well-separated blobs: the nearest cluster belongs to the true label
        assert_eq!(
            best.label,
            fx.store
                .get(item.id)
                .unwrap()
                .labels
                .iter()
                .next()
                .unwrap()
                .as_str()
        );
    }
}

#[test]
fn ensemble_takes_the_majority() {
    let fx = fixture();
    let gen = MockGenerator::scripted(["Yes", "No", "Yes."]);
    let c = Classifier::new(RunMode::new(ModeKind::EmogistE), &gen, fx.context());
    let item = fx.test_items()[0];
    let p = c.classify_binary(&item, "awe").unwrap();
    assert_eq!(p.votes.len(), 3);
    assert_eq!(p.final_answer.as_deref(), Some("Yes"));
    assert!(!p.abstained);
    let cid = p.cluster_id.clone().unwrap();
    let refs: Vec<String> = p
        .votes
        .iter()
        .map(|v| v.context_ref.clone().unwrap())
        .collect();
    assert_eq!(
        refs,
        vec![format!("{cid}#0"), format!("{cid}#1"), format!("{cid}#2")]
    );
}

#[test]
fn single_vote_ensemble_matches_emogist_n() {
    let fx = fixture();
    let labels = strings(&FI_LABELS);
    let run = |mode: RunMode| {
        let gen = MockGenerator::keyword("DESC[awe:", "Yes", "No");
        let c = Classifier::new(mode, &gen, fx.context());
        let preds = c
            .classify_all(
                &fx.test_items(),
                &Task::BinarySet {
                    labels: labels.clone(),
                },
                4,
            )
            .unwrap();
        let prompts: Vec<String> = gen.requests().into_iter().map(|r| r.prompt).collect();
        (preds, prompts)
    };
    let (n, n_prompts) = run(RunMode::new(ModeKind::EmogistN));
    let (e, e_prompts) = run(RunMode::new(ModeKind::EmogistE).with_votes(1));
    assert_eq!(n.len(), e.len());
    for (a, b) in n.iter().zip(&e) {
        assert_eq!(
            (&a.test_id, &a.cluster_id, &a.votes, &a.final_answer),
            (&b.test_id, &b.cluster_id, &b.votes, &b.final_answer)
        );
    }
    let mut n_prompts = n_prompts;
    let mut e_prompts = e_prompts;
    n_prompts.sort();
    e_prompts.sort();
    assert_eq!(n_prompts, e_prompts);
}

#[test]
fn unparseable_answers_abstain_as_no() {
    let fx = fixture();
    let gen = MockGenerator::constant("I cannot tell.");
    let c = Classifier::new(RunMode::new(ModeKind::EmogistE), &gen, fx.context());
    let p = c.classify_binary(&fx.test_items()[0], "awe").unwrap();
    assert!(p.abstained);
    assert_eq!(p.final_answer.as_deref(), Some("No"));
    assert!(p.votes.iter().all(|v| v.answer.is_none()));

    let p = c
        .classify_multiclass(&fx.test_items()[0], &strings(&FI_LABELS))
        .unwrap();
    assert!(p.abstained);
    assert_eq!(p.final_answer, None);
}

#[test]
fn missing_context_fails_before_any_call() {
    let fx = fixture();
    let task = Task::Multiclass {
        labels: strings(&FI_LABELS),
    };
    let gen = MockGenerator::constant("awe");
    let cases = [
        (
            ModeKind::EmogistN,
            Context {
                descriptions: None,
                ..fx.context()
            },
        ),
        (
            ModeKind::EmogistE,
            Context {
                clusters: None,
                ..fx.context()
            },
        ),
        (
            ModeKind::GlobalExp,
            Context {
                descriptions: None,
                ..fx.context()
            },
        ),
        (
            ModeKind::IclSim,
            Context {
                store: None,
                ..fx.context()
            },
        ),
        (
            ModeKind::IclAll,
            Context {
                store: None,
                ..fx.context()
            },
        ),
    ];
    for (kind, ctx) in cases {
        let c = Classifier::new(RunMode::new(kind), &gen, ctx);
        let err = c.classify_all(&fx.test_items(), &task, 2).unwrap_err();
        assert!(
            matches!(err, ClassifyError::MissingContext { .. }),
            "{kind}: {err}"
        );
    }
    let empty = DescriptionStore::default();
    let c = Classifier::new(
        RunMode::new(ModeKind::GlobalExp),
        &gen,
        Context {
            descriptions: Some(&empty),
            ..fx.context()
        },
    );
    assert!(matches!(
        c.check(&task),
        Err(ClassifyError::MissingContext { .. })
    ));
    assert_eq!(gen.call_count(), 0);
}

#[test]
fn global_exp_uses_the_label_description() {
    let fx = fixture();
    let gen = MockGenerator::keyword("GLOBAL[sadness]", "Yes", "No");
    let c = Classifier::new(RunMode::new(ModeKind::GlobalExp), &gen, fx.context());
    let item = fx.test_items()[0];
    assert!(c.classify_binary(&item, "sadness").unwrap().is_yes());
    let p = c.classify_binary(&item, "awe").unwrap();
    assert!(!p.is_yes());
    assert_eq!(p.votes[0].context_ref.as_deref(), Some("global#awe"));

    let gen = MockGenerator::constant("anger");
    let c = Classifier::new(RunMode::new(ModeKind::GlobalExp), &gen, fx.context());
    c.classify_multiclass(&item, &strings(&FI_LABELS)).unwrap();
    let prompt = &gen.requests()[0].prompt;
    for l in FI_LABELS {
        assert!(prompt.contains(&format!("{l}: GLOBAL[{l}]")));
    }
}
