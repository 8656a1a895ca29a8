//! Retrieval-augmented image emotion classification.
//!
//! Labeled example images are embedded and clustered per label; a strong
//! vision-language model writes one description per cluster (several
//! versions, each from a disjoint window of centroid-ranked members); at test
//! time the nearest cluster's description is prepended to the
//! classification prompt sent to a fast model, optionally voting across
//! description versions.
//!
//! Modules, bottom-up:
//! - [`store`]: normalized embedding pool with an HNSW index and exact scan.
//! - [`clustering`]: seeded k-means++ / Lloyd per label and nearest-centroid lookup.
//! - [`prompts`]: frozen prompt templates.
//! - [`backends`]: model clients (OpenAI-compatible HTTP) and offline mocks.
//! - [`describe`]: versioned label descriptions with a content-addressed cache.
//! - [`classifier`]: the six run modes, answer parsing and majority voting.
//! - [`metrics`]: micro/macro precision, recall, F1 and cross-seed aggregation.
//! - [`tuner`]: win-count selection of the cluster count over seeds.
//! - [`pipeline`]: run configuration and the command implementations.

pub mod backends;
pub mod classifier;
pub mod clustering;
pub mod describe;
pub mod metrics;
pub mod pipeline;
mod pool;
pub mod prompts;
pub mod rng;
pub mod store;
pub mod tuner;
