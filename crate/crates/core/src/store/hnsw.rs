//! Hierarchical navigable small world graph over unit vectors.
//!
//! Distance is negated dot product, so on normalized inputs the graph orders
//! neighbours exactly as cosine similarity does. Node levels are drawn from a
//! seeded generator; given the same vectors in the same order the graph is
//! identical across builds.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;

use super::dot;

/// Construction and query parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Maximum links per node on layers above 0 (layer 0 allows `2 * m`).
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Seed for level assignment.
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 256,
            seed: 0x5eed_cafe,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Scored {
    dist: f32,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.node.cmp(&other.node))
    }
}

/// Flat row-major vector storage the graph indexes into.
pub(crate) struct Rows<'a> {
    pub data: &'a [f32],
    pub dim: usize,
}

impl Rows<'_> {
    #[inline]
    fn row(&self, i: u32) -> &[f32] {
        let start = i as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    fn dist(&self, query: &[f32], i: u32) -> f32 {
        -dot(query, self.row(i))
    }

    fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Hnsw {
    params: HnswParams,
    /// links[node][layer] -> neighbour ids
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

impl Hnsw {
    pub fn build(rows: &Rows<'_>, params: HnswParams) -> Self {
        let mut graph = Self {
            params,
            links: Vec::with_capacity(rows.len()),
            entry: None,
            max_level: 0,
        };
        let mut rng = SeededRng::new(params.seed);
        let level_mult = 1.0 / (params.m.max(2) as f64).ln();
        for node in 0..rows.len() as u32 {
            let u = 1.0 - rng.next_f64();
            let level = (-u.ln() * level_mult).floor() as usize;
            graph.insert(rows, node, level);
        }
        graph
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, rows: &Rows<'_>, node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return;
        };
        let query = rows.row(node);
        let mut ep = Scored {
            dist: rows.dist(query, entry),
            node: entry,
        };
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.greedy(rows, query, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(
                rows,
                query,
                &eps,
                self.params.ef_construction,
                layer,
                &|_| true,
                rows.len(),
            );
            let chosen = self.select_neighbors(rows, &found, self.params.m);
            self.links[node as usize][layer] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                self.connect(rows, s.node, node, layer);
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(node);
        }
    }

    fn connect(&mut self, rows: &Rows<'_>, from: u32, to: u32, layer: usize) {
        let cap = self.max_links(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = rows.row(from);
        let mut candidates: Vec<Scored> = list
            .iter()
            .map(|&n| Scored {
                dist: rows.dist(base, n),
                node: n,
            })
            .collect();
        candidates.sort();
        let kept = self.select_neighbors(rows, &candidates, cap);
        self.links[from as usize][layer] = kept.iter().map(|s| s.node).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbour already kept. `candidates` is sorted ascending.
    fn select_neighbors(&self, rows: &Rows<'_>, candidates: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        for c in candidates {
            if kept.len() >= m {
                break;
            }
            let row = rows.row(c.node);
            if kept.iter().all(|k| rows.dist(row, k.node) > c.dist) {
                kept.push(*c);
            }
        }
        kept
    }

    fn greedy(&self, rows: &Rows<'_>, query: &[f32], mut best: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in self.neighbors(best.node, layer) {
                let cand = Scored {
                    dist: rows.dist(query, n),
                    node: n,
                };
                if cand < best {
                    best = cand;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        self.links[node as usize]
            .get(layer)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Beam search on one layer. Every reachable node is a traversal
    /// candidate, but only nodes accepted by `admit` enter the result set.
    #[allow(clippy::too_many_arguments)]
    fn search_layer(
        &self,
        rows: &Rows<'_>,
        query: &[f32],
        entry_points: &[Scored],
        ef: usize,
        layer: usize,
        admit: &dyn Fn(u32) -> bool,
        n_nodes: usize,
    ) -> Vec<Scored> {
        let mut visited = vec![false; n_nodes];
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut results: BinaryHeap<Scored> = BinaryHeap::new();
        for ep in entry_points {
            if visited[ep.node as usize] {
                continue;
            }
            visited[ep.node as usize] = true;
            candidates.push(Reverse(*ep));
            if admit(ep.node) {
                results.push(*ep);
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(cur)) = candidates.pop() {
            if results.len() >= ef {
                if let Some(worst) = results.peek() {
                    if cur > *worst {
                        break;
                    }
                }
            }
            for &n in self.neighbors(cur.node, layer) {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let cand = Scored {
                    dist: rows.dist(query, n),
                    node: n,
                };
                let full = results.len() >= ef;
                let worse = results.peek().is_some_and(|w| cand > *w);
                if full && worse {
                    continue;
                }
                candidates.push(Reverse(cand));
                if admit(n) {
                    results.push(cand);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out = results.into_vec();
        out.sort();
        out
    }

    /// Approximate top-`n` nodes by similarity among those accepted by `admit`,
    /// returned as `(node, similarity)` in descending similarity.
    pub fn search(
        &self,
        rows: &Rows<'_>,
        query: &[f32],
        n: usize,
        ef: usize,
        admit: &dyn Fn(u32) -> bool,
    ) -> Vec<(u32, f32)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut ep = Scored {
            dist: rows.dist(query, entry),
            node: entry,
        };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(rows, query, ep, layer);
        }
        let found = self.search_layer(rows, query, &[ep], ef.max(n), 0, admit, rows.len());
        found
            .into_iter()
            .take(n)
            .map(|s| (s.node, -s.dist))
            .collect()
    }
}
