//! Choosing the number of clusters per label on validation data.
//!
//! Each candidate k is scored with every seed. Within a seed, the k with the
//! strictly highest F1 earns a win; a tie at the top earns nothing. The k
//! with the most wins is chosen. If the lead is shared, the next extension
//! seed is evaluated and the wins recounted, one seed at a time. If the
//! extension seeds run out with the lead still shared, the smallest of the
//! leading k values is chosen.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TuneError<E: std::error::Error + 'static> {
    #[error("no candidate k values")]
    NoCandidates,
    #[error("no initial seeds")]
    NoSeeds,
    #[error("evaluating k={k} with seed {seed}: {source}")]
    Eval {
        k: usize,
        seed: u64,
        #[source]
        source: E,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub k: usize,
    pub seed: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub candidates: Vec<usize>,
    pub seeds_used: Vec<u64>,
    /// Validation F1 for every (k, seed) evaluated, seed-major.
    pub f1_table: Vec<TableEntry>,
    /// Wins per k over `seeds_used`.
    pub wins: BTreeMap<usize, usize>,
    pub winner: usize,
    /// Extension seeds that had to be added.
    pub rounds: usize,
    /// Whether the winner came from the smallest-k fallback.
    pub fallback: bool,
}

impl TuneResult {
    pub fn f1(&self, k: usize, seed: u64) -> Option<f64> {
        self.f1_table
            .iter()
            .find(|e| e.k == k && e.seed == seed)
            .map(|e| e.f1)
    }

    /// Win table with one row per seed and a totals line.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}", "seed");
        for k in &self.candidates {
            out.push_str(&format!(" {:>10}", format!("k={k}")));
        }
        out.push_str(&format!(" {:>8}\n", "win"));
        for &seed in &self.seeds_used {
            out.push_str(&format!("{seed:<8}"));
            for &k in &self.candidates {
                let f = self.f1(k, seed).unwrap_or(f64::NAN);
                out.push_str(&format!(" {f:>10.3}"));
            }
            let w = seed_winner(&self.candidates, |k| self.f1(k, seed).unwrap_or(f64::NAN));
            let w = w.map_or("-".to_string(), |k| k.to_string());
            out.push_str(&format!(" {w:>8}\n"));
        }
        out.push_str(&format!("{:<8}", "wins"));
        for k in &self.candidates {
            out.push_str(&format!(" {:>10}", self.wins.get(k).copied().unwrap_or(0)));
        }
        out.push_str(&format!(" {:>8}\n", format!("k={}", self.winner)));
        out
    }
}

/// The k with the strictly highest F1 for one seed, if unique.
fn seed_winner(candidates: &[usize], f1: impl Fn(usize) -> f64) -> Option<usize> {
    let scores: Vec<(usize, f64)> = candidates.iter().map(|&k| (k, f1(k))).collect();
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut top = scores.iter().filter(|s| s.1 == best);
    match (top.next(), top.next()) {
        (Some(&(k, _)), None) => Some(k),
        _ => None,
    }
}

/// Leading k values by win count, ascending.
fn leaders(wins: &BTreeMap<usize, usize>) -> Vec<usize> {
    let most = wins.values().copied().max().unwrap_or(0);
    wins.iter()
        .filter(|(_, &w)| w == most)
        .map(|(&k, _)| k)
        .collect()
}

pub fn tune_k<E: std::error::Error + 'static>(
    candidates: &[usize],
    initial_seeds: &[u64],
    extension_seeds: &[u64],
    mut eval: impl FnMut(usize, u64) -> Result<f64, E>,
) -> Result<TuneResult, TuneError<E>> {
    if candidates.is_empty() {
        return Err(TuneError::NoCandidates);
    }
    if initial_seeds.is_empty() {
        return Err(TuneError::NoSeeds);
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();

    let mut memo: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    let mut f1_table = Vec::new();
    let mut seeds_used = Vec::new();
    let mut wins: BTreeMap<usize, usize> = cands.iter().map(|&k| (k, 0)).collect();

    let mut add_seed = |seed: u64, seeds_used: &mut Vec<u64>, wins: &mut BTreeMap<usize, usize>| {
        if seeds_used.contains(&seed) {
            return Ok(());
        }
        for &k in &cands {
            if let Entry::Vacant(slot) = memo.entry((k, seed)) {
                let f1 = eval(k, seed).map_err(|source| TuneError::Eval { k, seed, source })?;
                slot.insert(f1);
                f1_table.push(TableEntry { k, seed, f1 });
            }
        }
        seeds_used.push(seed);
        if let Some(w) = seed_winner(&cands, |k| memo[&(k, seed)]) {
            *wins.get_mut(&w).expect("winner is a candidate") += 1;
        }
        Ok(())
    };

    for &seed in initial_seeds {
        add_seed(seed, &mut seeds_used, &mut wins)?;
    }
    let mut rounds = 0;
    let mut extra = extension_seeds.iter();
    while leaders(&wins).len() > 1 {
        let Some(&seed) = extra.next() else { break };
        add_seed(seed, &mut seeds_used, &mut wins)?;
        rounds += 1;
    }
    let lead = leaders(&wins);
    let fallback = lead.len() > 1;
    Ok(TuneResult {
        candidates: cands,
        seeds_used,
        f1_table,
        wins,
        winner: lead[0],
        rounds,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn table(rows: &[(u64, [f64; 3])]) -> impl FnMut(usize, u64) -> Result<f64, Infallible> + '_ {
        move |k, seed| {
            let row = rows.iter().find(|r| r.0 == seed).expect("seed in table");
            Ok(row.1[k / 2 - 1])
        }
    }

    #[test]
    fn clear_winner_uses_initial_seeds() {
        let rows = [
            (21, [40.0, 50.0, 45.0]),
            (42, [41.0, 52.0, 44.0]),
            (63, [39.0, 48.0, 47.0]),
        ];
        let r = tune_k(&[2, 4, 6], &[21, 42, 63], &[84, 105, 126], table(&rows)).unwrap();
        assert_eq!((r.winner, r.rounds, r.fallback), (4, 0, false));
        assert_eq!(r.f1_table.len(), 9);
    }

    #[test]
    fn one_extension_round() {
        let rows = [
            (21, [50.0, 40.0, 40.0]),
            (42, [40.0, 50.0, 40.0]),
            (63, [40.0, 40.0, 50.0]),
            (84, [40.0, 50.0, 40.0]),
        ];
        let r = tune_k(&[2, 4, 6], &[21, 42, 63], &[84, 105, 126], table(&rows)).unwrap();
        assert_eq!((r.winner, r.rounds), (4, 1));
        assert_eq!(r.seeds_used, [21, 42, 63, 84]);
    }

    #[test]
    fn exhausted_ties_fall_back_to_smallest() {
        let rows: Vec<(u64, [f64; 3])> = [21, 42, 63, 84, 105, 126]
            .iter()
            .map(|&s| (s, [30.0; 3]))
            .collect();
        let r = tune_k(&[6, 2, 4], &[21, 42, 63], &[84, 105, 126], table(&rows)).unwrap();
        assert_eq!((r.winner, r.rounds, r.fallback), (2, 3, true));
        assert!(r.wins.values().all(|&w| w == 0));
    }

    #[test]
    fn input_errors() {
        let f = |_, _| Ok::<f64, Infallible>(0.0);
        assert!(matches!(
            tune_k(&[], &[1], &[], f),
            Err(TuneError::NoCandidates)
        ));
        assert!(matches!(tune_k(&[2], &[], &[], f), Err(TuneError::NoSeeds)));
    }
}
