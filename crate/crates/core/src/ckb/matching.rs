use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::CkbError;

/// One unit offered to the matcher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchUnit {
    pub unit_id: u64,
    pub treated: bool,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated: u64,
    pub control: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Key(f64, u64);

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy 1:1 nearest-neighbour matching without replacement.
///
/// Treated units are visited in ascending score order (ties by lowest
/// `unit_id`); each takes the closest unmatched control whose distance is at
/// most `caliper`, preferring the lowest `unit_id` among equally close ones.
/// Treated units with no control in reach are dropped.
pub fn match_pairs(units: &[MatchUnit], caliper: f64) -> Result<Vec<MatchedPair>, CkbError> {
    if !(caliper > 0.0) {
        return Err(CkbError::Config(format!("caliper {caliper} must be positive")));
    }
    // adding zero folds -0.0 into 0.0, which the total order would split
    let key = |u: &MatchUnit| Key(u.score + 0.0, u.unit_id);
    let mut treated: Vec<Key> = units.iter().filter(|u| u.treated).map(key).collect();
    treated.sort();
    let mut controls: BTreeSet<Key> = units.iter().filter(|u| !u.treated).map(key).collect();
    let mut pairs = Vec::new();
    for t in &treated {
        // Lowest id at the smallest score >= t, and lowest id at the largest
        // score < t.
        let above = controls.range(Key(t.0, 0)..).next().copied();
        let below = controls
            .range(..Key(t.0, 0))
            .next_back()
            .and_then(|k| controls.range(Key(k.0, 0)..).next().copied());
        let best = [below, above]
            .into_iter()
            .flatten()
            .map(|c| ((t.0 - c.0).abs(), c))
            .filter(|(d, _)| *d <= caliper)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1 .1.cmp(&b.1 .1)));
        if let Some((_, c)) = best {
            controls.remove(&c);
            pairs.push(MatchedPair {
                treated: t.1,
                control: c.1,
            });
        }
    }
    if pairs.is_empty() {
        let n_treated = treated.len();
        return Err(CkbError::NoMatches {
            caliper,
            treated: n_treated,
            controls: units.len() - n_treated,
        });
    }
    Ok(pairs)
}

/// Quadratic-time reference implementation of [`match_pairs`].
pub fn match_pairs_brute_force(units: &[MatchUnit], caliper: f64) -> Vec<MatchedPair> {
    let mut treated: Vec<&MatchUnit> = units.iter().filter(|u| u.treated).collect();
    treated.sort_by(|a, b| (a.score + 0.0).total_cmp(&(b.score + 0.0)).then(a.unit_id.cmp(&b.unit_id)));
    let mut used = vec![false; units.len()];
    let mut pairs = Vec::new();
    for t in treated {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, c) in units.iter().enumerate() {
            if c.treated || used[i] {
                continue;
            }
            let d = (t.score - c.score).abs();
            if d > caliper {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d < bd || (d == bd && c.unit_id < bid),
            };
            if better {
                best = Some((d, c.unit_id, i));
            }
        }
        if let Some((_, id, i)) = best {
            used[i] = true;
            pairs.push(MatchedPair {
                treated: t.unit_id,
                control: id,
            });
        }
    }
    pairs
}
