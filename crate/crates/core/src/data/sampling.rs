use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BehaviorSequence;
use crate::error::{Error, Result};
use crate::seed;

/// Draws a window of length `T ~ U[t_min, min(t_max, len - 1)]` at a uniform
/// position, followed by its target.
pub fn window_sequence<R: Rng + ?Sized>(
    user: usize,
    history: &[usize],
    t_min: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<BehaviorSequence> {
    if history.len() < t_min + 1 {
        return Err(Error::HistoryTooShort {
            len: history.len(),
            needed: t_min + 1,
        });
    }
    let t = rng.random_range(t_min..=t_max.min(history.len() - 1));
    let target = rng.random_range(t..history.len());
    Ok(BehaviorSequence {
        user,
        items: history[target - t..target].to_vec(),
        target: history[target],
    })
}

/// Window predicting `history[target_pos]`, with length drawn from
/// `[min(t_min, target_pos), min(t_max, target_pos)]`.
pub fn window_ending_at<R: Rng + ?Sized>(
    user: usize,
    history: &[usize],
    target_pos: usize,
    t_min: usize,
    t_max: usize,
    rng: &mut R,
) -> BehaviorSequence {
    assert!(target_pos >= 1 && target_pos < history.len(), "target position");
    let hi = t_max.min(target_pos);
    let t = rng.random_range(t_min.min(hi)..=hi);
    BehaviorSequence {
        user,
        items: history[target_pos - t..target_pos].to_vec(),
        target: history[target_pos],
    }
}

/// `k` distinct items from `0..item_count` outside `exclude`.
pub fn sample_negatives<R: Rng + ?Sized>(
    exclude: &BTreeSet<usize>,
    item_count: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let available = item_count - exclude.iter().filter(|&&i| i < item_count).count();
    if available < k {
        return Err(Error::CatalogTooSmall {
            needed: k,
            available,
        });
    }
    let mut picked = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    if available < 2 * k {
        // Dense request: enumerate instead of rejecting.
        let pool: Vec<usize> = (0..item_count).filter(|i| !exclude.contains(i)).collect();
        for i in rand::seq::index::sample(rng, pool.len(), k) {
            out.push(pool[i]);
        }
        return Ok(out);
    }
    while out.len() < k {
        let i = rng.random_range(0..item_count);
        if !exclude.contains(&i) && picked.insert(i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// One evaluation query: the held-out positive first, then negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCandidates {
    pub user: usize,
    pub positive: usize,
    pub candidates: Vec<usize>,
}

/// Held-out last behavior plus `n_neg` items the user never touched.
/// Deterministic in `(seed, user)`.
pub fn build_eval_candidates(
    user: usize,
    history: &[usize],
    seen: &BTreeSet<usize>,
    item_count: usize,
    n_neg: usize,
    seed: u64,
) -> Result<EvalCandidates> {
    let positive = *history.last().ok_or(Error::HistoryTooShort { len: 0, needed: 1 })?;
    let mut rng = seed::rng(seed, &format!("eval/user/{user}"));
    let mut exclude = seen.clone();
    exclude.extend(history.iter().copied());
    let negatives = sample_negatives(&exclude, item_count, n_neg, &mut rng)?;
    let mut candidates = Vec::with_capacity(n_neg + 1);
    candidates.push(positive);
    candidates.extend(negatives);
    Ok(EvalCandidates {
        user,
        positive,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_one_window_for_length_three() {
        let mut rng = seed::rng(0, "w");
        for _ in 0..20 {
            let s = window_sequence(4, &[10, 11, 12], 2, 10, &mut rng).unwrap();
            assert_eq!(s.items, vec![10, 11]);
            assert_eq!(s.target, 12);
        }
    }

    #[test]
    fn window_lengths_in_bounds_and_contiguous() {
        let history: Vec<usize> = (100..140).collect();
        let mut rng = seed::rng(0, "w");
        for _ in 0..500 {
            let s = window_sequence(0, &history, 2, 10, &mut rng).unwrap();
            assert!((2..=10).contains(&s.len()));
            let start = s.items[0] - 100;
            assert_eq!(s.items, history[start..start + s.len()]);
            assert_eq!(s.target, history[start + s.len()]);
        }
    }

    #[test]
    fn short_history_errors() {
        let mut rng = seed::rng(0, "w");
        assert!(matches!(
            window_sequence(0, &[1, 2], 2, 10, &mut rng),
            Err(Error::HistoryTooShort { len: 2, needed: 3 })
        ));
    }

    #[test]
    fn window_ending_at_clamps_to_prefix() {
        let mut rng = seed::rng(0, "w");
        let s = window_ending_at(0, &[5, 6, 7], 1, 2, 10, &mut rng);
        assert_eq!(s.items, vec![5]);
        assert_eq!(s.target, 6);
    }

    #[test]
    fn candidates_have_101_entries_and_avoid_history() {
        let history: Vec<usize> = (0..30).map(|i| i * 3).collect();
        let seen: BTreeSet<usize> = [1, 2].into_iter().collect();
        let c = build_eval_candidates(9, &history, &seen, 500, 100, 42).unwrap();
        assert_eq!(c.candidates.len(), 101);
        assert_eq!(c.candidates[0], 87);
        let distinct: BTreeSet<usize> = c.candidates.iter().copied().collect();
        assert_eq!(distinct.len(), 101);
        for n in &c.candidates[1..] {
            assert!(!history.contains(n) && !seen.contains(n));
        }
        assert_eq!(c, build_eval_candidates(9, &history, &seen, 500, 100, 42).unwrap());
        assert_ne!(c, build_eval_candidates(9, &history, &seen, 500, 100, 43).unwrap());
    }

    #[test]
    fn small_catalog_errors() {
        let history: Vec<usize> = (0..10).collect();
        let err = build_eval_candidates(0, &history, &BTreeSet::new(), 50, 100, 0).unwrap_err();
        assert!(matches!(err, Error::CatalogTooSmall { needed: 100, available: 40 }));
    }

    #[test]
    fn dense_negative_request_uses_whole_pool() {
        let exclude: BTreeSet<usize> = (0..5).collect();
        let mut rng = seed::rng(0, "n");
        let mut got = sample_negatives(&exclude, 10, 5, &mut rng).unwrap();
        got.sort();
        assert_eq!(got, vec![5, 6, 7, 8, 9]);
    }
}
