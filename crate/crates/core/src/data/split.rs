use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::InteractionRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitMode {
    /// Top `regular_fraction` of users by interaction count are regular.
    ByActivity,
    /// Users with `min..=max` interactions are new, more than `max` regular.
    ByCountRange { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub regular_fraction: f64,
    pub new_user_max_kept: usize,
    /// Minimum rating of a positive interaction; ignored for unrated records.
    pub positive_threshold: Option<f64>,
    pub mode: SplitMode,
    /// Inclusive timestamp window applied before anything else.
    pub time_range: Option<(i64, i64)>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            regular_fraction: 0.8,
            new_user_max_kept: 10,
            positive_threshold: Some(4.0),
            mode: SplitMode::ByActivity,
            time_range: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.regular_fraction > 0.0 && self.regular_fraction < 1.0) {
            return Err(format!(
                "regular_fraction {} outside (0, 1)",
                self.regular_fraction
            ));
        }
        if self.new_user_max_kept < 2 {
            return Err("new_user_max_kept must be at least 2".into());
        }
        if let SplitMode::ByCountRange { min, max } = self.mode {
            if min < 2 || min > max {
                return Err(format!("bad count range {min}..={max}"));
            }
        }
        Ok(())
    }

    fn keeps(&self, r: &InteractionRecord) -> bool {
        if let Some((lo, hi)) = self.time_range {
            if r.timestamp < lo || r.timestamp > hi {
                return false;
            }
        }
        match (self.positive_threshold, r.rating) {
            (Some(t), Some(rating)) => rating >= t,
            _ => true,
        }
    }
}

/// One user's time-ordered item ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncated(&self, keep: usize) -> UserHistory {
        let n = keep.min(self.items.len());
        UserHistory {
            user: self.user,
            items: self.items[..n].to_vec(),
            timestamps: self.timestamps[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    /// Sorted by user id.
    pub regular: Vec<UserHistory>,
    /// Sorted by user id, truncated to the earliest kept behaviors.
    pub new: Vec<UserHistory>,
    /// Users removed for having fewer than two positives.
    pub dropped: usize,
    /// Every item each retained user touched, at any rating or time.
    pub seen: BTreeMap<usize, BTreeSet<usize>>,
}

/// Groups records into per-user histories ordered by timestamp (stable).
pub fn group_histories<'a>(records: impl IntoIterator<Item = &'a InteractionRecord>) -> Vec<UserHistory> {
    let mut by_user: BTreeMap<usize, Vec<(i64, usize)>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user).or_default().push((r.timestamp, r.item));
    }
    by_user
        .into_iter()
        .map(|(user, mut evs)| {
            evs.sort_by_key(|e| e.0);
            UserHistory {
                user,
                items: evs.iter().map(|e| e.1).collect(),
                timestamps: evs.iter().map(|e| e.0).collect(),
            }
        })
        .collect()
}

/// Thresholds interactions and partitions users into regular and new.
/// Activity ties at the boundary break by ascending user id.
pub fn split_users(records: &[InteractionRecord], spec: &SplitSpec) -> UserSplit {
    let histories: Vec<UserHistory> = group_histories(records.iter().filter(|r| spec.keeps(r)));
    let total = histories.len();
    let retained: Vec<UserHistory> = histories.into_iter().filter(|h| h.len() >= 2).collect();
    let dropped = total - retained.len();

    let mut regular = Vec::new();
    let mut new = Vec::new();
    match spec.mode {
        SplitMode::ByActivity => {
            let mut order: Vec<usize> = (0..retained.len()).collect();
            order.sort_by_key(|&i| (std::cmp::Reverse(retained[i].len()), retained[i].user));
            let n_regular = (spec.regular_fraction * retained.len() as f64 + 1e-9).floor() as usize;
            let mut is_regular = vec![false; retained.len()];
            for &i in &order[..n_regular] {
                is_regular[i] = true;
            }
            for (h, reg) in retained.into_iter().zip(is_regular) {
                if reg {
                    regular.push(h);
                } else {
                    new.push(h.truncated(spec.new_user_max_kept));
                }
            }
        }
        SplitMode::ByCountRange { min, max } => {
            for h in retained {
                if h.len() > max {
                    regular.push(h);
                } else if h.len() >= min {
                    new.push(h.truncated(spec.new_user_max_kept));
                }
            }
        }
    }
    let mut seen: BTreeMap<usize, BTreeSet<usize>> = regular
        .iter()
        .chain(&new)
        .map(|h| (h.user, BTreeSet::new()))
        .collect();
    for r in records {
        if let Some(set) = seen.get_mut(&r.user) {
            set.insert(r.item);
        }
    }
    UserSplit {
        regular,
        new,
        dropped,
        seen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: usize, item: usize, rating: Option<f64>, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user,
            item,
            rating,
            timestamp: ts,
        }
    }

    fn user_with(user: usize, n: usize) -> Vec<InteractionRecord> {
        (0..n).map(|k| rec(user, k, Some(5.0), (n - k) as i64)).collect()
    }

    #[test]
    fn eighty_twenty_by_activity() {
        let mut records = Vec::new();
        for u in 0..10 {
            records.extend(user_with(u, 2 + u));
        }
        let s = split_users(&records, &SplitSpec::default());
        assert_eq!(s.regular.len(), 8);
        assert_eq!(s.new.len(), 2);
        let new_ids: Vec<usize> = s.new.iter().map(|h| h.user).collect();
        assert_eq!(new_ids, vec![0, 1]);
    }

    #[test]
    fn activity_ties_break_by_user_id() {
        let mut records = Vec::new();
        for u in 0..5 {
            records.extend(user_with(u, 4));
        }
        let spec = SplitSpec {
            regular_fraction: 0.6,
            ..SplitSpec::default()
        };
        let s = split_users(&records, &spec);
        let reg: Vec<usize> = s.regular.iter().map(|h| h.user).collect();
        assert_eq!(reg, vec![0, 1, 2]);
    }

    #[test]
    fn new_users_keep_earliest_behaviors() {
        let mut records = user_with(0, 30);
        for u in 1..10 {
            records.extend(user_with(u, 40));
        }
        let s = split_users(&records, &SplitSpec::default());
        let h = s.new.iter().find(|h| h.user == 0).unwrap();
        assert_eq!(h.len(), 10);
        // user_with assigns decreasing timestamps, so the earliest are the last items.
        assert_eq!(h.items, (20..30).rev().collect::<Vec<_>>());
        assert!(h.timestamps.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn count_range_mode() {
        let mut records = user_with(0, 4);
        records.extend(user_with(1, 6));
        records.extend(user_with(2, 1));
        let spec = SplitSpec {
            mode: SplitMode::ByCountRange { min: 2, max: 5 },
            ..SplitSpec::default()
        };
        let s = split_users(&records, &spec);
        assert_eq!(s.new.iter().map(|h| h.user).collect::<Vec<_>>(), vec![0]);
        assert_eq!(s.regular.iter().map(|h| h.user).collect::<Vec<_>>(), vec![1]);
        assert_eq!(s.dropped, 1);
    }

    #[test]
    fn threshold_filters_ratings_but_not_unrated() {
        let records = vec![
            rec(0, 0, Some(5.0), 1),
            rec(0, 1, Some(3.0), 2),
            rec(0, 2, Some(4.0), 3),
            rec(1, 0, None, 1),
            rec(1, 1, None, 2),
        ];
        let spec = SplitSpec {
            regular_fraction: 0.5,
            ..SplitSpec::default()
        };
        let s = split_users(&records, &spec);
        let all: Vec<&UserHistory> = s.regular.iter().chain(&s.new).collect();
        let u0 = all.iter().find(|h| h.user == 0).unwrap();
        assert_eq!(u0.items, vec![0, 2]);
        let u1 = all.iter().find(|h| h.user == 1).unwrap();
        assert_eq!(u1.items, vec![0, 1]);
        assert_eq!(s.seen[&0].len(), 3);
    }

    #[test]
    fn time_range_filter() {
        let records: Vec<_> = (0..10).map(|t| rec(0, t as usize, None, t)).collect();
        let spec = SplitSpec {
            time_range: Some((3, 6)),
            mode: SplitMode::ByCountRange { min: 2, max: 10 },
            ..SplitSpec::default()
        };
        let s = split_users(&records, &spec);
        assert_eq!(s.new[0].items, vec![3, 4, 5, 6]);
    }
}
