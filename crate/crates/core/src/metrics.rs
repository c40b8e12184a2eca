//! Ranking metrics and the evaluation loop.
//!
//! Rank-based metrics order candidates by descending score with ascending
//! item id on ties. AUC counts pairs and scores a tie as one half.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user's scored candidate list with relevance flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankedQuery {
    pub fn new(items: Vec<usize>, scores: Vec<f64>, relevant: Vec<bool>) -> Result<Self> {
        if items.len() != scores.len() || items.len() != relevant.len() {
            return Err(Error::InvalidQuery("items, scores and flags differ in length".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidQuery("NaN score".into()));
        }
        Ok(RankedQuery {
            items,
            scores,
            relevant,
        })
    }

    /// A candidate list whose first entry is the single positive.
    pub fn single_positive(items: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        let relevant = (0..items.len()).map(|i| i == 0).collect();
        Self::new(items, scores, relevant)
    }

    /// Candidate indices in rank order.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then(self.items[a].cmp(&self.items[b]))
        });
        idx
    }

    /// 1-based ranks of the relevant candidates, ascending.
    pub fn relevant_ranks(&self) -> Vec<usize> {
        self.order()
            .iter()
            .enumerate()
            .filter(|(_, &i)| self.relevant[i])
            .map(|(r, _)| r + 1)
            .collect()
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.relevant.iter().filter(|&&r| r).count();
        (pos, self.relevant.len() - pos)
    }
}

fn mean_over(queries: &[RankedQuery], f: impl Fn(&RankedQuery) -> Result<f64>) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let mut total = 0.0;
    for q in queries {
        total += f(q)?;
    }
    Ok(total / queries.len() as f64)
}

/// Per-query fraction of correctly ordered (positive, negative) pairs,
/// averaged over queries.
pub fn auc(queries: &[RankedQuery]) -> Result<f64> {
    mean_over(queries, |q| {
        let (pos, neg) = q.counts();
        if pos == 0 || neg == 0 {
            return Err(Error::InvalidQuery("AUC needs a positive and a negative".into()));
        }
        let mut wins = 0.0;
        for (i, &ri) in q.relevant.iter().enumerate() {
            if !ri {
                continue;
            }
            for (j, &rj) in q.relevant.iter().enumerate() {
                if rj {
                    continue;
                }
                if q.scores[i] > q.scores[j] {
                    wins += 1.0;
                } else if q.scores[i] == q.scores[j] {
                    wins += 0.5;
                }
            }
        }
        Ok(wins / (pos * neg) as f64)
    })
}

/// Mean over queries of average precision over the relevant ranks.
pub fn mean_average_precision(queries: &[RankedQuery]) -> Result<f64> {
    mean_over(queries, |q| {
        let ranks = q.relevant_ranks();
        if ranks.is_empty() {
            return Err(Error::InvalidQuery("MAP needs a relevant item".into()));
        }
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .map(|(k, &r)| (k + 1) as f64 / r as f64)
            .sum();
        Ok(ap / ranks.len() as f64)
    })
}

pub fn hit_at_n(queries: &[RankedQuery], n: usize) -> Result<f64> {
    assert!(n >= 1, "N must be at least 1");
    mean_over(queries, |q| {
        Ok(if q.relevant_ranks().first().is_some_and(|&r| r <= n) {
            1.0
        } else {
            0.0
        })
    })
}

pub fn ndcg_at_n(queries: &[RankedQuery], n: usize) -> Result<f64> {
    assert!(n >= 1, "N must be at least 1");
    mean_over(queries, |q| {
        let ranks = q.relevant_ranks();
        if ranks.is_empty() {
            return Ok(0.0);
        }
        let disc = |r: usize| 1.0 / ((r + 1) as f64).log2();
        let dcg: f64 = ranks.iter().filter(|&&r| r <= n).map(|&r| disc(r)).sum();
        let idcg: f64 = (1..=ranks.len().min(n)).map(disc).sum();
        Ok(dcg / idcg)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Omitted by default so reports of identical runs are byte-identical.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub user_count: usize,
    pub auc: f64,
    pub map: f64,
    /// Cutoffs for `hit` and `ndcg`, in order.
    pub cutoffs: Vec<usize>,
    pub hit: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn from_queries(
        queries: &[RankedQuery],
        cutoffs: &[usize],
        scenario: &str,
        meta: ReportMeta,
    ) -> Result<Self> {
        Ok(MetricsReport {
            scenario: scenario.to_string(),
            user_count: queries.len(),
            auc: auc(queries)?,
            map: mean_average_precision(queries)?,
            cutoffs: cutoffs.to_vec(),
            hit: cutoffs.iter().map(|&n| hit_at_n(queries, n)).collect::<Result<_>>()?,
            ndcg: cutoffs.iter().map(|&n| ndcg_at_n(queries, n)).collect::<Result<_>>()?,
            meta,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Flat `metric,N,value` rows; N is empty for AUC and MAP.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,N,value\n");
        s.push_str(&format!("auc,,{}\n", self.auc));
        s.push_str(&format!("map,,{}\n", self.map));
        for (n, v) in self.cutoffs.iter().zip(&self.hit) {
            s.push_str(&format!("hit,{n},{v}\n"));
        }
        for (n, v) in self.cutoffs.iter().zip(&self.ndcg) {
            s.push_str(&format!("ndcg,{n},{v}\n"));
        }
        s
    }
}

/// Default cutoffs `1..=20`.
pub fn default_cutoffs() -> Vec<usize> {
    (1..=20).collect()
}

/// What a scorer sees for one evaluation user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalQuery {
    pub user: usize,
    /// The user's behaviors before the held-out positive, time-ordered.
    pub history: Vec<usize>,
    /// Positive first.
    pub candidates: Vec<usize>,
}

/// Anything that scores a query's candidates; higher is better.
pub trait Scorer: Sync {
    fn score(&self, query: &EvalQuery) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: usize,
    pub positive_rank: usize,
    pub auc: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub queries: Vec<RankedQuery>,
    pub per_user: Vec<UserResult>,
}

impl Evaluation {
    pub fn report(&self, cutoffs: &[usize], scenario: &str, meta: ReportMeta) -> Result<MetricsReport> {
        MetricsReport::from_queries(&self.queries, cutoffs, scenario, meta)
    }

    pub fn per_user_csv(&self) -> String {
        let mut s = String::from("user,positive_rank,auc\n");
        for r in &self.per_user {
            s.push_str(&format!("{},{},{}\n", r.user, r.positive_rank, r.auc));
        }
        s
    }
}

/// Scores every query in parallel; results keep query order.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, queries: &[EvalQuery]) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let ranked: Vec<RankedQuery> = queries
        .par_iter()
        .map(|q| RankedQuery::single_positive(q.candidates.clone(), scorer.score(q)?))
        .collect::<Result<_>>()?;
    let per_user = queries
        .iter()
        .zip(&ranked)
        .map(|(q, r)| {
            Ok(UserResult {
                user: q.user,
                positive_rank: r.relevant_ranks()[0],
                auc: auc(std::slice::from_ref(r))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        queries: ranked,
        per_user,
    })
}
