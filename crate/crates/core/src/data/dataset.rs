use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_eval_candidates, split_users, EvalCandidates, IdMap, InteractionRecord, MarkovChain,
    ParsedLog, SplitSpec, SyntheticWorld, SyntheticWorldSpec, UserHistory,
};
use crate::error::{Error, Result};
use crate::graph::InteractionGraph;

/// A parsed, thresholded and split dataset.
///
/// Entity indexing follows the graph: users are `0..user_count()`, items
/// follow. Only regular users' histories, minus each one's last behavior,
/// enter the graph and the training data.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub users: IdMap,
    pub items: IdMap,
    pub records: Vec<InteractionRecord>,
    pub spec: SplitSpec,
    pub seed: u64,
    pub regular: Vec<UserHistory>,
    pub new: Vec<UserHistory>,
    pub seen: BTreeMap<usize, BTreeSet<usize>>,
    pub dropped: usize,
    pub world: Option<SyntheticWorld>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    spec: SplitSpec,
    seed: u64,
    user_count: usize,
    item_count: usize,
    regular: Vec<usize>,
    new: Vec<usize>,
    dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct ChainsFile {
    spec: SyntheticWorldSpec,
    chains: Vec<MarkovChain>,
    mixtures: Vec<Vec<f64>>,
}

impl PreparedDataset {
    pub fn from_parsed(log: ParsedLog, spec: SplitSpec, seed: u64) -> Result<Self> {
        spec.validate().map_err(Error::InvalidConfig)?;
        let split = split_users(&log.records, &spec);
        Ok(PreparedDataset {
            users: log.users,
            items: log.items,
            records: log.records,
            spec,
            seed,
            regular: split.regular,
            new: split.new,
            seen: split.seen,
            dropped: split.dropped,
            world: None,
        })
    }

    pub fn from_synthetic(world: SyntheticWorld, spec: SplitSpec, seed: u64) -> Result<Self> {
        let mut users = IdMap::default();
        for u in 0..world.spec.user_count {
            users.intern(&u.to_string());
        }
        let mut items = IdMap::default();
        for i in 0..world.spec.item_count {
            items.intern(&i.to_string());
        }
        let log = ParsedLog {
            records: world.records.clone(),
            users,
            items,
            lines: world.records.len(),
            malformed: 0,
        };
        let mut ds = Self::from_parsed(log, spec, seed)?;
        ds.world = Some(world);
        Ok(ds)
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn entity_count(&self) -> usize {
        self.user_count() + self.item_count()
    }

    /// Largest numeric raw item id. On MovieLens this is the catalog size
    /// quoted in dataset statistics, which counts never-rated movies too.
    pub fn raw_item_id_span(&self) -> Option<u64> {
        self.items.max_numeric()
    }

    /// Regular users' histories without the held-out last behavior.
    pub fn train_histories(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.regular
            .iter()
            .map(|h| (h.user, &h.items[..h.items.len() - 1]))
    }

    pub fn graph(&self) -> InteractionGraph {
        let edges: Vec<(usize, usize)> = self
            .train_histories()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect();
        InteractionGraph::build(self.user_count(), self.item_count(), &edges)
            .expect("dense ids are in range")
    }

    fn candidates_for(&self, histories: &[UserHistory], n_neg: usize) -> Result<Vec<EvalCandidates>> {
        let empty = BTreeSet::new();
        histories
            .iter()
            .map(|h| {
                let seen = self.seen.get(&h.user).unwrap_or(&empty);
                build_eval_candidates(h.user, &h.items, seen, self.item_count(), n_neg, self.seed)
            })
            .collect()
    }

    /// One query per new user: their last kept behavior against `n_neg` negatives.
    pub fn cold_candidates(&self, n_neg: usize) -> Result<Vec<EvalCandidates>> {
        self.candidates_for(&self.new, n_neg)
    }

    /// One query per regular user on the held-out last behavior.
    pub fn warm_candidates(&self, n_neg: usize) -> Result<Vec<EvalCandidates>> {
        self.candidates_for(&self.regular, n_neg)
    }

    /// Writes `interactions.tsv`, `users.map`, `items.map`, `split.json` and,
    /// for generated data, `chains.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        let mut tsv = String::new();
        for r in &self.records {
            match r.rating {
                Some(v) => tsv.push_str(&format!("{}\t{}\t{}\t{}\n", r.user, r.item, v, r.timestamp)),
                None => tsv.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp)),
            }
        }
        write("interactions.tsv", tsv)?;
        write("users.map", self.users.to_text())?;
        write("items.map", self.items.to_text())?;
        let split = SplitFile {
            spec: self.spec.clone(),
            seed: self.seed,
            user_count: self.user_count(),
            item_count: self.item_count(),
            regular: self.regular.iter().map(|h| h.user).collect(),
            new: self.new.iter().map(|h| h.user).collect(),
            dropped: self.dropped,
        };
        write("split.json", serde_json::to_string_pretty(&split)? + "\n")?;
        if let Some(w) = &self.world {
            let chains = ChainsFile {
                spec: w.spec.clone(),
                chains: w.chains.clone(),
                mixtures: w.mixtures.clone(),
            };
            write("chains.json", serde_json::to_string(&chains)? + "\n")?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let map = |name: &str| -> Result<IdMap> {
            IdMap::from_text(&read(name)?).map_err(|msg| Error::Parse {
                path: dir.join(name),
                line: 0,
                msg,
            })
        };
        let users = map("users.map")?;
        let items = map("items.map")?;
        let split: SplitFile = serde_json::from_str(&read("split.json")?)?;
        let path = dir.join("interactions.tsv");
        let mut records = Vec::new();
        for (n, line) in read("interactions.tsv")?.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let (u, i, rating, ts) = match f.as_slice() {
                [u, i, r, t] => (u, i, Some(r.parse::<f64>().map_err(|_| bad("rating"))?), t),
                [u, i, t] => (u, i, None, t),
                _ => return Err(bad("expected 3 or 4 columns")),
            };
            let user: usize = u.parse().map_err(|_| bad("user id"))?;
            let item: usize = i.parse().map_err(|_| bad("item id"))?;
            if user >= users.len() {
                return Err(Error::IdOutOfRange { kind: "user", id: user, count: users.len() });
            }
            if item >= items.len() {
                return Err(Error::IdOutOfRange { kind: "item", id: item, count: items.len() });
            }
            records.push(InteractionRecord {
                user,
                item,
                rating,
                timestamp: ts.parse().map_err(|_| bad("timestamp"))?,
            });
        }
        let world = match fs::read_to_string(dir.join("chains.json")) {
            Ok(text) => {
                let c: ChainsFile = serde_json::from_str(&text)?;
                Some(SyntheticWorld {
                    spec: c.spec,
                    chains: c.chains,
                    mixtures: c.mixtures,
                    records: records.clone(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(dir.join("chains.json"), e)),
        };
        let log = ParsedLog {
            lines: records.len(),
            records,
            users,
            items,
            malformed: 0,
        };
        let mut ds = Self::from_parsed(log, split.spec, split.seed)?;
        ds.world = world;
        let regular: Vec<usize> = ds.regular.iter().map(|h| h.user).collect();
        let new: Vec<usize> = ds.new.iter().map(|h| h.user).collect();
        if regular != split.regular || new != split.new {
            return Err(Error::InvalidConfig(format!(
                "{}: split.json disagrees with interactions.tsv",
                dir.display()
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_world;

    fn small() -> PreparedDataset {
        let world = generate_synthetic_world(&SyntheticWorldSpec {
            item_count: 150,
            user_count: 40,
            ..SyntheticWorldSpec::default()
        });
        PreparedDataset::from_synthetic(world, SplitSpec::default(), 3).unwrap()
    }

    #[test]
    fn graph_excludes_new_users_and_held_out_items() {
        let ds = small();
        let g = ds.graph();
        for h in &ds.new {
            assert_eq!(g.degree(h.user), 0);
        }
        for h in &ds.regular {
            let distinct: BTreeSet<usize> = h.items[..h.len() - 1].iter().copied().collect();
            assert_eq!(g.degree(h.user), distinct.len());
        }
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let ds = small();
        let reg: BTreeSet<usize> = ds.regular.iter().map(|h| h.user).collect();
        let new: BTreeSet<usize> = ds.new.iter().map(|h| h.user).collect();
        assert!(reg.is_disjoint(&new));
        assert_eq!(reg.len() + new.len() + ds.dropped, 40);
        assert!(ds.new.iter().all(|h| h.len() <= 10));
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = PreparedDataset::load(dir.path()).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.regular, ds.regular);
        assert_eq!(back.new, ds.new);
        assert_eq!(back.world, ds.world);
        assert_eq!(back.cold_candidates(100).unwrap(), ds.cold_candidates(100).unwrap());
    }
}
