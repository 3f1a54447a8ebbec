//! Pluggable backbone relevance scorers.
//!
//! Three kinds are provided: a user-invariant smoothed-CTR popularity table,
//! a pairwise-ranking matrix factorization model, and verbatim external
//! scores for anyone with real backbone outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ImpressionRecord, ItemId, UserId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub user_id: UserId,
    pub time: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Popularity(PopularityScorer),
    MatrixFactorization(MfScorer),
    External(ExternalScorer),
}

impl Scorer {
    pub fn kind(&self) -> &'static str {
        match self {
            Scorer::Popularity(_) => "popularity",
            Scorer::MatrixFactorization(_) => "matrix_factorization",
            Scorer::External(_) => "external",
        }
    }
}

/// Finite score per candidate.
pub fn score(
    scorer: &Scorer,
    request: &Request,
    candidates: &[ItemId],
) -> Result<BTreeMap<ItemId, f64>> {
    candidates
        .iter()
        .map(|item| {
            let s = match scorer {
                Scorer::Popularity(p) => p.score(item),
                Scorer::MatrixFactorization(mf) => mf.score(&request.user_id, item),
                Scorer::External(ext) => ext.score(&request.request_id, item)?,
            };
            if !s.is_finite() {
                return Err(Error::NonFinite("backbone score"));
            }
            Ok((item.clone(), s))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopularityScorer {
    pub table: BTreeMap<ItemId, f64>,
}

impl PopularityScorer {
    /// Laplace-smoothed CTR; unseen items get the prior 0.5.
    pub fn score(&self, item: &str) -> f64 {
        self.table.get(item).copied().unwrap_or(0.5)
    }
}

/// `(clicks + 1) / (exposures + 2)` over impressions in `[start, end)`.
pub fn fit_popularity(records: &[ImpressionRecord], window: (i64, i64)) -> Result<Scorer> {
    if window.1 <= window.0 {
        return Err(Error::InvalidConfig(format!(
            "empty popularity window {window:?}"
        )));
    }
    let mut counts: BTreeMap<&ItemId, (u64, u64)> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.timestamp >= window.0 && r.timestamp < window.1)
    {
        let c = counts.entry(&r.item_id).or_default();
        c.0 += u64::from(r.click);
        c.1 += 1;
    }
    let table = counts
        .into_iter()
        .map(|(id, (clicks, exposures))| {
            (id.clone(), (clicks as f64 + 1.0) / (exposures as f64 + 2.0))
        })
        .collect();
    Ok(Scorer::Popularity(PopularityScorer { table }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfHyper {
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub neg_per_pos: usize,
    pub l2: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for MfHyper {
    fn default() -> Self {
        MfHyper {
            dim: 32,
            lr: 0.01,
            epochs: 20,
            neg_per_pos: 4,
            l2: 1e-4,
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfScorer {
    pub dim: usize,
    pub user_index: HashMap<UserId, usize>,
    pub item_index: HashMap<ItemId, usize>,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub item_bias: Vec<f64>,
    /// Used for users unseen during training.
    pub mean_user: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MfScorer {
    /// `p_u · q_i + b_i`; unknown items score 0.
    pub fn score(&self, user: &str, item: &str) -> f64 {
        let Some(&i) = self.item_index.get(item) else {
            return 0.0;
        };
        let u = match self.user_index.get(user) {
            Some(&u) => &self.user_factors[u],
            None => &self.mean_user,
        };
        dot(u, &self.item_factors[i]) + self.item_bias[i]
    }
}

#[derive(Debug, Clone)]
pub struct MfTraining {
    pub scorer: Scorer,
    /// Mean pairwise logistic loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Pairwise (BPR-style) matrix factorization. Each click is a positive;
/// negatives are drawn uniformly from items the user never clicked.
/// `extra_items` widens the item universe beyond those in `records`.
pub fn fit_mf(
    records: &[ImpressionRecord],
    extra_items: &[ItemId],
    hyper: &MfHyper,
) -> Result<MfTraining> {
    let items: BTreeSet<&ItemId> = records
        .iter()
        .map(|r| &r.item_id)
        .chain(extra_items)
        .collect();
    let users: BTreeSet<&UserId> = records.iter().map(|r| &r.user_id).collect();
    let item_ids: Vec<&ItemId> = items.into_iter().collect();
    let user_ids: Vec<&UserId> = users.into_iter().collect();
    let item_index: HashMap<ItemId, usize> = item_ids
        .iter()
        .enumerate()
        .map(|(k, id)| ((*id).clone(), k))
        .collect();
    let user_index: HashMap<UserId, usize> = user_ids
        .iter()
        .enumerate()
        .map(|(k, id)| ((*id).clone(), k))
        .collect();

    let positives: Vec<(usize, usize)> = records
        .iter()
        .filter(|r| r.click)
        .map(|r| (user_index[&r.user_id], item_index[&r.item_id]))
        .collect();
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut clicked: Vec<HashSet<usize>> = vec![HashSet::new(); user_ids.len()];
    for &(u, i) in &positives {
        clicked[u].insert(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let init = Normal::new(0.0, hyper.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let factors = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..hyper.dim).map(|_| init.sample(rng)).collect())
            .collect()
    };
    let mut user_factors = factors(user_ids.len(), &mut rng);
    let mut item_factors = factors(item_ids.len(), &mut rng);
    let mut item_bias = vec![0.0; item_ids.len()];
    let n_items = item_ids.len();

    let mut order = positives.clone();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let (lr, l2) = (hyper.lr, hyper.l2);
    let mut grad_u = vec![0.0; hyper.dim];

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut n = 0usize;
        for &(u, i) in &order {
            for _ in 0..hyper.neg_per_pos {
                if clicked[u].len() >= n_items {
                    break;
                }
                let j = loop {
                    let j = rng.random_range(0..n_items);
                    if !clicked[u].contains(&j) {
                        break j;
                    }
                };
                let x = dot(&user_factors[u], &item_factors[i]) + item_bias[i]
                    - dot(&user_factors[u], &item_factors[j])
                    - item_bias[j];
                loss += softplus(-x);
                n += 1;
                let g = sigmoid(-x);
                for k in 0..hyper.dim {
                    grad_u[k] =
                        g * (item_factors[i][k] - item_factors[j][k]) - l2 * user_factors[u][k];
                }
                for k in 0..hyper.dim {
                    let pu = user_factors[u][k];
                    item_factors[i][k] += lr * (g * pu - l2 * item_factors[i][k]);
                    item_factors[j][k] += lr * (-g * pu - l2 * item_factors[j][k]);
                    user_factors[u][k] += lr * grad_u[k];
                }
                item_bias[i] += lr * (g - l2 * item_bias[i]);
                item_bias[j] += lr * (-g - l2 * item_bias[j]);
            }
        }
        epoch_losses.push(if n > 0 { loss / n as f64 } else { 0.0 });
    }

    let mut mean_user = vec![0.0; hyper.dim];
    for f in &user_factors {
        for (m, x) in mean_user.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mean_user {
        *m /= user_factors.len() as f64;
    }

    Ok(MfTraining {
        scorer: Scorer::MatrixFactorization(MfScorer {
            dim: hyper.dim,
            user_index,
            item_index,
            user_factors,
            item_factors,
            item_bias,
            mean_user,
        }),
        epoch_losses,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScorer {
    pub scores: HashMap<(String, ItemId), f64>,
}

impl ExternalScorer {
    pub fn score(&self, request: &str, item: &str) -> Result<f64> {
        self.scores
            .get(&(request.to_string(), item.to_string()))
            .copied()
            .ok_or_else(|| Error::MissingScore {
                request: request.to_string(),
                item: item.to_string(),
            })
    }
}

/// Reads `request_id, item_id, score` rows (tab- or comma-separated, header
/// optional).
pub fn load_external_scores(path: &Path) -> Result<Scorer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scores = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else {
            line.split(',').collect()
        };
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "external scores line {}: expected 3 fields",
                n + 1
            )));
        }
        let value: f64 = match fields[2].trim().parse() {
            Ok(v) => v,
            Err(_) if n == 0 => continue,
            Err(_) => {
                return Err(Error::Parse(format!(
                    "external scores line {}: bad score `{}`",
                    n + 1,
                    fields[2]
                )))
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite("external score"));
        }
        scores.insert(
            (fields[0].trim().to_string(), fields[1].trim().to_string()),
            value,
        );
    }
    Ok(Scorer::External(ExternalScorer { scores }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: &str, user: &str) -> Request {
        Request {
            request_id: id.into(),
            user_id: user.into(),
            time: 0,
        }
    }

    #[test]
    fn popularity_examples() {
        let mut recs = Vec::new();
        for k in 0..18 {
            recs.push(ImpressionRecord::new("u", "b", 10, k < 9));
        }
        recs.push(ImpressionRecord::new("u", "late", 1000, true));
        let s = fit_popularity(&recs, (0, 100)).unwrap();
        let out = score(
            &s,
            &req("r1", "u1"),
            &["a".into(), "b".into(), "late".into()],
        )
        .unwrap();
        assert_eq!(out["a"], 0.5);
        assert_eq!(out["b"], 0.5);
        assert_eq!(out["late"], 0.5);
        let other = score(
            &s,
            &req("r2", "someone else"),
            &["a".into(), "b".into(), "late".into()],
        )
        .unwrap();
        assert_eq!(out, other);
        assert!(fit_popularity(&recs, (5, 5)).is_err());
    }

    #[test]
    fn popularity_follows_ctr_at_equal_exposure() {
        let mut recs = Vec::new();
        for (item, clicks) in [("a", 1), ("b", 4), ("c", 2)] {
            for k in 0..10 {
                recs.push(ImpressionRecord::new("u", item, 0, k < clicks));
            }
        }
        let Scorer::Popularity(p) = fit_popularity(&recs, (0, 1)).unwrap() else {
            unreachable!()
        };
        assert!(p.score("b") > p.score("c") && p.score("c") > p.score("a"));
    }

    #[test]
    fn empty_candidates() {
        let s = fit_popularity(&[], (0, 1)).unwrap();
        assert!(score(&s, &req("r", "u"), &[]).unwrap().is_empty());
    }

    #[test]
    fn mf_learns_clicked_over_unclicked() {
        let mut recs = Vec::new();
        for _ in 0..20 {
            recs.push(ImpressionRecord::new("u", "A", 0, true));
        }
        recs.push(ImpressionRecord::new("u", "B", 0, false));
        let hyper = MfHyper {
            epochs: 10,
            ..Default::default()
        };
        let fit = fit_mf(&recs, &[], &hyper).unwrap();
        let out = score(&fit.scorer, &req("r", "u"), &["A".into(), "B".into()]).unwrap();
        assert!(out["A"] > out["B"]);
    }

    #[test]
    fn mf_is_seed_deterministic() {
        let recs: Vec<ImpressionRecord> = (0..50)
            .map(|k| {
                ImpressionRecord::new(format!("u{}", k % 5), format!("i{}", k % 7), 0, k % 3 == 0)
            })
            .collect();
        let a = fit_mf(&recs, &[], &MfHyper::default()).unwrap();
        let b = fit_mf(&recs, &[], &MfHyper::default()).unwrap();
        assert_eq!(a.scorer, b.scorer);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let c = fit_mf(
            &recs,
            &[],
            &MfHyper {
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.scorer, c.scorer);
    }

    #[test]
    fn mf_without_clicks_errors() {
        let recs = vec![ImpressionRecord::new("u", "a", 0, false)];
        assert!(matches!(
            fit_mf(&recs, &[], &MfHyper::default()),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn external_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ext.tsv");
        std::fs::write(
            &p,
            "request_id\titem_id\tscore\nr1\ti7\t0.83\nr1\ti8\t-2.5\n",
        )
        .unwrap();
        let s = load_external_scores(&p).unwrap();
        let out = score(&s, &req("r1", "u"), &["i7".into()]).unwrap();
        assert_eq!(out["i7"], 0.83);
        match score(&s, &req("r2", "u"), &["i7".into()]) {
            Err(Error::MissingScore { request, item }) => {
                assert_eq!((request.as_str(), item.as_str()), ("r2", "i7"))
            }
            other => panic!("expected a lookup miss, got {other:?}"),
        }

        let q = dir.path().join("ext.csv");
        std::fs::write(&q, "r1,i7,0.83\n").unwrap();
        let s = load_external_scores(&q).unwrap();
        assert_eq!(
            score(&s, &req("r1", "u"), &["i7".into()]).unwrap()["i7"],
            0.83
        );
    }
}
