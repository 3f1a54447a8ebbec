//! Synthetic feed corpora with decaying item appeal and snowball exposure.
//!
//! Items arrive as a Poisson process on an hourly-style slice grid. Every
//! request shows one uploaded item, drawn with weight
//! `1 + snowball_strength * cum_clicks`, and the user clicks with probability
//! `quality * 2^(-age / half_life)`. Items leave the candidate pool
//! `lifetime_slices` after upload when that is non-zero.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedTreeIndex, Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_impressions_csv, write_items_csv, ImpressionRecord, ItemCatalog, ItemId,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub horizon_slices: usize,
    pub slice_seconds: u64,
    /// Expected uploads per slice; arrivals stop once `n_items` exist.
    pub arrival_rate: f64,
    /// Beta parameters of item quality.
    pub quality_alpha: f64,
    pub quality_beta: f64,
    /// Fraction of items in the fast-decay class.
    pub decay_mix: f64,
    pub half_life_fast: f64,
    pub half_life_slow: f64,
    pub snowball_strength: f64,
    /// Slices an item stays eligible for exposure after upload; 0 keeps items forever.
    pub lifetime_slices: usize,
    pub requests_per_slice: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 10_000,
            n_users: 5_000,
            horizon_slices: 240,
            slice_seconds: 3600,
            arrival_rate: 42.0,
            quality_alpha: 2.0,
            quality_beta: 18.0,
            decay_mix: 0.5,
            half_life_fast: 8.0,
            half_life_slow: 48.0,
            snowball_strength: 5.0,
            lifetime_slices: 24,
            requests_per_slice: 834,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items as f64),
            ("n_users", self.n_users as f64),
            ("horizon_slices", self.horizon_slices as f64),
            ("slice_seconds", self.slice_seconds as f64),
            ("arrival_rate", self.arrival_rate),
            ("quality_alpha", self.quality_alpha),
            ("quality_beta", self.quality_beta),
            ("half_life_fast", self.half_life_fast),
            ("half_life_slow", self.half_life_slow),
            ("requests_per_slice", self.requests_per_slice as f64),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.decay_mix) {
            return Err(Error::InvalidConfig(format!(
                "decay_mix must lie in [0,1], got {}",
                self.decay_mix
            )));
        }
        if !(self.snowball_strength.is_finite() && self.snowball_strength >= 0.0) {
            return Err(Error::InvalidConfig(
                "snowball_strength must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayClass {
    Fast,
    Slow,
}

impl DecayClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecayClass::Fast => "fast",
            DecayClass::Slow => "slow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub item_id: ItemId,
    pub quality: f64,
    pub decay_class: DecayClass,
    pub half_life: f64,
}

impl GroundTruth {
    /// Click probability at a (fractional) age in slices.
    pub fn click_prob(&self, age: f64) -> f64 {
        (self.quality * (-age / self.half_life).exp2()).clamp(0.0, 1.0)
    }

    /// Mean click probability over integer ages `[from, to)`.
    pub fn mean_click_prob(&self, from: usize, to: usize) -> f64 {
        if to <= from {
            return 0.0;
        }
        (from..to)
            .map(|a| self.click_prob(a as f64 + 0.5))
            .sum::<f64>()
            / (to - from) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<ImpressionRecord>,
    pub catalog: ItemCatalog,
    pub truth: Vec<GroundTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub impressions: PathBuf,
    pub items: PathBuf,
    pub ground_truth: PathBuf,
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let quality = Beta::new(config.quality_alpha, config.quality_beta)
        .map_err(|e| Error::InvalidConfig(format!("quality distribution: {e}")))?;
    let arrivals = Poisson::new(config.arrival_rate)
        .map_err(|e| Error::InvalidConfig(format!("arrival rate: {e}")))?;
    let width = config.n_items.saturating_sub(1).to_string().len();
    let user_width = config.n_users.saturating_sub(1).to_string().len();
    let slice = config.slice_seconds as i64;

    let mut truth: Vec<GroundTruth> = Vec::with_capacity(config.n_items);
    let mut upload_slice: Vec<usize> = Vec::with_capacity(config.n_items);
    let mut cum_clicks: Vec<u64> = Vec::with_capacity(config.n_items);
    let mut weights: WeightedTreeIndex<f64> = WeightedTreeIndex::new(Vec::<f64>::new())
        .map_err(|e| Error::InvalidConfig(format!("exposure weights: {e}")))?;
    let mut records = Vec::with_capacity(config.horizon_slices * config.requests_per_slice);

    for s in 0..config.horizon_slices {
        let remaining = config.n_items - truth.len();
        let n_new = (arrivals.sample(&mut rng) as usize).min(remaining);
        for _ in 0..n_new {
            let idx = truth.len();
            let fast = rng.random::<f64>() < config.decay_mix;
            truth.push(GroundTruth {
                item_id: format!("i{idx:0width$}"),
                quality: quality.sample(&mut rng),
                decay_class: if fast {
                    DecayClass::Fast
                } else {
                    DecayClass::Slow
                },
                half_life: if fast {
                    config.half_life_fast
                } else {
                    config.half_life_slow
                },
            });
            upload_slice.push(s);
            cum_clicks.push(0);
            weights
                .push(1.0)
                .map_err(|e| Error::InvalidConfig(format!("exposure weights: {e}")))?;
        }
        if config.lifetime_slices > 0 && s >= config.lifetime_slices {
            let expiring = s - config.lifetime_slices;
            let from = upload_slice.partition_point(|&u| u < expiring);
            let to = upload_slice.partition_point(|&u| u <= expiring);
            for item in from..to {
                weights
                    .update(item, 0.0)
                    .map_err(|e| Error::InvalidConfig(format!("exposure weights: {e}")))?;
            }
        }
        if !weights.is_valid() {
            continue;
        }
        let mut offsets: Vec<i64> = (0..config.requests_per_slice)
            .map(|_| rng.random_range(0..slice))
            .collect();
        offsets.sort_unstable();
        for off in offsets {
            let mut item = weights.sample(&mut rng);
            // rounding in the tree subtotals could leave a sliver for an expired item
            while weights.get(item) <= 0.0 {
                item = weights.sample(&mut rng);
            }
            let user = rng.random_range(0..config.n_users);
            let age = (s - upload_slice[item]) as f64 + off as f64 / slice as f64;
            let click = rng.random::<f64>() < truth[item].click_prob(age);
            if click {
                cum_clicks[item] += 1;
                let w = 1.0 + config.snowball_strength * cum_clicks[item] as f64;
                weights
                    .update(item, w)
                    .map_err(|e| Error::InvalidConfig(format!("exposure weights: {e}")))?;
            }
            records.push(ImpressionRecord::new(
                format!("u{user:0user_width$}"),
                truth[item].item_id.clone(),
                s as i64 * slice + off,
                click,
            ));
        }
    }
    if truth.len() < config.n_items {
        log::warn!(
            "only {} of {} items arrived within {} slices",
            truth.len(),
            config.n_items,
            config.horizon_slices
        );
    }
    let catalog = ItemCatalog::from_entries(
        truth
            .iter()
            .zip(&upload_slice)
            .map(|(t, &s)| (t.item_id.clone(), s as i64 * slice)),
    );
    Ok(SynthCorpus {
        records,
        catalog,
        truth,
    })
}

pub fn write_ground_truth_tsv(path: &Path, truth: &[GroundTruth]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(["item_id", "quality", "decay_class", "half_life"])?;
    for t in truth {
        w.write_record([
            t.item_id.as_str(),
            &format!("{:.12e}", t.quality),
            t.decay_class.as_str(),
            &t.half_life.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ground_truth_tsv(path: &Path) -> Result<Vec<GroundTruth>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let bad = || Error::Parse(format!("malformed ground-truth row {:?}", row));
        let decay_class = match row.get(2).ok_or_else(bad)? {
            "fast" => DecayClass::Fast,
            "slow" => DecayClass::Slow,
            _ => return Err(bad()),
        };
        out.push(GroundTruth {
            item_id: row.get(0).ok_or_else(bad)?.to_string(),
            quality: row.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            decay_class,
            half_life: row.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Writes `impressions.csv`, `items.csv` and `ground_truth.tsv` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<SynthPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths {
        impressions: dir.join("impressions.csv"),
        items: dir.join("items.csv"),
        ground_truth: dir.join("ground_truth.tsv"),
    };
    write_impressions_csv(&paths.impressions, &corpus.records)?;
    write_items_csv(&paths.items, &corpus.catalog)?;
    write_ground_truth_tsv(&paths.ground_truth, &corpus.truth)?;
    Ok(paths)
}
