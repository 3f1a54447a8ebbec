//! Vitality scoring and automatic deactivation labels.
//!
//! Each exposed slice scores the item's feedback percentile among all items
//! exposed in the same absolute slice, minus `beta_e`; an unexposed slice
//! scores `-beta_ne`. The first age at which the running sum drops strictly
//! below `beta_d` is the item's deactivation (event) age. Items that never
//! cross are right-censored at the end of their observed follow-up.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, ItemTimeline, CTR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitalityParams {
    pub beta_e: f64,
    pub beta_ne: f64,
    pub beta_d: f64,
    pub feedback_feature: String,
}

impl Default for VitalityParams {
    fn default() -> Self {
        VitalityParams {
            beta_e: 0.5,
            beta_ne: 0.5,
            beta_d: -3.0,
            feedback_feature: CTR.to_string(),
        }
    }
}

impl VitalityParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta_d.is_nan() || self.beta_d >= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta_d must be negative, got {}",
                self.beta_d
            )));
        }
        if !(0.0..=1.0).contains(&self.beta_e) {
            return Err(Error::InvalidConfig(format!(
                "beta_e must lie in [0,1], got {}",
                self.beta_e
            )));
        }
        if self.beta_ne.is_nan() || self.beta_ne < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta_ne must be >= 0, got {}",
                self.beta_ne
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    /// Item -> age slice at which the alert fired.
    pub events: BTreeMap<ItemId, usize>,
    /// Item -> number of observed age slices (censoring time).
    pub censored: BTreeMap<ItemId, usize>,
    pub censoring_rate: f64,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.events.len() + self.censored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty() && self.censored.is_empty()
    }

    /// `(time, is_event)` for a labeled item.
    pub fn outcome(&self, item: &str) -> Option<(usize, bool)> {
        if let Some(&a) = self.events.get(item) {
            Some((a, true))
        } else {
            self.censored.get(item).map(|&c| (c, false))
        }
    }

    /// Labels of the listed items only.
    pub fn restrict(&self, items: &BTreeSet<ItemId>) -> LabelSet {
        let keep = |m: &BTreeMap<ItemId, usize>| -> BTreeMap<ItemId, usize> {
            m.iter()
                .filter(|(id, _)| items.contains(*id))
                .map(|(id, &t)| (id.clone(), t))
                .collect()
        };
        let mut out = LabelSet {
            events: keep(&self.events),
            censored: keep(&self.censored),
            censoring_rate: 0.0,
        };
        out.recompute_rate();
        out
    }

    fn recompute_rate(&mut self) {
        let n = self.len();
        self.censoring_rate = if n == 0 {
            0.0
        } else {
            self.censored.len() as f64 / n as f64
        };
    }

    /// Tab-separated `item_id, event_age, censored`; for censored items
    /// `event_age` holds the censoring time.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        w.write_record(["item_id", "event_age", "censored"])?;
        let mut rows: Vec<(&ItemId, usize, bool)> = self
            .events
            .iter()
            .map(|(id, &a)| (id, a, false))
            .chain(self.censored.iter().map(|(id, &c)| (id, c, true)))
            .collect();
        rows.sort();
        for (id, age, censored) in rows {
            w.write_record([
                id.as_str(),
                &age.to_string(),
                if censored { "1" } else { "0" },
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file);
        let mut out = LabelSet::default();
        for row in r.records() {
            let row = row?;
            let bad = || Error::Parse(format!("malformed label row {:?}", row));
            let id = row.get(0).ok_or_else(bad)?.to_string();
            let age: usize = row.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            match row.get(2).ok_or_else(bad)? {
                "0" => out.events.insert(id, age),
                "1" => out.censored.insert(id, age),
                _ => return Err(bad()),
            };
        }
        out.recompute_rate();
        Ok(out)
    }
}

/// Mid-rank percentile: `(below + 0.5 * equal) / n`.
pub fn percentile_rank(value: f64, population: &[f64]) -> Result<f64> {
    if population.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let below = population.iter().filter(|&&x| x < value).count();
    let equal = population.iter().filter(|&&x| x == value).count();
    Ok((below as f64 + 0.5 * equal as f64) / population.len() as f64)
}

/// Feedback values of exposed items, grouped by absolute time slice and
/// kept sorted for O(log n) rank queries.
#[derive(Debug, Clone, Default)]
pub struct SlicePopulations {
    by_slice: BTreeMap<i64, Vec<f64>>,
}

impl SlicePopulations {
    pub fn build<'a>(timelines: impl IntoIterator<Item = &'a ItemTimeline>, feature: &str) -> Self {
        let mut by_slice: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for tl in timelines {
            let Some(series) = tl.feature(feature) else {
                continue;
            };
            for age in 0..tl.observed_len.min(tl.len()) {
                if tl.exposures[age] == 0 {
                    continue;
                }
                if let Some(v) = series[age] {
                    by_slice
                        .entry(tl.upload_slice + age as i64)
                        .or_default()
                        .push(v);
                }
            }
        }
        for v in by_slice.values_mut() {
            v.sort_by(f64::total_cmp);
        }
        SlicePopulations { by_slice }
    }

    pub fn get(&self, slice: i64) -> Option<&[f64]> {
        self.by_slice.get(&slice).map(Vec::as_slice)
    }

    /// Mid-rank percentile of `value` within the slice population.
    pub fn rank(&self, slice: i64, value: f64) -> Result<f64> {
        let pop = self.by_slice.get(&slice).ok_or(Error::EmptyPopulation)?;
        if pop.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        let below = pop.partition_point(|&x| x < value);
        let upto = pop.partition_point(|&x| x <= value);
        Ok((below as f64 + 0.5 * (upto - below) as f64) / pop.len() as f64)
    }
}

/// Per-age vitality over the observed part of the timeline.
pub fn vitality_series(
    timeline: &ItemTimeline,
    populations: &SlicePopulations,
    params: &VitalityParams,
) -> Vec<f64> {
    let series = timeline.feature(&params.feedback_feature);
    (0..timeline.observed_len.min(timeline.len()))
        .map(|age| {
            let value = series.and_then(|s| s[age]);
            match (timeline.exposures[age] > 0, value) {
                (true, Some(v)) => {
                    let r = populations
                        .rank(timeline.upload_slice + age as i64, v)
                        .expect("an exposed item is a member of its own slice population");
                    r - params.beta_e
                }
                // exposed without a value for the chosen feature scores as unexposed
                _ => -params.beta_ne,
            }
        })
        .collect()
}

/// First age whose running vitality sum is strictly below `beta_d`.
pub fn detect_deactivation(vitality: &[f64], beta_d: f64) -> Option<usize> {
    let mut total = 0.0;
    for (age, v) in vitality.iter().enumerate() {
        total += v;
        if total < beta_d {
            return Some(age);
        }
    }
    None
}

/// Labels every timeline with at least one observed slice.
pub fn label_corpus(
    timelines: &BTreeMap<ItemId, ItemTimeline>,
    params: &VitalityParams,
) -> Result<LabelSet> {
    params.validate()?;
    let populations = SlicePopulations::build(timelines.values(), &params.feedback_feature);
    let mut labels = LabelSet::default();
    for (id, tl) in timelines {
        if tl.observed_len == 0 {
            continue;
        }
        let v = vitality_series(tl, &populations, params);
        match detect_deactivation(&v, params.beta_d) {
            Some(age) => labels.events.insert(id.clone(), age),
            None => labels.censored.insert(id.clone(), v.len()),
        };
    }
    labels.recompute_rate();
    if labels.censoring_rate > 0.9 {
        log::warn!(
            "censoring rate {:.3} exceeds 0.9; consider adjusting beta_e/beta_ne/beta_d",
            labels.censoring_rate
        );
    }
    Ok(labels)
}
