//! Blending backbone relevance with item timeliness and cutting top-k lists.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{slice_index, ItemCatalog, ItemId, TimeGrid};
use crate::error::{Error, Result};
use crate::grv_model::GrvCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelinessSource {
    Grv,
    UploadTime,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    MinmaxPerRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub gamma: f64,
    pub timeliness_source: TimelinessSource,
    pub k_list: Vec<usize>,
    pub normalization: Normalization,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            gamma: 0.2,
            timeliness_source: TimelinessSource::Grv,
            k_list: vec![5, 10],
            normalization: Normalization::MinmaxPerRequest,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0,1], got {}",
                self.gamma
            )));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::InvalidConfig(
                "k_list must hold positive values".into(),
            ));
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(1)
    }
}

/// Per-request min-max scaling to [0,1]; a constant input maps to 0.5.
pub fn normalize_scores(scores: &BTreeMap<ItemId, f64>) -> BTreeMap<ItemId, f64> {
    let vals: Vec<f64> = scores.values().copied().collect();
    scores.keys().cloned().zip(normalize_slice(&vals)).collect()
}

/// [`normalize_scores`] over a plain slice.
pub fn normalize_slice(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let span = hi - lo;
    scores
        .iter()
        .map(|&s| if span > 0.0 { (s - lo) / span } else { 0.5 })
        .collect()
}

/// Normalized upload time `(T_i0 - min T_0) / (t - min T_0)`, 0 when the
/// denominator vanishes.
pub fn upload_time_value(upload: i64, t: i64, min_upload: i64) -> f64 {
    let denom = (t - min_upload) as f64;
    if denom <= 0.0 {
        return 0.0;
    }
    ((upload - min_upload) as f64 / denom).clamp(0.0, 1.0)
}

/// Upload-time timeliness for every candidate at request time `t`.
pub fn upload_time_timeliness(
    candidates: &[ItemId],
    t: i64,
    catalog: &ItemCatalog,
) -> BTreeMap<ItemId, f64> {
    let uploads: Vec<(&ItemId, i64)> = candidates
        .iter()
        .filter_map(|id| catalog.upload_time(id).map(|u| (id, u)))
        .collect();
    let min_upload = uploads.iter().map(|(_, u)| *u).min().unwrap_or(t);
    uploads
        .into_iter()
        .map(|(id, u)| (id.clone(), upload_time_value(u, t, min_upload)))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelinessCounters {
    /// Item still inside its observation window; given the fresh prior 1.0.
    pub too_new: u64,
    /// Age beyond the prediction window; last value reused.
    pub clamped: u64,
    /// Mature item without a predicted curve; given 1.0.
    pub missing_curve: u64,
}

impl TimelinessCounters {
    pub fn merge(&mut self, other: &TimelinessCounters) {
        self.too_new += other.too_new;
        self.clamped += other.clamped;
        self.missing_curve += other.missing_curve;
    }
}

/// Serve-time GRV lookup by item age.
#[derive(Debug, Clone)]
pub struct GrvLookup<'a> {
    pub curves: &'a BTreeMap<ItemId, GrvCurve>,
    pub catalog: &'a ItemCatalog,
    pub grid: TimeGrid,
    pub t_obs: usize,
}

impl GrvLookup<'_> {
    pub fn value(&self, item: &str, t: i64, counters: &mut TimelinessCounters) -> f64 {
        let Some(upload) = self.catalog.upload_time(item) else {
            counters.missing_curve += 1;
            return 1.0;
        };
        let age = slice_index(t, upload, &self.grid);
        if age < self.t_obs as i64 {
            counters.too_new += 1;
            return 1.0;
        }
        let Some(curve) = self.curves.get(item).filter(|c| !c.values.is_empty()) else {
            counters.missing_curve += 1;
            return 1.0;
        };
        let age = age as usize;
        match curve.at_age(age) {
            Some(v) => v,
            None if age < curve.t_obs => curve.values[0],
            None => {
                counters.clamped += 1;
                *curve.values.last().expect("non-empty curve")
            }
        }
    }

    pub fn timeliness(
        &self,
        candidates: &[ItemId],
        t: i64,
        counters: &mut TimelinessCounters,
    ) -> BTreeMap<ItemId, f64> {
        candidates
            .iter()
            .map(|id| (id.clone(), self.value(id, t, counters)))
            .collect()
    }
}

/// `(1 - gamma) * bbm + gamma * timeliness` over identical key sets.
pub fn aggregate(
    bbm: &BTreeMap<ItemId, f64>,
    timeliness: &BTreeMap<ItemId, f64>,
    gamma: f64,
) -> Result<BTreeMap<ItemId, f64>> {
    if bbm.len() != timeliness.len() {
        let odd = bbm
            .keys()
            .find(|k| !timeliness.contains_key(*k))
            .or_else(|| timeliness.keys().find(|k| !bbm.contains_key(*k)))
            .cloned()
            .unwrap_or_default();
        return Err(Error::KeyMismatch(odd));
    }
    bbm.iter()
        .map(|(id, &b)| {
            let t = timeliness
                .get(id)
                .ok_or_else(|| Error::KeyMismatch(id.clone()))?;
            Ok((id.clone(), (1.0 - gamma) * b + gamma * t))
        })
        .collect()
}

/// Descending by score, ties by ascending item id.
pub fn topk(scores: &BTreeMap<ItemId, f64>, k: usize) -> Vec<(ItemId, f64)> {
    let ids: Vec<&ItemId> = scores.keys().collect();
    let vals: Vec<f64> = scores.values().copied().collect();
    topk_indices(&vals, k)
        .into_iter()
        .map(|i| (ids[i].clone(), vals[i]))
        .collect()
}

/// Positions of the `k` largest scores. Ties go to the lower position, which
/// is the lower item id whenever the scores are aligned with sorted ids.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then_with(|| a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item_id: ItemId,
    pub bbm_raw: f64,
    pub bbm_norm: f64,
    pub timeliness: f64,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub request_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.entries.iter().map(|e| &e.item_id)
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.item_id == item)
            .map(|p| p + 1)
    }
}

/// Normalizes, blends and cuts one request's list.
pub fn rerank(
    request_id: &str,
    bbm_raw: &BTreeMap<ItemId, f64>,
    timeliness: &BTreeMap<ItemId, f64>,
    gamma: f64,
    k: usize,
) -> Result<RankedList> {
    if bbm_raw.len() != timeliness.len() || bbm_raw.keys().any(|id| !timeliness.contains_key(id)) {
        // reuse the key diagnostics of `aggregate`
        aggregate(bbm_raw, timeliness, gamma)?;
    }
    let ids: Vec<ItemId> = bbm_raw.keys().cloned().collect();
    let raw: Vec<f64> = bbm_raw.values().copied().collect();
    let tl: Vec<f64> = timeliness.values().copied().collect();
    rerank_dense(request_id, &ids, &raw, &tl, gamma, k)
}

/// [`rerank`] over parallel slices; `ids` must be sorted ascending so that
/// position order is item-id order.
pub fn rerank_dense(
    request_id: &str,
    ids: &[ItemId],
    bbm_raw: &[f64],
    timeliness: &[f64],
    gamma: f64,
    k: usize,
) -> Result<RankedList> {
    if bbm_raw.len() != ids.len() || timeliness.len() != ids.len() {
        return Err(Error::Dimension {
            expected: ids.len(),
            got: bbm_raw.len().min(timeliness.len()),
        });
    }
    let norm = normalize_slice(bbm_raw);
    let blended: Vec<f64> = norm
        .iter()
        .zip(timeliness)
        .map(|(b, t)| (1.0 - gamma) * b + gamma * t)
        .collect();
    let entries = topk_indices(&blended, k)
        .into_iter()
        .map(|i| RankedEntry {
            item_id: ids[i].clone(),
            bbm_raw: bbm_raw[i],
            bbm_norm: norm[i],
            timeliness: timeliness[i],
            final_score: blended[i],
        })
        .collect();
    Ok(RankedList {
        request_id: request_id.to_string(),
        entries,
    })
}

/// Backbone-only list: raw scores, no normalization or blending.
pub fn backbone_list(request_id: &str, ids: &[ItemId], bbm_raw: &[f64], k: usize) -> RankedList {
    let entries = topk_indices(bbm_raw, k)
        .into_iter()
        .map(|i| RankedEntry {
            item_id: ids[i].clone(),
            bbm_raw: bbm_raw[i],
            bbm_norm: f64::NAN,
            timeliness: f64::NAN,
            final_score: bbm_raw[i],
        })
        .collect();
    RankedList {
        request_id: request_id.to_string(),
        entries,
    }
}

pub fn write_rankings_tsv(path: &Path, lists: &[RankedList]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record([
        "request_id",
        "rank",
        "item_id",
        "final",
        "bbm_norm",
        "timeliness",
    ])?;
    for list in lists {
        for (k, e) in list.entries.iter().enumerate() {
            w.write_record([
                list.request_id.as_str(),
                &(k + 1).to_string(),
                e.item_id.as_str(),
                &format!("{:.12e}", e.final_score),
                &format!("{:.12e}", e.bbm_norm),
                &format!("{:.12e}", e.timeliness),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads rankings back; `bbm_raw` is not stored and comes back as NaN.
pub fn read_rankings_tsv(path: &Path) -> Result<Vec<RankedList>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file);
    let mut lists: Vec<RankedList> = Vec::new();
    for row in r.records() {
        let row = row?;
        let bad = || Error::Parse(format!("malformed ranking row {:?}", row));
        let num =
            |i: usize| -> Result<f64> { row.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let rid = row.get(0).ok_or_else(bad)?;
        let entry = RankedEntry {
            item_id: row.get(2).ok_or_else(bad)?.to_string(),
            bbm_raw: f64::NAN,
            final_score: num(3)?,
            bbm_norm: num(4)?,
            timeliness: num(5)?,
        };
        match lists.last_mut() {
            Some(l) if l.request_id == rid => l.entries.push(entry),
            _ => lists.push(RankedList {
                request_id: rid.to_string(),
                entries: vec![entry],
            }),
        }
    }
    Ok(lists)
}
