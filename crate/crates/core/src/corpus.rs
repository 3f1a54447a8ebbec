//! Impression log ingestion and per-item feedback timelines.
//!
//! Raw impressions are bucketed onto a fixed [`TimeGrid`] and re-indexed by
//! item age (slices since upload), which is the time axis every downstream
//! stage works on.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = String;
pub type UserId = String;

/// Name of the click-through-rate feedback series every timeline carries.
pub const CTR: &str = "ctr";

/// Hourly slices.
pub const DEFAULT_SLICE_SECONDS: u64 = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub slice_seconds: u64,
    pub origin: i64,
}

impl TimeGrid {
    pub fn new(slice_seconds: u64, origin: i64) -> Result<Self> {
        if slice_seconds == 0 {
            return Err(Error::InvalidConfig(
                "slice_seconds must be positive".into(),
            ));
        }
        Ok(TimeGrid {
            slice_seconds,
            origin,
        })
    }

    pub fn hourly(origin: i64) -> Self {
        TimeGrid {
            slice_seconds: DEFAULT_SLICE_SECONDS,
            origin,
        }
    }

    /// Absolute grid index of a timestamp.
    pub fn slice_of(&self, timestamp: i64) -> i64 {
        slice_index(timestamp, self.origin, self)
    }

    /// Timestamp at the start of an absolute slice.
    pub fn slice_start(&self, slice: i64) -> i64 {
        self.origin + slice * self.slice_seconds as i64
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid::hourly(0)
    }
}

/// `floor((timestamp - reference) / slice_seconds)`; negative before `reference`.
pub fn slice_index(timestamp: i64, reference: i64, grid: &TimeGrid) -> i64 {
    (timestamp - reference).div_euclid(grid.slice_seconds as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: i64,
    pub click: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_feedback: BTreeMap<String, f64>,
}

impl ImpressionRecord {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        timestamp: i64,
        click: bool,
    ) -> Self {
        ImpressionRecord {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
            click,
            extra_feedback: BTreeMap::new(),
        }
    }
}

/// Column mapping for the impressions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpressionSchema {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: String,
    pub click: String,
    pub extra_feedback: Vec<String>,
}

impl Default for ImpressionSchema {
    fn default() -> Self {
        ImpressionSchema {
            user_id: "user_id".into(),
            item_id: "item_id".into(),
            timestamp: "timestamp".into(),
            click: "click".into(),
            extra_feedback: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectsReport {
    pub rejects: Vec<Reject>,
}

impl RejectsReport {
    pub fn push(&mut self, line_no: usize, reason: impl Into<String>) {
        self.rejects.push(Reject {
            line_no,
            reason: reason.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.rejects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rejects.is_empty()
    }

    pub fn extend(&mut self, other: RejectsReport) {
        self.rejects.extend(other.rejects);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["line_no", "reason"])?;
        for r in &self.rejects {
            w.write_record([r.line_no.to_string(), r.reason.clone()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedImpressions {
    pub records: Vec<ImpressionRecord>,
    pub rejects: RejectsReport,
    pub rows: usize,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema {
            column: name.to_string(),
        })
}

fn parse_click(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "1" | "true" | "True" => Ok(true),
        "0" | "false" | "False" => Ok(false),
        other => Err(format!("click must be 0 or 1, got `{other}`")),
    }
}

/// Loads an impressions CSV. Malformed rows are collected as rejects; more
/// than half rejected is a hard error.
pub fn load_impressions(path: &Path, schema: &ImpressionSchema) -> Result<LoadedImpressions> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers()?.clone();

    let user_col = column(&headers, &schema.user_id)?;
    let item_col = column(&headers, &schema.item_id)?;
    let ts_col = column(&headers, &schema.timestamp)?;
    let click_col = column(&headers, &schema.click)?;
    let extra_cols = schema
        .extra_feedback
        .iter()
        .map(|name| column(&headers, name).map(|idx| (name.clone(), idx)))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut rejects = RejectsReport::default();
    let mut rows = 0usize;

    for row in reader.records() {
        rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(rows + 1);
                rejects.push(line, format!("unreadable row: {e}"));
                continue;
            }
        };
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(rows + 1);
        match parse_row(&row, user_col, item_col, ts_col, click_col, &extra_cols) {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(line, reason),
        }
    }

    if rows > 0 && rejects.len() * 2 > rows {
        return Err(Error::TooManyRejects {
            rejected: rejects.len(),
            total: rows,
        });
    }
    log::info!(
        "loaded {} impressions from {} ({} rejected)",
        records.len(),
        path.display(),
        rejects.len()
    );
    Ok(LoadedImpressions {
        records,
        rejects,
        rows,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    user_col: usize,
    item_col: usize,
    ts_col: usize,
    click_col: usize,
    extra_cols: &[(String, usize)],
) -> std::result::Result<ImpressionRecord, String> {
    let field = |idx: usize, name: &str| -> std::result::Result<&str, String> {
        row.get(idx)
            .ok_or_else(|| format!("missing field `{name}`"))
    };
    let user_id = field(user_col, "user_id")?.trim();
    let item_id = field(item_col, "item_id")?.trim();
    if user_id.is_empty() || item_id.is_empty() {
        return Err("empty user or item id".into());
    }
    let ts_raw = field(ts_col, "timestamp")?.trim();
    let timestamp: i64 = ts_raw
        .parse()
        .map_err(|_| format!("unparseable timestamp `{ts_raw}`"))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let click = parse_click(field(click_col, "click")?)?;
    let mut extra_feedback = BTreeMap::new();
    for (name, idx) in extra_cols {
        let raw = field(*idx, name)?.trim();
        let v: f64 = raw
            .parse()
            .map_err(|_| format!("unparseable `{name}` value `{raw}`"))?;
        if !v.is_finite() {
            return Err(format!("non-finite `{name}` value"));
        }
        extra_feedback.insert(name.clone(), v);
    }
    Ok(ImpressionRecord {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        timestamp,
        click,
        extra_feedback,
    })
}

pub fn write_impressions_csv(path: &Path, records: &[ImpressionRecord]) -> Result<()> {
    let extra: BTreeSet<&String> = records
        .iter()
        .flat_map(|r| r.extra_feedback.keys())
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "user_id".to_string(),
        "item_id".into(),
        "timestamp".into(),
        "click".into(),
    ];
    header.extend(extra.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.user_id.clone(),
            r.item_id.clone(),
            r.timestamp.to_string(),
            u8::from(r.click).to_string(),
        ];
        for name in &extra {
            row.push(
                r.extra_feedback
                    .get(*name)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub entries: BTreeMap<ItemId, i64>,
    pub new_item_flags: BTreeMap<ItemId, bool>,
}

impl ItemCatalog {
    pub fn from_entries(entries: impl IntoIterator<Item = (ItemId, i64)>) -> Self {
        ItemCatalog {
            entries: entries.into_iter().collect(),
            new_item_flags: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn upload_time(&self, item: &str) -> Option<i64> {
        self.entries.get(item).copied()
    }

    pub fn is_new(&self, item: &str) -> bool {
        self.new_item_flags.get(item).copied().unwrap_or(false)
    }

    pub fn new_items(&self) -> impl Iterator<Item = &ItemId> {
        self.new_item_flags
            .iter()
            .filter(|(_, &f)| f)
            .map(|(id, _)| id)
    }

    /// Restricts the catalog to `items`, keeping their flags.
    pub fn subset<'a>(&self, items: impl IntoIterator<Item = &'a ItemId>) -> ItemCatalog {
        let mut out = ItemCatalog::default();
        for id in items {
            if let Some(&t) = self.entries.get(id) {
                out.entries.insert(id.clone(), t);
                if let Some(&f) = self.new_item_flags.get(id) {
                    out.new_item_flags.insert(id.clone(), f);
                }
            }
        }
        out
    }

    /// Flags the latest-uploaded `fraction` of `candidates` as new items
    /// (ties on upload time broken by item id). Clears previous flags.
    pub fn flag_new_items<'a>(
        &mut self,
        candidates: impl IntoIterator<Item = &'a ItemId>,
        fraction: f64,
    ) {
        let mut pool: Vec<(i64, &ItemId)> = candidates
            .into_iter()
            .filter_map(|id| self.entries.get(id).map(|&t| (t, id)))
            .collect();
        pool.sort();
        let n_new = ((pool.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let cut = pool.len() - n_new.min(pool.len());
        let flags: BTreeMap<ItemId, bool> = pool
            .iter()
            .enumerate()
            .map(|(rank, (_, id))| ((*id).clone(), rank >= cut))
            .collect();
        self.new_item_flags = flags;
    }
}

pub fn load_items(path: &Path) -> Result<ItemCatalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let id_col = column(&headers, "item_id")?;
    let up_col = column(&headers, "upload_time")?;
    let mut entries = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        let raw = row.get(up_col).unwrap_or("").trim();
        let t: i64 = raw
            .parse()
            .map_err(|_| Error::Parse(format!("items line {line}: bad upload_time `{raw}`")))?;
        entries.insert(id, t);
    }
    Ok(ItemCatalog::from_entries(entries))
}

pub fn write_items_csv(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item_id", "upload_time"])?;
    let mut rows: Vec<(&ItemId, &i64)> = catalog.entries.iter().collect();
    rows.sort_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)));
    for (id, t) in rows {
        w.write_record([id.as_str(), &t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-item feedback indexed by age slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTimeline {
    pub item_id: ItemId,
    pub upload_slice: i64,
    /// Number of leading age slices covered by the log (the rest is unobserved).
    pub observed_len: usize,
    pub exposures: Vec<u32>,
    pub clicks: Vec<u32>,
    /// `None` marks a slice without exposure, where feedback is undefined.
    pub feedback: BTreeMap<String, Vec<Option<f64>>>,
}

impl ItemTimeline {
    pub fn len(&self) -> usize {
        self.exposures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exposures.is_empty()
    }

    pub fn ctr(&self) -> &[Option<f64>] {
        &self.feedback[CTR]
    }

    pub fn feature(&self, name: &str) -> Option<&[Option<f64>]> {
        self.feedback.get(name).map(Vec::as_slice)
    }

    pub fn total_exposures(&self) -> u64 {
        self.exposures.iter().map(|&e| e as u64).sum()
    }

    /// Pooled clicks/exposures over ages `[from, to)`; `None` if unexposed.
    pub fn pooled_ctr(&self, from: usize, to: usize) -> Option<f64> {
        let to = to.min(self.len());
        if from >= to {
            return None;
        }
        let e: u64 = self.exposures[from..to].iter().map(|&x| x as u64).sum();
        let c: u64 = self.clicks[from..to].iter().map(|&x| x as u64).sum();
        (e > 0).then(|| c as f64 / e as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TimelineBuild {
    pub timelines: BTreeMap<ItemId, ItemTimeline>,
    pub rejects: RejectsReport,
    /// Records at ages `>= horizon_slices`, dropped without rejecting.
    pub beyond_horizon: usize,
}

/// Aggregates impressions into per-item age timelines of length
/// `horizon_slices`. The log end (for `observed_len`) is the latest record
/// timestamp.
pub fn build_timelines(
    records: &[ImpressionRecord],
    catalog: &ItemCatalog,
    grid: &TimeGrid,
    horizon_slices: usize,
) -> TimelineBuild {
    let log_end = records.iter().map(|r| r.timestamp).max();
    build_timelines_until(records, catalog, grid, horizon_slices, log_end)
}

/// As [`build_timelines`] with an explicit last observed timestamp.
pub fn build_timelines_until(
    records: &[ImpressionRecord],
    catalog: &ItemCatalog,
    grid: &TimeGrid,
    horizon_slices: usize,
    log_end: Option<i64>,
) -> TimelineBuild {
    let extra_names: BTreeSet<&String> = records
        .iter()
        .flat_map(|r| r.extra_feedback.keys())
        .collect();

    struct Acc {
        exposures: Vec<u32>,
        clicks: Vec<u32>,
        extra_sum: BTreeMap<String, Vec<f64>>,
        extra_n: BTreeMap<String, Vec<u32>>,
    }

    let mut accs: BTreeMap<&ItemId, Acc> = catalog
        .entries
        .keys()
        .map(|id| {
            (
                id,
                Acc {
                    exposures: vec![0; horizon_slices],
                    clicks: vec![0; horizon_slices],
                    extra_sum: extra_names
                        .iter()
                        .map(|n| ((*n).clone(), vec![0.0; horizon_slices]))
                        .collect(),
                    extra_n: extra_names
                        .iter()
                        .map(|n| ((*n).clone(), vec![0; horizon_slices]))
                        .collect(),
                },
            )
        })
        .collect();

    let mut rejects = RejectsReport::default();
    let mut beyond_horizon = 0usize;

    for (idx, rec) in records.iter().enumerate() {
        let Some(upload) = catalog.upload_time(&rec.item_id) else {
            rejects.push(idx, format!("unknown item `{}`", rec.item_id));
            continue;
        };
        let age = slice_index(rec.timestamp, upload, grid);
        if age < 0 {
            rejects.push(
                idx,
                format!("impression of `{}` before its upload time", rec.item_id),
            );
            continue;
        }
        let age = age as usize;
        if age >= horizon_slices {
            beyond_horizon += 1;
            continue;
        }
        let acc = accs
            .get_mut(&rec.item_id)
            .expect("catalog item has an accumulator");
        acc.exposures[age] += 1;
        acc.clicks[age] += u32::from(rec.click);
        for (name, v) in &rec.extra_feedback {
            acc.extra_sum.get_mut(name).expect("known feature")[age] += v;
            acc.extra_n.get_mut(name).expect("known feature")[age] += 1;
        }
    }

    let timelines =
        accs.into_iter()
            .map(|(id, acc)| {
                let upload = catalog.entries[id];
                let observed_len = match log_end {
                    Some(end) => (slice_index(end, upload, grid) + 1)
                        .clamp(0, horizon_slices as i64) as usize,
                    None => 0,
                };
                let ctr: Vec<Option<f64>> = acc
                    .exposures
                    .iter()
                    .zip(&acc.clicks)
                    .map(|(&e, &c)| (e > 0).then(|| c as f64 / e as f64))
                    .collect();
                let mut feedback = BTreeMap::new();
                feedback.insert(CTR.to_string(), ctr);
                for (name, sums) in acc.extra_sum {
                    let ns = &acc.extra_n[&name];
                    let series = sums
                        .iter()
                        .zip(ns)
                        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                        .collect();
                    feedback.insert(name, series);
                }
                let timeline = ItemTimeline {
                    item_id: id.clone(),
                    upload_slice: grid.slice_of(upload),
                    observed_len,
                    exposures: acc.exposures,
                    clicks: acc.clicks,
                    feedback,
                };
                (id.clone(), timeline)
            })
            .collect();

    TimelineBuild {
        timelines,
        rejects,
        beyond_horizon,
    }
}
