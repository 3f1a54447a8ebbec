//! Stage orchestration with on-disk artifacts and manifests.
//!
//! Each stage reads its upstream artifacts from the output directory, writes
//! its own, and records a manifest holding a hash of the configuration
//! sections it depends on plus SHA-256 digests of its inputs and outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    fit_mf, fit_popularity, load_external_scores, score, MfHyper, Request, Scorer,
};
use crate::corpus::{
    build_timelines, load_impressions, load_items, ImpressionRecord, ImpressionSchema, ItemCatalog,
    ItemId, ItemTimeline, RejectsReport, TimeGrid, CTR,
};
use crate::error::{Error, Result};
use crate::evaluate::{
    group_exposure_report, grv_bucket_eval, write_buckets_tsv, write_group_exposure_tsv,
    BucketReport, MetricsReport,
};
use crate::grv_model::{
    build_design_matrix, fit_cox, predict_grv, read_grv_tsv, write_grv_tsv, CoxModel, CoxOptions,
    GrvCurve,
};
use crate::labeler::{label_corpus, LabelSet, VitalityParams};
use crate::rerank::{
    backbone_list, read_rankings_tsv, rerank_dense, upload_time_value, write_rankings_tsv,
    AggregationConfig, GrvLookup, RankedList, TimelinessCounters, TimelinessSource,
};
use crate::synthgen::{generate, read_ground_truth_tsv, write_corpus, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Impressions CSV; the synth stage output when absent.
    pub impressions: Option<PathBuf>,
    /// Items CSV; the synth stage output when absent.
    pub items: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            impressions: None,
            items: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub slice_seconds: u64,
    pub origin: i64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            slice_seconds: 3600,
            origin: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Popularity,
    Mf,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub mf: MfHyper,
    /// Scores file for the `external` kind.
    pub external_scores: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Mf,
            mf: MfHyper::default(),
            external_scores: None,
        }
    }
}

/// Time split and item roles. Slices count from the grid origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Backbone training uses impressions before this slice.
    pub train_end_slice: i64,
    /// Evaluation requests are clicks in `[train_end_slice, eval_end_slice)`.
    pub eval_end_slice: i64,
    /// Share of evaluation requests assigned to validation; the rest is test.
    pub valid_fraction: f64,
    /// Share of items reserved for recommendation; the others train the GRV model.
    pub rec_item_fraction: f64,
    /// Latest-uploaded share of the candidate pool flagged as new.
    pub new_item_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_end_slice: 72,
            eval_end_slice: 120,
            valid_fraction: 0.5,
            rec_item_fraction: 0.2,
            new_item_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSearchConfig {
    pub gammas: Vec<f64>,
    /// Selection cutoff for NDCG and N_Cov.
    pub select_k: usize,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        GridSearchConfig {
            gammas: (0..=5).map(|g| g as f64 / 10.0).collect(),
            select_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupReportConfig {
    pub n_groups: usize,
    pub upload_start_slice: i64,
    pub upload_end_slice: i64,
    pub window_start_slice: i64,
    pub window_end_slice: i64,
}

impl Default for GroupReportConfig {
    fn default() -> Self {
        GroupReportConfig {
            n_groups: 4,
            upload_start_slice: 0,
            upload_end_slice: 64,
            window_start_slice: 0,
            window_end_slice: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutureFeedback {
    /// Pooled observed CTR over ages `[age, t_obs + t_pred)`.
    ObservedCtr,
    /// Expected click probability from the synthetic ground truth.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BucketConfig {
    pub age: usize,
    pub n_buckets: usize,
    pub future_feedback: FutureFeedback,
    /// Items need at least this many impressions over ages `[0, t_obs)`.
    pub min_obs_impressions: u64,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig {
            age: 48,
            n_buckets: 10,
            future_feedback: FutureFeedback::GroundTruth,
            min_obs_impressions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub grid: GridConfig,
    pub t_obs: usize,
    pub t_pred: usize,
    pub features: Vec<String>,
    pub drop_censored: bool,
    /// Cox training keeps items with at least this many impressions over ages `[0, t_obs)`.
    pub fit_min_obs_impressions: u64,
    pub vitality: VitalityParams,
    pub cox: CoxOptions,
    pub backbone: BackboneConfig,
    pub aggregation: AggregationConfig,
    pub split: SplitConfig,
    pub grid_search: GridSearchConfig,
    pub group_report: GroupReportConfig,
    pub bucket_eval: BucketConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            grid: GridConfig::default(),
            t_obs: 24,
            t_pred: 144,
            features: vec![CTR.to_string()],
            drop_censored: false,
            fit_min_obs_impressions: 0,
            vitality: VitalityParams::default(),
            cox: CoxOptions::default(),
            backbone: BackboneConfig::default(),
            aggregation: AggregationConfig::default(),
            split: SplitConfig::default(),
            grid_search: GridSearchConfig::default(),
            group_report: GroupReportConfig::default(),
            bucket_eval: BucketConfig::default(),
            synth: SynthConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    /// Applies the top-level seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.backbone.mf.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs == 0 || self.t_pred == 0 {
            return Err(Error::InvalidConfig(
                "t_obs and t_pred must be positive".into(),
            ));
        }
        if self.paths.impressions.is_none() && self.t_obs + self.t_pred > self.synth.horizon_slices
        {
            return Err(Error::InvalidConfig(format!(
                "t_obs + t_pred = {} exceeds the synthetic horizon of {} slices",
                self.t_obs + self.t_pred,
                self.synth.horizon_slices
            )));
        }
        if self.features.is_empty() {
            return Err(Error::InvalidConfig("features must not be empty".into()));
        }
        self.vitality.validate()?;
        self.aggregation.validate()?;
        if self.split.eval_end_slice <= self.split.train_end_slice {
            return Err(Error::InvalidConfig(
                "eval_end_slice must exceed train_end_slice".into(),
            ));
        }
        for (name, v) in [
            ("valid_fraction", self.split.valid_fraction),
            ("rec_item_fraction", self.split.rec_item_fraction),
            ("new_item_fraction", self.split.new_item_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0,1], got {v}"
                )));
            }
        }
        if self
            .grid_search
            .gammas
            .iter()
            .any(|g| !(0.0..=1.0).contains(g))
        {
            return Err(Error::InvalidConfig(
                "grid-search gammas must lie in [0,1]".into(),
            ));
        }
        if self.bucket_eval.age < self.t_obs || self.bucket_eval.age >= self.t_obs + self.t_pred {
            return Err(Error::InvalidConfig(format!(
                "bucket age {} lies outside the prediction window [{}, {})",
                self.bucket_eval.age,
                self.t_obs,
                self.t_obs + self.t_pred
            )));
        }
        TimeGrid::new(self.grid.slice_seconds, self.grid.origin)?;
        Ok(())
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid {
            slice_seconds: self.grid.slice_seconds,
            origin: self.grid.origin,
        }
    }

    /// Timestamp at which `slice` starts.
    pub fn slice_time(&self, slice: i64) -> i64 {
        self.time_grid().slice_start(slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Label,
    Fit,
    Predict,
    Rerank,
    Eval,
    GridSearch,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Label,
        Stage::Fit,
        Stage::Predict,
        Stage::Rerank,
        Stage::Eval,
        Stage::GridSearch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Label => "label",
            Stage::Fit => "fit",
            Stage::Predict => "predict",
            Stage::Rerank => "rerank",
            Stage::Eval => "eval",
            Stage::GridSearch => "grid-search",
        }
    }
}

fn obs_impressions(tl: &ItemTimeline, t_obs: usize) -> u64 {
    tl.exposures.iter().take(t_obs).map(|&x| x as u64).sum()
}

/// Configuration sections that determine a stage's outputs, including those
/// of its upstream stages.
fn stage_fingerprint(config: &PipelineConfig, stage: Stage) -> serde_json::Value {
    let mut v = serde_json::Map::new();
    let mut put = |k: &str, x: serde_json::Value| {
        v.insert(k.to_string(), x);
    };
    let synthetic = config.paths.impressions.is_none();
    if synthetic {
        put("synth", json(&config.synth));
    }
    if stage >= Stage::Label {
        put(
            "paths",
            json(&(&config.paths.impressions, &config.paths.items)),
        );
        put("grid", json(&config.grid));
        put("windows", json(&(config.t_obs, config.t_pred)));
        put("vitality", json(&config.vitality));
        put(
            "item_split",
            json(&(config.split.rec_item_fraction, config.seed)),
        );
    }
    if stage >= Stage::Fit {
        put("features", json(&config.features));
        put("drop_censored", json(&config.drop_censored));
        put(
            "fit_min_obs_impressions",
            json(&config.fit_min_obs_impressions),
        );
        put("cox", json(&config.cox));
    }
    if stage >= Stage::Rerank {
        put("backbone", json(&config.backbone));
        put("aggregation", json(&config.aggregation));
        put("split", json(&config.split));
    }
    if stage >= Stage::Eval {
        put("group_report", json(&config.group_report));
        put("bucket_eval", json(&config.bucket_eval));
    }
    if stage >= Stage::GridSearch {
        put("grid_search", json(&config.grid_search));
    }
    serde_json::Value::Object(v)
}

fn json<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).expect("config sections serialize to JSON")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn stage_hash(config: &PipelineConfig, stage: Stage) -> String {
    let bytes =
        serde_json::to_vec(&stage_fingerprint(config, stage)).expect("fingerprint serializes");
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// File name -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Items used to fit the GRV model versus items used for recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSplit {
    pub grv_items: Vec<ItemId>,
    pub rec_items: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub request: Request,
    pub positive: ItemId,
    pub split: EvalSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub source: TimelinessSource,
    pub gamma: f64,
    pub split: EvalSplit,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub rows: Vec<GridRow>,
    /// Gamma chosen on validation for the configured timeliness source.
    pub selected_gamma: f64,
    pub select_k: usize,
}

impl GridSearchResult {
    pub fn row(&self, source: TimelinessSource, gamma: f64, split: EvalSplit) -> Option<&GridRow> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.split == split && (r.gamma - gamma).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankStats {
    pub n_requests: usize,
    pub n_pool_items: usize,
    pub timeliness: TimelinessCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub grv_spearman: f64,
    pub history_spearman: f64,
    pub n_items: usize,
}

/// Everything the ranking stages share: requests, the candidate pool and
/// per-request backbone and timeliness vectors aligned with `pool_ids`.
pub struct RankingInputs {
    pub requests: Vec<EvalRequest>,
    pub pool: ItemCatalog,
    pub pool_ids: Vec<ItemId>,
    pub scores: Vec<Vec<f64>>,
    pub grv: Vec<Vec<f64>>,
    pub upload_time: Vec<Vec<f64>>,
    pub counters: TimelinessCounters,
}

impl RankingInputs {
    pub fn timeliness(&self, source: TimelinessSource, request: usize) -> Vec<f64> {
        match source {
            TimelinessSource::Grv => self.grv[request].clone(),
            TimelinessSource::UploadTime => self.upload_time[request].clone(),
            TimelinessSource::None => vec![0.0; self.pool_ids.len()],
        }
    }

    /// Reranked lists for every request, in request order.
    pub fn rank(&self, source: TimelinessSource, gamma: f64, k: usize) -> Result<Vec<RankedList>> {
        let gamma = if source == TimelinessSource::None {
            0.0
        } else {
            gamma
        };
        (0..self.requests.len())
            .into_par_iter()
            .map(|r| {
                let t = self.timeliness(source, r);
                rerank_dense(
                    &self.requests[r].request.request_id,
                    &self.pool_ids,
                    &self.scores[r],
                    &t,
                    gamma,
                    k,
                )
            })
            .collect()
    }

    pub fn backbone(&self, k: usize) -> Vec<RankedList> {
        (0..self.requests.len())
            .into_par_iter()
            .map(|r| {
                backbone_list(
                    &self.requests[r].request.request_id,
                    &self.pool_ids,
                    &self.scores[r],
                    k,
                )
            })
            .collect()
    }

    pub fn truth(&self, split: Option<EvalSplit>) -> BTreeMap<String, ItemId> {
        self.requests
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| (r.request.request_id.clone(), r.positive.clone()))
            .collect()
    }
}

pub fn select_split(lists: &[RankedList], truth: &BTreeMap<String, ItemId>) -> Vec<RankedList> {
    lists
        .iter()
        .filter(|l| truth.contains_key(&l.request_id))
        .cloned()
        .collect()
}

/// Runs stages against one configuration and output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub force: bool,
}

const MANIFEST_DIR: &str = "manifests";

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, force })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.paths.output_dir
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    fn impressions_path(&self) -> PathBuf {
        self.config
            .paths
            .impressions
            .clone()
            .unwrap_or_else(|| self.artifact("synth/impressions.csv"))
    }

    fn items_path(&self) -> PathBuf {
        self.config
            .paths
            .items
            .clone()
            .unwrap_or_else(|| self.artifact("synth/items.csv"))
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.artifact(&format!("{MANIFEST_DIR}/{}.json", stage.name()))
    }

    /// Fails unless `path` exists; `producer` names the stage that writes it.
    fn require(&self, path: &Path, producer: Stage) -> Result<()> {
        if path.exists() {
            return Ok(());
        }
        Err(Error::MissingArtifact {
            stage: producer.name(),
            path: path.to_path_buf(),
        })
    }

    /// Refuses to build on upstream artifacts produced under a different
    /// configuration, unless forced.
    fn check_upstream(&self, upstream: Stage) -> Result<()> {
        let path = self.manifest_path(upstream);
        if !path.exists() {
            return Ok(());
        }
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(f))?;
        let current = stage_hash(&self.config, upstream);
        if manifest.config_hash != current {
            if self.force {
                log::warn!(
                    "config changed since `{}` ran; continuing because of --force",
                    upstream.name()
                );
                return Ok(());
            }
            return Err(Error::ConfigHashMismatch {
                stage: upstream.name().to_string(),
                recorded: manifest.config_hash,
                current,
            });
        }
        Ok(())
    }

    fn write_manifest(&self, stage: Stage, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let digest = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
                .collect()
        };
        let manifest = Manifest {
            stage: stage.name().to_string(),
            config_hash: stage_hash(&self.config, stage),
            seed: self.config.seed,
            inputs: digest(inputs)?,
            outputs: digest(outputs)?,
        };
        let dir = self.artifact(MANIFEST_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = self.manifest_path(stage);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
        Ok(())
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(self.out_dir()).map_err(|e| Error::io(self.out_dir(), e))
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Synth => self.synth(),
            Stage::Label => self.label().map(|_| ()),
            Stage::Fit => self.fit().map(|_| ()),
            Stage::Predict => self.predict().map(|_| ()),
            Stage::Rerank => self.rerank().map(|_| ()),
            Stage::Eval => self.eval().map(|_| ()),
            Stage::GridSearch => self.grid_search().map(|_| ()),
        }
    }

    /// All stages in order; synthesis only when no impressions path is set.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            if stage == Stage::Synth && self.config.paths.impressions.is_some() {
                continue;
            }
            self.run(stage)?;
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<()> {
        self.ensure_out_dir()?;
        let corpus = generate(&self.config.synth)?;
        let paths = write_corpus(&self.artifact("synth"), &corpus)?;
        self.write_manifest(
            Stage::Synth,
            &[],
            &[paths.impressions, paths.items, paths.ground_truth],
        )
    }

    fn upstream_corpus(&self) -> Result<(PathBuf, PathBuf)> {
        let (imp, items) = (self.impressions_path(), self.items_path());
        self.require(&imp, Stage::Synth)?;
        self.require(&items, Stage::Synth)?;
        if self.config.paths.impressions.is_none() {
            self.check_upstream(Stage::Synth)?;
        }
        Ok((imp, items))
    }

    pub fn load_corpus(&self) -> Result<(Vec<ImpressionRecord>, ItemCatalog, RejectsReport)> {
        let (imp, items) = self.upstream_corpus()?;
        let loaded = load_impressions(&imp, &ImpressionSchema::default())?;
        let catalog = load_items(&items)?;
        Ok((loaded.records, catalog, loaded.rejects))
    }

    pub fn timelines(
        &self,
        records: &[ImpressionRecord],
        catalog: &ItemCatalog,
    ) -> (BTreeMap<ItemId, ItemTimeline>, RejectsReport) {
        let build = build_timelines(
            records,
            catalog,
            &self.config.time_grid(),
            self.config.t_obs + self.config.t_pred,
        );
        if build.beyond_horizon > 0 {
            log::info!(
                "{} impressions fall beyond the modeling horizon",
                build.beyond_horizon
            );
        }
        (build.timelines, build.rejects)
    }

    fn item_split(&self, catalog: &ItemCatalog) -> ItemSplit {
        let mut ids: Vec<ItemId> = catalog.entries.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0001);
        ids.shuffle(&mut rng);
        let n_rec = (ids.len() as f64 * self.config.split.rec_item_fraction).round() as usize;
        let mut rec_items = ids[..n_rec].to_vec();
        let mut grv_items = ids[n_rec..].to_vec();
        rec_items.sort();
        grv_items.sort();
        ItemSplit {
            grv_items,
            rec_items,
        }
    }

    pub fn label(&self) -> Result<LabelSet> {
        self.ensure_out_dir()?;
        let (records, catalog, mut rejects) = self.load_corpus()?;
        let (timelines, tl_rejects) = self.timelines(&records, &catalog);
        rejects.extend(tl_rejects);
        let labels = label_corpus(&timelines, &self.config.vitality)?;
        log::info!(
            "labeled {} items, {} events, censoring rate {:.3}",
            labels.len(),
            labels.events.len(),
            labels.censoring_rate
        );
        let split = self.item_split(&catalog);
        let (labels_path, rejects_path, split_path) = (
            self.artifact("labels.tsv"),
            self.artifact("rejects.csv"),
            self.artifact("split.json"),
        );
        labels.write_tsv(&labels_path)?;
        rejects.write_csv(&rejects_path)?;
        write_json(&split_path, &split)?;
        let (imp, items) = (self.impressions_path(), self.items_path());
        self.write_manifest(
            Stage::Label,
            &[imp, items],
            &[labels_path, rejects_path, split_path],
        )?;
        Ok(labels)
    }

    fn read_split(&self) -> Result<ItemSplit> {
        let path = self.artifact("split.json");
        self.require(&path, Stage::Label)?;
        read_json(&path)
    }

    pub fn fit(&self) -> Result<CoxModel> {
        let labels_path = self.artifact("labels.tsv");
        self.require(&labels_path, Stage::Label)?;
        self.check_upstream(Stage::Label)?;
        let labels = LabelSet::read_tsv(&labels_path)?;
        let split = self.read_split()?;
        let (records, catalog, _) = self.load_corpus()?;
        let (timelines, _) = self.timelines(&records, &catalog);
        let min_obs = self.config.fit_min_obs_impressions;
        let train: BTreeSet<ItemId> = split
            .grv_items
            .iter()
            .filter(|id| {
                timelines
                    .get(*id)
                    .is_some_and(|tl| obs_impressions(tl, self.config.t_obs) >= min_obs)
            })
            .cloned()
            .collect();
        let design = build_design_matrix(
            &timelines,
            &labels.restrict(&train),
            self.config.t_obs,
            &self.config.features,
            self.config.drop_censored,
        )?;
        let mut model = fit_cox(&design, &self.config.cox)?;
        // predictions cover exactly the configured window
        model.t_pred = self.config.t_pred;
        log::info!(
            "Cox fit on {} items ({} events): {} iterations, converged {}",
            design.n_items(),
            design.n_events(),
            model.diagnostics.iterations,
            model.diagnostics.converged
        );
        let path = self.artifact("cox_model.json");
        model.save_json(&path)?;
        self.write_manifest(
            Stage::Fit,
            &[labels_path, self.artifact("split.json")],
            &[path],
        )?;
        Ok(model)
    }

    pub fn predict(&self) -> Result<BTreeMap<ItemId, GrvCurve>> {
        let model_path = self.artifact("cox_model.json");
        self.require(&model_path, Stage::Fit)?;
        self.check_upstream(Stage::Fit)?;
        let model = CoxModel::load_json(&model_path)?;
        let (records, catalog, _) = self.load_corpus()?;
        let (timelines, _) = self.timelines(&records, &catalog);
        let curves: Vec<GrvCurve> = timelines
            .values()
            .map(|tl| predict_grv(&model, tl, false))
            .collect();
        let path = self.artifact("grv.tsv");
        write_grv_tsv(&path, &curves)?;
        self.write_manifest(Stage::Predict, &[model_path], &[path])?;
        Ok(curves.into_iter().map(|c| (c.item_id.clone(), c)).collect())
    }

    fn fit_backbone(
        &self,
        records: &[ImpressionRecord],
        rec: &BTreeSet<ItemId>,
        pool_ids: &[ItemId],
    ) -> Result<Scorer> {
        let start = self.config.grid.origin;
        let end = self.config.slice_time(self.config.split.train_end_slice);
        let train: Vec<ImpressionRecord> = records
            .iter()
            .filter(|r| r.timestamp >= start && r.timestamp < end && rec.contains(&r.item_id))
            .cloned()
            .collect();
        match self.config.backbone.kind {
            BackboneKind::Popularity => fit_popularity(&train, (start, end)),
            BackboneKind::Mf => {
                let trained = fit_mf(&train, pool_ids, &self.config.backbone.mf)?;
                log::info!("MF epoch losses {:?}", trained.epoch_losses);
                Ok(trained.scorer)
            }
            BackboneKind::External => {
                let path = self
                    .config
                    .backbone
                    .external_scores
                    .as_ref()
                    .ok_or_else(|| {
                        Error::InvalidConfig(
                            "backbone.external_scores is required for the external kind".into(),
                        )
                    })?;
                load_external_scores(path)
            }
        }
    }

    /// Requests, pool and per-request score vectors; shared by `rerank` and
    /// `grid-search`.
    pub fn ranking_inputs(&self) -> Result<RankingInputs> {
        let grv_path = self.artifact("grv.tsv");
        self.require(&grv_path, Stage::Predict)?;
        self.check_upstream(Stage::Predict)?;
        let curves = read_grv_tsv(&grv_path)?;
        let split = self.read_split()?;
        let (records, catalog, _) = self.load_corpus()?;
        let cfg = &self.config;
        let train_end = cfg.slice_time(cfg.split.train_end_slice);
        let eval_end = cfg.slice_time(cfg.split.eval_end_slice);

        let rec: BTreeSet<ItemId> = split.rec_items.iter().cloned().collect();
        let pool_ids: Vec<ItemId> = rec
            .iter()
            .filter(|id| catalog.upload_time(id).is_some_and(|t| t < train_end))
            .cloned()
            .collect();
        if pool_ids.is_empty() {
            return Err(Error::NoUsableItems);
        }
        let mut pool = catalog.subset(pool_ids.iter());
        pool.flag_new_items(pool_ids.iter(), cfg.split.new_item_fraction);
        let pool_set: BTreeSet<&ItemId> = pool_ids.iter().collect();

        let mut positives: Vec<&ImpressionRecord> = records
            .iter()
            .filter(|r| {
                r.click
                    && r.timestamp >= train_end
                    && r.timestamp < eval_end
                    && pool_set.contains(&r.item_id)
            })
            .collect();
        positives.sort_by(|a, b| {
            (a.timestamp, &a.user_id, &a.item_id).cmp(&(b.timestamp, &b.user_id, &b.item_id))
        });
        let mut order: Vec<usize> = (0..positives.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002));
        let n_valid = (positives.len() as f64 * cfg.split.valid_fraction).round() as usize;
        let mut is_valid = vec![false; positives.len()];
        for &i in &order[..n_valid] {
            is_valid[i] = true;
        }
        let requests: Vec<EvalRequest> = positives
            .iter()
            .enumerate()
            .map(|(i, r)| EvalRequest {
                request: Request {
                    request_id: format!("q{i:07}"),
                    user_id: r.user_id.clone(),
                    time: r.timestamp,
                },
                positive: r.item_id.clone(),
                split: if is_valid[i] {
                    EvalSplit::Valid
                } else {
                    EvalSplit::Test
                },
            })
            .collect();

        let scorer = self.fit_backbone(&records, &rec, &pool_ids)?;
        let scores: Vec<Vec<f64>> = requests
            .par_iter()
            .map(|q| {
                let m = score(&scorer, &q.request, &pool_ids)?;
                Ok(pool_ids.iter().map(|id| m[id]).collect())
            })
            .collect::<Result<_>>()?;

        let lookup = GrvLookup {
            curves: &curves,
            catalog: &pool,
            grid: cfg.time_grid(),
            t_obs: cfg.t_obs,
        };
        let mut counters = TimelinessCounters::default();
        let grv: Vec<Vec<f64>> = requests
            .iter()
            .map(|q| {
                pool_ids
                    .iter()
                    .map(|id| lookup.value(id, q.request.time, &mut counters))
                    .collect()
            })
            .collect();
        let min_upload = pool.entries.values().copied().min().unwrap_or(0);
        let upload_time: Vec<Vec<f64>> = requests
            .iter()
            .map(|q| {
                pool_ids
                    .iter()
                    .map(|id| upload_time_value(pool.entries[id], q.request.time, min_upload))
                    .collect()
            })
            .collect();
        Ok(RankingInputs {
            requests,
            pool,
            pool_ids,
            scores,
            grv,
            upload_time,
            counters,
        })
    }

    pub fn rerank(&self) -> Result<RerankStats> {
        self.ensure_out_dir()?;
        let inputs = self.ranking_inputs()?;
        let agg = &self.config.aggregation;
        let k = agg.max_k();
        let reranked = inputs.rank(agg.timeliness_source, agg.gamma, k)?;
        let backbone = inputs.backbone(k);
        let paths = [
            self.artifact("requests.tsv"),
            self.artifact("pool.csv"),
            self.artifact("rankings.tsv"),
            self.artifact("backbone_rankings.tsv"),
            self.artifact("rerank_stats.json"),
        ];
        write_requests_tsv(&paths[0], &inputs.requests)?;
        write_pool_csv(&paths[1], &inputs.pool)?;
        write_rankings_tsv(&paths[2], &reranked)?;
        write_rankings_tsv(&paths[3], &backbone)?;
        let stats = RerankStats {
            n_requests: inputs.requests.len(),
            n_pool_items: inputs.pool_ids.len(),
            timeliness: inputs.counters,
        };
        write_json(&paths[4], &stats)?;
        log::info!(
            "ranked {} requests over {} items; timeliness counters {:?}",
            stats.n_requests,
            stats.n_pool_items,
            stats.timeliness
        );
        self.write_manifest(
            Stage::Rerank,
            &[self.artifact("grv.tsv"), self.artifact("split.json")],
            &paths,
        )?;
        Ok(stats)
    }

    pub fn eval(&self) -> Result<MetricsReport> {
        let req_path = self.artifact("requests.tsv");
        for name in [
            "requests.tsv",
            "pool.csv",
            "rankings.tsv",
            "backbone_rankings.tsv",
        ] {
            self.require(&self.artifact(name), Stage::Rerank)?;
        }
        self.check_upstream(Stage::Rerank)?;
        let cfg = &self.config;
        let requests = read_requests_tsv(&req_path)?;
        let pool = read_pool_csv(&self.artifact("pool.csv"))?;
        let truth: BTreeMap<String, ItemId> = requests
            .iter()
            .filter(|r| r.split == EvalSplit::Test)
            .map(|r| (r.request.request_id.clone(), r.positive.clone()))
            .collect();
        let echo = serde_json::to_value(cfg)?;
        let test_lists = |name: &str| -> Result<Vec<RankedList>> {
            Ok(select_split(
                &read_rankings_tsv(&self.artifact(name))?,
                &truth,
            ))
        };
        let report = MetricsReport::compute(
            &test_lists("rankings.tsv")?,
            &truth,
            &pool,
            &cfg.aggregation.k_list,
            echo.clone(),
        )?;
        let backbone_report = MetricsReport::compute(
            &test_lists("backbone_rankings.tsv")?,
            &truth,
            &pool,
            &cfg.aggregation.k_list,
            echo,
        )?;

        let (records, catalog, _) = self.load_corpus()?;
        let g = &cfg.group_report;
        let groups = group_exposure_report(
            &records,
            &catalog,
            g.n_groups,
            (
                cfg.slice_time(g.upload_start_slice),
                cfg.slice_time(g.upload_end_slice),
            ),
            (
                cfg.slice_time(g.window_start_slice),
                cfg.slice_time(g.window_end_slice),
            ),
        )?;
        let (grv_buckets, history_buckets) = self.bucket_reports(&records, &catalog)?;

        let outputs = [
            self.artifact("metrics.json"),
            self.artifact("metrics_backbone.json"),
            self.artifact("group_exposure.tsv"),
            self.artifact("grv_buckets.tsv"),
            self.artifact("history_buckets.tsv"),
            self.artifact("buckets.json"),
        ];
        report.write_json(&outputs[0])?;
        backbone_report.write_json(&outputs[1])?;
        write_group_exposure_tsv(&outputs[2], &groups)?;
        write_buckets_tsv(&outputs[3], &grv_buckets)?;
        write_buckets_tsv(&outputs[4], &history_buckets)?;
        write_json(
            &outputs[5],
            &BucketSummary {
                grv_spearman: grv_buckets.spearman,
                history_spearman: history_buckets.spearman,
                n_items: grv_buckets.buckets.iter().map(|b| b.n_items).sum(),
            },
        )?;
        self.write_manifest(
            Stage::Eval,
            &[
                req_path,
                self.artifact("rankings.tsv"),
                self.artifact("backbone_rankings.tsv"),
            ],
            &outputs,
        )?;
        Ok(report)
    }

    /// Decile reports for GRV at the configured age and for observation-window
    /// CTR, both against the configured future feedback.
    pub fn bucket_reports(
        &self,
        records: &[ImpressionRecord],
        catalog: &ItemCatalog,
    ) -> Result<(BucketReport, BucketReport)> {
        let cfg = &self.config;
        let model_path = self.artifact("cox_model.json");
        self.require(&model_path, Stage::Fit)?;
        let model = CoxModel::load_json(&model_path)?;
        let (timelines, _) = self.timelines(records, catalog);
        let horizon = cfg.t_obs + cfg.t_pred;
        let age = cfg.bucket_eval.age;
        let truth = match cfg.bucket_eval.future_feedback {
            FutureFeedback::GroundTruth if cfg.paths.impressions.is_some() => {
                log::warn!("external impressions carry no ground truth; buckets use observed CTR");
                None
            }
            FutureFeedback::GroundTruth => {
                let path = self.artifact("synth/ground_truth.tsv");
                self.require(&path, Stage::Synth)?;
                Some(
                    read_ground_truth_tsv(&path)?
                        .into_iter()
                        .map(|t| (t.item_id.clone(), t))
                        .collect::<BTreeMap<_, _>>(),
                )
            }
            FutureFeedback::ObservedCtr => None,
        };
        let mut grv = BTreeMap::new();
        let mut history = BTreeMap::new();
        let mut future = BTreeMap::new();
        for (id, tl) in &timelines {
            if tl.observed_len < horizon {
                continue;
            }
            if obs_impressions(tl, cfg.t_obs) < cfg.bucket_eval.min_obs_impressions {
                continue;
            }
            // ln GRV orders items exactly like GRV, also where the survival underflows
            let g = model.log_grv(tl, age);
            let f = match &truth {
                Some(t) => t.get(id).map(|t| t.mean_click_prob(age, horizon)),
                None => tl.pooled_ctr(age, horizon),
            };
            let Some(f) = f else { continue };
            grv.insert(id.clone(), g);
            history.insert(id.clone(), tl.pooled_ctr(0, cfg.t_obs).unwrap_or(0.0));
            future.insert(id.clone(), f);
        }
        let n = cfg.bucket_eval.n_buckets;
        Ok((
            grv_bucket_eval(&grv, &future, n)?,
            grv_bucket_eval(&history, &future, n)?,
        ))
    }

    pub fn grid_search(&self) -> Result<GridSearchResult> {
        self.ensure_out_dir()?;
        let inputs = self.ranking_inputs()?;
        let cfg = &self.config;
        let ks = &cfg.aggregation.k_list;
        let k = cfg.aggregation.max_k().max(cfg.grid_search.select_k);
        let echo = serde_json::Value::Null;
        let mut rows = Vec::new();
        let mut sources = vec![cfg.aggregation.timeliness_source];
        if !sources.contains(&TimelinessSource::UploadTime) {
            sources.push(TimelinessSource::UploadTime);
        }
        for &source in &sources {
            for &gamma in &cfg.grid_search.gammas {
                let lists = inputs.rank(source, gamma, k)?;
                for split in [EvalSplit::Valid, EvalSplit::Test] {
                    let truth = inputs.truth(Some(split));
                    if truth.is_empty() {
                        continue;
                    }
                    let report = MetricsReport::compute(
                        &select_split(&lists, &truth),
                        &truth,
                        &inputs.pool,
                        ks,
                        echo.clone(),
                    )?;
                    rows.push(GridRow {
                        source,
                        gamma,
                        split,
                        report,
                    });
                }
            }
        }
        let sk = cfg.grid_search.select_k;
        let backbone_truth = inputs.truth(Some(EvalSplit::Valid));
        let backbone_valid = MetricsReport::compute(
            &select_split(&inputs.backbone(k), &backbone_truth),
            &backbone_truth,
            &inputs.pool,
            &[sk],
            echo,
        )?;
        let floor = backbone_valid.at(sk).map(|m| m.n_cov).unwrap_or(0.0);
        let mut selected: Option<(f64, f64)> = None;
        for row in rows.iter().filter(|r| {
            r.source == cfg.aggregation.timeliness_source && r.split == EvalSplit::Valid
        }) {
            let Some(m) = row.report.at(sk) else { continue };
            if m.n_cov >= floor && selected.is_none_or(|(_, best)| m.ndcg > best) {
                selected = Some((row.gamma, m.ndcg));
            }
        }
        let result = GridSearchResult {
            rows,
            selected_gamma: selected.map(|s| s.0).unwrap_or(0.0),
            select_k: sk,
        };
        let tsv = self.artifact("grid_search.tsv");
        let json = self.artifact("grid_search.json");
        write_grid_tsv(&tsv, &result, cfg.aggregation.timeliness_source)?;
        write_json(&json, &result)?;
        log::info!("grid search selected gamma = {}", result.selected_gamma);
        self.write_manifest(Stage::GridSearch, &[self.artifact("grv.tsv")], &[tsv, json])?;
        Ok(result)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn split_name(s: EvalSplit) -> &'static str {
    match s {
        EvalSplit::Valid => "valid",
        EvalSplit::Test => "test",
    }
}

pub fn write_requests_tsv(path: &Path, requests: &[EvalRequest]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(["request_id", "user_id", "time", "positive", "split"])?;
    for r in requests {
        w.write_record([
            r.request.request_id.as_str(),
            r.request.user_id.as_str(),
            &r.request.time.to_string(),
            r.positive.as_str(),
            split_name(r.split),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_requests_tsv(path: &Path) -> Result<Vec<EvalRequest>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let bad = || Error::Parse(format!("malformed request row {:?}", row));
        let field = |i: usize| row.get(i).ok_or_else(bad);
        out.push(EvalRequest {
            request: Request {
                request_id: field(0)?.to_string(),
                user_id: field(1)?.to_string(),
                time: field(2)?.parse().map_err(|_| bad())?,
            },
            positive: field(3)?.to_string(),
            split: match field(4)? {
                "valid" => EvalSplit::Valid,
                "test" => EvalSplit::Test,
                _ => return Err(bad()),
            },
        });
    }
    Ok(out)
}

pub fn write_pool_csv(path: &Path, pool: &ItemCatalog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item_id", "upload_time", "is_new"])?;
    for (id, t) in &pool.entries {
        w.write_record([
            id.as_str(),
            &t.to_string(),
            if pool.is_new(id) { "1" } else { "0" },
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pool_csv(path: &Path) -> Result<ItemCatalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut pool = ItemCatalog::default();
    for row in r.records() {
        let row = row?;
        let bad = || Error::Parse(format!("malformed pool row {:?}", row));
        let id = row.get(0).ok_or_else(bad)?.to_string();
        let t: i64 = row.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        pool.new_item_flags
            .insert(id.clone(), row.get(2) == Some("1"));
        pool.entries.insert(id, t);
    }
    Ok(pool)
}

fn write_grid_tsv(
    path: &Path,
    result: &GridSearchResult,
    selected_source: TimelinessSource,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    let ks: Vec<usize> = result
        .rows
        .first()
        .map(|r| r.report.metrics.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec!["source".to_string(), "gamma".into(), "split".into()];
    for k in &ks {
        for m in ["hr", "ndcg", "cov", "n_cov"] {
            header.push(format!("{m}@{k}"));
        }
    }
    header.push("selected".into());
    w.write_record(&header)?;
    for row in &result.rows {
        let source = serde_json::to_value(row.source)?;
        let mut rec = vec![
            source.as_str().unwrap_or_default().to_string(),
            format!("{:.1}", row.gamma),
            split_name(row.split).to_string(),
        ];
        for k in &ks {
            let m = row
                .report
                .at(*k)
                .copied()
                .unwrap_or(crate::evaluate::MetricsAtK {
                    hr: f64::NAN,
                    ndcg: f64::NAN,
                    cov: f64::NAN,
                    n_cov: f64::NAN,
                });
            for v in [m.hr, m.ndcg, m.cov, m.n_cov] {
                rec.push(format!("{v:.6}"));
            }
        }
        let flag =
            row.source == selected_source && (row.gamma - result.selected_gamma).abs() < 1e-12;
        rec.push(u8::from(flag).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
