//! Cox proportional-hazards model over observation-window feedback, and
//! Global Residual Value (GRV) curves derived from it.
//!
//! Covariates are the per-age feedback values of an item's first `t_obs`
//! slices, centered by the per-age mean over training items. The model is
//! fitted by Newton–Raphson on the Breslow partial likelihood with a small
//! ridge term, and the baseline cumulative hazard is the Breslow estimator.
//! The GRV of an item at age `t` is its survival probability
//! `exp(-H0(t) * exp(lp))`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemId, ItemTimeline};
use crate::error::{Error, Result};
use crate::labeler::LabelSet;

/// Centered covariates plus survival outcomes, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub item_ids: Vec<ItemId>,
    pub features: Vec<String>,
    pub t_obs: usize,
    /// Length of the age axis the baseline hazard is reported on.
    pub horizon: usize,
    pub rows: Vec<Vec<f64>>,
    pub feature_means: Vec<f64>,
    /// Event age, or last age observed alive for censored rows.
    pub times: Vec<usize>,
    pub events: Vec<bool>,
}

impl DesignMatrix {
    /// Builds a design from raw covariate rows. With `center`, per-column
    /// means are subtracted and stored; otherwise means are zero.
    pub fn from_raw(
        item_ids: Vec<ItemId>,
        raw: Vec<Vec<f64>>,
        times: Vec<usize>,
        events: Vec<bool>,
        horizon: usize,
        center: bool,
    ) -> Result<Self> {
        let n = raw.len();
        if n == 0 {
            return Err(Error::NoUsableItems);
        }
        for len in [item_ids.len(), times.len(), events.len()] {
            if len != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        let p = raw[0].len();
        if let Some(bad) = raw.iter().find(|r| r.len() != p) {
            return Err(Error::Dimension {
                expected: p,
                got: bad.len(),
            });
        }
        let mut means = vec![0.0; p];
        if center {
            for r in &raw {
                for (m, x) in means.iter_mut().zip(r) {
                    *m += x;
                }
            }
            for m in &mut means {
                *m /= n as f64;
            }
        }
        let rows = raw
            .into_iter()
            .map(|r| r.iter().zip(&means).map(|(x, m)| x - m).collect())
            .collect();
        Ok(DesignMatrix {
            item_ids,
            features: vec!["x".into()],
            t_obs: p,
            horizon,
            rows,
            feature_means: means,
            times,
            events,
        })
    }

    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.feature_means.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

/// Raw (uncentered) covariates of a timeline: feature-major, one value per
/// observation age, missing feedback imputed to 0.
pub fn covariate_row(timeline: &ItemTimeline, features: &[String], t_obs: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(features.len() * t_obs);
    for f in features {
        let series = timeline.feature(f);
        for age in 0..t_obs {
            row.push(
                series
                    .and_then(|s| s.get(age).copied().flatten())
                    .unwrap_or(0.0),
            );
        }
    }
    row
}

/// One row per labeled item; with `drop_censored`, censored items are left
/// out entirely instead of entering as right-censored observations.
pub fn build_design_matrix(
    timelines: &BTreeMap<ItemId, ItemTimeline>,
    labels: &LabelSet,
    t_obs: usize,
    features: &[String],
    drop_censored: bool,
) -> Result<DesignMatrix> {
    if t_obs == 0 {
        return Err(Error::InvalidConfig("t_obs must be at least 1".into()));
    }
    if features.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one feature is required".into(),
        ));
    }
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut horizon = 0;

    let mut labeled: Vec<(&ItemId, usize, bool)> = labels
        .events
        .iter()
        .map(|(id, &a)| (id, a, true))
        .chain(labels.censored.iter().map(|(id, &c)| (id, c, false)))
        .collect();
    labeled.sort();

    for (id, time, is_event) in labeled {
        if !is_event && (drop_censored || time == 0) {
            continue;
        }
        let tl = timelines
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("labeled item `{id}` has no timeline")))?;
        if tl.len() < t_obs {
            return Err(Error::InvalidConfig(format!(
                "timeline of `{id}` has {} slices, fewer than t_obs = {t_obs}",
                tl.len()
            )));
        }
        horizon = horizon.max(tl.len());
        ids.push(id.clone());
        raw.push(covariate_row(tl, features, t_obs));
        // censored: last age observed alive
        times.push(if is_event { time } else { time - 1 });
        events.push(is_event);
    }
    if ids.is_empty() {
        return Err(Error::NoUsableItems);
    }
    let mut design = DesignMatrix::from_raw(ids, raw, times, events, horizon, true)?;
    design.features = features.to_vec();
    design.t_obs = t_obs;
    Ok(design)
}

/// Penalized negative log partial likelihood with exact derivatives.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Items sorted by descending time, so risk sets grow as we scan.
fn descending_order(design: &DesignMatrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..design.n_items()).collect();
    order.sort_by(|&a, &b| design.times[b].cmp(&design.times[a]).then(a.cmp(&b)));
    order
}

/// Running risk-set sums `S0 = Σ w`, `S1 = Σ w x`, `S2 = Σ w x xᵀ`, all
/// scaled by `exp(-max_lp)` so that no weight exceeds 1.
struct RiskSet {
    max_lp: f64,
    s0: f64,
    s1: DVector<f64>,
    s2: Option<DMatrix<f64>>,
}

impl RiskSet {
    fn new(p: usize, second_order: bool) -> Self {
        RiskSet {
            max_lp: f64::NEG_INFINITY,
            s0: 0.0,
            s1: DVector::zeros(p),
            s2: second_order.then(|| DMatrix::zeros(p, p)),
        }
    }

    fn add(&mut self, x: &DVector<f64>, lp: f64) {
        if lp > self.max_lp {
            let scale = (self.max_lp - lp).exp();
            self.s0 *= scale;
            self.s1 *= scale;
            if let Some(s2) = &mut self.s2 {
                *s2 *= scale;
            }
            self.max_lp = lp;
        }
        let w = (lp - self.max_lp).exp();
        self.s0 += w;
        self.s1.axpy(w, x, 1.0);
        if let Some(s2) = &mut self.s2 {
            s2.ger(w, x, x, 1.0);
        }
    }

    fn log_s0(&self) -> f64 {
        self.max_lp + self.s0.ln()
    }
}

fn linear_predictors(alpha: &DVector<f64>, design: &DesignMatrix) -> Vec<f64> {
    design
        .rows
        .iter()
        .map(|r| r.iter().zip(alpha.iter()).map(|(x, a)| x * a).sum())
        .collect()
}

/// Breslow-ties negative log partial likelihood plus `(ridge/2)·‖alpha‖²`.
pub fn neg_log_partial_likelihood(
    alpha: &DVector<f64>,
    design: &DesignMatrix,
    ridge: f64,
) -> Result<Objective> {
    let p = design.n_covariates();
    if alpha.len() != p {
        return Err(Error::Dimension {
            expected: p,
            got: alpha.len(),
        });
    }
    let lp = linear_predictors(alpha, design);
    let xs: Vec<DVector<f64>> = design
        .rows
        .iter()
        .map(|r| DVector::from_column_slice(r))
        .collect();
    let order = descending_order(design);

    let mut risk = RiskSet::new(p, true);
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);

    let mut idx = 0;
    while idx < order.len() {
        let t = design.times[order[idx]];
        let start = idx;
        while idx < order.len() && design.times[order[idx]] == t {
            let i = order[idx];
            risk.add(&xs[i], lp[i]);
            idx += 1;
        }
        let mut d = 0usize;
        let mut event_lp = 0.0;
        let mut event_x = DVector::zeros(p);
        for &i in &order[start..idx] {
            if design.events[i] {
                d += 1;
                event_lp += lp[i];
                event_x += &xs[i];
            }
        }
        if d == 0 {
            continue;
        }
        let d = d as f64;
        value -= event_lp - d * risk.log_s0();
        let mean = &risk.s1 / risk.s0;
        gradient -= event_x - &mean * d;
        let s2 = risk.s2.as_ref().expect("second-order sums requested");
        hessian += (s2 / risk.s0 - &mean * mean.transpose()) * d;
    }

    value += 0.5 * ridge * alpha.norm_squared();
    gradient.axpy(ridge, alpha, 1.0);
    for k in 0..p {
        hessian[(k, k)] += ridge;
    }

    if !value.is_finite()
        || gradient.iter().any(|g| !g.is_finite())
        || hessian.iter().any(|h| !h.is_finite())
    {
        return Err(Error::NonFinite("partial likelihood"));
    }
    Ok(Objective {
        value,
        gradient,
        hessian,
    })
}

/// Objective value only; cheaper, used by the line search.
fn objective_value(alpha: &DVector<f64>, design: &DesignMatrix, ridge: f64) -> Result<f64> {
    let lp = linear_predictors(alpha, design);
    let order = descending_order(design);
    let mut max_lp = f64::NEG_INFINITY;
    let mut s0 = 0.0f64;
    let mut value = 0.0;
    let mut idx = 0;
    while idx < order.len() {
        let t = design.times[order[idx]];
        let mut d = 0.0;
        let mut event_lp = 0.0;
        while idx < order.len() && design.times[order[idx]] == t {
            let i = order[idx];
            if lp[i] > max_lp {
                s0 *= (max_lp - lp[i]).exp();
                max_lp = lp[i];
            }
            s0 += (lp[i] - max_lp).exp();
            if design.events[i] {
                d += 1.0;
                event_lp += lp[i];
            }
            idx += 1;
        }
        if d > 0.0 {
            value -= event_lp - d * (max_lp + s0.ln());
        }
    }
    value += 0.5 * ridge * alpha.norm_squared();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("partial likelihood"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ridge_lambda: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            tol: 1e-8,
            max_iter: 100,
            ridge_lambda: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    /// Final penalized negative log partial likelihood.
    pub neg_log_likelihood: f64,
    pub converged: bool,
    /// Objective after each accepted Newton step, starting at alpha = 0.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub features: Vec<String>,
    pub t_obs: usize,
    pub t_pred: usize,
    pub alpha: Vec<f64>,
    pub feature_means: Vec<f64>,
    /// Breslow cumulative baseline hazard by age slice over `[0, t_obs + t_pred)`.
    pub baseline_cum_hazard: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

fn solve_newton(hessian: &DMatrix<f64>, gradient: &DVector<f64>) -> DVector<f64> {
    let p = gradient.len();
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut h = hessian.clone();
        for k in 0..p {
            h[(k, k)] += jitter;
        }
        if let Some(chol) = h.cholesky() {
            return -chol.solve(gradient);
        }
        jitter = if jitter == 0.0 { 1e-8 } else { jitter * 10.0 };
    }
    // gradient descent fallback when the Hessian is numerically indefinite
    -gradient.clone()
}

/// Newton–Raphson from zero with step halving, then the Breslow baseline.
pub fn fit_cox(design: &DesignMatrix, options: &CoxOptions) -> Result<CoxModel> {
    if design.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    let p = design.n_covariates();
    let ridge = options.ridge_lambda;
    let mut alpha = DVector::zeros(p);
    let mut current = neg_log_partial_likelihood(&alpha, design, ridge)?;
    let mut trace = vec![current.value];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let step = solve_newton(&current.hessian, &current.gradient);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &alpha + &step * scale;
            match objective_value(&candidate, design, ridge) {
                Ok(v) if v <= current.value => {
                    accepted = Some((candidate, v));
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        let Some((next, next_value)) = accepted else {
            // no descent along the Newton direction: stationary up to rounding
            converged = true;
            break;
        };
        let decrease = current.value - next_value;
        alpha = next;
        current = neg_log_partial_likelihood(&alpha, design, ridge)?;
        trace.push(current.value);
        if decrease <= options.tol * current.value.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "Cox fit did not converge in {} iterations",
            options.max_iter
        );
    }

    let baseline_cum_hazard = breslow_baseline(&alpha, design);
    Ok(CoxModel {
        features: design.features.clone(),
        t_obs: design.t_obs,
        t_pred: design.horizon.saturating_sub(design.t_obs),
        alpha: alpha.iter().copied().collect(),
        feature_means: design.feature_means.clone(),
        baseline_cum_hazard,
        diagnostics: FitDiagnostics {
            iterations,
            neg_log_likelihood: current.value,
            converged,
            trace,
        },
    })
}

/// `H0(t) = Σ_{event ages a ≤ t} d_a / Σ_{k at risk at a} exp(lp_k)`,
/// right-continuous and flat after the last event.
pub fn breslow_baseline(alpha: &DVector<f64>, design: &DesignMatrix) -> Vec<f64> {
    let lp = linear_predictors(alpha, design);
    let order = descending_order(design);
    let max_time = design.times.iter().copied().max().unwrap_or(0);
    let len = design.horizon.max(max_time + 1);
    let mut increments = vec![0.0; len];

    let mut max_lp = f64::NEG_INFINITY;
    let mut s0 = 0.0f64;
    let mut idx = 0;
    while idx < order.len() {
        let t = design.times[order[idx]];
        let mut d = 0.0;
        while idx < order.len() && design.times[order[idx]] == t {
            let i = order[idx];
            if lp[i] > max_lp {
                s0 *= (max_lp - lp[i]).exp();
                max_lp = lp[i];
            }
            s0 += (lp[i] - max_lp).exp();
            if design.events[i] {
                d += 1.0;
            }
            idx += 1;
        }
        if d > 0.0 {
            increments[t] = d * (-(max_lp + s0.ln())).exp();
        }
    }
    let mut total = 0.0;
    let mut h: Vec<f64> = increments
        .into_iter()
        .map(|inc| {
            total += inc;
            total
        })
        .collect();
    h.truncate(design.horizon.max(1));
    h
}

/// Survival probabilities over ages `[t_obs, t_obs + t_pred)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrvCurve {
    pub item_id: ItemId,
    pub t_obs: usize,
    pub values: Vec<f64>,
}

impl GrvCurve {
    /// Value at an age inside the prediction window.
    pub fn at_age(&self, age: usize) -> Option<f64> {
        age.checked_sub(self.t_obs)
            .and_then(|k| self.values.get(k))
            .copied()
    }
}

impl CoxModel {
    pub fn linear_predictor(&self, timeline: &ItemTimeline) -> f64 {
        covariate_row(timeline, &self.features, self.t_obs)
            .iter()
            .zip(&self.feature_means)
            .zip(&self.alpha)
            .map(|((x, m), a)| a * (x - m))
            .sum()
    }

    pub fn horizon(&self) -> usize {
        self.t_obs + self.t_pred
    }

    fn cum_hazard_at(&self, t: usize) -> f64 {
        self.baseline_cum_hazard
            .get(t)
            .or(self.baseline_cum_hazard.last())
            .copied()
            .unwrap_or(0.0)
    }

    /// `ln GRV` at `age`, which keeps items ordered after `exp` underflows.
    pub fn log_grv(&self, timeline: &ItemTimeline, age: usize) -> f64 {
        -self.cum_hazard_at(age) * self.linear_predictor(timeline).exp()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Unconditional GRV `P(T_d > t | F)`; with `conditional`, divided by the
/// value at `t_obs` so the curve starts at 1.
pub fn predict_grv(model: &CoxModel, timeline: &ItemTimeline, conditional: bool) -> GrvCurve {
    let risk = model.linear_predictor(timeline).exp();
    let horizon = model.horizon();
    let hazard_at = |t: usize| model.cum_hazard_at(t);
    let offset = if conditional {
        hazard_at(model.t_obs)
    } else {
        0.0
    };
    let values = (model.t_obs..horizon)
        .map(|t| {
            let log_s = -(hazard_at(t) - offset) * risk;
            // survival stays strictly positive even when exp underflows
            log_s.exp().clamp(f64::MIN_POSITIVE, 1.0)
        })
        .collect();
    GrvCurve {
        item_id: timeline.item_id.clone(),
        t_obs: model.t_obs,
        values,
    }
}

pub fn write_grv_tsv(path: &Path, curves: &[GrvCurve]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(["item_id", "age_slice", "grv"])?;
    for c in curves {
        for (k, v) in c.values.iter().enumerate() {
            w.write_record([
                c.item_id.as_str(),
                &(c.t_obs + k).to_string(),
                &format!("{v:.12e}"),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_grv_tsv(path: &Path) -> Result<BTreeMap<ItemId, GrvCurve>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file);
    let mut out: BTreeMap<ItemId, GrvCurve> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        let bad = || Error::Parse(format!("malformed GRV row {:?}", row));
        let id = row.get(0).ok_or_else(bad)?;
        let age: usize = row.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let v: f64 = row.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let curve = out.entry(id.to_string()).or_insert_with(|| GrvCurve {
            item_id: id.to_string(),
            t_obs: age,
            values: Vec::new(),
        });
        if curve.t_obs + curve.values.len() != age {
            return Err(Error::Parse(format!(
                "GRV rows for `{id}` are not contiguous at age {age}"
            )));
        }
        curve.values.push(v);
    }
    Ok(out)
}
