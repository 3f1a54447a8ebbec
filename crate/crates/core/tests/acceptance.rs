//! One PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::{
    brute_force_labels, random_timelines, simulate_cox, three_item_design, three_item_grid_optimum,
    three_item_h2, TRUE_ALPHA,
};
use grvrank::evaluate::{group_exposure_report, MetricsReport};
use grvrank::grv_model::{
    fit_cox, neg_log_partial_likelihood, read_grv_tsv, CoxModel, CoxOptions, DesignMatrix,
};
use grvrank::labeler::{label_corpus, VitalityParams};
use grvrank::pipeline::{BucketSummary, EvalSplit, GridSearchResult, Pipeline, PipelineConfig};
use grvrank::rerank::TimelinessSource;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn cox_correctness() -> Verdict {
    let start = Instant::now();
    let exact = CoxOptions {
        ridge_lambda: 0.0,
        ..CoxOptions::default()
    };
    let model = fit_cox(&three_item_design(), &exact).unwrap();
    let a = model.alpha[0];
    let h2 = model.baseline_cum_hazard[2];
    let grid_a = three_item_grid_optimum();
    let closed = (a + 0.3466).abs() <= 1e-3
        && (h2 - 1.0).abs() <= 1e-3
        && (a - grid_a).abs() <= 1e-3
        && (h2 - three_item_h2(grid_a)).abs() <= 1e-3;
    let recovered: Vec<f64> = (0..SEEDS)
        .map(|s| {
            fit_cox(&simulate_cox(s), &CoxOptions::default())
                .unwrap()
                .alpha[0]
        })
        .collect();
    let within = recovered.iter().all(|r| (r - TRUE_ALPHA).abs() <= 0.15);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        closed && within && secs < 5.0,
        format!("3-item alpha {a:.5} (grid {grid_a:.5}), H0(2) {h2:.5}; simulated alphas {recovered:.3?}; {secs:.2}s"),
    )
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, p, ridge, h) = (20, 6, 0.05, 1e-5);
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let times: Vec<usize> = (0..n).map(|_| rng.random_range(1..8)).collect();
    let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let ids = (0..n).map(|i| format!("i{i}")).collect();
    let design = DesignMatrix::from_raw(ids, raw, times, events, 8, true).unwrap();
    let obj = |a: &DVector<f64>| neg_log_partial_likelihood(a, &design, ridge).unwrap();
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * y.abs().max(1.0);
    let (mut bad, mut checked) = (0, 0);
    for _ in 0..10 {
        let alpha = DVector::from_fn(p, |_, _| rng.random_range(-1.5..1.5));
        let at = obj(&alpha);
        for j in 0..p {
            let (mut up, mut down) = (alpha.clone(), alpha.clone());
            up[j] += h;
            down[j] -= h;
            let (fu, fd) = (obj(&up), obj(&down));
            checked += 1 + p;
            bad += usize::from(!close(at.gradient[j], (fu.value - fd.value) / (2.0 * h)));
            let column = (fu.gradient - fd.gradient) / (2.0 * h);
            bad += (0..p)
                .filter(|&i| !close(at.hessian[(i, j)], column[i]))
                .count();
        }
    }
    verdict(
        bad == 0,
        format!("{bad} of {checked} derivative entries off by more than 1e-6 relative"),
    )
}

fn labeler_oracle() -> Verdict {
    let params = VitalityParams::default();
    let timelines = random_timelines(1000, 5);
    let labels = label_corpus(&timelines, &params).unwrap();
    let oracle = brute_force_labels(&timelines, &params);
    let mismatches = oracle
        .iter()
        .filter(|(id, want)| labels.outcome(id) != Some(**want))
        .count()
        + labels.len().abs_diff(oracle.len());
    verdict(
        mismatches == 0,
        format!(
            "{mismatches} mismatches over {} labeled timelines ({} events)",
            oracle.len(),
            labels.events.len()
        ),
    )
}

struct Run {
    pipeline: Pipeline,
}

impl Run {
    fn new(seed: u64, dir: &Path) -> Run {
        let mut cfg = PipelineConfig::default().with_seed(seed);
        cfg.paths.output_dir = dir.to_path_buf();
        Run {
            pipeline: Pipeline::new(cfg, false).unwrap(),
        }
    }

    fn json<T: for<'de> serde::Deserialize<'de>>(&self, name: &str) -> T {
        serde_json::from_slice(&std::fs::read(self.pipeline.artifact(name)).unwrap()).unwrap()
    }
}

fn grv_invariants(runs: &[Run]) -> Verdict {
    let (mut violations, mut curves) = (0usize, 0usize);
    for run in runs {
        let p = &run.pipeline;
        let model = CoxModel::load_json(&p.artifact("cox_model.json")).unwrap();
        let grv = read_grv_tsv(&p.artifact("grv.tsv")).unwrap();
        let (records, catalog, _) = p.load_corpus().unwrap();
        let (timelines, _) = p.timelines(&records, &catalog);
        curves += grv.len();
        for c in grv.values() {
            violations += c.values.iter().filter(|&&v| !(v > 0.0 && v <= 1.0)).count();
            violations += c.values.windows(2).filter(|w| w[1] > w[0]).count();
        }
        // proportional hazards: a higher linear predictor never has higher GRV at any age
        let mut order: Vec<(f64, &str)> = timelines
            .values()
            .map(|tl| (model.linear_predictor(tl), tl.item_id.as_str()))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in order.windows(2) {
            let (lo, hi) = (&grv[pair[0].1], &grv[pair[1].1]);
            violations += lo
                .values
                .iter()
                .zip(&hi.values)
                .filter(|(l, h)| h > l)
                .count();
        }
    }
    verdict(
        violations == 0,
        format!(
            "{violations} violations over {curves} curves from {} fitted models",
            runs.len()
        ),
    )
}

fn gamma_zero_identity(run: &Run) -> Verdict {
    let inputs = run.pipeline.ranking_inputs().unwrap();
    let k = run.pipeline.config.aggregation.max_k();
    let reranked = inputs.rank(TimelinessSource::Grv, 0.0, k).unwrap();
    let backbone = inputs.backbone(k);
    let differing = reranked
        .iter()
        .zip(&backbone)
        .filter(|(a, b)| a.request_id != b.request_id || !a.items().eq(b.items()))
        .count()
        + reranked.len().abs_diff(backbone.len());
    verdict(
        differing == 0,
        format!("{differing} of {} lists differ", reranked.len()),
    )
}

fn fairness_direction(runs: &[Run]) -> Verdict {
    let mut good = 0;
    let mut notes = Vec::new();
    for (seed, run) in runs.iter().enumerate() {
        let grid: GridSearchResult = run.json("grid_search.json");
        let g = grid.selected_gamma;
        let reranked = *grid
            .row(TimelinessSource::Grv, g, EvalSplit::Test)
            .and_then(|r| r.report.at(10))
            .unwrap();
        let backbone = *MetricsReport::read_json(&run.pipeline.artifact("metrics_backbone.json"))
            .unwrap()
            .at(10)
            .unwrap();
        let ok = reranked.n_cov > backbone.n_cov && reranked.ndcg >= 0.95 * backbone.ndcg;
        good += usize::from(ok);
        notes.push(format!(
            "s{seed} g={g} ncov {:.3}/{:.3} ndcg {:.3}/{:.3}",
            reranked.n_cov, backbone.n_cov, reranked.ndcg, backbone.ndcg
        ));
    }
    verdict(
        good >= 4,
        format!("{good}/{} seeds; {}", runs.len(), notes.join("; ")),
    )
}

fn snowball_signature(runs: &[Run]) -> Verdict {
    let check = |run: &Run| -> (bool, Vec<f64>, Vec<f64>) {
        let p = &run.pipeline;
        let cfg = &p.config;
        let g = &cfg.group_report;
        let (records, catalog, _) = p.load_corpus().unwrap();
        let rows = group_exposure_report(
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
        )
        .unwrap();
        let exp: Vec<f64> = rows.iter().map(|r| r.y_exp.unwrap_or(f64::NAN)).collect();
        let ctr: Vec<f64> = rows.iter().map(|r| r.y_ctr.unwrap_or(f64::NAN)).collect();
        let ok = rows.len() == 4
            && exp.windows(2).all(|w| w[0] > w[1])
            && ctr.iter().all(|c| (0.8..=1.2).contains(c));
        (ok, exp, ctr)
    };
    let (ok, exp, ctr) = check(&runs[0]);
    let other = runs.iter().skip(1).filter(|r| check(r).0).count();
    verdict(
        ok,
        format!(
            "default seed Y_Exp {exp:.3?} Y_CTR {ctr:.3?}; other seeds passing {other}/{}",
            runs.len() - 1
        ),
    )
}

fn bucket_evaluation(runs: &[Run]) -> Verdict {
    let summaries: Vec<BucketSummary> = runs.iter().map(|r| r.json("buckets.json")).collect();
    let first = &summaries[0];
    let lower = summaries
        .iter()
        .filter(|s| s.history_spearman < s.grv_spearman)
        .count();
    let rho: Vec<String> = summaries
        .iter()
        .map(|s| format!("{:.3}/{:.3}", s.grv_spearman, s.history_spearman))
        .collect();
    verdict(
        first.grv_spearman > 0.8 && lower >= 4,
        format!(
            "default seed GRV rho {:.3}; history lower in {lower}/{} seeds; grv/history {}",
            first.grv_spearman,
            summaries.len(),
            rho.join(" ")
        ),
    )
}

fn determinism_and_budget(dir: &Path) -> (Verdict, Run) {
    let run = Run::new(0, dir);
    let mut secs = Vec::new();
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let start = Instant::now();
        run.pipeline.run_all().unwrap();
        secs.push(start.elapsed().as_secs_f64());
        bytes.push(std::fs::read(run.pipeline.artifact("metrics.json")).unwrap());
    }
    let identical = bytes[0] == bytes[1];
    let v = verdict(
        identical && secs.iter().all(|&s| s < 60.0),
        format!(
            "run-all {:.1}s and {:.1}s; metrics.json identical: {identical}",
            secs[0], secs[1]
        ),
    );
    (v, run)
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |seed: u64| -> PathBuf { tmp.path().join(format!("seed{seed}")) };
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    results.push(("Cox correctness", cox_correctness()));
    results.push(("gradient check", gradient_check()));
    results.push(("labeler oracle equivalence", labeler_oracle()));

    let (determinism, first) = determinism_and_budget(&dir(0));
    let mut runs = vec![first];
    for seed in 1..SEEDS {
        let run = Run::new(seed, &dir(seed));
        run.pipeline.run_all().unwrap();
        runs.push(run);
    }
    results.push(("GRV invariants", grv_invariants(&runs)));
    results.push(("gamma=0 identity", gamma_zero_identity(&runs[0])));
    results.push(("fairness direction", fairness_direction(&runs)));
    results.push(("snowball signature", snowball_signature(&runs)));
    results.push(("bucket evaluation", bucket_evaluation(&runs)));
    results.push(("determinism and budget", determinism));

    let mut failed = 0;
    for (name, v) in &results {
        println!(
            "{} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
