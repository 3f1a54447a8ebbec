//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use grvrank::corpus::{ItemTimeline, CTR};
use grvrank::grv_model::DesignMatrix;
use grvrank::labeler::VitalityParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const TRUE_ALPHA: f64 = 0.7;

/// Items A, B, C with x = 1, 0, 1; A fails at 1, B at 2, C is censored at 3.
pub fn three_item_design() -> DesignMatrix {
    DesignMatrix::from_raw(
        vec!["A".into(), "B".into(), "C".into()],
        vec![vec![1.0], vec![0.0], vec![1.0]],
        vec![1, 2, 3],
        vec![true, true, false],
        4,
        false,
    )
    .unwrap()
}

/// Minimizer of the three-item negative log partial likelihood
/// `-(a - ln(2e^a + 1) - ln(1 + e^a))` on a 1e-6 grid over [-2, 2].
pub fn three_item_grid_optimum() -> f64 {
    let nll = |a: f64| -(a - (2.0 * a.exp() + 1.0).ln() - (1.0 + a.exp()).ln());
    (0..=4_000_000)
        .map(|i| -2.0 + i as f64 * 1e-6)
        .min_by(|a, b| nll(*a).total_cmp(&nll(*b)))
        .unwrap()
}

/// Breslow cumulative hazard at age 2 for the three-item instance at `a`:
/// `1 / (2e^a + 1) + 1 / (1 + e^a)`.
pub fn three_item_h2(a: f64) -> f64 {
    1.0 / (2.0 * a.exp() + 1.0) + 1.0 / (1.0 + a.exp())
}

/// 200 items with `x ~ N(0, 2^2)` and exponential event times under hazard
/// `0.001 * exp(0.7 x)`, recorded on an integer age grid and censored at age
/// 3000. The wide covariate keeps the estimator's spread near 0.06.
pub fn simulate_cox(seed: u64) -> DesignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200;
    let (mut raw, mut times, mut events) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = 2.0 * z;
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let t = -u.ln() / (0.001 * (TRUE_ALPHA * x).exp());
        let age = (t.ceil() as usize).max(1);
        raw.push(vec![x]);
        times.push(age.min(3000));
        events.push(age <= 3000);
    }
    let ids = (0..n).map(|i| format!("i{i}")).collect();
    DesignMatrix::from_raw(ids, raw, times, events, 3001, true).unwrap()
}

pub fn random_timelines(n: usize, seed: u64) -> BTreeMap<String, ItemTimeline> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = 30;
            let observed_len = rng.random_range(0..=len);
            let p_exposed = rng.random_range(0.0..1.0);
            let mut exposures = vec![0u32; len];
            let mut clicks = vec![0u32; len];
            for age in 0..observed_len {
                if rng.random_bool(p_exposed) {
                    exposures[age] = rng.random_range(1..6);
                    clicks[age] = rng.random_range(0..=exposures[age]);
                }
            }
            let ctr = exposures
                .iter()
                .zip(&clicks)
                .map(|(&e, &c)| (e > 0).then(|| c as f64 / e as f64))
                .collect();
            let id = format!("i{i:04}");
            let tl = ItemTimeline {
                item_id: id.clone(),
                upload_slice: rng.random_range(0..20),
                observed_len,
                exposures,
                clicks,
                feedback: [(CTR.to_string(), ctr)].into_iter().collect(),
            };
            (id, tl)
        })
        .collect()
}

/// Straight-line restatement of the labeling rule: percentiles by direct
/// counting over every item exposed in the same absolute slice.
pub fn brute_force_labels(
    timelines: &BTreeMap<String, ItemTimeline>,
    p: &VitalityParams,
) -> BTreeMap<String, (usize, bool)> {
    let value = |tl: &ItemTimeline, age: usize| -> Option<f64> {
        if age < tl.observed_len && tl.exposures[age] > 0 {
            tl.feedback[CTR][age]
        } else {
            None
        }
    };
    let mut out = BTreeMap::new();
    for (id, tl) in timelines {
        if tl.observed_len == 0 {
            continue;
        }
        let mut sum = 0.0;
        let mut event = None;
        for age in 0..tl.observed_len {
            let v = match value(tl, age) {
                Some(x) => {
                    let slice = tl.upload_slice + age as i64;
                    let mut below = 0usize;
                    let mut equal = 0usize;
                    let mut total = 0usize;
                    for other in timelines.values() {
                        let a = slice - other.upload_slice;
                        if a < 0 {
                            continue;
                        }
                        if let Some(y) = value(other, a as usize) {
                            total += 1;
                            if y < x {
                                below += 1;
                            } else if y == x {
                                equal += 1;
                            }
                        }
                    }
                    (below as f64 + 0.5 * equal as f64) / total as f64 - p.beta_e
                }
                None => -p.beta_ne,
            };
            sum += v;
            if sum < p.beta_d {
                event = Some(age);
                break;
            }
        }
        out.insert(
            id.clone(),
            event.map_or((tl.observed_len, false), |a| (a, true)),
        );
    }
    out
}
