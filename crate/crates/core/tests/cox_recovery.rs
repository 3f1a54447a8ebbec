mod common;

use std::time::Instant;

use common::{simulate_cox as simulate, TRUE_ALPHA};
use grvrank::grv_model::{fit_cox, CoxOptions};

#[test]
fn recovers_known_coefficient() {
    let start = Instant::now();
    for seed in 0..5 {
        let model = fit_cox(&simulate(seed), &CoxOptions::default()).unwrap();
        assert!(model.diagnostics.converged);
        let a = model.alpha[0];
        assert!((a - TRUE_ALPHA).abs() <= 0.15, "seed {seed}: alpha {a}");
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn baseline_hazard_tracks_exponential_rate() {
    // At x = 0 the cumulative hazard grows by 0.001 per age slice.
    let model = fit_cox(&simulate(11), &CoxOptions::default()).unwrap();
    let lp0 = -model.alpha[0] * model.feature_means[0];
    let h100 = model.baseline_cum_hazard[1000] * lp0.exp();
    assert!((h100 - 1.0).abs() < 0.3, "H(1000) at x = 0 is {h100}");
}

#[test]
fn estimator_is_unbiased_over_many_seeds() {
    let fits: Vec<f64> = (100..300)
        .map(|s| fit_cox(&simulate(s), &CoxOptions::default()).unwrap().alpha[0])
        .collect();
    let mean = fits.iter().sum::<f64>() / fits.len() as f64;
    assert!((mean - TRUE_ALPHA).abs() < 0.02, "mean alpha {mean}");
}
