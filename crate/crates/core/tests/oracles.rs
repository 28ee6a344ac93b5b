mod common;

use common::*;
use deformcast::baselines::{PixelRegression, RegressionKind};
use deformcast::features::{fit_static_indicators, SplitSpec};
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn regression_deviation(kind: RegressionKind, t: usize, seed: u64) -> f64 {
    let cube = random_cube(t, 3, 4, seed);
    let split = SplitSpec::default();
    let rows = split.train_epochs(t).unwrap();
    let fit = PixelRegression::fit(kind, &cube, &split).unwrap();
    let design = match kind {
        RegressionKind::Linear => linear_row,
        RegressionKind::Seasonal => seasonal_row,
    };
    let oracle = pixel_fits(&cube, rows, design);
    let w = cube.grid.width;
    let mut worst = 0.0f64;
    for (k, beta) in oracle.iter().enumerate() {
        for (j, b) in beta.iter().enumerate() {
            worst = worst.max(rel_diff(fit.coefficients[[j, k / w, k % w]], *b));
        }
    }
    worst
}

fn statics_deviation(t: usize, seed: u64) -> f64 {
    let cube = random_cube(t, 3, 4, seed);
    let split = SplitSpec::default();
    let rows = split.train_epochs(t).unwrap();
    let maps = fit_static_indicators(&cube, &split).unwrap();
    let oracle = pixel_fits(&cube, rows, harmonic_row);
    let w = cube.grid.width;
    let mut worst = 0.0f64;
    for (k, beta) in oracle.iter().enumerate() {
        let (r, c) = (k / w, k % w);
        worst = worst
            .max(rel_diff(maps.velocity[[r, c]], beta[1]))
            .max(rel_diff(maps.acceleration[[r, c]], 2.0 * beta[2]))
            .max(rel_diff(maps.seasonal_amplitude[[r, c]], beta[3].hypot(beta[4])));
    }
    worst
}

proptest! {
    #![proptest_config(prop_config(48))]

    #[test]
    fn linear_baseline_matches_normal_equations(t in 20usize..120, seed in any::<u64>()) {
        prop_assert!(regression_deviation(RegressionKind::Linear, t, seed) <= 1e-9);
    }

    #[test]
    fn seasonal_baseline_matches_normal_equations(t in 80usize..160, seed in any::<u64>()) {
        prop_assert!(regression_deviation(RegressionKind::Seasonal, t, seed) <= 1e-9);
    }

    #[test]
    fn static_indicators_match_normal_equations(t in 130usize..200, seed in any::<u64>()) {
        prop_assert!(statics_deviation(t, seed) <= 1e-9);
    }

    #[test]
    fn metrics_match_loop_oracle(seed in any::<u64>(), spread in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_array((5, 8, 8), -spread, spread, &mut rng);
        let noise = random_array((5, 8, 8), -1.0, 1.0, &mut rng);
        let pred = &truth + &noise;
        prop_assert!(metrics_deviation(&pred, &truth) <= 1e-10);
    }
}

#[test]
fn metrics_oracle_handles_exact_and_constant_maps() {
    let truth = Array3::from_shape_fn((5, 8, 8), |(t, r, c)| (t + r * c) as f64 * 0.3 - 2.0);
    assert!(metrics_deviation(&truth, &truth) <= 1e-10);
    let flat = Array3::from_elem((5, 8, 8), 1.5);
    assert!(metrics_deviation(&(&flat + 0.25), &flat) <= 1e-10);
}

/// Values computed once by the loop oracle on a closed-form 5×8×8 pair.
#[test]
fn frozen_metric_values() {
    let truth = Array3::from_shape_fn((5, 8, 8), |(t, r, c)| {
        ((r as f64) * 0.7 + (c as f64) * 0.3 + t as f64).sin() * 4.0
    });
    let pred = Array3::from_shape_fn((5, 8, 8), |(t, r, c)| {
        truth[[t, r, c]] * 0.9 + ((r + 2 * c + t) % 5) as f64 * 0.1
    });
    let m = deformcast::eval::compute_metrics(&pred, &truth).unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    close(m.rmse_mm, 0.37755267191906416);
    close(m.mae_mm, 0.3130990013015949);
    close(m.r2, 0.9821710900285131);
    close(m.acc_rel[0], 42.00626959247649);
    close(m.acc_rel[2], 93.41692789968653);
    close(m.acc_abs[1], 79.375);
    close(m.acc_abs[3], 19.6875);
    close(m.ssim[0], 0.8547911332933318);
    close(m.ssim[4], 0.9918058300700197);
    close(m.pearson[2], 0.9984766839244683);
    close(m.binned_mae.mae_mm[0].unwrap(), 0.176258092717545);
    close(m.binned_mae.mae_mm[9].unwrap(), 0.4048212418467364);
}
