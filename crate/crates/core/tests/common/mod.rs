//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner. Everything here is written with plain loops so it does
//! not share arithmetic with the library code it checks.

#![allow(dead_code)]

use chrono::NaiveDate;
use deformcast::autodiff::Tensor;
use deformcast::baselines::{PixelRegression, RegressionKind};
use deformcast::checkpoint::ModelCheckpoint;
use deformcast::features::{annual_omega, compute_norm_stats, fit_static_indicators, SplitSpec, YEAR_DAYS};
use deformcast::features::{denormalize, prepare};
use deformcast::ingest::{load_l3_csv, write_l3_csv, AcquisitionCalendar, PointCloudSeries, PointRecord, TileId};
use deformcast::model::{ModelConfig, NeuralModel};
use deformcast::raster::{DisplacementCube, GridSpec};
use deformcast::stgcn::StgcnConfig;
use deformcast::transformer::{patchify, unpatchify, TransformerConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Cube on a 6-day calendar from 2018-01-01 with `f(t, row, col, day)`.
pub fn cube_from_fn(t: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, f64) -> f64) -> DisplacementCube {
    let cal = AcquisitionCalendar::regular(NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(), 6, t).unwrap();
    let days = cal.epoch_days();
    let grid = GridSpec::new(h, w, (0.0, 0.0), (1000.0, 1000.0)).unwrap();
    let values = Array3::from_shape_fn((t, h, w), |(ti, r, c)| f(ti, r, c, days[ti]));
    DisplacementCube::new(grid, cal, values).unwrap()
}

/// Trend, annual cycle and noise with pixel-dependent coefficients.
pub fn random_cube(t: usize, h: usize, w: usize, seed: u64) -> DisplacementCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<[f64; 4]> = (0..h * w)
        .map(|_| {
            [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(0.0..6.0),
                rng.gen_range(0.0..6.3),
            ]
        })
        .collect();
    let noise: Vec<f64> = (0..t * h * w).map(|_| rng.gen_range(-0.5..0.5)).collect();
    cube_from_fn(t, h, w, |ti, r, c, d| {
        let [b0, v, a, phi] = coef[r * w + c];
        b0 + v * d / YEAR_DAYS + a * (annual_omega() * d + phi).sin() + noise[(ti * h + r) * w + c]
    })
}

pub fn random_array(shape: (usize, usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Property-test settings without on-disk failure persistence.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Least squares through the normal equations `XᵀX β = Xᵀy`, solved by
/// Gaussian elimination with partial pivoting.
pub fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in rows.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * yi;
        }
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=p {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

/// Per-pixel coefficients from [`normal_equations`] over the first `rows` epochs
/// with design row `design(day offset)`; indexed `[pixel][coefficient]`.
pub fn pixel_fits(cube: &DisplacementCube, rows: usize, design: impl Fn(f64) -> Vec<f64>) -> Vec<Vec<f64>> {
    let days = cube.calendar.epoch_days();
    let x: Vec<Vec<f64>> = (0..rows).map(|i| design(days[i] - days[0])).collect();
    let (h, w) = (cube.grid.height, cube.grid.width);
    (0..h * w)
        .map(|k| {
            let y: Vec<f64> = (0..rows).map(|t| cube.values[[t, k / w, k % w]]).collect();
            normal_equations(&x, &y)
        })
        .collect()
}

pub fn linear_row(d: f64) -> Vec<f64> {
    vec![1.0, d / YEAR_DAYS]
}

pub fn seasonal_row(d: f64) -> Vec<f64> {
    let p = 2.0 * std::f64::consts::PI * d / 365.25;
    vec![1.0, d / 365.25, p.sin(), p.cos()]
}

pub fn harmonic_row(d: f64) -> Vec<f64> {
    let t = d / 365.25;
    let p = 2.0 * std::f64::consts::PI * d / 365.25;
    vec![1.0, t, t * t, p.sin(), p.cos()]
}

/// Metric suite recomputed with explicit loops.
#[derive(Debug)]
pub struct NaiveMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub acc_rel: [f64; 3],
    pub acc_abs: [f64; 4],
    pub ssim: Vec<f64>,
    pub pearson: Vec<f64>,
    /// Rank-decile MAE.
    pub binned: Vec<Option<f64>>,
}

fn naive_ssim(x: &[Vec<f64>], y: &[Vec<f64>], range: f64) -> f64 {
    let (h, w) = (x.len(), x[0].len());
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let centre = (size - 1) as f64 / 2.0;
    let mut g = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let r2 = (i as f64 - centre).powi(2) + (j as f64 - centre).powi(2);
            g[i][j] = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            total += g[i][j];
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut sum = 0.0;
    let mut count = 0.0;
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    mx += g[i][j] / total * x[r + i][c + j];
                    my += g[i][j] / total * y[r + i][c + j];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let (dx, dy) = (x[r + i][c + j] - mx, y[r + i][c + j] - my);
                    vx += g[i][j] / total * dx * dx;
                    vy += g[i][j] / total * dy * dy;
                    cov += g[i][j] / total * dx * dy;
                }
            }
            sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    sum / count
}

fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma: f64 = a.iter().sum::<f64>() / n;
    let mb: f64 = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma).powi(2);
        db += (b[i] - mb).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / da.sqrt() / db.sqrt()
    }
}

pub fn naive_metrics(pred: &Array3<f64>, truth: &Array3<f64>) -> NaiveMetrics {
    let (t, h, w) = truth.dim();
    let mut p = Vec::new();
    let mut y = Vec::new();
    for ti in 0..t {
        for r in 0..h {
            for c in 0..w {
                p.push(pred[[ti, r, c]]);
                y.push(truth[[ti, r, c]]);
            }
        }
    }
    let n = y.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for i in 0..y.len() {
        se += (p[i] - y[i]).powi(2);
        ae += (p[i] - y[i]).abs();
    }
    let mean = y.iter().sum::<f64>() / n;
    let mut tot = 0.0;
    for v in &y {
        tot += (v - mean).powi(2);
    }
    let r2 = if tot > 0.0 {
        1.0 - se / tot
    } else if se == 0.0 {
        1.0
    } else {
        0.0
    };

    let mut acc_rel = [0.0; 3];
    for (k, frac) in [0.1, 0.2, 0.5].into_iter().enumerate() {
        let mut hit = 0.0;
        let mut eligible = 0.0;
        for i in 0..y.len() {
            if y[i].abs() >= 1e-6 {
                eligible += 1.0;
                if (p[i] - y[i]).abs() < frac * y[i].abs() {
                    hit += 1.0;
                }
            }
        }
        acc_rel[k] = if eligible > 0.0 { 100.0 * hit / eligible } else { 0.0 };
    }
    let mut acc_abs = [0.0; 4];
    for (k, th) in [1.0, 0.5, 0.2, 0.1].into_iter().enumerate() {
        let hit = (0..y.len()).filter(|&i| (p[i] - y[i]).abs() < th).count();
        acc_abs[k] = 100.0 * hit as f64 / n;
    }

    let mut ssim = Vec::new();
    let mut pearson = Vec::new();
    for ti in 0..t {
        let xm: Vec<Vec<f64>> = (0..h).map(|r| (0..w).map(|c| pred[[ti, r, c]]).collect()).collect();
        let ym: Vec<Vec<f64>> = (0..h).map(|r| (0..w).map(|c| truth[[ti, r, c]]).collect()).collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &ym {
            for &v in row {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        ssim.push(naive_ssim(&xm, &ym, range));
        let pf: Vec<f64> = xm.concat();
        let yf: Vec<f64> = ym.concat();
        pearson.push(naive_pearson(&pf, &yf));
    }

    let len = y.len();
    let mut sum = [0.0; 10];
    let mut cnt = [0usize; 10];
    for i in 0..len {
        let rank = (0..len)
            .filter(|&j| y[j].abs() < y[i].abs() || (y[j].abs() == y[i].abs() && j < i))
            .count();
        let bin = (0..10).rev().find(|&k| k * len / 10 <= rank).unwrap();
        sum[bin] += (p[i] - y[i]).abs();
        cnt[bin] += 1;
    }
    let binned = (0..10).map(|k| (cnt[k] > 0).then(|| sum[k] / cnt[k] as f64)).collect();

    NaiveMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        r2,
        acc_rel,
        acc_abs,
        ssim,
        pearson,
        binned,
    }
}

/// Largest deviation between the library report and the loop oracle, over
/// every scalar metric; accuracies are compared as fractions.
pub fn metrics_deviation(pred: &Array3<f64>, truth: &Array3<f64>) -> f64 {
    let lib = deformcast::eval::compute_metrics(pred, truth).unwrap();
    let naive = naive_metrics(pred, truth);
    let mut worst = 0.0f64;
    let mut cmp = |a: f64, b: f64| worst = worst.max((a - b).abs());
    cmp(lib.rmse_mm, naive.rmse);
    cmp(lib.mae_mm, naive.mae);
    cmp(lib.r2, naive.r2);
    for k in 0..3 {
        cmp(lib.acc_rel[k] / 100.0, naive.acc_rel[k] / 100.0);
    }
    for k in 0..4 {
        cmp(lib.acc_abs[k] / 100.0, naive.acc_abs[k] / 100.0);
    }
    for (a, b) in lib.ssim.iter().zip(&naive.ssim) {
        cmp(*a, *b);
    }
    for (a, b) in lib.pearson.iter().zip(&naive.pearson) {
        cmp(*a, *b);
    }
    for (a, b) in lib.binned_mae.mae_mm.iter().zip(&naive.binned) {
        match (a, b) {
            (Some(x), Some(y)) => cmp(*x, *y),
            (None, None) => {}
            _ => cmp(0.0, f64::INFINITY),
        }
    }
    worst
}

fn same_bits<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> bool {
    let a: Vec<u64> = a.into_iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = b.into_iter().map(|v| v.to_bits()).collect();
    a == b
}

/// Every quantity fitted on the training window, flattened in a fixed order.
pub fn training_window_fits(cube: &DisplacementCube, split: &SplitSpec) -> Vec<f64> {
    let statics = fit_static_indicators(cube, split).unwrap();
    let stats = compute_norm_stats(cube, &statics, split).unwrap();
    let mut out = Vec::new();
    for m in statics.maps() {
        out.extend(m.iter().copied());
    }
    out.extend(stats.pixel_mean.iter().copied());
    out.extend(stats.pixel_std.iter().copied());
    out.extend(stats.static_mean);
    out.extend(stats.static_std);
    for kind in [RegressionKind::Linear, RegressionKind::Seasonal] {
        out.extend(
            PixelRegression::fit(kind, cube, split)
                .unwrap()
                .coefficients
                .iter()
                .copied(),
        );
    }
    out
}

/// Perturbs only epochs at or after the training cut-off and reports whether
/// every training-window fit is bitwise unchanged.
pub fn leakage_safe(cube: &DisplacementCube, split: &SplitSpec, seed: u64, magnitude: f64) -> bool {
    let before = training_window_fits(cube, split);
    let t_train = split.train_epochs(cube.epochs()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = cube.clone();
    for t in t_train..cube.epochs() {
        perturbed
            .values
            .index_axis_mut(ndarray::Axis(0), t)
            .mapv_inplace(|v| v + rng.gen_range(-magnitude..magnitude));
    }
    same_bits(&before, &training_window_fits(&perturbed, split))
}

/// Random point cloud with missing cells on a regular calendar.
pub fn random_series(points: usize, epochs: usize, seed: u64) -> PointCloudSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tile = TileId::new(32, 34);
    let (x0, y0) = tile.origin_m();
    let cal = AcquisitionCalendar::regular(NaiveDate::from_ymd_opt(2019, 3, 2).unwrap(), 6, epochs).unwrap();
    let points = (0..points)
        .map(|_| PointRecord {
            easting_m: x0 + rng.gen_range(0.0..100_000.0),
            northing_m: y0 + rng.gen_range(0.0..100_000.0),
            displacement_mm: (0..epochs)
                .map(|_| (rng.gen::<f64>() > 0.1).then(|| rng.gen_range(-80.0..80.0)))
                .collect(),
        })
        .collect();
    PointCloudSeries {
        tile,
        calendar: cal,
        points,
    }
}

/// Writes and reloads `series`; returns the largest value deviation (infinite
/// on any structural mismatch) and whether a second write is byte-identical.
pub fn csv_round_trip(series: &PointCloudSeries, dir: &Path) -> (f64, bool) {
    let path = dir.join(series.tile.l3_file_name());
    write_l3_csv(series, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = load_l3_csv(&path).unwrap();
    let back = loaded.series;
    if !loaded.skipped.is_empty()
        || back.tile != series.tile
        || back.calendar != series.calendar
        || back.points.len() != series.points.len()
    {
        return (f64::INFINITY, false);
    }
    let mut worst = 0.0f64;
    for (a, b) in series.points.iter().zip(&back.points) {
        worst = worst
            .max((a.easting_m - b.easting_m).abs())
            .max((a.northing_m - b.northing_m).abs());
        for (x, y) in a.displacement_mm.iter().zip(&b.displacement_mm) {
            match (x, y) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
    }
    let again = dir.join("again.csv");
    write_l3_csv(&back, &again).unwrap();
    (worst, std::fs::read(&again).unwrap() == first)
}

pub fn patch_round_trip_exact(l: usize, c: usize, h: usize, w: usize, p: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[l, c, h, w], |_| rng.gen_range(-1e3..1e3));
    let patches = patchify(&x, p).unwrap();
    let back = unpatchify(&patches, l, c, h, w, p).unwrap();
    back.shape() == x.shape()
        && back
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Largest |denormalize(normalize(d)) − d| over every epoch of `cube`.
pub fn normalization_round_trip(cube: &DisplacementCube, split: &SplitSpec) -> f64 {
    let feats = prepare(cube, split).unwrap();
    let mut worst = 0.0f64;
    for t in 0..cube.epochs() {
        let back = denormalize(feats.cube.displacement(t), &feats.stats).unwrap();
        for (a, b) in back.iter().zip(cube.frame(t).iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub fn micro_transformer(h: usize, w: usize) -> TransformerConfig {
    TransformerConfig {
        height: h,
        width: w,
        patch_size: 4,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        ffn_multiplier: 2,
        input_channels: 6,
        history_length: 4,
        out_steps: 1,
        dropout: 0.0,
    }
}

pub fn micro_stgcn(h: usize, w: usize) -> StgcnConfig {
    StgcnConfig {
        height: h,
        width: w,
        input_channels: 6,
        hidden: vec![4],
        kernel_size: 2,
        history_length: 4,
        dropout: 0.0,
    }
}

/// Checkpoint of an untrained micro model on a random tile.
pub fn sample_checkpoint(config: ModelConfig, seed: u64) -> ModelCheckpoint {
    let (h, w) = config.grid();
    let cube = random_cube(40, h, w, seed);
    let stats = prepare(&cube, &SplitSpec::default()).unwrap().stats;
    let model = NeuralModel::new(&config, seed).unwrap();
    let mut ema = model.params().clone();
    for (_, t) in ema.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    }
    ModelCheckpoint::new(TileId::new(32, 34), cube.grid, &model, ema, stats).unwrap()
}

/// Save → load → save; true when the reloaded checkpoint equals the original
/// and both files are byte-identical.
pub fn checkpoint_round_trip(ck: &ModelCheckpoint, dir: &Path) -> bool {
    let a = dir.join("a.ckpt");
    let b = dir.join("b.ckpt");
    ck.save(&a).unwrap();
    let back = ModelCheckpoint::load(&a).unwrap();
    back.save(&b).unwrap();
    &back == ck && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
}

/// Runs the command-line binary with `args`.
pub fn cli(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_deformcast"))
        .args(args)
        .env("DEFORM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn cli_ok(args: &[&str]) -> Result<(), String> {
    let out = cli(args);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{:?} exited with {}: {}",
            args,
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Small run configuration on a `size`×`size` grid.
pub fn small_config(tile: &str, seed: u64, size: usize, epochs: usize, steps: usize, model_kind: &str) -> String {
    format!(
        r#"seed = {seed}

[data]
height = {size}
width = {size}

[synth]
kind = "mixed"
tile = "{tile}"
epochs = {epochs}
points = {points}

[model]
kind = "{model_kind}"
history = 4

[model.transformer]
patch_size = 4
embed_dim = 16
layers = 1
heads = 2

[model.stgcn]
hidden = [4]

[optim]
max_steps = {steps}
batch_size = 4
"#,
        points = size * size * 3,
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// Paths produced by [`cli_pipeline`].
pub struct PipelineRun {
    pub checkpoint: std::path::PathBuf,
    pub run_dir: std::path::PathBuf,
    pub report: std::path::PathBuf,
    pub metrics: Vec<std::path::PathBuf>,
}

/// synth → ingest (CSV, raster, features) → train → eval → transfer → report,
/// all through the binary.
pub fn cli_pipeline(dir: &Path, size: usize, epochs: usize, steps: usize) -> Result<PipelineRun, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let synth_dir = dir.join("synth");
    let ingest_dir = dir.join("ingest");
    let run_dir = dir.join("run");
    let target_dir = dir.join("target");
    let report_dir = dir.join("report");

    let base = write_config(
        dir,
        "synth.toml",
        &small_config("E32N34", 7, size, epochs, steps, "transformer"),
    );
    cli_ok(&["synth", "--config", &base, "--out", &s(&synth_dir)])?;
    let target = write_config(
        dir,
        "target.toml",
        &small_config("E33N35", 11, size, epochs, steps, "transformer"),
    );
    cli_ok(&["synth", "--config", &target, "--out", &s(&target_dir)])?;

    let csv = synth_dir.join(TileId::new(32, 34).l3_file_name());
    let input = |p: &Path| format!("[data]\ninput = {:?}\n", s(p));
    let with_input =
        |p: &Path, kind: &str| small_config("E32N34", 7, size, epochs, steps, kind).replacen("[data]\n", &input(p), 1);
    let ingest_cfg = write_config(dir, "ingest.toml", &with_input(&csv, "transformer"));
    cli_ok(&["ingest", "--config", &ingest_cfg, "--out", &s(&ingest_dir)])?;

    let cube = ingest_dir.join("displacement.cube");
    let train_cfg = write_config(dir, "train.toml", &with_input(&cube, "transformer"));
    cli_ok(&["train", "--config", &train_cfg, "--out", &s(&run_dir)])?;
    cli_ok(&["eval", "--config", &train_cfg, "--out", &s(&run_dir)])?;
    for kind in ["persistence", "linear"] {
        let cfg = write_config(dir, &format!("{kind}.toml"), &with_input(&cube, kind));
        cli_ok(&["eval", "--config", &cfg, "--out", &s(&run_dir)])?;
    }
    let checkpoint = run_dir.join("checkpoint.ckpt");
    cli_ok(&[
        "transfer",
        "--config",
        &train_cfg,
        "--out",
        &s(&run_dir),
        "--checkpoint",
        &s(&checkpoint),
        "--target",
        &s(&target_dir.join("truth.cube")),
    ])?;

    let mut metrics: Vec<_> = std::fs::read_dir(&run_dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.file_name().unwrap().to_string_lossy().starts_with("manifest")
        })
        .collect();
    metrics.sort();
    let mut args = vec!["report".to_string(), "--out".into(), s(&report_dir)];
    args.extend(metrics.iter().map(|p| s(p)));
    cli_ok(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    Ok(PipelineRun {
        checkpoint,
        run_dir,
        report: report_dir.join("comparison.csv"),
        metrics,
    })
}
