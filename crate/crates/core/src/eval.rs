//! Metric suite, model and baseline evaluation, zero-shot cross-site
//! evaluation, event-centred error diagnostics and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::features::{denormalize, make_windows, prepare_with_stats, windows_for_epochs, SplitSpec};
use crate::raster::DisplacementCube;

pub const REL_THRESHOLDS: [f64; 3] = [0.10, 0.20, 0.50];
pub const ABS_THRESHOLDS_MM: [f64; 4] = [1.0, 0.5, 0.2, 0.1];
/// Pixels with smaller |truth| are left out of the relative accuracies.
pub const REL_EXCLUSION_MM: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MAE_BINS: usize = 10;

/// MAE per decile of |truth|.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedMae {
    /// `MAE_BINS + 1` edges in mm; bin `k` spans `edges[k]..=edges[k + 1]`.
    pub edges_mm: Vec<f64>,
    pub mae_mm: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub tile: String,
    pub epochs: usize,
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub r2: f64,
    /// Percent of pixels with |err| < p·|truth| for p in [`REL_THRESHOLDS`].
    pub acc_rel: [f64; 3],
    /// Percent of pixels with |err| < threshold for [`ABS_THRESHOLDS_MM`].
    pub acc_abs: [f64; 4],
    pub ssim: Vec<f64>,
    pub pearson: Vec<f64>,
    pub binned_mae: BinnedMae,
    pub rel_excluded: usize,
}

pub const CSV_HEADER: &str = "model,tile,epochs,rmse_mm,mae_mm,r2,acc_rel_10,acc_rel_20,acc_rel_50,\
acc_abs_1mm,acc_abs_0.5mm,acc_abs_0.2mm,acc_abs_0.1mm,mean_ssim,mean_pearson,rel_excluded";

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl MetricsReport {
    pub fn labelled(mut self, model: &str, tile: &str) -> Self {
        self.model = model.to_string();
        self.tile = tile.to_string();
        self
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn mean_pearson(&self) -> f64 {
        mean(&self.pearson)
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{}",
            self.model, self.tile, self.epochs, self.rmse_mm, self.mae_mm, self.r2
        );
        for v in self.acc_rel.iter().chain(&self.acc_abs) {
            let _ = write!(row, ",{v}");
        }
        let _ = write!(
            row,
            ",{},{},{}",
            self.mean_ssim(),
            self.mean_pearson(),
            self.rel_excluded
        );
        row
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("metrics JSON: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics JSON: {e}")))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&json, self.to_json()? + "\n")?;
        fs::write(&csv, comparison_csv(std::slice::from_ref(self)))?;
        Ok((json, csv))
    }
}

/// One row per report, in the order given.
pub fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((size, size), |(i, j)| g[i] * g[j] / (total * total))
}

/// Mean SSIM of two maps with a Gaussian window and dynamic range `range`.
/// The window is shrunk (to an odd size) for maps smaller than 11 pixels.
pub fn ssim(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(Error::Invalid("ssim of an empty map".into()));
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, SSIM_SIGMA);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - size {
        for c in 0..=w - size {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((i, j), g) in win.indexed_iter() {
                let x = a[[r + i, c + j]];
                let y = b[[r + i, c + j]];
                mx += g * x;
                my += g * y;
                xx += g * x * x;
                yy += g * y * y;
                xy += g * x * y;
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pearson correlation of two equally long series; 0 if either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn binned_mae(abs_truth: &[f64], abs_err: &[f64]) -> BinnedMae {
    let n = abs_truth.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| abs_truth[i].total_cmp(&abs_truth[j]));
    let mut edges = Vec::with_capacity(MAE_BINS + 1);
    let mut mae = Vec::with_capacity(MAE_BINS);
    let mut counts = Vec::with_capacity(MAE_BINS);
    for k in 0..MAE_BINS {
        let (lo, hi) = (k * n / MAE_BINS, (k + 1) * n / MAE_BINS);
        edges.push(abs_truth[order[lo.min(n - 1)]]);
        let members = &order[lo..hi];
        counts.push(members.len());
        mae.push(
            (!members.is_empty()).then(|| members.iter().map(|&i| abs_err[i]).sum::<f64>() / members.len() as f64),
        );
    }
    edges.push(abs_truth[order[n - 1]]);
    BinnedMae {
        edges_mm: edges,
        mae_mm: mae,
        counts,
    }
}

/// Pooled errors, threshold accuracies, per-epoch SSIM and Pearson, and
/// decile-binned MAE of `pred` against `truth` (both `[epochs, H, W]`, mm).
pub fn compute_metrics(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<MetricsReport> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("compute_metrics", pred.shape(), truth.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("no test epochs to evaluate".into()));
    }
    if pred.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("predictions and truth must be finite".into()));
    }
    let n = pred.len() as f64;
    let err: Vec<f64> = pred.iter().zip(truth.iter()).map(|(p, t)| p - t).collect();
    let abs_err: Vec<f64> = err.iter().map(|e| e.abs()).collect();
    let abs_truth: Vec<f64> = truth.iter().map(|t| t.abs()).collect();
    let ss_res: f64 = err.iter().map(|e| e * e).sum();
    let truth_mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - truth_mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };

    let eligible: Vec<usize> = (0..abs_truth.len())
        .filter(|&i| abs_truth[i] >= REL_EXCLUSION_MM)
        .collect();
    let acc_rel = REL_THRESHOLDS.map(|p| {
        if eligible.is_empty() {
            return 0.0;
        }
        let hits = eligible.iter().filter(|&&i| abs_err[i] < p * abs_truth[i]).count();
        100.0 * hits as f64 / eligible.len() as f64
    });
    let acc_abs = ABS_THRESHOLDS_MM.map(|th| 100.0 * abs_err.iter().filter(|&&e| e < th).count() as f64 / n);

    let per_epoch: Vec<(f64, f64)> = (0..pred.len_of(Axis(0)))
        .into_par_iter()
        .map(|t| {
            let p = pred.index_axis(Axis(0), t);
            let y = truth.index_axis(Axis(0), t);
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { hi - lo } else { 1.0 };
            let s = ssim(p, y, range)?;
            let pv: Vec<f64> = p.iter().copied().collect();
            let yv: Vec<f64> = y.iter().copied().collect();
            Ok((s, pearson(&pv, &yv)))
        })
        .collect::<Result<_>>()?;

    Ok(MetricsReport {
        model: String::new(),
        tile: String::new(),
        epochs: pred.len_of(Axis(0)),
        rmse_mm: (ss_res / n).sqrt(),
        mae_mm: abs_err.iter().sum::<f64>() / n,
        r2,
        acc_rel,
        acc_abs,
        ssim: per_epoch.iter().map(|p| p.0).collect(),
        pearson: per_epoch.iter().map(|p| p.1).collect(),
        binned_mae: binned_mae(&abs_truth, &abs_err),
        rel_excluded: abs_truth.len() - eligible.len(),
    })
}

/// Predictions and truth on the held-out target epochs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub target_epochs: Vec<usize>,
    pub pred_mm: Array3<f64>,
    pub truth_mm: Array3<f64>,
}

fn finish(model: &str, cube: &DisplacementCube, targets: Vec<usize>, pred: Array3<f64>) -> Result<Evaluation> {
    let truth = baselines::truth_at(cube, &targets)?;
    let report = compute_metrics(&pred, &truth)?.labelled(model, "");
    Ok(Evaluation {
        report,
        target_epochs: targets,
        pred_mm: pred,
        truth_mm: truth,
    })
}

/// Applies the checkpoint's EMA weights to `cube`, normalising with the
/// checkpoint's statistics, and scores the held-out windows in millimetres.
/// The static channels are refitted on `cube`'s own training window.
pub fn evaluate_model(checkpoint: &ModelCheckpoint, cube: &DisplacementCube, split: &SplitSpec) -> Result<Evaluation> {
    let (h, w) = checkpoint.config.grid();
    if (cube.grid.height, cube.grid.width) != (h, w) {
        return Err(Error::shape(
            "evaluate grid",
            &[cube.grid.height, cube.grid.width],
            &[h, w],
        ));
    }
    let model = checkpoint.eval_model()?;
    let features = prepare_with_stats(cube, split, &checkpoint.stats)?;
    let samples = make_windows(&features.cube, model.history(), split)?;
    if samples.test.is_empty() {
        return Err(Error::Invalid("held-out split has no windows".into()));
    }
    let norm = model.predict(&checkpoint.ema, &features.cube, &samples.test)?;
    let maps = norm
        .outer_iter()
        .map(|m| denormalize(m, &checkpoint.stats))
        .collect::<Result<Vec<_>>>()?;
    let pred = crate::model::stack_maps(&maps)?;
    let targets = samples.test.iter().map(|w| w.target).collect();
    finish(checkpoint.config.name(), cube, targets, pred)
}

/// Zero-shot evaluation of a source-tile checkpoint on a target tile. The
/// checkpoint is only read.
pub fn cross_site_evaluate(
    checkpoint: &ModelCheckpoint,
    target: &DisplacementCube,
    split: &SplitSpec,
) -> Result<Evaluation> {
    if (target.grid.height, target.grid.width) != (checkpoint.grid.height, checkpoint.grid.width) {
        return Err(Error::shape(
            "cross-site grid",
            &[target.grid.height, target.grid.width],
            &[checkpoint.grid.height, checkpoint.grid.width],
        ));
    }
    evaluate_model(checkpoint, target, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Persistence,
    Linear,
    Seasonal,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Persistence => "persistence",
            BaselineKind::Linear => "linear",
            BaselineKind::Seasonal => "seasonal",
        }
    }
}

/// Scores a closed-form baseline on the same held-out targets a model with
/// history `history` would be scored on.
pub fn evaluate_baseline(
    kind: BaselineKind,
    cube: &DisplacementCube,
    split: &SplitSpec,
    history: usize,
) -> Result<Evaluation> {
    let samples = windows_for_epochs(cube.epochs(), history, split)?;
    let targets: Vec<usize> = samples.test.iter().map(|w| w.target).collect();
    let pred = match kind {
        BaselineKind::Persistence => baselines::persistence(cube, &targets)?,
        BaselineKind::Linear => baselines::fit_predict_linear(cube, split, &targets)?,
        BaselineKind::Seasonal => baselines::fit_predict_seasonal(cube, split, &targets)?,
    };
    finish(kind.name(), cube, targets, pred)
}

pub const EVENT_HALF_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelCurve {
    pub label: String,
    pub row: usize,
    pub col: usize,
    /// `pred − truth` at each offset of [`EventDiagnostics::offsets`].
    pub errors_mm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventDiagnostics {
    /// Index into the series of the largest map-mean absolute one-step change.
    pub event_index: usize,
    pub offsets: Vec<i64>,
    /// Map-wise MAE at each offset.
    pub map_mae_mm: Vec<f64>,
    pub pixels: Vec<PixelCurve>,
}

impl EventDiagnostics {
    /// Offset of the largest map-wise MAE.
    pub fn peak_offset(&self) -> i64 {
        let k = (0..self.map_mae_mm.len())
            .max_by(|&a, &b| self.map_mae_mm[a].total_cmp(&self.map_mae_mm[b]).then(b.cmp(&a)))
            .expect("non-empty window");
        self.offsets[k]
    }

    /// Mean map-wise MAE over the pre-event offsets in the window.
    pub fn pre_event_mean(&self) -> f64 {
        let pre: Vec<f64> = self
            .offsets
            .iter()
            .zip(&self.map_mae_mm)
            .filter(|(o, _)| **o < 0)
            .map(|(_, v)| *v)
            .collect();
        mean(&pre)
    }

    /// First positive offset whose map-wise MAE is below `factor` times the pre-event mean.
    pub fn recovery_offset(&self, factor: f64) -> Option<i64> {
        let bound = factor * self.pre_event_mean();
        self.offsets
            .iter()
            .zip(&self.map_mae_mm)
            .find(|(o, v)| **o > 0 && **v < bound)
            .map(|(o, _)| *o)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("offset,series_index,map_mae_mm");
        for p in &self.pixels {
            let _ = write!(out, ",{}_r{}_c{}", p.label, p.row, p.col);
        }
        out.push('\n');
        for (k, o) in self.offsets.iter().enumerate() {
            let _ = write!(out, "{o},{},{}", self.event_index as i64 + o, self.map_mae_mm[k]);
            for p in &self.pixels {
                let _ = write!(out, ",{}", p.errors_mm[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Error curves around the largest one-step change of `truth` (series of
/// consecutive epochs). The event index `e` maximises the map mean of
/// `|truth[e] − truth[e − 1]|`, i.e. it is the first epoch that shows the step.
pub fn event_centred_diagnostics(
    pred: &Array3<f64>,
    truth: &Array3<f64>,
    half_window: usize,
) -> Result<EventDiagnostics> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("event diagnostics", pred.shape(), truth.shape()));
    }
    let len = truth.len_of(Axis(0));
    if len <= 2 * half_window + 1 {
        return Err(Error::Invalid(format!(
            "series of {len} epochs is too short for a ±{half_window} window"
        )));
    }
    let steps: Vec<Array2<f64>> = (1..len)
        .map(|t| (&truth.index_axis(Axis(0), t) - &truth.index_axis(Axis(0), t - 1)).mapv(f64::abs))
        .collect();
    let e = 1
        + (0..steps.len())
            .max_by(|&a, &b| {
                steps[a]
                    .mean()
                    .unwrap()
                    .total_cmp(&steps[b].mean().unwrap())
                    .then(b.cmp(&a))
            })
            .expect("len > 1");
    let step = &steps[e - 1];
    let (w, hw) = (step.ncols(), half_window as i64);
    let cell = |k: usize| (k / w, k % w);
    let flat: Vec<f64> = step.iter().copied().collect();
    let argmax = (0..flat.len())
        .max_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(b.cmp(&a)))
        .unwrap();
    let argmin = (0..flat.len())
        .min_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)))
        .unwrap();
    let half = 0.5 * flat[argmax];
    let edge = (0..flat.len())
        .min_by(|&a, &b| {
            (flat[a] - half)
                .abs()
                .total_cmp(&(flat[b] - half).abs())
                .then(a.cmp(&b))
        })
        .unwrap();

    let offsets: Vec<i64> = (-hw..=hw)
        .filter(|o| (0..len as i64).contains(&(e as i64 + o)))
        .collect();
    let err = pred - truth;
    let map_mae_mm = offsets
        .iter()
        .map(|o| {
            err.index_axis(Axis(0), (e as i64 + o) as usize)
                .mapv(f64::abs)
                .mean()
                .unwrap()
        })
        .collect();
    let pixels = [("largest_step", argmax), ("step_edge", edge), ("background", argmin)]
        .into_iter()
        .map(|(label, k)| {
            let (r, c) = cell(k);
            PixelCurve {
                label: label.into(),
                row: r,
                col: c,
                errors_mm: offsets.iter().map(|o| err[[(e as i64 + o) as usize, r, c]]).collect(),
            }
        })
        .collect();
    Ok(EventDiagnostics {
        event_index: e,
        offsets,
        map_mae_mm,
        pixels,
    })
}

/// Linear mm → gray mapping: `gray = round(255 · (v − lo) / (hi − lo))`, clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayMapping {
    pub lo_mm: f64,
    pub hi_mm: f64,
}

impl GrayMapping {
    /// Symmetric range `±max|v|` (or ±1 mm for an all-zero input).
    pub fn symmetric<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        let m = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m = if m > 0.0 { m } else { 1.0 };
        GrayMapping { lo_mm: -m, hi_mm: m }
    }

    pub fn gray(&self, v: f64) -> u8 {
        let x = (v - self.lo_mm) / (self.hi_mm - self.lo_mm);
        (255.0 * x.clamp(0.0, 1.0)).round() as u8
    }
}

/// Binary 8-bit PGM of a map, row 0 first.
pub fn pgm_bytes(map: ArrayView2<'_, f64>, mapping: &GrayMapping) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| mapping.gray(v)));
    out
}

/// Writes truth, prediction and residual heatmaps for every evaluated epoch
/// plus a `heatmaps.txt` sidecar recording the gray mappings.
pub fn write_heatmaps(eval: &Evaluation, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let value_map = GrayMapping::symmetric(eval.truth_mm.iter().chain(eval.pred_mm.iter()));
    let residual = &eval.pred_mm - &eval.truth_mm;
    let residual_map = GrayMapping::symmetric(residual.iter());
    let mut written = Vec::new();
    for (k, &epoch) in eval.target_epochs.iter().enumerate() {
        for (kind, cube, mapping) in [
            ("truth", &eval.truth_mm, &value_map),
            ("pred", &eval.pred_mm, &value_map),
            ("residual", &residual, &residual_map),
        ] {
            let path = dir.join(format!("{kind}_{epoch:04}.pgm"));
            fs::write(&path, pgm_bytes(cube.slice(s![k, .., ..]), mapping))?;
            written.push(path);
        }
    }
    let sidecar = format!(
        "# gray = round(255 * clamp((value_mm - lo_mm) / (hi_mm - lo_mm), 0, 1))\n\
         truth_pred lo_mm={} hi_mm={}\nresidual lo_mm={} hi_mm={}\n",
        value_map.lo_mm, value_map.hi_mm, residual_map.lo_mm, residual_map.hi_mm
    );
    let path = dir.join("heatmaps.txt");
    fs::write(&path, sidecar)?;
    written.push(path);
    Ok(written)
}
