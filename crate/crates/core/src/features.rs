//! Training-window features and sliding-window samples.
//!
//! Everything estimated here (static indicators, normalisation statistics)
//! reads only the first `T_train` epochs of a cube, so later epochs can be
//! changed without moving any fitted quantity.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ingest::AcquisitionCalendar;
use crate::lstsq::LeastSquares;
use crate::raster::DisplacementCube;

pub const YEAR_DAYS: f64 = 365.25;
pub const NORM_EPSILON: f64 = 1e-6;
pub const CHANNELS: usize = 6;
pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "displacement",
    "velocity",
    "acceleration",
    "amplitude",
    "time_sin",
    "time_cos",
];
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
/// Smallest number of windows [`make_windows`] accepts.
pub const MIN_WINDOWS: usize = 5;

/// Annual angular frequency in radians per day.
pub fn annual_omega() -> f64 {
    2.0 * PI / YEAR_DAYS
}

/// Chronological split fraction, applied to epochs and to windows alike.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

impl SplitSpec {
    pub fn new(train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "train fraction must be in (0, 1), got {train_fraction}"
            )));
        }
        Ok(SplitSpec { train_fraction })
    }

    /// `floor(fraction · n)` without the rounding surprise of `0.8 * 5 = 3.999…`.
    fn portion(&self, n: usize) -> usize {
        let raw = self.train_fraction * n as f64;
        let near = raw.round();
        if (raw - near).abs() < 1e-9 {
            near as usize
        } else {
            raw.floor() as usize
        }
    }

    /// Number of training epochs `T_train` for a calendar of `t` epochs.
    pub fn train_epochs(&self, t: usize) -> Result<usize> {
        let n = self.portion(t);
        if n < 2 || n >= t {
            return Err(Error::Invalid(format!(
                "split of {t} epochs at {} leaves {n} training epochs; need 2 <= T_train < T",
                self.train_fraction
            )));
        }
        Ok(n)
    }

    pub fn train_windows(&self, windows: usize) -> usize {
        self.portion(windows)
    }
}

/// Input configuration of a learned model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Unimodal,
    Multimodal,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Unimodal => 1,
            Modality::Multimodal => CHANNELS,
        }
    }
}

/// Per-pixel indicators fitted on the training window.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticMaps {
    /// mm/yr
    pub velocity: Array2<f64>,
    /// mm/yr²
    pub acceleration: Array2<f64>,
    /// mm
    pub seasonal_amplitude: Array2<f64>,
}

impl StaticMaps {
    pub fn maps(&self) -> [&Array2<f64>; 3] {
        [&self.velocity, &self.acceleration, &self.seasonal_amplitude]
    }
}

/// Design `[1, t_yr, t_yr², sin ωd, cos ωd]` over elapsed days `days`,
/// with `t_yr` counted from the first entry.
pub fn harmonic_design(days: &[f64]) -> DMatrix<f64> {
    let omega = annual_omega();
    let d0 = days.first().copied().unwrap_or(0.0);
    DMatrix::from_fn(days.len(), 5, |i, j| {
        let d = days[i] - d0;
        let ty = d / YEAR_DAYS;
        match j {
            0 => 1.0,
            1 => ty,
            2 => ty * ty,
            3 => (omega * d).sin(),
            _ => (omega * d).cos(),
        }
    })
}

/// Rows `0..rows` of the cube as an observations × pixels matrix.
pub(crate) fn pixel_matrix(cube: &DisplacementCube, rows: usize) -> DMatrix<f64> {
    let window = cube.values.slice(s![0..rows, .., ..]);
    let pixels = cube.grid.pixels();
    let flat: Vec<f64> = window.iter().copied().collect();
    DMatrix::from_row_slice(rows, pixels, &flat)
}

/// Solves the shared-design regression for every pixel; coefficients × pixels.
pub(crate) fn fit_pixels(cube: &DisplacementCube, design: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let rows = design.nrows();
    let ls = LeastSquares::new(design).map_err(|col| Error::RankDeficient {
        row: 0,
        col: 0,
        message: format!("{what} design over {rows} training epochs is rank deficient at column {col}"),
    })?;
    Ok(ls.solve_many(&pixel_matrix(cube, rows)))
}

/// Per-pixel polynomial-plus-annual fit over the training epochs.
pub fn fit_static_indicators(cube: &DisplacementCube, split: &SplitSpec) -> Result<StaticMaps> {
    let t_train = split.train_epochs(cube.epochs())?;
    let days = cube.calendar.epoch_days();
    let beta = fit_pixels(cube, harmonic_design(&days[..t_train]), "static indicator")?;
    let (h, w) = (cube.grid.height, cube.grid.width);
    let map = |f: &dyn Fn(usize) -> f64| Array2::from_shape_fn((h, w), |(r, c)| f(r * w + c));
    Ok(StaticMaps {
        velocity: map(&|k| beta[(1, k)]),
        acceleration: map(&|k| 2.0 * beta[(2, k)]),
        seasonal_amplitude: map(&|k| beta[(3, k)].hypot(beta[(4, k)])),
    })
}

/// Day-of-year harmonic pair per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEncoding {
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
}

pub fn encode_time(calendar: &AcquisitionCalendar) -> TemporalEncoding {
    let (sin, cos) = calendar
        .day_of_year()
        .into_iter()
        .map(|doy| {
            let phi = 2.0 * PI * doy / YEAR_DAYS;
            (phi.sin(), phi.cos())
        })
        .unzip();
    TemporalEncoding { sin, cos }
}

/// Normalisation statistics, all from the training window.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub pixel_mean: Array2<f64>,
    pub pixel_std: Array2<f64>,
    /// Spatial mean of velocity, acceleration, amplitude.
    pub static_mean: [f64; 3],
    pub static_std: [f64; 3],
    pub epsilon: f64,
}

impl NormStats {
    pub fn dims(&self) -> (usize, usize) {
        self.pixel_mean.dim()
    }
}

pub fn compute_norm_stats(cube: &DisplacementCube, statics: &StaticMaps, split: &SplitSpec) -> Result<NormStats> {
    let t_train = split.train_epochs(cube.epochs())?;
    let window = cube.values.slice(s![0..t_train, .., ..]);
    let n = t_train as f64;
    let pixel_mean = window.sum_axis(Axis(0)) / n;
    let mut var = Array2::<f64>::zeros(pixel_mean.dim());
    for frame in window.outer_iter() {
        var.zip_mut_with(&(&frame - &pixel_mean), |v, d| *v += d * d);
    }
    let pixel_std = var.mapv(|v| (v / n + NORM_EPSILON).sqrt());
    let mut static_mean = [0.0; 3];
    let mut static_std = [0.0; 3];
    for (i, m) in statics.maps().into_iter().enumerate() {
        let count = m.len() as f64;
        let mean = m.sum() / count;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        static_mean[i] = mean;
        static_std[i] = (var + NORM_EPSILON).sqrt();
    }
    Ok(NormStats {
        pixel_mean,
        pixel_std,
        static_mean,
        static_std,
        epsilon: NORM_EPSILON,
    })
}

/// Normalised T×C×H×W stack, channel order as in [`CHANNEL_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalCube {
    pub values: Array4<f64>,
    pub stats: NormStats,
}

impl MultimodalCube {
    pub fn epochs(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[2], s[3])
    }

    pub fn displacement(&self, t: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![t, 0, .., ..])
    }

    /// Epochs `start..start+len` as an `[len, C, H, W]` tensor.
    pub fn window_tensor(&self, start: usize, len: usize, modality: Modality) -> Tensor {
        let c = modality.channels();
        let view = self.values.slice(s![start..start + len, 0..c, .., ..]);
        let (h, w) = self.dims();
        Tensor::new(&[len, c, h, w], view.iter().copied().collect()).expect("window shape")
    }
}

pub fn normalize(
    cube: &DisplacementCube,
    statics: &StaticMaps,
    encoding: &TemporalEncoding,
    stats: &NormStats,
) -> Result<MultimodalCube> {
    let (t, h, w) = cube.values.dim();
    if stats.dims() != (h, w) {
        return Err(Error::shape("normalize", &[h, w], &[stats.dims().0, stats.dims().1]));
    }
    for m in statics.maps() {
        if m.dim() != (h, w) {
            return Err(Error::shape("normalize", &[h, w], m.shape()));
        }
    }
    if encoding.sin.len() != t || encoding.cos.len() != t {
        return Err(Error::shape("normalize", &[t], &[encoding.sin.len()]));
    }
    let mut values = Array4::<f64>::zeros((t, CHANNELS, h, w));
    let statics_norm: Vec<Array2<f64>> = statics
        .maps()
        .iter()
        .enumerate()
        .map(|(i, m)| m.mapv(|v| (v - stats.static_mean[i]) / stats.static_std[i]))
        .collect();
    for ti in 0..t {
        let mut frame = values.index_axis_mut(Axis(0), ti);
        frame
            .index_axis_mut(Axis(0), 0)
            .assign(&((&cube.values.index_axis(Axis(0), ti) - &stats.pixel_mean) / &stats.pixel_std));
        for (i, m) in statics_norm.iter().enumerate() {
            frame.index_axis_mut(Axis(0), 1 + i).assign(m);
        }
        frame.index_axis_mut(Axis(0), 4).fill(encoding.sin[ti]);
        frame.index_axis_mut(Axis(0), 5).fill(encoding.cos[ti]);
    }
    Ok(MultimodalCube {
        values,
        stats: stats.clone(),
    })
}

/// Normalised displacement map back to millimetres.
pub fn denormalize(pred: ArrayView2<'_, f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if pred.dim() != stats.dims() {
        return Err(Error::shape("denormalize", pred.shape(), stats.pixel_mean.shape()));
    }
    Ok(&pred * &stats.pixel_std + &stats.pixel_mean)
}

/// Fitted training-window features of one tile.
#[derive(Clone, Debug)]
pub struct TileFeatures {
    pub statics: StaticMaps,
    pub stats: NormStats,
    pub cube: MultimodalCube,
}

/// Static maps, statistics and normalised stack of `cube` from its own training window.
pub fn prepare(cube: &DisplacementCube, split: &SplitSpec) -> Result<TileFeatures> {
    let statics = fit_static_indicators(cube, split)?;
    let stats = compute_norm_stats(cube, &statics, split)?;
    let mm = normalize(cube, &statics, &encode_time(&cube.calendar), &stats)?;
    Ok(TileFeatures {
        statics,
        stats,
        cube: mm,
    })
}

/// Like [`prepare`], but normalising with statistics taken from another tile.
/// The static indicators are still fitted on this cube's training window.
pub fn prepare_with_stats(cube: &DisplacementCube, split: &SplitSpec, stats: &NormStats) -> Result<TileFeatures> {
    let statics = fit_static_indicators(cube, split)?;
    let mm = normalize(cube, &statics, &encode_time(&cube.calendar), stats)?;
    Ok(TileFeatures {
        statics,
        stats: stats.clone(),
        cube: mm,
    })
}

/// One sliding window: inputs `start..start+L`, target `start+L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub history: usize,
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

/// Sliding windows of length `history` over `mm`, split chronologically by target epoch.
pub fn make_windows(mm: &MultimodalCube, history: usize, split: &SplitSpec) -> Result<SampleSet> {
    windows_for_epochs(mm.epochs(), history, split)
}

pub fn windows_for_epochs(epochs: usize, history: usize, split: &SplitSpec) -> Result<SampleSet> {
    if history == 0 || epochs <= history {
        return Err(Error::Invalid(format!(
            "need more than {history} epochs for windows of length {history}, got {epochs}"
        )));
    }
    let n = epochs - history;
    if n < MIN_WINDOWS {
        return Err(Error::Invalid(format!(
            "{epochs} epochs give {n} windows of length {history}; need at least {MIN_WINDOWS}"
        )));
    }
    let n_train = split.train_windows(n);
    if n_train == 0 || n_train == n {
        return Err(Error::Invalid(format!(
            "split of {n} windows leaves an empty partition"
        )));
    }
    let all: Vec<Window> = (0..n)
        .map(|start| Window {
            start,
            target: start + history,
        })
        .collect();
    Ok(SampleSet {
        history,
        train: all[..n_train].to_vec(),
        test: all[n_train..].to_vec(),
    })
}
