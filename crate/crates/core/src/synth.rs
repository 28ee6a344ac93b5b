//! Synthetic EGMS-like tiles with known ground truth.
//!
//! Every per-pixel parameter (velocity, seasonal amplitude and phase, step
//! size) is a smooth field built from a low-order 2-D cosine basis. The truth
//! cube is
//!
//! ```text
//! d(t) = v·t_yr + A·sin(ω·day + φ) + S·H(t − t_event) + noise
//! ```
//!
//! and the point cloud samples the same continuous fields at uniformly random
//! scatterer locations.

use std::f64::consts::PI;

use chrono::NaiveDate;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{annual_omega, YEAR_DAYS};
use crate::ingest::{AcquisitionCalendar, PointCloudSeries, PointRecord, TileId};
use crate::raster::{DisplacementCube, GridSpec};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeKind {
    /// Linear trend only.
    Trend,
    /// Seasonal term only.
    Seasonal,
    /// Linear trend plus a step at the event epoch.
    Coseismic,
    /// Trend and seasonal terms, plus a step when an event epoch is set.
    Mixed,
}

impl RegimeKind {
    fn has_trend(self) -> bool {
        !matches!(self, RegimeKind::Seasonal)
    }

    fn has_seasonal(self) -> bool {
        matches!(self, RegimeKind::Seasonal | RegimeKind::Mixed)
    }

    fn has_step(self) -> bool {
        matches!(self, RegimeKind::Coseismic | RegimeKind::Mixed)
    }
}

/// A field parameter: `mean + variation · f(x, y)` with `f` a smooth field
/// scaled to a maximum magnitude of 1 on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub mean: f64,
    pub variation: f64,
}

impl FieldSpec {
    pub const fn new(mean: f64, variation: f64) -> Self {
        FieldSpec { mean, variation }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeSpec {
    pub kind: RegimeKind,
    pub tile: String,
    pub height: usize,
    pub width: usize,
    pub epochs: usize,
    pub cadence_days: u32,
    pub start_date: NaiveDate,
    /// mm/yr
    pub velocity: FieldSpec,
    /// mm
    pub amplitude: FieldSpec,
    /// radians
    pub phase: FieldSpec,
    /// mm
    pub step: FieldSpec,
    /// Index of the first epoch that includes the step.
    pub event_epoch: Option<usize>,
    pub noise_sigma_mm: f64,
    /// Highest cosine-basis order of the smooth fields.
    pub smoothness_order: usize,
    pub points: usize,
    /// Probability that a single point observation is missing.
    pub point_dropout: f64,
    pub seed: u64,
}

impl Default for RegimeSpec {
    fn default() -> Self {
        RegimeSpec {
            kind: RegimeKind::Mixed,
            tile: "E32N34".into(),
            height: 64,
            width: 64,
            epochs: 120,
            cadence_days: 6,
            start_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            velocity: FieldSpec::new(-1.5, 1.5),
            amplitude: FieldSpec::new(10.0, 3.0),
            phase: FieldSpec::new(0.5, 0.2),
            step: FieldSpec::new(-12.0, 6.0),
            event_epoch: None,
            noise_sigma_mm: 0.5,
            smoothness_order: 3,
            points: 6000,
            point_dropout: 0.02,
            seed: 0,
        }
    }
}

impl RegimeSpec {
    pub fn preset(kind: RegimeKind) -> Self {
        let mut spec = RegimeSpec {
            kind,
            ..Self::default()
        };
        match kind {
            RegimeKind::Trend => spec.velocity = FieldSpec::new(-10.0, 6.0),
            RegimeKind::Coseismic => spec.event_epoch = Some(spec.epochs / 2),
            _ => {}
        }
        spec
    }

    pub fn tile_id(&self) -> Result<TileId> {
        self.tile.parse()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::for_tile(self.tile_id()?, self.height, self.width)
    }

    pub fn calendar(&self) -> Result<AcquisitionCalendar> {
        AcquisitionCalendar::regular(self.start_date, self.cadence_days, self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.tile_id() {
            problems.push(e.to_string());
        }
        if self.height < 2 || self.width < 2 {
            problems.push(format!("grid must be at least 2x2, got {}x{}", self.height, self.width));
        }
        if self.epochs < 2 {
            problems.push(format!("epochs must be at least 2, got {}", self.epochs));
        }
        if self.cadence_days == 0 {
            problems.push("cadence_days must be positive".into());
        }
        if !(self.noise_sigma_mm >= 0.0 && self.noise_sigma_mm.is_finite()) {
            problems.push(format!(
                "noise_sigma_mm must be non-negative, got {}",
                self.noise_sigma_mm
            ));
        }
        if !(0.0..1.0).contains(&self.point_dropout) {
            problems.push(format!("point_dropout must be in [0, 1), got {}", self.point_dropout));
        }
        if self.points < 3 {
            problems.push(format!("points must be at least 3, got {}", self.points));
        }
        if self.kind == RegimeKind::Coseismic && self.event_epoch.is_none() {
            problems.push("coseismic regime needs event_epoch".into());
        }
        if let Some(e) = self.event_epoch {
            if e == 0 || e >= self.epochs {
                problems.push(format!("event_epoch must be in 1..{}, got {e}", self.epochs));
            }
        }
        for (name, f) in [
            ("velocity", self.velocity),
            ("amplitude", self.amplitude),
            ("phase", self.phase),
            ("step", self.step),
        ] {
            if !(f.mean.is_finite() && f.variation.is_finite()) {
                problems.push(format!("{name} field must be finite"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// `Σ c_ij cos(iπx) cos(jπy)` on normalised tile coordinates, scaled so the
/// largest magnitude at the pixel centres is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField {
    pub order: usize,
    /// Row-major `(order + 1)²` coefficients, already scaled.
    pub coefficients: Vec<f64>,
    pub origin_m: (f64, f64),
    pub extent_m: (f64, f64),
}

impl SmoothField {
    pub fn random(rng: &mut impl Rng, order: usize, grid: &GridSpec) -> Self {
        let n = order + 1;
        let coefficients = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                let z: f64 = StandardNormal.sample(rng);
                z / (1.0 + (i + j) as f64)
            })
            .collect();
        let mut field = SmoothField {
            order,
            coefficients,
            origin_m: grid.origin_m,
            extent_m: grid.extent_m,
        };
        let peak = field.sample_grid(grid).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            field.coefficients.iter_mut().for_each(|c| *c /= peak);
        }
        field
    }

    pub fn eval(&self, x_m: f64, y_m: f64) -> f64 {
        let u = (x_m - self.origin_m.0) / self.extent_m.0;
        let v = (y_m - self.origin_m.1) / self.extent_m.1;
        let n = self.order + 1;
        let cx: Vec<f64> = (0..n).map(|i| (i as f64 * PI * u).cos()).collect();
        let cy: Vec<f64> = (0..n).map(|j| (j as f64 * PI * v).cos()).collect();
        self.coefficients
            .iter()
            .enumerate()
            .map(|(k, c)| c * cx[k / n] * cy[k % n])
            .sum()
    }

    pub fn sample_grid(&self, grid: &GridSpec) -> Array2<f64> {
        Array2::from_shape_fn((grid.height, grid.width), |(r, c)| {
            let (x, y) = grid.pixel_centre(r, c);
            self.eval(x, y)
        })
    }
}

/// The four parameter fields of a tile in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterFields {
    pub velocity: SmoothField,
    pub amplitude: SmoothField,
    pub phase: SmoothField,
    pub step: SmoothField,
    spec: RegimeSpec,
}

impl ParameterFields {
    fn value(f: &SmoothField, s: FieldSpec, x: f64, y: f64, on: bool) -> f64 {
        if on {
            s.mean + s.variation * f.eval(x, y)
        } else {
            0.0
        }
    }

    /// `(velocity mm/yr, amplitude mm, phase rad, step mm)` at a location.
    pub fn at(&self, x: f64, y: f64) -> (f64, f64, f64, f64) {
        let k = self.spec.kind;
        let step_on = k.has_step() && self.spec.event_epoch.is_some();
        (
            Self::value(&self.velocity, self.spec.velocity, x, y, k.has_trend()),
            Self::value(&self.amplitude, self.spec.amplitude, x, y, k.has_seasonal()),
            Self::value(&self.phase, self.spec.phase, x, y, k.has_seasonal()),
            Self::value(&self.step, self.spec.step, x, y, step_on),
        )
    }

    /// Noise-free displacement at a location for epoch `t` on `day`.
    pub fn displacement(&self, x: f64, y: f64, t: usize, day: f64) -> f64 {
        let (v, a, phi, s) = self.at(x, y);
        let h = match self.spec.event_epoch {
            Some(e) if t >= e => 1.0,
            _ => 0.0,
        };
        v * day / YEAR_DAYS + a * (annual_omega() * day + phi).sin() + s * h
    }
}

/// Ground-truth maps of the generating parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthMaps {
    pub velocity: Array2<f64>,
    pub amplitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub step: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthTile {
    pub spec: RegimeSpec,
    /// Gridded displacement including noise.
    pub truth: DisplacementCube,
    pub points: PointCloudSeries,
    pub fields: ParameterFields,
    pub maps: TruthMaps,
}

/// Generates the truth cube and point sampling described by `spec`.
pub fn generate_tile(spec: &RegimeSpec) -> Result<SynthTile> {
    spec.validate()?;
    let grid = spec.grid()?;
    let calendar = spec.calendar()?;
    let days = calendar.epoch_days();
    let (h, w, t_len) = (spec.height, spec.width, spec.epochs);

    let mut field_rng = rng_for(spec.seed, stream::SYNTH_FIELDS);
    let order = spec.smoothness_order;
    let fields = ParameterFields {
        velocity: SmoothField::random(&mut field_rng, order, &grid),
        amplitude: SmoothField::random(&mut field_rng, order, &grid),
        phase: SmoothField::random(&mut field_rng, order, &grid),
        step: SmoothField::random(&mut field_rng, order, &grid),
        spec: spec.clone(),
    };

    let centres: Vec<(f64, f64)> = (0..h * w).map(|k| grid.pixel_centre(k / w, k % w)).collect();
    let params: Vec<(f64, f64, f64, f64)> = centres.iter().map(|&(x, y)| fields.at(x, y)).collect();
    let map = |f: fn(&(f64, f64, f64, f64)) -> f64| {
        Array2::from_shape_vec((h, w), params.iter().map(f).collect()).expect("grid shape")
    };
    let maps = TruthMaps {
        velocity: map(|p| p.0),
        amplitude: map(|p| p.1),
        phase: map(|p| p.2),
        step: map(|p| p.3),
    };

    let noise = normal(spec.noise_sigma_mm)?;
    let mut noise_rng = rng_for(spec.seed, stream::SYNTH_NOISE);
    let pixel_noise: Vec<f64> = (0..t_len * h * w).map(|_| sample(&noise, &mut noise_rng)).collect();
    let mut values = Array3::zeros((t_len, h, w));
    values
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(t, frame)| {
            for (k, v) in frame.iter_mut().enumerate() {
                let (x, y) = centres[k];
                *v = fields.displacement(x, y, t, days[t]) + pixel_noise[t * h * w + k];
            }
        });
    let truth = DisplacementCube::new(grid, calendar.clone(), values)?;

    let mut point_rng = rng_for(spec.seed, stream::SYNTH_POINTS);
    let mut records = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let x = grid.origin_m.0 + point_rng.gen::<f64>() * grid.extent_m.0;
        let y = grid.origin_m.1 + point_rng.gen::<f64>() * grid.extent_m.1;
        let series = (0..t_len)
            .map(|t| {
                let missing = point_rng.gen::<f64>() < spec.point_dropout;
                let e = sample(&noise, &mut point_rng);
                (!missing).then(|| fields.displacement(x, y, t, days[t]) + e)
            })
            .collect();
        records.push(PointRecord {
            easting_m: x,
            northing_m: y,
            displacement_mm: series,
        });
    }
    let points = PointCloudSeries {
        tile: spec.tile_id()?,
        calendar,
        points: records,
    };
    Ok(SynthTile {
        spec: spec.clone(),
        truth,
        points,
        fields,
        maps,
    })
}

fn normal(sigma: f64) -> Result<Option<Normal<f64>>> {
    if sigma == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, sigma)
        .map(Some)
        .map_err(|e| Error::Invalid(format!("noise: {e}")))
}

fn sample(dist: &Option<Normal<f64>>, rng: &mut impl Rng) -> f64 {
    dist.as_ref().map_or(0.0, |d| d.sample(rng))
}
