//! Closed-form per-pixel forecasters: linear trend, trend plus annual
//! harmonic, and persistence.
//!
//! The regressions are fitted once on the training epochs and evaluated at the
//! calendar dates of the requested target epochs.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{annual_omega, fit_pixels, SplitSpec, YEAR_DAYS};
use crate::raster::DisplacementCube;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionKind {
    /// `β₀ + β₁·t`
    Linear,
    /// `β₀ + β₁·t + a·sin ωd + b·cos ωd`
    Seasonal,
}

impl RegressionKind {
    pub fn coefficients(self) -> usize {
        match self {
            RegressionKind::Linear => 2,
            RegressionKind::Seasonal => 4,
        }
    }

    fn min_epochs(self) -> usize {
        match self {
            RegressionKind::Linear => 3,
            RegressionKind::Seasonal => 5,
        }
    }

    /// Design row at `d` days after the first epoch; `t` is in years.
    pub fn design_row(self, d: f64) -> Vec<f64> {
        let t = d / YEAR_DAYS;
        match self {
            RegressionKind::Linear => vec![1.0, t],
            RegressionKind::Seasonal => {
                let p = annual_omega() * d;
                vec![1.0, t, p.sin(), p.cos()]
            }
        }
    }
}

/// Per-pixel coefficient maps, `coefficients[k]` is the k-th design column.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRegression {
    pub kind: RegressionKind,
    pub coefficients: Array3<f64>,
    /// Elapsed days of the cube's first epoch, the design origin.
    pub origin_day: f64,
}

impl PixelRegression {
    pub fn fit(kind: RegressionKind, cube: &DisplacementCube, split: &SplitSpec) -> Result<Self> {
        let t_train = split.train_epochs(cube.epochs())?;
        if t_train < kind.min_epochs() {
            return Err(Error::RankDeficient {
                row: 0,
                col: 0,
                message: format!(
                    "{kind:?} regression needs {} training epochs, got {t_train}",
                    kind.min_epochs()
                ),
            });
        }
        let days = cube.calendar.epoch_days();
        let origin_day = days[0];
        let p = kind.coefficients();
        let design = DMatrix::from_fn(t_train, p, |i, j| kind.design_row(days[i] - origin_day)[j]);
        let beta = fit_pixels(cube, design, &format!("{kind:?} regression"))?;
        let (h, w) = (cube.grid.height, cube.grid.width);
        let coefficients = Array3::from_shape_fn((p, h, w), |(k, r, c)| beta[(k, r * w + c)]);
        Ok(PixelRegression {
            kind,
            coefficients,
            origin_day,
        })
    }

    /// Predicted map at elapsed day `day` (same origin as the fitted calendar).
    pub fn predict_day(&self, day: f64) -> Array2<f64> {
        let row = self.kind.design_row(day - self.origin_day);
        let mut out = Array2::zeros((self.coefficients.shape()[1], self.coefficients.shape()[2]));
        for (k, coef) in self.coefficients.outer_iter().enumerate() {
            out.scaled_add(row[k], &coef);
        }
        out
    }

    /// Predictions at the given epoch indices of `cube`'s calendar.
    pub fn predict_epochs(&self, cube: &DisplacementCube, epochs: &[usize]) -> Result<Array3<f64>> {
        let days = cube.calendar.epoch_days();
        let maps = epochs
            .iter()
            .map(|&t| {
                days.get(t)
                    .map(|&d| self.predict_day(d))
                    .ok_or_else(|| Error::Invalid(format!("target epoch {t} beyond calendar of {}", days.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        stack(maps, cube)
    }
}

fn stack(maps: Vec<Array2<f64>>, cube: &DisplacementCube) -> Result<Array3<f64>> {
    let (h, w) = (cube.grid.height, cube.grid.width);
    let mut out = Array3::zeros((maps.len(), h, w));
    for (i, m) in maps.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&m);
    }
    Ok(out)
}

pub fn fit_predict_linear(cube: &DisplacementCube, split: &SplitSpec, target_epochs: &[usize]) -> Result<Array3<f64>> {
    PixelRegression::fit(RegressionKind::Linear, cube, split)?.predict_epochs(cube, target_epochs)
}

pub fn fit_predict_seasonal(
    cube: &DisplacementCube,
    split: &SplitSpec,
    target_epochs: &[usize],
) -> Result<Array3<f64>> {
    PixelRegression::fit(RegressionKind::Seasonal, cube, split)?.predict_epochs(cube, target_epochs)
}

/// Last observed map before each target epoch.
pub fn persistence(cube: &DisplacementCube, target_epochs: &[usize]) -> Result<Array3<f64>> {
    let maps = target_epochs
        .iter()
        .map(|&t| {
            if t == 0 || t >= cube.epochs() {
                Err(Error::Invalid(format!(
                    "persistence needs 1 <= target < {}, got {t}",
                    cube.epochs()
                )))
            } else {
                Ok(cube.frame(t - 1).to_owned())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    stack(maps, cube)
}

/// Ground-truth maps at the target epochs.
pub fn truth_at(cube: &DisplacementCube, target_epochs: &[usize]) -> Result<Array3<f64>> {
    let maps = target_epochs
        .iter()
        .map(|&t| {
            (t < cube.epochs())
                .then(|| cube.frame(t).to_owned())
                .ok_or_else(|| Error::Invalid(format!("target epoch {t} beyond calendar of {}", cube.epochs())))
        })
        .collect::<Result<Vec<_>>>()?;
    stack(maps, cube)
}
