//! Scattered point series onto a regular grid.
//!
//! Scatterers are Delaunay-triangulated once per tile; each pixel centre then
//! gets fixed barycentric weights (inside the convex hull) or a nearest
//! scatterer (outside it), and every epoch is interpolated with the same plan.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Point2, Triangulation as _};

use crate::error::{Error, Result};
use crate::ingest::{densify, AcquisitionCalendar, PointCloudSeries, MAX_MISSING_FRACTION, TILE_SIZE_M};

/// Regular raster geometry. Row 0 is the northern edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// South-west corner (easting, northing) in metres.
    pub origin_m: (f64, f64),
    /// Size (east, north) in metres.
    pub extent_m: (f64, f64),
}

impl GridSpec {
    pub fn new(height: usize, width: usize, origin_m: (f64, f64), extent_m: (f64, f64)) -> Result<Self> {
        let g = GridSpec {
            height,
            width,
            origin_m,
            extent_m,
        };
        g.validate()?;
        Ok(g)
    }

    /// Full 100 km tile at `height`×`width`.
    pub fn for_tile(tile: crate::ingest::TileId, height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, tile.origin_m(), (TILE_SIZE_M, TILE_SIZE_M))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Invalid(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.extent_m.0 > 0.0 && self.extent_m.1 > 0.0) {
            return Err(Error::Invalid(format!(
                "grid extent must be positive, got {:?}",
                self.extent_m
            )));
        }
        Ok(())
    }

    /// Centre of pixel (`row`, `col`) in metres.
    pub fn pixel_centre(&self, row: usize, col: usize) -> (f64, f64) {
        let dx = self.extent_m.0 / self.width as f64;
        let dy = self.extent_m.1 / self.height as f64;
        (
            self.origin_m.0 + (col as f64 + 0.5) * dx,
            self.origin_m.1 + self.extent_m.1 - (row as f64 + 0.5) * dy,
        )
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// T×H×W vertical displacement in mm on a [`GridSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementCube {
    pub grid: GridSpec,
    pub calendar: AcquisitionCalendar,
    pub values: Array3<f64>,
}

impl DisplacementCube {
    pub fn new(grid: GridSpec, calendar: AcquisitionCalendar, values: Array3<f64>) -> Result<Self> {
        let shape = values.shape();
        if shape != [calendar.len(), grid.height, grid.width] {
            return Err(Error::shape(
                "displacement cube",
                shape,
                &[calendar.len(), grid.height, grid.width],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("displacement cube contains non-finite values".into()));
        }
        Ok(DisplacementCube { grid, calendar, values })
    }

    pub fn epochs(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn frame(&self, t: usize) -> ndarray::ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), t)
    }
}

/// Delaunay triangulation over a point set, as index triples into that set.
#[derive(Clone, Debug)]
pub struct Triangulation {
    pub points: Vec<(f64, f64)>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
}

/// Delaunay-triangulates `points`. Exact duplicates keep their first occurrence.
pub fn triangulate(points: &[(f64, f64)]) -> Result<Triangulation> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let mut dt: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    // spade vertex index -> first input index at that location
    let mut owner: Vec<usize> = Vec::with_capacity(points.len());
    for (i, &(x, y)) in points.iter().enumerate() {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::DegenerateGeometry(format!(
                "point {i} has non-finite coordinates"
            )));
        }
        let handle = dt
            .insert(Point2::new(x, y))
            .map_err(|e| Error::DegenerateGeometry(format!("point {i}: {e:?}")))?;
        if handle.index() == owner.len() {
            owner.push(i);
        }
    }
    let triangles: Vec<[usize; 3]> = dt
        .inner_faces()
        .map(|f| f.vertices().map(|v| owner[v.fix().index()]))
        .collect();
    if triangles.is_empty() {
        return Err(Error::DegenerateGeometry("all points are collinear".into()));
    }
    Ok(Triangulation {
        points: points.to_vec(),
        triangles,
    })
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Barycentric coordinates of `p` in triangle `abc`.
pub fn barycentric(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> [f64; 3] {
    let area = cross(a, b, c);
    let wa = cross(p, b, c) / area;
    let wb = cross(p, c, a) / area;
    [wa, wb, 1.0 - wa - wb]
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PixelRule {
    Linear { vertices: [usize; 3], weights: [f64; 3] },
    Nearest(usize),
}

/// Per-pixel interpolation weights shared by all epochs of a tile.
#[derive(Clone, Debug)]
pub struct InterpolationPlan {
    grid: GridSpec,
    rules: Vec<PixelRule>,
    points: usize,
}

impl InterpolationPlan {
    pub fn new(tri: &Triangulation, grid: &GridSpec) -> Self {
        let (h, w) = (grid.height, grid.width);
        let mut rules: Vec<Option<PixelRule>> = vec![None; h * w];
        let dx = grid.extent_m.0 / w as f64;
        let dy = grid.extent_m.1 / h as f64;
        let top = grid.origin_m.1 + grid.extent_m.1;
        for &[ia, ib, ic] in &tri.triangles {
            let (a, b, c) = (tri.points[ia], tri.points[ib], tri.points[ic]);
            let (xmin, xmax) = (a.0.min(b.0).min(c.0), a.0.max(b.0).max(c.0));
            let (ymin, ymax) = (a.1.min(b.1).min(c.1), a.1.max(b.1).max(c.1));
            // pixel index ranges whose centres can fall inside the bounding box
            let col_lo = (((xmin - grid.origin_m.0) / dx - 0.5).floor().max(0.0)) as usize;
            let col_hi = (((xmax - grid.origin_m.0) / dx - 0.5).ceil().max(-1.0) + 1.0).min(w as f64) as usize;
            let row_lo = (((top - ymax) / dy - 0.5).floor().max(0.0)) as usize;
            let row_hi = (((top - ymin) / dy - 0.5).ceil().max(-1.0) + 1.0).min(h as f64) as usize;
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    let slot = &mut rules[row * w + col];
                    if slot.is_some() {
                        continue;
                    }
                    let p = grid.pixel_centre(row, col);
                    let weights = barycentric(p, a, b, c);
                    if weights.iter().all(|&l| l >= -1e-12) {
                        *slot = Some(PixelRule::Linear {
                            vertices: [ia, ib, ic],
                            weights,
                        });
                    }
                }
            }
        }
        // Outside the hull: nearest scatterer, lowest index on ties.
        let rules = rules
            .into_iter()
            .enumerate()
            .map(|(k, r)| {
                r.unwrap_or_else(|| {
                    let p = grid.pixel_centre(k / w, k % w);
                    PixelRule::Nearest(nearest_point(&tri.points, p))
                })
            })
            .collect();
        InterpolationPlan {
            grid: *grid,
            rules,
            points: tri.points.len(),
        }
    }

    /// Number of pixels interpolated linearly (inside the hull).
    pub fn interior_pixels(&self) -> usize {
        self.rules
            .iter()
            .filter(|r| matches!(r, PixelRule::Linear { .. }))
            .count()
    }

    pub fn is_interior(&self, row: usize, col: usize) -> bool {
        matches!(self.rules[row * self.grid.width + col], PixelRule::Linear { .. })
    }

    pub fn apply(&self, values: &[f64]) -> Result<Array2<f64>> {
        if values.len() != self.points {
            return Err(Error::shape("interpolate", &[values.len()], &[self.points]));
        }
        let data = self
            .rules
            .iter()
            .map(|r| match *r {
                PixelRule::Linear { vertices, weights } => {
                    weights[0] * values[vertices[0]]
                        + weights[1] * values[vertices[1]]
                        + weights[2] * values[vertices[2]]
                }
                PixelRule::Nearest(i) => values[i],
            })
            .collect();
        Ok(Array2::from_shape_vec((self.grid.height, self.grid.width), data).expect("grid-sized"))
    }
}

fn nearest_point(points: &[(f64, f64)], p: (f64, f64)) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in points.iter().enumerate() {
        let d = (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Interpolates one epoch: barycentric inside the hull, nearest scatterer outside.
pub fn interpolate_epoch(points: &[(f64, f64)], values: &[f64], grid: &GridSpec) -> Result<Array2<f64>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("value {i} is not finite")));
    }
    let tri = triangulate(points)?;
    InterpolationPlan::new(&tri, grid).apply(values)
}

/// Rasterises every epoch of `series` with one shared triangulation. Sparse
/// points are dropped and gaps filled first (see [`densify`]).
pub fn rasterize_cube(series: &PointCloudSeries, grid: &GridSpec) -> Result<DisplacementCube> {
    grid.validate()?;
    let dense = densify(series, MAX_MISSING_FRACTION)?;
    let coords: Vec<(f64, f64)> = dense.points.iter().map(|p| (p.easting_m, p.northing_m)).collect();
    let plan = InterpolationPlan::new(&triangulate(&coords)?, grid);
    let t_len = dense.calendar.len();
    let frames: Vec<Array2<f64>> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let vals: Vec<f64> = dense
                .points
                .iter()
                .map(|p| p.displacement_mm[t].unwrap_or(0.0))
                .collect();
            plan.apply(&vals)
        })
        .collect::<Result<_>>()?;
    let mut values = Array3::zeros((t_len, grid.height, grid.width));
    for (t, f) in frames.into_iter().enumerate() {
        values.index_axis_mut(Axis(0), t).assign(&f);
    }
    DisplacementCube::new(*grid, dense.calendar, values)
}
