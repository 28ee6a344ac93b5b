//! EGMS L3 "Up" CSV tiles.
//!
//! A tile file carries one scatterer per row: projected `easting`/`northing`
//! in metres (EPSG:3035) followed by one displacement column per acquisition,
//! headed by the acquisition date. Other columns are parsed past and ignored.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tile side length in metres.
pub const TILE_SIZE_M: f64 = 100_000.0;

/// Fraction of missing epochs above which a point is dropped before rasterisation.
pub const MAX_MISSING_FRACTION: f64 = 0.2;

/// 100 km EGMS tile label `EXXNYY`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub easting_100km: u32,
    pub northing_100km: u32,
}

impl TileId {
    pub fn new(easting_100km: u32, northing_100km: u32) -> Self {
        TileId {
            easting_100km,
            northing_100km,
        }
    }

    /// South-west corner in metres.
    pub fn origin_m(&self) -> (f64, f64) {
        (
            f64::from(self.easting_100km) * TILE_SIZE_M,
            f64::from(self.northing_100km) * TILE_SIZE_M,
        )
    }

    /// Canonical EGMS file name for the Up component, 2018–2022 release.
    pub fn l3_file_name(&self) -> String {
        format!("EGMS_L3_{self}_100km_U_2018_2022_1.csv")
    }

    /// Finds the first `EXXNYY` token in a file name.
    pub fn find_in(name: &str) -> Option<TileId> {
        let bytes = name.as_bytes();
        (0..bytes.len().saturating_sub(5)).find_map(|i| name.get(i..i + 6).and_then(|s| s.parse().ok()))
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{:02}N{:02}", self.easting_100km, self.northing_100km)
    }
}

impl FromStr for TileId {
    type Err = Error;

    fn from_str(label: &str) -> Result<Self> {
        let err = |position| Error::TileId {
            label: label.to_string(),
            position,
        };
        let b = label.as_bytes();
        let expect = |i: usize, ok: &dyn Fn(u8) -> bool| match b.get(i) {
            Some(&c) if ok(c) => Ok(()),
            _ => Err(err(i)),
        };
        expect(0, &|c| c == b'E')?;
        expect(1, &|c| c.is_ascii_digit())?;
        expect(2, &|c| c.is_ascii_digit())?;
        expect(3, &|c| c == b'N')?;
        expect(4, &|c| c.is_ascii_digit())?;
        expect(5, &|c| c.is_ascii_digit())?;
        if b.len() > 6 {
            return Err(err(6));
        }
        let digits = |i: usize| u32::from(b[i] - b'0') * 10 + u32::from(b[i + 1] - b'0');
        Ok(TileId::new(digits(1), digits(4)))
    }
}

/// Parses a tile label such as `E32N34`.
pub fn parse_tile_id(label: &str) -> Result<TileId> {
    label.parse()
}

/// Strictly increasing acquisition dates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcquisitionCalendar {
    dates: Vec<NaiveDate>,
}

impl AcquisitionCalendar {
    pub fn new(dates: Vec<NaiveDate>) -> Result<Self> {
        if dates.len() < 2 {
            return Err(Error::Calendar(format!("need at least 2 epochs, got {}", dates.len())));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Calendar(format!(
                "dates not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(AcquisitionCalendar { dates })
    }

    /// `count` epochs every `cadence_days` days from `start`.
    pub fn regular(start: NaiveDate, cadence_days: u32, count: usize) -> Result<Self> {
        let dates = (0..count)
            .map(|i| start + chrono::Days::new(u64::from(cadence_days) * i as u64))
            .collect();
        Self::new(dates)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Days elapsed since the first acquisition.
    pub fn epoch_days(&self) -> Vec<f64> {
        let first = self.dates[0];
        self.dates.iter().map(|d| (*d - first).num_days() as f64).collect()
    }

    /// Zero-based day of year of each acquisition (1 January is 0).
    pub fn day_of_year(&self) -> Vec<f64> {
        self.dates.iter().map(|d| f64::from(d.ordinal0())).collect()
    }
}

/// One persistent scatterer.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRecord {
    pub easting_m: f64,
    pub northing_m: f64,
    /// Vertical displacement per epoch in mm; `None` marks a missing epoch.
    pub displacement_mm: Vec<Option<f64>>,
}

impl PointRecord {
    pub fn missing_fraction(&self) -> f64 {
        let missing = self.displacement_mm.iter().filter(|v| v.is_none()).count();
        missing as f64 / self.displacement_mm.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudSeries {
    pub tile: TileId,
    pub calendar: AcquisitionCalendar,
    pub points: Vec<PointRecord>,
}

/// A data row rejected while loading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRow {
    /// Zero-based data row index (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadedTile {
    pub series: PointCloudSeries,
    pub skipped: Vec<SkippedRow>,
}

fn parse_date_header(header: &str) -> Option<NaiveDate> {
    let h = header.trim();
    for fmt in ["%Y%m%d", "%Y-%m-%d", "%Y/%m/%d", "%d.%m.%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(h, fmt) {
            return Some(d);
        }
    }
    let digits: String = h.chars().filter(char::is_ascii_digit).collect();
    if digits.len() == 8 {
        NaiveDate::parse_from_str(&digits, "%Y%m%d").ok()
    } else {
        None
    }
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, String> {
    let c = cell.trim();
    if c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match c.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("non-numeric value {c:?}")),
    }
}

/// Loads an L3 Up CSV tile.
///
/// The tile id comes from an `EXXNYY` token in the file name, or else from
/// the south-west corner of the scatterer coordinates. Rows with non-numeric
/// cells are skipped and reported; empty or `NaN` cells are missing epochs.
pub fn load_l3_csv(path: impl AsRef<Path>) -> Result<LoadedTile> {
    let path = path.as_ref();
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();

    let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let mut missing = Vec::new();
    let e_col = find("easting");
    let n_col = find("northing");
    if e_col.is_none() {
        missing.push("easting");
    }
    if n_col.is_none() {
        missing.push("northing");
    }
    if !missing.is_empty() {
        return Err(csv_err(format!("missing coordinate column(s): {}", missing.join(", "))));
    }
    let (e_col, n_col) = (e_col.unwrap(), n_col.unwrap());

    let mut date_cols: Vec<(NaiveDate, usize)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != e_col && *i != n_col)
        .filter_map(|(i, h)| parse_date_header(h).map(|d| (d, i)))
        .collect();
    if date_cols.len() < 2 {
        return Err(csv_err(format!(
            "need at least 2 date columns, found {}",
            date_cols.len()
        )));
    }
    date_cols.sort_by_key(|(d, _)| *d);
    if let Some(w) = date_cols.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(csv_err(format!("duplicate acquisition date {}", w[0].0)));
    }
    let calendar = AcquisitionCalendar::new(date_cols.iter().map(|(d, _)| *d).collect())?;

    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                skipped.push(SkippedRow {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let parsed = (|| -> std::result::Result<PointRecord, String> {
            let coord = |col: usize| -> std::result::Result<f64, String> {
                let cell = record.get(col).ok_or("short row")?;
                parse_cell(cell)?.ok_or_else(|| "missing coordinate".to_string())
            };
            let easting_m = coord(e_col)?;
            let northing_m = coord(n_col)?;
            let displacement_mm = date_cols
                .iter()
                .map(|&(_, col)| parse_cell(record.get(col).unwrap_or("")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(PointRecord {
                easting_m,
                northing_m,
                displacement_mm,
            })
        })();
        match parsed {
            Ok(p) => points.push(p),
            Err(reason) => skipped.push(SkippedRow { row, reason }),
        }
    }

    let tile = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(TileId::find_in)
        .or_else(|| tile_from_points(&points))
        .ok_or_else(|| csv_err("cannot determine tile id".into()))?;
    Ok(LoadedTile {
        series: PointCloudSeries { tile, calendar, points },
        skipped,
    })
}

fn tile_from_points(points: &[PointRecord]) -> Option<TileId> {
    let min_e = points.iter().map(|p| p.easting_m).reduce(f64::min)?;
    let min_n = points.iter().map(|p| p.northing_m).reduce(f64::min)?;
    if min_e < 0.0 || min_n < 0.0 {
        return None;
    }
    Some(TileId::new((min_e / TILE_SIZE_M) as u32, (min_n / TILE_SIZE_M) as u32))
}

/// Writes `series` in the L3 CSV layout (`easting,northing,YYYYMMDD,...`).
/// Values are written with shortest round-trip formatting; missing epochs are
/// empty cells.
pub fn write_l3_csv(series: &PointCloudSeries, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "easting,northing")?;
    for d in series.calendar.dates() {
        write!(out, ",{}", d.format("%Y%m%d"))?;
    }
    writeln!(out)?;
    for p in &series.points {
        write!(out, "{},{}", p.easting_m, p.northing_m)?;
        for v in &p.displacement_mm {
            match v {
                Some(v) => write!(out, ",{v}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Drops points with more than `max_missing_fraction` missing epochs and fills
/// the remaining gaps by linear interpolation in time (constant beyond the
/// first/last observation). Fails if fewer than 3 points survive.
pub fn densify(series: &PointCloudSeries, max_missing_fraction: f64) -> Result<PointCloudSeries> {
    let days = series.calendar.epoch_days();
    let points: Vec<PointRecord> = series
        .points
        .iter()
        .filter(|p| p.missing_fraction() <= max_missing_fraction)
        .filter(|p| p.displacement_mm.iter().any(Option::is_some))
        .map(|p| PointRecord {
            easting_m: p.easting_m,
            northing_m: p.northing_m,
            displacement_mm: fill_linear(&p.displacement_mm, &days).into_iter().map(Some).collect(),
        })
        .collect();
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "only {} points left after dropping sparse series",
            points.len()
        )));
    }
    Ok(PointCloudSeries {
        tile: series.tile,
        calendar: series.calendar.clone(),
        points,
    })
}

fn fill_linear(values: &[Option<f64>], days: &[f64]) -> Vec<f64> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let mut out = Vec::with_capacity(values.len());
    let mut next = 0;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            out.push(*v);
            continue;
        }
        while next < known.len() && known[next] < i {
            next += 1;
        }
        let before = next.checked_sub(1).map(|k| known[k]);
        let after = known.get(next).copied();
        let filled = match (before, after) {
            (Some(a), Some(b)) => {
                let (va, vb) = (values[a].unwrap(), values[b].unwrap());
                let w = (days[i] - days[a]) / (days[b] - days[a]);
                va + w * (vb - va)
            }
            (Some(a), None) => values[a].unwrap(),
            (None, Some(b)) => values[b].unwrap(),
            (None, None) => 0.0,
        };
        out.push(filled);
    }
    out
}
