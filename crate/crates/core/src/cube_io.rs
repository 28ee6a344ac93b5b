//! `DEFCUBE1` container: an 8-line text header followed by little-endian
//! `f64` samples in epoch × channel × row × column order.
//!
//! ```text
//! DEFCUBE1
//! epochs 120
//! height 64
//! width 64
//! origin 3200000 3400000
//! extent 100000 100000
//! dates tile.dates
//! channels displacement_mm
//! ```
//!
//! `dates` names a sidecar file (relative to the cube) with one ISO date per
//! line, or `-` for layers that are not tied to a calendar.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::features::{NormStats, StaticMaps};
use crate::ingest::AcquisitionCalendar;
use crate::raster::{DisplacementCube, GridSpec};

pub const CUBE_MAGIC: &str = "DEFCUBE1";

/// Raw contents of a `DEFCUBE1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeFile {
    pub epochs: usize,
    pub grid: GridSpec,
    pub dates: Option<String>,
    pub channels: Vec<String>,
    pub data: Vec<f64>,
}

impl CubeFile {
    fn expected_len(&self) -> usize {
        self.epochs * self.channels.len() * self.grid.height * self.grid.width
    }

    /// Layer `(epoch, channel)` as an H×W map.
    pub fn layer(&self, epoch: usize, channel: usize) -> Array2<f64> {
        let hw = self.grid.pixels();
        let start = (epoch * self.channels.len() + channel) * hw;
        Array2::from_shape_vec(
            (self.grid.height, self.grid.width),
            self.data[start..start + hw].to_vec(),
        )
        .expect("layer shape")
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Format(format!("channel {name:?} not present (have {:?})", self.channels)))
    }
}

pub fn write_cube_file(path: impl AsRef<Path>, cube: &CubeFile) -> Result<()> {
    if cube.data.len() != cube.expected_len() {
        return Err(Error::shape("cube file", &[cube.data.len()], &[cube.expected_len()]));
    }
    if cube
        .channels
        .iter()
        .any(|c| c.is_empty() || c.contains([',', '\n', ' ']))
    {
        return Err(Error::Format(format!("invalid channel names {:?}", cube.channels)));
    }
    let g = &cube.grid;
    let mut out = Vec::with_capacity(256 + cube.data.len() * 8);
    write!(
        out,
        "{CUBE_MAGIC}\nepochs {}\nheight {}\nwidth {}\norigin {} {}\nextent {} {}\ndates {}\nchannels {}\n",
        cube.epochs,
        g.height,
        g.width,
        g.origin_m.0,
        g.origin_m.1,
        g.extent_m.0,
        g.extent_m.1,
        cube.dates.as_deref().unwrap_or("-"),
        cube.channels.join(",")
    )?;
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected header field {key:?}, found {line:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let mut it = s.split_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((parse_num(a, what)?, parse_num(b, what)?)),
        _ => Err(Error::Format(format!("bad {what} value {s:?}"))),
    }
}

pub fn read_cube_file(path: impl AsRef<Path>) -> Result<CubeFile> {
    let mut reader = BufReader::new(fs::File::open(path.as_ref())?);
    let mut lines = Vec::with_capacity(8);
    for _ in 0..8 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated cube header".into()));
        }
        lines.push(line.trim_end_matches('\n').to_string());
    }
    if lines[0] != CUBE_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", lines[0])));
    }
    let epochs: usize = parse_num(header_field(&lines[1], "epochs")?, "epochs")?;
    let height: usize = parse_num(header_field(&lines[2], "height")?, "height")?;
    let width: usize = parse_num(header_field(&lines[3], "width")?, "width")?;
    let origin = parse_pair(header_field(&lines[4], "origin")?, "origin")?;
    let extent = parse_pair(header_field(&lines[5], "extent")?, "extent")?;
    let dates = match header_field(&lines[6], "dates")? {
        "-" => None,
        p => Some(p.to_string()),
    };
    let channels: Vec<String> = header_field(&lines[7], "channels")?
        .split(',')
        .map(str::to_string)
        .collect();
    let grid = GridSpec::new(height, width, origin, extent)?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut cube = CubeFile {
        epochs,
        grid,
        dates,
        channels,
        data: Vec::new(),
    };
    if bytes.len() != cube.expected_len() * 8 {
        return Err(Error::Format(format!(
            "cube body has {} bytes, header implies {}",
            bytes.len(),
            cube.expected_len() * 8
        )));
    }
    cube.data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(cube)
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("dates")
}

/// Writes the cube and its `.dates` sidecar next to it.
pub fn save_displacement_cube(cube: &DisplacementCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let mut dates = String::new();
    for d in cube.calendar.dates() {
        dates.push_str(&format!("{}\n", d.format("%Y-%m-%d")));
    }
    fs::write(&sidecar, dates)?;
    let name = sidecar
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("unusable path {}", path.display())))?;
    write_cube_file(
        path,
        &CubeFile {
            epochs: cube.epochs(),
            grid: cube.grid,
            dates: Some(name.to_string()),
            channels: vec!["displacement_mm".into()],
            data: cube.values.iter().copied().collect(),
        },
    )
}

pub fn load_displacement_cube(path: impl AsRef<Path>) -> Result<DisplacementCube> {
    let path = path.as_ref();
    let file = read_cube_file(path)?;
    if file.channels.len() != 1 {
        return Err(Error::Format(format!(
            "expected one displacement channel, found {:?}",
            file.channels
        )));
    }
    let rel = file
        .dates
        .as_ref()
        .ok_or_else(|| Error::Format("displacement cube without dates".into()))?;
    let sidecar = path.parent().unwrap_or(Path::new(".")).join(rel);
    let dates = fs::read_to_string(&sidecar)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            NaiveDate::parse_from_str(l.trim(), "%Y-%m-%d")
                .map_err(|e| Error::Format(format!("bad date {l:?} in {}: {e}", sidecar.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let calendar = AcquisitionCalendar::new(dates)?;
    let values = Array3::from_shape_vec((file.epochs, file.grid.height, file.grid.width), file.data)
        .map_err(|e| Error::Format(e.to_string()))?;
    DisplacementCube::new(file.grid, calendar, values)
}

const STATIC_CHANNELS: [&str; 3] = ["velocity", "acceleration", "amplitude"];

pub fn save_static_maps(statics: &StaticMaps, grid: &GridSpec, path: impl AsRef<Path>) -> Result<()> {
    let data = statics.maps().iter().flat_map(|m| m.iter().copied()).collect();
    write_cube_file(
        path,
        &CubeFile {
            epochs: 1,
            grid: *grid,
            dates: None,
            channels: STATIC_CHANNELS.iter().map(|s| s.to_string()).collect(),
            data,
        },
    )
}

pub fn load_static_maps(path: impl AsRef<Path>) -> Result<(StaticMaps, GridSpec)> {
    let f = read_cube_file(path)?;
    let get = |name| f.channel_index(name).map(|c| f.layer(0, c));
    Ok((
        StaticMaps {
            velocity: get("velocity")?,
            acceleration: get("acceleration")?,
            seasonal_amplitude: get("amplitude")?,
        },
        f.grid,
    ))
}

/// Norm-stat channel names; scalar statistics are stored as constant layers.
pub fn norm_stat_channels() -> Vec<String> {
    let mut names = vec!["pixel_mean".to_string(), "pixel_std".to_string()];
    for prefix in ["static_mean", "static_std"] {
        names.extend(STATIC_CHANNELS.iter().map(|c| format!("{prefix}_{c}")));
    }
    names.push("epsilon".into());
    names
}

pub fn save_norm_stats(stats: &NormStats, grid: &GridSpec, path: impl AsRef<Path>) -> Result<()> {
    if stats.dims() != (grid.height, grid.width) {
        return Err(Error::shape(
            "norm stats",
            &[stats.dims().0, stats.dims().1],
            &[grid.height, grid.width],
        ));
    }
    let hw = grid.pixels();
    let mut data: Vec<f64> = Vec::with_capacity(9 * hw);
    data.extend(stats.pixel_mean.iter());
    data.extend(stats.pixel_std.iter());
    for v in stats
        .static_mean
        .iter()
        .chain(&stats.static_std)
        .chain(std::iter::once(&stats.epsilon))
    {
        data.extend(std::iter::repeat_n(*v, hw));
    }
    write_cube_file(
        path,
        &CubeFile {
            epochs: 1,
            grid: *grid,
            dates: None,
            channels: norm_stat_channels(),
            data,
        },
    )
}

pub fn load_norm_stats(path: impl AsRef<Path>) -> Result<(NormStats, GridSpec)> {
    let f = read_cube_file(path)?;
    let get = |name: &str| f.channel_index(name).map(|c| f.layer(0, c));
    let scalar = |name: String| get(&name).map(|m| m[[0, 0]]);
    let mut static_mean = [0.0; 3];
    let mut static_std = [0.0; 3];
    for (i, c) in STATIC_CHANNELS.iter().enumerate() {
        static_mean[i] = scalar(format!("static_mean_{c}"))?;
        static_std[i] = scalar(format!("static_std_{c}"))?;
    }
    Ok((
        NormStats {
            pixel_mean: get("pixel_mean")?,
            pixel_std: get("pixel_std")?,
            static_mean,
            static_std,
            epsilon: scalar("epsilon".into())?,
        },
        f.grid,
    ))
}

/// One CSV per epoch (`epoch_000.csv`, ...), rows north to south.
pub fn write_epoch_csvs(cube: &DisplacementCube, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(cube.epochs());
    for t in 0..cube.epochs() {
        let path = dir.join(format!("epoch_{t:03}.csv"));
        let mut text = String::new();
        for row in cube.frame(t).outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::tests::cube_from_fn;
    use crate::features::{prepare, SplitSpec};

    #[test]
    fn displacement_cube_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cube = cube_from_fn(7, 3, 4, |t, r, c, d| {
            (t as f64 * 0.1 + r as f64).sin() / 3.0 + c as f64 * d
        });
        let path = dir.path().join("tile.cube");
        save_displacement_cube(&cube, &path).unwrap();
        let back = load_displacement_cube(&path).unwrap();
        assert_eq!(back, cube);
        let text = fs::read(&path).unwrap();
        assert!(text.starts_with(b"DEFCUBE1\nepochs 7\nheight 3\nwidth 4\n"));
    }

    #[test]
    fn stats_and_static_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cube = cube_from_fn(30, 3, 3, |t, r, c, _| (t * (r + 1)) as f64 * 0.3 - c as f64);
        let f = prepare(&cube, &SplitSpec::default()).unwrap();
        save_norm_stats(&f.stats, &cube.grid, dir.path().join("s.cube")).unwrap();
        save_static_maps(&f.statics, &cube.grid, dir.path().join("m.cube")).unwrap();
        let (stats, grid) = load_norm_stats(dir.path().join("s.cube")).unwrap();
        assert_eq!((stats, grid), (f.stats.clone(), cube.grid));
        assert_eq!(load_static_maps(dir.path().join("m.cube")).unwrap().0, f.statics);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cube = cube_from_fn(3, 2, 2, |t, _, _, _| t as f64);
        let path = dir.path().join("c.cube");
        save_displacement_cube(&cube, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cube_file(&path), Err(Error::Format(_))));
        fs::write(&path, b"NOTACUBE\n").unwrap();
        assert!(read_cube_file(&path).is_err());
    }

    #[test]
    fn epoch_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let cube = cube_from_fn(2, 2, 3, |t, r, c, _| (t * 10 + r * 3 + c) as f64);
        let files = write_epoch_csvs(&cube, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&files[1]).unwrap(), "10,11,12\n13,14,15\n");
    }
}
