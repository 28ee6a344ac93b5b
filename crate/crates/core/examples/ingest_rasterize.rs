//! Writes a synthetic scatterer CSV, loads it back, and rasterises it onto the
//! tile grid by Delaunay interpolation.

use deformcast::ingest::{densify, load_l3_csv, write_l3_csv, MAX_MISSING_FRACTION};
use deformcast::raster::{rasterize_cube, GridSpec};
use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};

fn main() -> deformcast::Result<()> {
    let spec = RegimeSpec {
        height: 32,
        width: 32,
        points: 2000,
        ..RegimeSpec::preset(RegimeKind::Mixed)
    };
    let tile = generate_tile(&spec)?;
    let dir = std::env::temp_dir().join("deformcast_ingest_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(tile.points.tile.l3_file_name());
    write_l3_csv(&tile.points, &path)?;

    let loaded = load_l3_csv(&path)?;
    println!(
        "loaded {} scatterers over {} epochs from {}",
        loaded.series.points.len(),
        loaded.series.calendar.len(),
        path.display()
    );
    let dense = densify(&loaded.series, MAX_MISSING_FRACTION)?;
    let grid = GridSpec::for_tile(dense.tile, spec.height, spec.width)?;
    let cube = rasterize_cube(&dense, &grid)?;
    let err = &cube.values - &tile.truth.values;
    let rmse = (err.mapv(|e| e * e).mean().unwrap_or(0.0)).sqrt();
    println!(
        "kept {} scatterers; raster vs truth rmse {rmse:.3} mm",
        dense.points.len()
    );
    Ok(())
}
