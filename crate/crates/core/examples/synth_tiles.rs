//! Generates one tile per deformation regime and prints summary statistics.

use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};

fn main() -> deformcast::Result<()> {
    for kind in [
        RegimeKind::Trend,
        RegimeKind::Seasonal,
        RegimeKind::Coseismic,
        RegimeKind::Mixed,
    ] {
        let spec = RegimeSpec {
            height: 32,
            width: 32,
            points: 1500,
            ..RegimeSpec::preset(kind)
        };
        let tile = generate_tile(&spec)?;
        let last = tile.truth.frame(tile.truth.epochs() - 1);
        let (lo, hi) = last
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "{kind:?}: {} epochs, {} scatterers, final map {lo:.1}..{hi:.1} mm, mean velocity {:.2} mm/yr",
            tile.truth.epochs(),
            tile.points.points.len(),
            tile.maps.velocity.mean().unwrap_or(0.0),
        );
    }
    Ok(())
}
