//! Fits the static deformation indicators on the training window and builds
//! the normalised six-channel input stack.

use deformcast::features::{prepare, SplitSpec, CHANNEL_NAMES};
use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};

fn main() -> deformcast::Result<()> {
    let spec = RegimeSpec {
        height: 32,
        width: 32,
        noise_sigma_mm: 0.0,
        ..RegimeSpec::preset(RegimeKind::Mixed)
    };
    let tile = generate_tile(&spec)?;
    let feats = prepare(&tile.truth, &SplitSpec::default())?;
    let worst =
        |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| (a - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    println!(
        "velocity recovery error {:.2e} mm/yr",
        worst(&feats.statics.velocity, &tile.maps.velocity)
    );
    println!(
        "amplitude recovery error {:.2e} mm",
        worst(&feats.statics.seasonal_amplitude, &tile.maps.amplitude)
    );
    println!("stack shape {:?}", feats.cube.values.shape());
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        let channel = feats.cube.values.index_axis(ndarray::Axis(1), c);
        println!("  {name:13} mean {:+.3}", channel.mean().unwrap_or(0.0));
    }
    Ok(())
}
