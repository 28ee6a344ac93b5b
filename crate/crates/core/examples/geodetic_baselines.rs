//! Scores the persistence, linear-trend and seasonal baselines on each regime.

use deformcast::eval::{evaluate_baseline, BaselineKind};
use deformcast::features::SplitSpec;
use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};

fn main() -> deformcast::Result<()> {
    let split = SplitSpec::default();
    for kind in [RegimeKind::Trend, RegimeKind::Seasonal, RegimeKind::Mixed] {
        let spec = RegimeSpec {
            height: 32,
            width: 32,
            ..RegimeSpec::preset(kind)
        };
        let tile = generate_tile(&spec)?;
        for baseline in [BaselineKind::Persistence, BaselineKind::Linear, BaselineKind::Seasonal] {
            let e = evaluate_baseline(baseline, &tile.truth, &split, 8)?;
            println!(
                "{kind:?} {:12} rmse {:.3} mm  r2 {:.4}",
                baseline.name(),
                e.report.rmse_mm,
                e.report.r2
            );
        }
    }
    Ok(())
}
