//! Event-centred error curves around a co-seismic step. Uses the persistence
//! forecast so it runs instantly; any model's evaluation works the same way.

use deformcast::eval::{evaluate_baseline, event_centred_diagnostics, BaselineKind, EVENT_HALF_WINDOW};
use deformcast::features::SplitSpec;
use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};

fn main() -> deformcast::Result<()> {
    let spec = RegimeSpec {
        event_epoch: Some(104),
        ..RegimeSpec::preset(RegimeKind::Coseismic)
    };
    let tile = generate_tile(&spec)?;
    let e = evaluate_baseline(BaselineKind::Persistence, &tile.truth, &SplitSpec::default(), 8)?;
    let d = event_centred_diagnostics(&e.pred_mm, &e.truth_mm, EVENT_HALF_WINDOW)?;
    println!("estimated event epoch {}", e.target_epochs[d.event_index]);
    println!(
        "peak offset {}, recovery below 2x pre-event mean after {:?} epochs",
        d.peak_offset(),
        d.recovery_offset(2.0)
    );
    print!("{}", d.to_csv());
    Ok(())
}
