//! Trains the graph-convolution comparator on a mixed tile. Pass a step
//! budget as the first argument (default 300).

use deformcast::checkpoint::ModelCheckpoint;
use deformcast::eval::{evaluate_baseline, evaluate_model, BaselineKind};
use deformcast::features::{make_windows, prepare, SplitSpec};
use deformcast::model::{ModelConfig, NeuralModel};
use deformcast::stgcn::StgcnConfig;
use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};
use deformcast::training::{fit, LossWeights, TrainConfig};

fn main() -> deformcast::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = RegimeSpec::preset(RegimeKind::Mixed);
    let tile = generate_tile(&spec)?;
    let split = SplitSpec::default();
    let feats = prepare(&tile.truth, &split)?;
    let config = ModelConfig::Stgcn(StgcnConfig {
        hidden: vec![16],
        history_length: 8,
        ..StgcnConfig::default()
    });
    let samples = make_windows(&feats.cube, config.history(), &split)?;
    let mut model = NeuralModel::new(&config, 1)?;
    let train = TrainConfig {
        max_epochs: 1000,
        max_steps: Some(steps),
        batch_size: 4,
        peak_lr: 3e-3,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &feats.cube, &samples, &LossWeights::mae_only(), &train)?;
    let ck = ModelCheckpoint::new(spec.tile_id()?, spec.grid()?, &model, out.ema, feats.stats)?;
    let e = evaluate_model(&ck, &tile.truth, &split)?;
    let p = evaluate_baseline(BaselineKind::Persistence, &tile.truth, &split, 8)?;
    println!(
        "stgcn rmse {:.3} mm r2 {:.4}; persistence rmse {:.3} mm",
        e.report.rmse_mm, e.report.r2, p.report.rmse_mm
    );
    Ok(())
}
