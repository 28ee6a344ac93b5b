//! Trains on one tile, saves the checkpoint, and applies it unchanged to a
//! second tile using the source normalisation. Pass a step budget as the first
//! argument (default 300).

use deformcast::checkpoint::ModelCheckpoint;
use deformcast::eval::{cross_site_evaluate, evaluate_baseline, BaselineKind};
use deformcast::features::{make_windows, prepare, SplitSpec};
use deformcast::model::{ModelConfig, NeuralModel};
use deformcast::synth::{generate_tile, FieldSpec, RegimeKind, RegimeSpec};
use deformcast::training::{fit, LossWeights, TrainConfig};
use deformcast::transformer::TransformerConfig;

fn main() -> deformcast::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let source = RegimeSpec::preset(RegimeKind::Mixed);
    let tile = generate_tile(&source)?;
    let split = SplitSpec::default();
    let feats = prepare(&tile.truth, &split)?;
    let config = ModelConfig::Transformer(TransformerConfig {
        embed_dim: 64,
        layers: 2,
        history_length: 8,
        dropout: 0.0,
        ..TransformerConfig::default()
    });
    let samples = make_windows(&feats.cube, config.history(), &split)?;
    let mut model = NeuralModel::new(&config, 1)?;
    let train = TrainConfig {
        max_epochs: 1000,
        max_steps: Some(steps),
        batch_size: 4,
        peak_lr: 2e-3,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &feats.cube, &samples, &LossWeights::composite(), &train)?;
    let path = std::env::temp_dir().join("deformcast_source.ckpt");
    ModelCheckpoint::new(source.tile_id()?, source.grid()?, &model, out.ema, feats.stats)?.save(&path)?;

    let target = RegimeSpec {
        tile: "E33N35".into(),
        velocity: FieldSpec::new(-6.0, 4.0),
        seed: 11,
        ..RegimeSpec::preset(RegimeKind::Mixed)
    };
    let target_tile = generate_tile(&target)?;
    let ck = ModelCheckpoint::load(&path)?;
    let e = cross_site_evaluate(&ck, &target_tile.truth, &split)?;
    let p = evaluate_baseline(BaselineKind::Persistence, &target_tile.truth, &split, 8)?;
    println!(
        "zero-shot rmse {:.3} mm r2 {:.4}; persistence rmse {:.3} mm",
        e.report.rmse_mm, e.report.r2, p.report.rmse_mm
    );
    Ok(())
}
