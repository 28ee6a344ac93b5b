//! Finite-difference check of the full transformer and graph model gradients
//! through the composite loss.

use deformcast::autodiff::{grad_check_params, GRAD_CHECK_STEP};
use deformcast::features::{make_windows, prepare, SplitSpec};
use deformcast::model::{ModelConfig, NeuralModel};
use deformcast::stgcn::StgcnConfig;
use deformcast::synth::{generate_tile, RegimeKind, RegimeSpec};
use deformcast::training::{composite_loss, target_tensor, LossWeights};
use deformcast::transformer::TransformerConfig;

fn main() -> deformcast::Result<()> {
    let spec = RegimeSpec {
        height: 16,
        width: 16,
        epochs: 40,
        points: 500,
        ..RegimeSpec::preset(RegimeKind::Mixed)
    };
    let tile = generate_tile(&spec)?;
    let split = SplitSpec::default();
    let feats = prepare(&tile.truth, &split)?;
    let configs = [
        ModelConfig::Transformer(TransformerConfig {
            height: 16,
            width: 16,
            patch_size: 4,
            embed_dim: 16,
            layers: 2,
            heads: 2,
            history_length: 4,
            dropout: 0.0,
            ..TransformerConfig::default()
        }),
        ModelConfig::Stgcn(StgcnConfig {
            height: 16,
            width: 16,
            hidden: vec![4, 4],
            kernel_size: 2,
            history_length: 6,
            ..StgcnConfig::default()
        }),
    ];
    for config in configs {
        let samples = make_windows(&feats.cube, config.history(), &split)?;
        let model = NeuralModel::new(&config, 3)?;
        let windows = &samples.train[..2];
        let input = model.batch_tensor(&feats.cube, windows);
        let target = target_tensor(&feats.cube, windows);
        let err = grad_check_params(
            |tape, bound| {
                let x = tape.constant(input.clone());
                let y = model.forward(tape, bound, x, None)?;
                let t = tape.constant(target.clone());
                composite_loss(tape, y, t, &feats.stats, &LossWeights::composite())
            },
            model.params(),
            GRAD_CHECK_STEP,
            4,
        )?;
        println!(
            "{}: {} parameters, max relative error {err:.2e}",
            config.name(),
            model.params().scalar_count()
        );
    }
    Ok(())
}
