//! Learned forecasters behind one interface, plus the layer helpers they share.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{Modality, MultimodalCube, Window};
use crate::stgcn::{Stgcn, StgcnConfig};
use crate::transformer::{Transformer, TransformerConfig};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Windows per inference tape.
const INFERENCE_CHUNK: usize = 4;

/// `x·w + b` over the last axis of `x`, for any number of leading axes.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (k, n) = match tape.shape(w) {
        &[k, n] => (k, n),
        other => return Err(Error::shape("linear weight", &shape, other)),
    };
    if shape.last() != Some(&k) {
        return Err(Error::shape("linear", &shape, &[k, n]));
    }
    let rows = shape.iter().product::<usize>() / k;
    let flat = tape.reshape(x, &[rows, k])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        let bb = tape.expand(b, &[rows, n])?;
        y = tape.add(y, bb)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = n;
    tape.reshape(y, &out_shape)
}

/// Layer norm over the last axis followed by a learned gain and bias.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = tape.layer_norm_lastaxis(x, LAYER_NORM_EPS)?;
    let g = tape.expand(gain, &shape)?;
    let b = tape.expand(bias, &shape)?;
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

/// Uniform Glorot initialisation.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = rand_distr::Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| rng.sample(dist))
}

/// Inverted dropout driven by its own random stream.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

pub(crate) fn apply_dropout(dropout: &mut Option<&mut Dropout>, tape: &mut Tape, x: Var) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Architecture and hyperparameters of a learned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Stgcn(StgcnConfig),
}

impl ModelConfig {
    pub fn history(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.history_length,
            ModelConfig::Stgcn(c) => c.history_length,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            ModelConfig::Transformer(c) => (c.height, c.width),
            ModelConfig::Stgcn(c) => (c.height, c.width),
        }
    }

    pub fn modality(&self) -> Result<Modality> {
        let channels = match self {
            ModelConfig::Transformer(c) => c.input_channels,
            ModelConfig::Stgcn(c) => c.input_channels,
        };
        match channels {
            1 => Ok(Modality::Unimodal),
            6 => Ok(Modality::Multimodal),
            c => Err(Error::Invalid(format!("input_channels must be 1 or 6, got {c}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Stgcn(_) => "stgcn",
        }
    }
}

/// A learned one-step forecaster over normalised windows.
#[derive(Clone, Debug)]
pub enum NeuralModel {
    Transformer(Transformer),
    Stgcn(Stgcn),
}

impl NeuralModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Transformer(c) => NeuralModel::Transformer(Transformer::new(c.clone(), seed)?),
            ModelConfig::Stgcn(c) => NeuralModel::Stgcn(Stgcn::new(c.clone(), seed)?),
        })
    }

    /// Rebuilds a model around existing parameters.
    pub fn with_params(config: &ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if !model.params().same_layout(&params) {
            return Err(Error::Checkpoint(format!(
                "parameters do not match the {} layout",
                config.name()
            )));
        }
        *model.params_mut() = params;
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            NeuralModel::Transformer(m) => ModelConfig::Transformer(m.config.clone()),
            NeuralModel::Stgcn(m) => ModelConfig::Stgcn(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            NeuralModel::Transformer(m) => &m.params,
            NeuralModel::Stgcn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            NeuralModel::Transformer(m) => &mut m.params,
            NeuralModel::Stgcn(m) => &mut m.params,
        }
    }

    pub fn history(&self) -> usize {
        self.config().history()
    }

    pub fn modality(&self) -> Modality {
        self.config().modality().expect("validated at construction")
    }

    /// Normalised next-epoch maps `[B, H, W]` for windows `x = [B, L, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
        match self {
            NeuralModel::Transformer(m) => m.forward(tape, bound, x, dropout),
            NeuralModel::Stgcn(m) => m.forward(tape, bound, x, dropout),
        }
    }

    /// Stacks windows of `mm` into a `[B, L, C, H, W]` tensor.
    pub fn batch_tensor(&self, mm: &MultimodalCube, windows: &[Window]) -> Tensor {
        let l = self.history();
        let modality = self.modality();
        let (h, w) = mm.dims();
        let c = modality.channels();
        let mut data = Vec::with_capacity(windows.len() * l * c * h * w);
        for win in windows {
            data.extend_from_slice(mm.window_tensor(win.start, l, modality).data());
        }
        Tensor::new(&[windows.len(), l, c, h, w], data).expect("batch shape")
    }

    /// Normalised predictions `[windows, H, W]` using `params` (e.g. EMA weights).
    pub fn predict(&self, params: &ParamSet, mm: &MultimodalCube, windows: &[Window]) -> Result<Array3<f64>> {
        if !self.params().same_layout(params) {
            return Err(Error::Invalid("parameter set does not match the model layout".into()));
        }
        let (h, w) = mm.dims();
        if (h, w) != self.config().grid() {
            return Err(Error::shape(
                "predict grid",
                &[h, w],
                &[self.config().grid().0, self.config().grid().1],
            ));
        }
        let chunks: Vec<Vec<f64>> = windows
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, false);
                let x = tape.constant(self.batch_tensor(mm, chunk));
                let y = self.forward(&mut tape, &bound, x, None)?;
                Ok(tape.value(y).data().to_vec())
            })
            .collect::<Result<_>>()?;
        let data: Vec<f64> = chunks.into_iter().flatten().collect();
        Ok(Array3::from_shape_vec((windows.len(), h, w), data).expect("prediction shape"))
    }
}

/// Stacks maps along a new leading axis.
pub fn stack_maps(maps: &[Array2<f64>]) -> Result<Array3<f64>> {
    let first = maps.first().ok_or_else(|| Error::Invalid("no maps to stack".into()))?;
    let mut out = Array3::zeros((maps.len(), first.nrows(), first.ncols()));
    for (i, m) in maps.iter().enumerate() {
        if m.dim() != first.dim() {
            return Err(Error::shape("stack maps", m.shape(), first.shape()));
        }
        out.index_axis_mut(Axis(0), i).assign(m);
    }
    Ok(out)
}
