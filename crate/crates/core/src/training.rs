//! Losses, optimiser, schedule, weight averaging and the fit loop.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{MultimodalCube, NormStats, SampleSet, Window};
use crate::model::{Dropout, NeuralModel};
use crate::rng::{rng_for, stream};

pub const REL_EPSILON: f64 = 1e-6;
pub const SMOOTH_L1_BETA: f64 = 1.0;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn check_same(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// `[B, H, W]` (or any `[B, ...]`) flattened to `[B, rest]`.
fn per_sample(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let b = *shape
        .first()
        .ok_or_else(|| Error::shape("per-sample loss", &shape, &[0]))?;
    let rest = shape[1..].iter().product();
    tape.reshape(x, &[b, rest])
}

/// Mean absolute error over every element.
pub fn loss_mae(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, "loss_mae", pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

pub fn loss_smooth_l1(tape: &mut Tape, pred: Var, target: Var, beta: f64) -> Result<Var> {
    check_same(tape, "loss_smooth_l1", pred, target)?;
    let d = tape.sub(pred, target)?;
    let s = tape.smooth_l1(d, beta);
    Ok(tape.mean_all(s))
}

/// Per-sample `Σ|p − t| / (Σ|t| + ε)`, averaged over the batch.
pub fn loss_rel(tape: &mut Tape, pred_mm: Var, target_mm: Var, eps: f64) -> Result<Var> {
    check_same(tape, "loss_rel", pred_mm, target_mm)?;
    let d = tape.sub(pred_mm, target_mm)?;
    let d = tape.abs(d);
    let d = per_sample(tape, d)?;
    let num = tape.sum_axis(d, 1)?;
    let t = tape.abs(target_mm);
    let t = per_sample(tape, t)?;
    let den = tape.sum_axis(t, 1)?;
    let den = tape.add_scalar(den, eps);
    let r = tape.div(num, den)?;
    Ok(tape.mean_all(r))
}

/// Per-sample `1 − Pearson(p, t)`, averaged; a constant operand contributes 1.
pub fn loss_corr(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, "loss_corr", pred, target)?;
    let p = per_sample(tape, pred)?;
    let t = per_sample(tape, target)?;
    let (b, n) = (tape.shape(p)[0], tape.shape(p)[1]);
    let centre = |tape: &mut Tape, x: Var| -> Result<Var> {
        let m = tape.mean_axis(x, 1)?;
        let m = tape.reshape(m, &[b, 1])?;
        let m = tape.expand(m, &[b, n])?;
        tape.sub(x, m)
    };
    let pc = centre(tape, p)?;
    let tc = centre(tape, t)?;
    let cross = tape.mul(pc, tc)?;
    let num = tape.sum_axis(cross, 1)?;
    let pp = tape.square(pc);
    let spp = tape.sum_axis(pp, 1)?;
    let tt = tape.square(tc);
    let stt = tape.sum_axis(tt, 1)?;
    let valid: Vec<f64> = (0..b)
        .map(|i| {
            let ok = tape.value(spp).data()[i] > 0.0 && tape.value(stt).data()[i] > 0.0;
            if ok {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    // Degenerate samples get r = 0; the shift keeps their sqrt away from zero.
    let shift = tape.constant(Tensor::new(&[b], valid.iter().map(|v| 1.0 - v).collect())?);
    let keep = tape.constant(Tensor::new(&[b], valid)?);
    let prod = tape.mul(spp, stt)?;
    let prod = tape.add(prod, shift)?;
    let den = tape.sqrt(prod);
    let r = tape.div(num, den)?;
    let r = tape.mul(r, keep)?;
    let neg = tape.scale(r, -1.0);
    let l = tape.add_scalar(neg, 1.0);
    Ok(tape.mean_all(l))
}

/// Mean absolute difference of Sobel responses, averaged over both directions.
pub fn loss_grad(tape: &mut Tape, pred_mm: Var, target_mm: Var) -> Result<Var> {
    check_same(tape, "loss_grad", pred_mm, target_mm)?;
    let mut terms = Vec::with_capacity(2);
    for kernel in [SOBEL_X, SOBEL_Y] {
        let gp = tape.fixed_kernel_conv2d(pred_mm, kernel)?;
        let gt = tape.fixed_kernel_conv2d(target_mm, kernel)?;
        terms.push(loss_mae(tape, gp, gt)?);
    }
    let s = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(s, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Mae,
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub base: BaseLoss,
    pub rel: f64,
    pub corr: f64,
    pub grad: f64,
}

impl LossWeights {
    pub fn composite() -> Self {
        LossWeights {
            base: BaseLoss::Mae,
            rel: 0.1,
            corr: 0.1,
            grad: 0.05,
        }
    }

    pub fn mae_only() -> Self {
        LossWeights {
            base: BaseLoss::Mae,
            rel: 0.0,
            corr: 0.0,
            grad: 0.0,
        }
    }

    pub fn smooth_l1_only() -> Self {
        LossWeights {
            base: BaseLoss::SmoothL1,
            ..Self::mae_only()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "composite" => Ok(Self::composite()),
            "mae_only" => Ok(Self::mae_only()),
            "smoothl1_only" => Ok(Self::smooth_l1_only()),
            other => Err(Error::Invalid(format!("unknown loss preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rel", self.rel), ("corr", self.corr), ("grad", self.grad)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel mean and std as `[B, H, W]` constants.
fn stats_constants(tape: &mut Tape, stats: &NormStats, batch: usize) -> Result<(Var, Var)> {
    let (h, w) = stats.dims();
    let mean = tape.constant(Tensor::new(&[h, w], stats.pixel_mean.iter().copied().collect())?);
    let std = tape.constant(Tensor::new(&[h, w], stats.pixel_std.iter().copied().collect())?);
    Ok((tape.expand(mean, &[batch, h, w])?, tape.expand(std, &[batch, h, w])?))
}

/// `L_base + λ_rel L_rel + λ_corr L_corr + λ_grad L_grad` on `[B, H, W]`
/// normalised maps; the relative and gradient terms use millimetres.
pub fn composite_loss(tape: &mut Tape, pred: Var, target: Var, stats: &NormStats, w: &LossWeights) -> Result<Var> {
    let mut total = match w.base {
        BaseLoss::Mae => loss_mae(tape, pred, target)?,
        BaseLoss::SmoothL1 => loss_smooth_l1(tape, pred, target, SMOOTH_L1_BETA)?,
    };
    if w.rel == 0.0 && w.corr == 0.0 && w.grad == 0.0 {
        return Ok(total);
    }
    let batch = tape.shape(pred)[0];
    let (mean, std) = stats_constants(tape, stats, batch)?;
    let to_mm = |tape: &mut Tape, x: Var| -> Result<Var> {
        let s = tape.mul(x, std)?;
        tape.add(s, mean)
    };
    let pred_mm = to_mm(tape, pred)?;
    let target_mm = to_mm(tape, target)?;
    if w.rel != 0.0 {
        let l = loss_rel(tape, pred_mm, target_mm, REL_EPSILON)?;
        let l = tape.scale(l, w.rel);
        total = tape.add(total, l)?;
    }
    if w.corr != 0.0 {
        let l = loss_corr(tape, pred, target)?;
        let l = tape.scale(l, w.corr);
        total = tape.add(total, l)?;
    }
    if w.grad != 0.0 {
        let l = loss_grad(tape, pred_mm, target_mm)?;
        let l = tape.scale(l, w.grad);
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Linear warm-up from 0 to `peak` over the first `warmup_fraction` of
/// `total` steps, then cosine decay to `final_fraction · peak` at step `total`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, warmup_fraction: f64, final_fraction: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    let warmup = ((warmup_fraction * total as f64).ceil() as usize).clamp(1, total);
    let floor = final_fraction * peak;
    if step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return floor;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales `grads` in place to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

/// Exponential moving average of parameters. The effective decay ramps up as
/// `min(decay, (1 + n) / (10 + n))` over the first updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamSet,
    pub updates: u64,
}

impl EmaState {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        EmaState {
            decay,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &ParamSet) {
        let d = self.effective_decay();
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
    }
}

/// Patience-based early stopping on a held-out loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records `loss` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Optimiser-step budget; the run ends when it is used up.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            max_steps: None,
            batch_size: 8,
            peak_lr: 1e-3,
            weight_decay: 1e-4,
            warmup_fraction: 0.05,
            final_lr_fraction: 0.01,
            clip_norm: 1.0,
            ema_decay: 0.999,
            patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.max_epochs == 0 {
            problems.push("max_epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.max_steps == Some(0) {
            problems.push("max_steps must be at least 1".into());
        }
        if !(self.peak_lr > 0.0) {
            problems.push(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            problems.push("warmup_fraction and final_lr_fraction must be in [0, 1]".into());
        }
        if !(self.clip_norm > 0.0) {
            problems.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            problems.push(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn total_steps(&self, train_windows: usize) -> usize {
        let per_epoch = train_windows.div_ceil(self.batch_size);
        let planned = per_epoch * self.max_epochs;
        self.max_steps.map_or(planned, |s| s.min(planned))
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub holdout_rmse_mm: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,step,lr,train_loss,holdout_loss,holdout_rmse_mm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.step, r.lr, r.train_loss, r.holdout_loss, r.holdout_rmse_mm
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Completed,
    EarlyStopped,
    /// A non-finite training loss appeared at this step; the returned weights
    /// are the best ones recorded before it.
    Diverged {
        step: usize,
    },
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Raw weights at the best held-out epoch.
    pub params: ParamSet,
    /// Averaged weights at the best held-out epoch, used for evaluation.
    pub ema: ParamSet,
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub best_epoch: usize,
    pub status: FitStatus,
}

/// Normalised target maps `[B, H, W]` of `windows`.
pub fn target_tensor(mm: &MultimodalCube, windows: &[Window]) -> Tensor {
    let (h, w) = mm.dims();
    let mut data = Vec::with_capacity(windows.len() * h * w);
    for win in windows {
        data.extend(mm.displacement(win.target).iter());
    }
    Tensor::new(&[windows.len(), h, w], data).expect("target shape")
}

/// Held-out loss and RMSE in millimetres for `params` over `windows`.
pub fn holdout_scores(
    model: &NeuralModel,
    params: &ParamSet,
    mm: &MultimodalCube,
    windows: &[Window],
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let pred = model.predict(params, mm, windows)?;
    let (h, w) = mm.dims();
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::new(&[windows.len(), h, w], pred.iter().copied().collect())?);
    let tv = tape.constant(target_tensor(mm, windows));
    let loss = composite_loss(&mut tape, pv, tv, &mm.stats, weights)?;
    let loss = tape.value(loss).item();
    let truth = Array3::from_shape_vec((windows.len(), h, w), target_tensor(mm, windows).into_data()).expect("shape");
    let std = &mm.stats.pixel_std;
    let sq: f64 = pred
        .outer_iter()
        .zip(truth.outer_iter())
        .map(|(p, t)| ((&p - &t) * std).mapv(|v| v * v).sum())
        .sum();
    Ok((loss, (sq / pred.len() as f64).sqrt()))
}

/// Trains `model` on `samples.train`, early-stopping on `samples.test`.
pub fn fit(
    model: &mut NeuralModel,
    mm: &MultimodalCube,
    samples: &SampleSet,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if samples.train.is_empty() || samples.test.is_empty() {
        return Err(Error::Invalid("fit needs non-empty train and held-out windows".into()));
    }
    if samples.history != model.history() {
        return Err(Error::Invalid(format!(
            "samples use history {} but the model expects {}",
            samples.history,
            model.history()
        )));
    }
    let total = cfg.total_steps(samples.train.len());
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let mut ema = EmaState::new(model.params(), cfg.ema_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut shuffle_rng = rng_for(cfg.seed, stream::SHUFFLE);
    let dropout_rate = match model.config() {
        crate::model::ModelConfig::Transformer(c) => c.dropout,
        crate::model::ModelConfig::Stgcn(c) => c.dropout,
    };
    let mut dropout = Dropout::new(dropout_rate, rng_for(cfg.seed, stream::DROPOUT));
    let mut best = (model.params().clone(), ema.shadow.clone());
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut status = FitStatus::Completed;
    let mut order = samples.train.clone();

    'epochs: for epoch in 1..=cfg.max_epochs {
        if step >= total {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let x = tape.constant(model.batch_tensor(mm, batch));
            let y = model.forward(&mut tape, &bound, x, Some(&mut dropout))?;
            let t = tape.constant(target_tensor(mm, batch));
            let loss = composite_loss(&mut tape, y, t, &mm.stats, weights)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                status = FitStatus::Diverged { step: step + 1 };
                break 'epochs;
            }
            tape.backward(loss)?;
            let mut grads = bound.grads(&tape);
            drop(tape);
            clip_gradients(&mut grads, cfg.clip_norm);
            step += 1;
            lr = lr_schedule(step, total, cfg.peak_lr, cfg.warmup_fraction, cfg.final_lr_fraction);
            opt.update(model.params_mut(), &grads, lr);
            ema.update(model.params());
            loss_sum += loss_value;
            batches += 1;
        }
        let (holdout_loss, holdout_rmse_mm) = holdout_scores(model, &ema.shadow, mm, &samples.test, weights)?;
        log.push(LogRow {
            epoch,
            step,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            holdout_loss,
            holdout_rmse_mm,
        });
        if !holdout_loss.is_finite() {
            status = FitStatus::Diverged { step };
            break;
        }
        if stopper.observe(epoch, holdout_loss) {
            best = (model.params().clone(), ema.shadow.clone());
        }
        if stopper.should_stop() {
            status = FitStatus::EarlyStopped;
            break;
        }
    }
    let (params, ema_best) = best;
    *model.params_mut() = params.clone();
    Ok(FitOutcome {
        params,
        ema: ema_best,
        log,
        steps: step,
        best_epoch: stopper.best_epoch,
        status,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn var(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape, data).unwrap())
    }

    fn eval(f: impl Fn(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn mae_examples() {
        let a = vec![1.0, -2.0, 3.5, 0.25];
        assert_eq!(
            eval(|t| {
                let p = var(t, &[1, 2, 2], a.clone());
                let q = var(t, &[1, 2, 2], a.clone());
                loss_mae(t, p, q)
            }),
            0.0
        );
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let got = eval(|t| {
            let p = var(t, &[1, 2, 2], b.clone());
            let q = var(t, &[1, 2, 2], a.clone());
            loss_mae(t, p, q)
        });
        assert!((got - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let oracle = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 24.0;
        let got = eval(|t| {
            let p = var(t, &[2, 3, 4], x.clone());
            let q = var(t, &[2, 3, 4], y.clone());
            loss_mae(t, p, q)
        });
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn rel_examples() {
        let t = vec![1.0, -2.0, 3.0, 4.0];
        let p = vec![1.5, -2.0, 2.0, 4.0];
        // Σ|p − t| = 1.5, Σ|t| = 10
        let got = eval(|tp| {
            let a = var(tp, &[1, 2, 2], p.clone());
            let b = var(tp, &[1, 2, 2], t.clone());
            loss_rel(tp, a, b, REL_EPSILON)
        });
        assert!((got - 1.5 / (10.0 + 1e-6)).abs() < 1e-12);
        let zero = eval(|tp| {
            let a = var(tp, &[1, 2, 2], vec![2.0; 4]);
            let b = var(tp, &[1, 2, 2], vec![0.0; 4]);
            loss_rel(tp, a, b, REL_EPSILON)
        });
        assert!((zero - 8.0 / 1e-6).abs() < 1e-3 && zero.is_finite());
    }

    #[test]
    fn corr_examples() {
        let t = vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0];
        let same = eval(|tp| {
            let a = var(tp, &[1, 6], t.clone());
            let b = var(tp, &[1, 6], t.clone());
            loss_corr(tp, a, b)
        });
        assert!(same.abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let anti = eval(|tp| {
            let a = var(tp, &[1, 6], neg.clone());
            let b = var(tp, &[1, 6], t.clone());
            loss_corr(tp, a, b)
        });
        assert!((anti - 2.0).abs() < 1e-12);
        let affine: Vec<f64> = t.iter().map(|v| 3.7 * v - 11.0).collect();
        let inv = eval(|tp| {
            let a = var(tp, &[1, 6], affine.clone());
            let b = var(tp, &[1, 6], t.clone());
            loss_corr(tp, a, b)
        });
        assert!(inv.abs() < 1e-10);
        let flat = eval(|tp| {
            let a = var(tp, &[1, 6], vec![2.0; 6]);
            let b = var(tp, &[1, 6], t.clone());
            loss_corr(tp, a, b)
        });
        assert_eq!(flat, 1.0);
    }

    #[test]
    fn corr_gradient_is_finite_for_constant_prediction() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[2, 3], 1.0));
        let t = var(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, 1.0, 0.0, 1.0]);
        let l = loss_corr(&mut tape, p, t).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn grad_examples() {
        let ramp: Vec<f64> = (0..9).map(|k| (k % 3) as f64).collect();
        let got = eval(|tp| {
            let a = var(tp, &[1, 3, 3], ramp.clone());
            let b = var(tp, &[1, 3, 3], vec![0.0; 9]);
            loss_grad(tp, a, b)
        });
        // Sobel-x of a unit ramp is 1 + 2 + 1 = 4 per side, times two columns = 8; Sobel-y is 0.
        assert!((got - 4.0).abs() < 1e-12);
        let c = eval(|tp| {
            let a = var(tp, &[1, 3, 3], vec![3.0; 9]);
            let b = var(tp, &[1, 3, 3], vec![-1.0; 9]);
            loss_grad(tp, a, b)
        });
        assert_eq!(c, 0.0);
        let mut tape = Tape::new();
        let a = var(&mut tape, &[1, 2, 5], vec![0.0; 10]);
        assert!(loss_grad(&mut tape, a, a).is_err());
    }

    fn stats(h: usize, w: usize) -> NormStats {
        NormStats {
            pixel_mean: Array2::from_shape_fn((h, w), |(r, c)| r as f64 - c as f64),
            pixel_std: Array2::from_shape_fn((h, w), |(r, c)| 1.0 + 0.1 * (r + c) as f64),
            static_mean: [0.0; 3],
            static_std: [1.0; 3],
            epsilon: 1e-6,
        }
    }

    #[test]
    fn composite_with_zero_weights_is_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let st = stats(4, 4);
        let mae = eval(|t| {
            let p = var(t, &[2, 4, 4], x.clone());
            let q = var(t, &[2, 4, 4], y.clone());
            loss_mae(t, p, q)
        });
        let comp = eval(|t| {
            let p = var(t, &[2, 4, 4], x.clone());
            let q = var(t, &[2, 4, 4], y.clone());
            composite_loss(t, p, q, &st, &LossWeights::mae_only())
        });
        assert_eq!(mae, comp);
        let same = eval(|t| {
            let p = var(t, &[2, 4, 4], y.clone());
            let q = var(t, &[2, 4, 4], y.clone());
            composite_loss(t, p, q, &st, &LossWeights::composite())
        });
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn composite_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 4, 5], |_| rng.gen_range(-2.0..2.0));
        let y = Tensor::from_fn(&[2, 4, 5], |_| rng.gen_range(-2.0..2.0));
        let st = stats(4, 5);
        for w in [LossWeights::composite(), LossWeights::smooth_l1_only()] {
            let err = grad_check(
                |t, p| {
                    let q = t.constant(y.clone());
                    composite_loss(t, p, q, &st, &w)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-3, "{err}");
        }
    }

    #[test]
    fn schedule_shape() {
        let (total, peak) = (200, 1e-3);
        assert_eq!(lr_schedule(0, total, peak, 0.05, 0.01), 0.0);
        assert!((lr_schedule(10, total, peak, 0.05, 0.01) - peak).abs() < 1e-15);
        assert!((lr_schedule(200, total, peak, 0.05, 0.01) - 0.01 * peak).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..=200 {
            let lr = lr_schedule(s, total, peak, 0.05, 0.01);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![vec![6.0, 0.0], vec![8.0]];
        let before = clip_gradients(&mut g, 1.0);
        assert_eq!(before, 10.0);
        let after = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.3]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }

    #[test]
    fn ema_with_zero_decay_copies() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut ema = EmaState::new(&ps, 0.0);
        ps.get_mut("a").unwrap().data_mut()[0] = 5.0;
        ema.update(&ps);
        assert_eq!(ema.shadow, ps);
        let mut slow = EmaState::new(&ps, 0.999);
        assert!((slow.effective_decay() - 0.1).abs() < 1e-15);
        for _ in 0..10_000 {
            slow.update(&ps);
        }
        assert_eq!(slow.effective_decay(), 0.999);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&ps, 0.1);
        opt.update(&mut ps, &[vec![0.5, -4.0]], 0.01);
        // bias-corrected first step moves by lr·sign(g) (up to eps) plus decoupled decay
        let w = ps.get("w").unwrap().data();
        let expect0 = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * 1.0);
        let expect1 = -2.0 - 0.01 * (-4.0 / (4.0 + 1e-8) + 0.1 * -2.0);
        assert!((w[0] - expect0).abs() < 1e-14 && (w[1] - expect1).abs() < 1e-14);
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 1.0));
        assert!(!s.observe(2, 1.5));
        assert!(!s.should_stop());
        assert!(!s.observe(3, 1.0));
        assert!(s.should_stop());
        assert_eq!(s.best_epoch, 1);
    }
}
