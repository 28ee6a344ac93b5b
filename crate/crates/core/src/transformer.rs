//! Patch-token Transformer with learnable query tokens and residual decoding.
//!
//! Each input frame is cut into `P×P` patches; every patch of every history
//! frame becomes one token. `out_steps` sets of query tokens (one per patch)
//! are appended, history tokens are blocked from attending to them, and the
//! encoded queries are decoded back to patches as an increment over the last
//! observed displacement map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var, MASK_BLOCKED};
use crate::error::{Error, Result};
use crate::model::{apply_dropout, glorot, layer_norm, linear, normal_init, Dropout};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub input_channels: usize,
    pub history_length: usize,
    pub out_steps: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            height: 64,
            width: 64,
            patch_size: 8,
            embed_dim: 128,
            layers: 4,
            heads: 4,
            ffn_multiplier: 4,
            input_channels: 6,
            history_length: 16,
            out_steps: 1,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let p = self.patch_size;
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            problems.push(format!(
                "patch_size {p} must divide height {} and width {}",
                self.height, self.width
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            problems.push(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.out_steps == 0 {
            problems.push("out_steps must be at least 1".into());
        }
        if self.history_length == 0 {
            problems.push("history_length must be at least 1".into());
        }
        if self.layers == 0 || self.ffn_multiplier == 0 {
            problems.push("layers and ffn_multiplier must be at least 1".into());
        }
        if self.input_channels != 1 && self.input_channels != 6 {
            problems.push(format!("input_channels must be 1 or 6, got {}", self.input_channels));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Patches per frame.
    pub fn patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn history_tokens(&self) -> usize {
        self.history_length * self.patches()
    }

    pub fn tokens(&self) -> usize {
        (self.history_length + self.out_steps) * self.patches()
    }
}

/// Cuts `[L, C, H, W]` into `[L·N_p, C·P²]`: time-major, then patch row, then
/// patch column; each vector is channel-major over its `P×P` block.
pub fn patchify(frames: &Tensor, p: usize) -> Result<Tensor> {
    let (l, c, h, w) = match frames.shape() {
        &[l, c, h, w] => (l, c, h, w),
        s => return Err(Error::shape("patchify", s, &[0, 0, p, p])),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify (patch must divide frame)",
            frames.shape(),
            &[p, p],
        ));
    }
    let (hp, wp) = (h / p, w / p);
    let x = frames.data();
    let mut out = Vec::with_capacity(x.len());
    for t in 0..l {
        for pr in 0..hp {
            for pc in 0..wp {
                for ch in 0..c {
                    for i in 0..p {
                        let row = ((t * c + ch) * h + pr * p + i) * w + pc * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[l * hp * wp, c * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, frames: usize, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0
        || !h.is_multiple_of(p)
        || !w.is_multiple_of(p)
        || patches.shape() != [frames * (h / p) * (w / p), channels * p * p]
    {
        return Err(Error::shape("unpatchify", patches.shape(), &[frames, channels, h, w]));
    }
    let (hp, wp) = (h / p, w / p);
    let src = patches.data();
    let mut out = vec![0.0; frames * channels * h * w];
    let mut k = 0;
    for t in 0..frames {
        for pr in 0..hp {
            for pc in 0..wp {
                for ch in 0..channels {
                    for i in 0..p {
                        let row = ((t * channels + ch) * h + pr * p + i) * w + pc * p;
                        out[row..row + p].copy_from_slice(&src[k..k + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(&[frames, channels, h, w], out)
}

/// Additive mask over all tokens: history rows never see query columns.
pub fn attention_mask(config: &TransformerConfig) -> Tensor {
    let n = config.tokens();
    let nh = config.history_tokens();
    Tensor::from_fn(&[n, n], |k| if k / n < nh && k % n >= nh { MASK_BLOCKED } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: ParamSet,
}

impl Transformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::INIT);
        let d = config.embed_dim;
        let p2 = config.patch_size * config.patch_size;
        let cp = config.input_channels * p2;
        let f = d * config.ffn_multiplier;
        let mut ps = ParamSet::new();
        ps.insert("embed.w", glorot(&mut rng, &[cp, d], cp, d));
        ps.insert("embed.b", Tensor::zeros(&[d]));
        ps.insert("embed.ln.g", Tensor::full(&[d], 1.0));
        ps.insert("embed.ln.b", Tensor::zeros(&[d]));
        ps.insert(
            "pos.temporal",
            normal_init(&mut rng, &[config.history_length + config.out_steps, d], 0.02),
        );
        ps.insert("pos.spatial", normal_init(&mut rng, &[config.patches(), d], 0.02));
        ps.insert("query", normal_init(&mut rng, &[config.out_steps, d], 0.02));
        for k in 0..config.layers {
            let pre = format!("block{k}");
            ps.insert(format!("{pre}.ln1.g"), Tensor::full(&[d], 1.0));
            ps.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
            for m in ["q", "k", "v", "o"] {
                ps.insert(format!("{pre}.attn.w{m}"), glorot(&mut rng, &[d, d], d, d));
                ps.insert(format!("{pre}.attn.b{m}"), Tensor::zeros(&[d]));
            }
            ps.insert(format!("{pre}.ln2.g"), Tensor::full(&[d], 1.0));
            ps.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
            ps.insert(format!("{pre}.ffn.w1"), glorot(&mut rng, &[d, f], d, f));
            ps.insert(format!("{pre}.ffn.b1"), Tensor::zeros(&[f]));
            ps.insert(format!("{pre}.ffn.w2"), glorot(&mut rng, &[f, d], f, d));
            ps.insert(format!("{pre}.ffn.b2"), Tensor::zeros(&[d]));
        }
        ps.insert("final.ln.g", Tensor::full(&[d], 1.0));
        ps.insert("final.ln.b", Tensor::zeros(&[d]));
        ps.insert("decoder.w", normal_init(&mut rng, &[d, p2], 0.02));
        ps.insert("decoder.b", Tensor::zeros(&[p2]));
        Ok(Transformer { config, params: ps })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let c = &self.config;
        match *tape.shape(x) {
            [b, l, ch, h, w] if l == c.history_length && ch == c.input_channels && h == c.height && w == c.width => {
                Ok(b)
            }
            ref s => Err(Error::shape(
                "transformer input",
                s,
                &[0, c.history_length, c.input_channels, c.height, c.width],
            )),
        }
    }

    /// Initial token sequence `[B, (L + L_out)·N_p, D]` for windows `[B, L, C, H, W]`.
    pub fn tokens(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let batch = self.check_input(tape, x)?;
        let c = &self.config;
        let (p, d, np) = (c.patch_size, c.embed_dim, c.patches());
        let (hp, wp) = (c.height / p, c.width / p);
        let nh = c.history_tokens();
        let split = tape.reshape(x, &[batch, c.history_length, c.input_channels, hp, p, wp, p])?;
        let perm = tape.permute(split, &[0, 1, 3, 5, 2, 4, 6])?;
        let patches = tape.reshape(perm, &[batch, nh, c.input_channels * p * p])?;
        let e = linear(tape, patches, b.var("embed.w")?, Some(b.var("embed.b")?))?;
        let e = layer_norm(tape, e, b.var("embed.ln.g")?, b.var("embed.ln.b")?)?;

        let steps = c.history_length + c.out_steps;
        let temporal = tape.reshape(b.var("pos.temporal")?, &[steps, 1, d])?;
        let temporal = tape.expand(temporal, &[steps, np, d])?;
        let spatial = tape.expand(b.var("pos.spatial")?, &[steps, np, d])?;
        let pos = tape.add(temporal, spatial)?;
        let pos = tape.reshape(pos, &[steps * np, d])?;
        let pos_h = tape.slice(pos, 0, 0, nh)?;
        let pos_q = tape.slice(pos, 0, nh, steps * np)?;

        let pos_h = tape.expand(pos_h, &[batch, nh, d])?;
        let hist = tape.add(e, pos_h)?;
        let nq = c.out_steps * np;
        let q = tape.reshape(b.var("query")?, &[c.out_steps, 1, d])?;
        let q = tape.expand(q, &[c.out_steps, np, d])?;
        let q = tape.reshape(q, &[nq, d])?;
        let q = tape.add(q, pos_q)?;
        let q = tape.expand(q, &[batch, nq, d])?;
        tape.concat(&[hist, q], 1)
    }

    /// Multi-head attention of `xq` rows over `xkv` rows.
    fn attention(&self, tape: &mut Tape, b: &Bound, k: usize, xq: Var, xkv: Var, mask: Option<&Tensor>) -> Result<Var> {
        let c = &self.config;
        let (batch, nq, nk) = (tape.shape(xq)[0], tape.shape(xq)[1], tape.shape(xkv)[1]);
        let (d, h) = (c.embed_dim, c.heads);
        let dh = d / h;
        let pre = format!("block{k}.attn");
        let heads = |tape: &mut Tape, x: Var, n: usize, m: &str| -> Result<Var> {
            let y = linear(
                tape,
                x,
                b.var(&format!("{pre}.w{m}"))?,
                Some(b.var(&format!("{pre}.b{m}"))?),
            )?;
            let y = tape.reshape(y, &[batch, n, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[batch * h, n, dh])
        };
        let q = heads(tape, xq, nq, "q")?;
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
        let kk = heads(tape, xkv, nk, "k")?;
        let v = heads(tape, xkv, nk, "v")?;
        let kt = tape.transpose(kk, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let attn = tape.softmax_lastaxis(scores, mask)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[batch, h, nq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, nq, d])?;
        linear(
            tape,
            ctx,
            b.var(&format!("{pre}.wo"))?,
            Some(b.var(&format!("{pre}.bo"))?),
        )
    }

    fn feed_forward(&self, tape: &mut Tape, b: &Bound, k: usize, x: Var) -> Result<Var> {
        let pre = format!("block{k}.ffn");
        let hdn = linear(
            tape,
            x,
            b.var(&format!("{pre}.w1"))?,
            Some(b.var(&format!("{pre}.b1"))?),
        )?;
        let hdn = tape.gelu(hdn);
        linear(
            tape,
            hdn,
            b.var(&format!("{pre}.w2"))?,
            Some(b.var(&format!("{pre}.b2"))?),
        )
    }

    /// One pre-norm block. With `query_only`, only the query rows are
    /// computed and returned (keys and values still span every token).
    fn block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        k: usize,
        z: Var,
        mask: &Tensor,
        query_only: bool,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let pre = format!("block{k}");
        let n = tape.shape(z)[1];
        let nh = self.config.history_tokens();
        let h = layer_norm(
            tape,
            z,
            b.var(&format!("{pre}.ln1.g"))?,
            b.var(&format!("{pre}.ln1.b"))?,
        )?;
        let (hq, zq, m) = if query_only {
            (tape.slice(h, 1, nh, n)?, tape.slice(z, 1, nh, n)?, None)
        } else {
            (h, z, Some(mask))
        };
        let a = self.attention(tape, b, k, hq, h, m)?;
        let a = apply_dropout(dropout, tape, a)?;
        let z = tape.add(zq, a)?;
        let h2 = layer_norm(
            tape,
            z,
            b.var(&format!("{pre}.ln2.g"))?,
            b.var(&format!("{pre}.ln2.b"))?,
        )?;
        let f = self.feed_forward(tape, b, k, h2)?;
        let f = apply_dropout(dropout, tape, f)?;
        tape.add(z, f)
    }

    /// Runs every block over every token.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, z0: Var, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let mask = attention_mask(&self.config);
        let mut z = z0;
        for k in 0..self.config.layers {
            z = self.block(tape, b, k, z, &mask, false, &mut dropout)?;
        }
        Ok(z)
    }

    /// Query-token outputs of the encoder. Skips the history rows of the last
    /// block, whose outputs nothing downstream reads.
    pub fn encode_queries(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z0: Var,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let mask = attention_mask(&self.config);
        let mut z = z0;
        let last = self.config.layers - 1;
        for k in 0..last {
            z = self.block(tape, b, k, z, &mask, false, &mut dropout)?;
        }
        self.block(tape, b, last, z, &mask, true, &mut dropout)
    }

    /// Decoded increments `[B, L_out, H, W]` from encoded query tokens.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, zq: Var) -> Result<Var> {
        let c = &self.config;
        let batch = tape.shape(zq)[0];
        let p = c.patch_size;
        let (hp, wp) = (c.height / p, c.width / p);
        let y = layer_norm(tape, zq, b.var("final.ln.g")?, b.var("final.ln.b")?)?;
        let inc = linear(tape, y, b.var("decoder.w")?, Some(b.var("decoder.b")?))?;
        let inc = tape.reshape(inc, &[batch, c.out_steps, hp, wp, p, p])?;
        let inc = tape.permute(inc, &[0, 1, 2, 4, 3, 5])?;
        tape.reshape(inc, &[batch, c.out_steps, c.height, c.width])
    }

    /// Forecasts for every query step, `[B, L_out, H, W]`: last observed map plus increment.
    pub fn forward_steps(&self, tape: &mut Tape, b: &Bound, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
        let batch = self.check_input(tape, x)?;
        let c = &self.config;
        let z0 = self.tokens(tape, b, x)?;
        let zq = self.encode_queries(tape, b, z0, dropout)?;
        let inc = self.decode(tape, b, zq)?;
        let last = tape.slice(x, 1, c.history_length - 1, c.history_length)?;
        let last = tape.slice(last, 2, 0, 1)?;
        let last = tape.reshape(last, &[batch, 1, c.height, c.width])?;
        let last = tape.expand(last, &[batch, c.out_steps, c.height, c.width])?;
        tape.add(last, inc)
    }

    /// Next-epoch forecast `[B, H, W]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
        let c = &self.config;
        let batch = tape.shape(x).first().copied().unwrap_or(0);
        let steps = self.forward_steps(tape, b, x, dropout)?;
        let first = tape.slice(steps, 1, 0, 1)?;
        tape.reshape(first, &[batch, c.height, c.width])
    }
}
