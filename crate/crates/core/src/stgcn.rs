//! Spatio-temporal graph convolution on the pixel grid.
//!
//! Pixels are graph nodes joined to their eight neighbours. Activations are
//! kept node-major and channel-last, `[nodes·batch, time, channels]`, so the
//! temporal convolutions and the graph propagation both work on contiguous
//! rows.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, SparseMatrix, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{apply_dropout, glorot, layer_norm, linear, Dropout};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StgcnConfig {
    pub height: usize,
    pub width: usize,
    pub input_channels: usize,
    /// Output width of each block; the block count is the length.
    pub hidden: Vec<usize>,
    pub kernel_size: usize,
    pub history_length: usize,
    pub dropout: f64,
}

impl Default for StgcnConfig {
    fn default() -> Self {
        StgcnConfig {
            height: 64,
            width: 64,
            input_channels: 6,
            hidden: vec![32, 64],
            kernel_size: 3,
            history_length: 16,
            dropout: 0.0,
        }
    }
}

impl StgcnConfig {
    /// Time steps left after every block's two valid convolutions.
    pub fn output_time(&self) -> Option<usize> {
        let shrink = 2 * self.hidden.len() * self.kernel_size.checked_sub(1)?;
        self.history_length.checked_sub(shrink).filter(|&t| t >= 1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.height < 2 || self.width < 2 {
            problems.push(format!("grid must be at least 2x2, got {}x{}", self.height, self.width));
        }
        if self.input_channels != 1 && self.input_channels != 6 {
            problems.push(format!("input_channels must be 1 or 6, got {}", self.input_channels));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            problems.push(format!(
                "hidden widths must be non-empty and positive, got {:?}",
                self.hidden
            ));
        }
        if self.kernel_size == 0 {
            problems.push("kernel_size must be at least 1".into());
        } else if self.output_time().is_none() {
            problems.push(format!(
                "history_length {} too short for {} blocks of two kernel-{} convolutions",
                self.history_length,
                self.hidden.len(),
                self.kernel_size
            ));
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
}

/// Queen-adjacency grid graph with self loops.
#[derive(Clone, Debug)]
pub struct GridGraph {
    pub height: usize,
    pub width: usize,
    /// Degree of each node counting its self loop.
    pub degrees: Vec<usize>,
    /// `D^{-1/2} (A + I) D^{-1/2}`, row-major node order.
    pub normalized: SparseMatrix,
}

impl GridGraph {
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }
}

pub fn build_normalized_adjacency(height: usize, width: usize) -> Result<GridGraph> {
    if height < 2 || width < 2 {
        return Err(Error::Invalid(format!(
            "grid graph needs at least 2x2 nodes, got {height}x{width}"
        )));
    }
    let n = height * width;
    let neighbours = |i: usize| {
        let (r, c) = ((i / width) as isize, (i % width) as isize);
        let mut out = Vec::with_capacity(9);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                    out.push(rr as usize * width + cc as usize);
                }
            }
        }
        out
    };
    let degrees: Vec<usize> = (0..n).map(|i| neighbours(i).len()).collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::with_capacity(9 * n);
    let mut values = Vec::with_capacity(9 * n);
    for i in 0..n {
        for j in neighbours(i) {
            col_idx.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(GridGraph {
        height,
        width,
        degrees,
        normalized: SparseMatrix {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
            values,
        },
    })
}

/// `σ(W_in ∗ x) ⊙ (W_out ∗ x)` along time, valid padding, for `x = [rows, time, c]`.
pub fn temporal_gated_conv(tape: &mut Tape, x: Var, w_in: Var, b_in: Var, w_out: Var, b_out: Var) -> Result<Var> {
    let gate = tape.conv1d_time(x, w_in, Some(b_in))?;
    let gate = tape.sigmoid(gate);
    let lin = tape.conv1d_time(x, w_out, Some(b_out))?;
    tape.mul(gate, lin)
}

/// `W_g x Ã` for `x = [nodes·batch, time, c]` with nodes outermost.
pub fn graph_conv(tape: &mut Tape, x: Var, w_g: Var, adj: &Rc<SparseMatrix>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mixed = linear(tape, x, w_g, None)?;
    let per_node = tape.value(mixed).len() / adj.rows;
    let flat = tape.reshape(mixed, &[adj.rows, per_node])?;
    let prop = tape.graph_propagate(flat, adj)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank 3") = tape.shape(w_g)[1];
    tape.reshape(prop, &out_shape)
}

#[derive(Clone, Debug)]
pub struct Stgcn {
    pub config: StgcnConfig,
    pub params: ParamSet,
    graph: GridGraph,
}

impl Stgcn {
    pub fn new(config: StgcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let graph = build_normalized_adjacency(config.height, config.width)?;
        let mut rng = rng_for(seed, stream::INIT);
        let k = config.kernel_size;
        let mut ps = ParamSet::new();
        let mut c_in = config.input_channels;
        for (i, &c) in config.hidden.iter().enumerate() {
            for (conv, width_in) in [("t1", c_in), ("t2", c)] {
                for branch in ["in", "out"] {
                    ps.insert(
                        format!("block{i}.{conv}.w_{branch}"),
                        glorot(&mut rng, &[k, width_in, c], k * width_in, c),
                    );
                    ps.insert(format!("block{i}.{conv}.b_{branch}"), Tensor::zeros(&[c]));
                }
            }
            ps.insert(format!("block{i}.graph.w"), glorot(&mut rng, &[c, c], c, c));
            ps.insert(format!("block{i}.ln.g"), Tensor::full(&[c], 1.0));
            ps.insert(format!("block{i}.ln.b"), Tensor::zeros(&[c]));
            c_in = c;
        }
        let flat = c_in * config.output_time().expect("validated");
        ps.insert("head.w", glorot(&mut rng, &[flat, 1], flat, 1));
        ps.insert("head.b", Tensor::zeros(&[1]));
        Ok(Stgcn {
            config,
            params: ps,
            graph,
        })
    }

    pub fn graph(&self) -> &GridGraph {
        &self.graph
    }

    fn glu(&self, tape: &mut Tape, b: &Bound, block: usize, conv: &str, x: Var) -> Result<Var> {
        let p = |n: &str| b.var(&format!("block{block}.{conv}.{n}"));
        temporal_gated_conv(tape, x, p("w_in")?, p("b_in")?, p("w_out")?, p("b_out")?)
    }

    /// Next-epoch maps `[B, H, W]` for windows `[B, L, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let c = &self.config;
        let batch = match *tape.shape(x) {
            [bt, l, ch, h, w] if l == c.history_length && ch == c.input_channels && h == c.height && w == c.width => bt,
            ref s => {
                return Err(Error::shape(
                    "stgcn input",
                    s,
                    &[0, c.history_length, c.input_channels, c.height, c.width],
                ))
            }
        };
        let n = self.graph.nodes();
        let adj = Rc::new(self.graph.normalized.clone());
        let nodes = tape.permute(x, &[3, 4, 0, 1, 2])?;
        let mut h = tape.reshape(nodes, &[n * batch, c.history_length, c.input_channels])?;
        for i in 0..c.hidden.len() {
            let t1 = self.glu(tape, b, i, "t1", h)?;
            let g = graph_conv(tape, t1, b.var(&format!("block{i}.graph.w"))?, &adj)?;
            let g = apply_dropout(&mut dropout, tape, g)?;
            let res = tape.add(t1, g)?;
            let normed = layer_norm(
                tape,
                res,
                b.var(&format!("block{i}.ln.g"))?,
                b.var(&format!("block{i}.ln.b"))?,
            )?;
            h = self.glu(tape, b, i, "t2", normed)?;
        }
        let feat = tape.shape(h)[1] * tape.shape(h)[2];
        let flat = tape.reshape(h, &[n * batch, feat])?;
        let y = linear(tape, flat, b.var("head.w")?, Some(b.var("head.b")?))?;
        let y = tape.reshape(y, &[c.height, c.width, batch])?;
        tape.permute(y, &[2, 0, 1])
    }
}
