//! `DEFCKPT1` model checkpoints.
//!
//! Little-endian binary layout:
//!
//! ```text
//! "DEFCKPT1"  u32 version
//! str tile    str config-json
//! grid:  u64 height, u64 width, f64 origin x, y, f64 extent x, y
//! tensors "params", then "ema": u64 count, then per tensor
//!         str name, u64 rank, u64 dims.., f64 values..
//! stats: f64 pixel_mean[H·W], f64 pixel_std[H·W], f64 static_mean[3],
//!        f64 static_std[3], f64 epsilon
//! ```
//!
//! `str` is a u64 byte length followed by UTF-8. Every field is written from
//! its parsed value, so loading and saving again reproduces the file bitwise.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::ingest::TileId;
use crate::model::{ModelConfig, NeuralModel};
use crate::raster::GridSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEFCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained weights plus everything needed to apply them to another tile.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub tile: TileId,
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub stats: NormStats,
}

impl ModelCheckpoint {
    pub fn new(tile: TileId, grid: GridSpec, model: &NeuralModel, ema: ParamSet, stats: NormStats) -> Result<Self> {
        if !model.params().same_layout(&ema) {
            return Err(Error::Checkpoint("EMA tensors do not match the model layout".into()));
        }
        if stats.dims() != (grid.height, grid.width) || model.config().grid() != stats.dims() {
            return Err(Error::Checkpoint(
                "statistics, grid and model disagree on the grid shape".into(),
            ));
        }
        Ok(ModelCheckpoint {
            tile,
            config: model.config(),
            grid,
            params: model.params().clone(),
            ema,
            stats,
        })
    }

    /// Model carrying the EMA weights, as used for evaluation.
    pub fn eval_model(&self) -> Result<NeuralModel> {
        NeuralModel::with_params(&self.config, self.ema.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.str(&self.tile.to_string());
        let json = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        w.str(&json);
        w.u64(self.grid.height as u64);
        w.u64(self.grid.width as u64);
        for v in [
            self.grid.origin_m.0,
            self.grid.origin_m.1,
            self.grid.extent_m.0,
            self.grid.extent_m.1,
        ] {
            w.f64(v);
        }
        for set in [&self.params, &self.ema] {
            w.u64(set.len() as u64);
            for (name, t) in set.iter() {
                w.str(name);
                w.u64(t.shape().len() as u64);
                t.shape().iter().for_each(|&d| w.u64(d as u64));
                t.data().iter().for_each(|&v| w.f64(v));
            }
        }
        self.stats.pixel_mean.iter().for_each(|&v| w.f64(v));
        self.stats.pixel_std.iter().for_each(|&v| w.f64(v));
        self.stats.static_mean.iter().for_each(|&v| w.f64(v));
        self.stats.static_std.iter().for_each(|&v| w.f64(v));
        w.f64(self.stats.epsilon);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing DEFCKPT1 magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tile: TileId = r.str()?.parse()?;
        let config: ModelConfig =
            serde_json::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let (h, w) = (r.usize()?, r.usize()?);
        let origin = (r.f64()?, r.f64()?);
        let extent = (r.f64()?, r.f64()?);
        let grid = GridSpec::new(h, w, origin, extent)?;
        let params = r.tensors()?;
        let ema = r.tensors()?;
        let mean = r.map(h, w)?;
        let std = r.map(h, w)?;
        let static_mean = [r.f64()?, r.f64()?, r.f64()?];
        let static_std = [r.f64()?, r.f64()?, r.f64()?];
        let epsilon = r.f64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let stats = NormStats {
            pixel_mean: mean,
            pixel_std: std,
            static_mean,
            static_std,
            epsilon,
        };
        let model = NeuralModel::with_params(&config, params)?;
        Self::new(tile, grid, &model, ema, stats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn map(&mut self, h: usize, w: usize) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((h, w), self.values(h * w)?).expect("map shape"))
    }

    fn tensors(&mut self) -> Result<ParamSet> {
        let count = self.usize()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.usize()?;
            let shape: Vec<usize> = (0..rank).map(|_| self.usize()).collect::<Result<_>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let data = self.values(n)?;
            set.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgcn::StgcnConfig;
    use crate::transformer::TransformerConfig;

    fn stats(h: usize, w: usize) -> NormStats {
        NormStats {
            pixel_mean: Array2::from_shape_fn((h, w), |(r, c)| 0.1 * r as f64 - c as f64),
            pixel_std: Array2::from_shape_fn((h, w), |(r, c)| 1.0 + (r * c) as f64 / 7.0),
            static_mean: [0.5, -1.0, 2.0],
            static_std: [1.5, 0.25, 3.0],
            epsilon: 1e-6,
        }
    }

    fn sample(config: ModelConfig) -> ModelCheckpoint {
        let model = NeuralModel::new(&config, 4).unwrap();
        let (h, w) = config.grid();
        let tile = TileId::new(32, 34);
        let grid = GridSpec::for_tile(tile, h, w).unwrap();
        let mut ema = model.params().clone();
        ema.iter_mut()
            .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= 0.5));
        ModelCheckpoint::new(tile, grid, &model, ema, stats(h, w)).unwrap()
    }

    fn configs() -> Vec<ModelConfig> {
        vec![
            ModelConfig::Transformer(TransformerConfig {
                height: 8,
                width: 8,
                patch_size: 4,
                embed_dim: 8,
                layers: 1,
                heads: 2,
                history_length: 3,
                dropout: 0.1,
                ..TransformerConfig::default()
            }),
            ModelConfig::Stgcn(StgcnConfig {
                height: 4,
                width: 5,
                hidden: vec![4],
                history_length: 5,
                input_channels: 1,
                ..StgcnConfig::default()
            }),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        for config in configs() {
            let ck = sample(config);
            let bytes = ck.to_bytes().unwrap();
            let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = sample(configs().remove(0)).to_bytes().unwrap();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ModelCheckpoint::from_bytes(&extra).is_err());
    }
}
