//! ResNet encoder-decoder generator with optional spatial attention blocks.
//!
//! Block indices, used by `sab_positions`:
//! `0` stem, `1` and `2` the strided downsampling convolutions,
//! `3 .. 3 + n_res` the residual blocks, then the two upsampling layers.
//! An attention block at position `i` runs on the output of block `i`.
//!
//! Encoder taps, used as PatchNCE layer ids: `0` is the input image and
//! `j >= 1` is the output of block `j - 1` (after its attention block, if any).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Exec};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::model::layers::Conv;
use crate::model::params::ParamStore;
use crate::model::sab::SpatialAttention;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Number of image channels consumed and produced.
pub const IMAGE_CHANNELS: usize = 3;
/// Total spatial downsampling factor of the encoder.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_res_blocks: usize,
    pub base_channels: usize,
    pub sab_positions: Vec<usize>,
    pub sab_reduction: usize,
    pub sab_pool: usize,
    pub init_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 9,
            base_channels: 64,
            sab_positions: vec![1],
            sab_reduction: 8,
            sab_pool: 2,
            init_gain: 0.02,
        }
    }
}

impl GeneratorConfig {
    /// Number of blocks addressable by `sab_positions`.
    pub fn num_blocks(&self) -> usize {
        self.n_res_blocks + 5
    }

    /// Largest valid encoder tap.
    pub fn max_layer_id(&self) -> usize {
        self.n_res_blocks + 3
    }

    pub fn block_channels(&self, block: usize) -> usize {
        let ngf = self.base_channels;
        match block {
            0 => ngf,
            1 => 2 * ngf,
            b if b < 3 + self.n_res_blocks => 4 * ngf,
            b if b == 3 + self.n_res_blocks => 2 * ngf,
            _ => ngf,
        }
    }

    pub fn layer_channels(&self, layer_id: usize) -> Result<usize> {
        self.check_layer(layer_id)?;
        Ok(if layer_id == 0 { IMAGE_CHANNELS } else { self.block_channels(layer_id - 1) })
    }

    pub fn check_layer(&self, layer_id: usize) -> Result<()> {
        if layer_id > self.max_layer_id() {
            return Err(Error::LayerId { id: layer_id, valid: (0..=self.max_layer_id()).collect() });
        }
        Ok(())
    }

    /// Input, stem, both downsampling layers and the middle residual block.
    pub fn default_layer_ids(&self) -> Vec<usize> {
        vec![0, 1, 2, 3, 4 + self.n_res_blocks / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("generator base_channels must be positive".into()));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::Config("generator init_gain must be positive".into()));
        }
        for &pos in &self.sab_positions {
            if pos >= self.num_blocks() {
                return Err(Error::Config(format!("attention position {pos} outside 0..{}", self.num_blocks())));
            }
        }
        let mut sorted = self.sab_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.sab_positions.len() {
            return Err(Error::Config("duplicate attention positions".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Stem(Conv),
    Down(Conv),
    Residual(Conv, Conv),
    Up(Conv),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    blocks: Vec<(Block, Option<SpatialAttention>)>,
    head: Conv,
}

/// Generator outputs plus the requested encoder activations.
pub struct GeneratorOutput<V> {
    pub image: Option<V>,
    pub taps: Vec<V>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gain = config.init_gain;
        let ngf = config.base_channels;
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        blocks.push(Block::Stem(Conv::new(s, "stem", IMAGE_CHANNELS, ngf, ConvGeom::new(7, 1, 0), gain, rng)));
        for i in 0..2 {
            let (cin, cout) = (ngf << i, ngf << (i + 1));
            blocks.push(Block::Down(Conv::new(s, &format!("down{i}"), cin, cout, ConvGeom::new(3, 2, 1), gain, rng)));
        }
        for i in 0..config.n_res_blocks {
            let c = 4 * ngf;
            let a = Conv::new(s, &format!("res{i}.conv0"), c, c, ConvGeom::new(3, 1, 0), gain, rng);
            let b = Conv::new(s, &format!("res{i}.conv1"), c, c, ConvGeom::new(3, 1, 0), gain, rng);
            blocks.push(Block::Residual(a, b));
        }
        for i in 0..2 {
            let (cin, cout) = (ngf << (2 - i), ngf << (1 - i));
            let geom = ConvGeom::new(3, 2, 1);
            blocks.push(Block::Up(Conv::transposed(s, &format!("up{i}"), cin, cout, geom, 1, gain, rng)));
        }
        let head = Conv::new(s, "head", ngf, IMAGE_CHANNELS, ConvGeom::new(7, 1, 0), gain, rng);
        let mut with_sab = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.into_iter().enumerate() {
            let sab = if config.sab_positions.contains(&i) {
                let c = config.block_channels(i);
                Some(SpatialAttention::new(
                    &mut store,
                    &format!("sab{i}"),
                    c,
                    config.sab_reduction,
                    config.sab_pool,
                    gain,
                    rng,
                )?)
            } else {
                None
            };
            with_sab.push((b, sab));
        }
        Ok(Self { config, params: store, blocks: with_sab, head })
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = (usize, &SpatialAttention)> {
        self.blocks.iter().enumerate().filter_map(|(i, (_, s))| s.as_ref().map(|s| (i, s)))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, IMAGE_CHANNELS, h, w] if h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0 && h >= 8 && w >= 8 => Ok(()),
            _ => Err(Error::Shape {
                op: "generator",
                detail: format!("expected [N, 3, H, W] with H, W >= 8 and divisible by {DOWNSAMPLE}, got {shape:?}"),
            }),
        }
    }

    /// Run the network. `taps` lists encoder layer ids to return; when
    /// `encoder_only` is set the pass stops after the deepest requested tap.
    pub fn run<E: Exec<T>>(
        &self,
        ex: &mut E,
        p: &[E::V],
        x: &E::V,
        taps: &[usize],
        encoder_only: bool,
    ) -> Result<GeneratorOutput<E::V>> {
        self.check_input(ex.value(x).shape())?;
        if !ex.value(x).all_finite() {
            return Err(Error::NonFinite("generator input"));
        }
        for &t in taps {
            self.config.check_layer(t)?;
        }
        let mut found: Vec<Option<E::V>> = vec![None; taps.len()];
        let record = |id: usize, v: &E::V, found: &mut Vec<Option<E::V>>| {
            for (slot, &t) in found.iter_mut().zip(taps) {
                if t == id {
                    *slot = Some(v.clone());
                }
            }
        };
        record(0, x, &mut found);
        let last_tap = taps.iter().copied().max().unwrap_or(0);
        let mut h = x.clone();
        for (i, (block, sab)) in self.blocks.iter().enumerate() {
            if encoder_only && i + 1 > last_tap {
                break;
            }
            h = match block {
                Block::Stem(c) => {
                    let y = ex.reflect_pad(&h, 3)?;
                    let y = c.forward(ex, p, &y)?;
                    let y = ex.instance_norm(&y)?;
                    ex.relu(&y)
                }
                Block::Down(c) | Block::Up(c) => {
                    let y = c.forward(ex, p, &h)?;
                    let y = ex.instance_norm(&y)?;
                    ex.relu(&y)
                }
                Block::Residual(a, b) => {
                    let y = ex.reflect_pad(&h, 1)?;
                    let y = a.forward(ex, p, &y)?;
                    let y = ex.instance_norm(&y)?;
                    let y = ex.relu(&y);
                    let y = ex.reflect_pad(&y, 1)?;
                    let y = b.forward(ex, p, &y)?;
                    let y = ex.instance_norm(&y)?;
                    ex.add(&h, &y)?
                }
            };
            if let Some(sab) = sab {
                h = sab.forward(ex, p, &h)?;
            }
            record(i + 1, &h, &mut found);
        }
        let taps = found.into_iter().map(|v| v.expect("every tap is reached")).collect();
        if encoder_only {
            return Ok(GeneratorOutput { image: None, taps });
        }
        let y = ex.reflect_pad(&h, 3)?;
        let y = self.head.forward(ex, p, &y)?;
        Ok(GeneratorOutput { image: Some(ex.tanh(&y)), taps })
    }

    pub fn forward<E: Exec<T>>(&self, ex: &mut E, p: &[E::V], x: &E::V) -> Result<E::V> {
        let out = self.run(ex, p, x, &[], false)?;
        Ok(out.image.expect("full pass yields an image"))
    }

    /// Inference-only forward pass.
    pub fn translate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ex = Eager::default();
        let p = self.params.bind_frozen(&mut ex);
        let xv = ex.constant(x.clone());
        let y = self.forward(&mut ex, &p, &xv)?;
        Ok(match alloc::rc::Rc::try_unwrap(y) {
            Ok(t) => t,
            Err(rc) => (*rc).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(sab: Vec<usize>) -> GeneratorConfig {
        GeneratorConfig { n_res_blocks: 2, base_channels: 4, sab_positions: sab, ..Default::default() }
    }

    #[test]
    fn output_shape_and_range() {
        let g = Generator::<f32>::new(small(vec![1]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::rand_uniform(&[2, 3, 16, 12], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let y = g.translate(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn tap_shapes_follow_layer_channels() {
        let cfg = small(vec![0, 2]);
        let g = Generator::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut ex = Eager::default();
        let p = g.params.bind(&mut ex);
        let xv = ex.constant(x);
        let ids = [0, 1, 2, 3, 5];
        let out = g.run(&mut ex, &p, &xv, &ids, true).unwrap();
        assert!(out.image.is_none());
        let sides = [16, 16, 8, 4, 4];
        for ((t, &id), &side) in out.taps.iter().zip(&ids).zip(&sides) {
            assert_eq!(t.shape(), &[1, cfg.layer_channels(id).unwrap(), side, side]);
        }
    }

    #[test]
    fn encoder_only_taps_match_full_pass() {
        let g = Generator::<f64>::new(small(vec![1]), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mut ex = Eager::default();
        let p = g.params.bind(&mut ex);
        let xv = ex.constant(x);
        let a = g.run(&mut ex, &p, &xv, &[2, 4], true).unwrap();
        let b = g.run(&mut ex, &p, &xv, &[2, 4], false).unwrap();
        for (u, v) in a.taps.iter().zip(&b.taps) {
            assert_eq!(u, v);
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let cfg = GeneratorConfig { sab_positions: vec![99], ..small(vec![]) };
        assert!(matches!(Generator::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
        let g = Generator::<f32>::new(small(vec![]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(g.translate(&Tensor::zeros(&[1, 3, 10, 8])), Err(Error::Shape { .. })));
        assert!(matches!(g.translate(&Tensor::zeros(&[1, 1, 8, 8])), Err(Error::Shape { .. })));
        let mut nan = Tensor::zeros(&[1, 3, 8, 8]);
        nan.data_mut()[0] = f32::NAN;
        assert!(matches!(g.translate(&nan), Err(Error::NonFinite(_))));
        assert!(matches!(g.config.check_layer(6), Err(Error::LayerId { .. })));
    }

    #[test]
    fn graph_and_eager_agree() {
        let g = Generator::<f64>::new(small(vec![1, 4]), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let eager = g.translate(&x).unwrap();
        let mut gr = Graph::new();
        let p = g.params.bind(&mut gr);
        let xv = gr.constant(x);
        let y = g.forward(&mut gr, &p, &xv).unwrap();
        assert!(gr.value(&y).max_abs_diff(&eager) < 1e-12);
    }
}
