//! PatchGAN discriminator: a fully convolutional stack that scores
//! overlapping receptive fields of the input independently.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Exec};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::model::generator::IMAGE_CHANNELS;
use crate::model::layers::Conv;
use crate::model::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub n_layers: usize,
    pub leaky_slope: f64,
    pub init_gain: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64, n_layers: 3, leaky_slope: 0.2, init_gain: 0.02 }
    }
}

impl DiscriminatorConfig {
    /// Side of the score map produced for a square input of side `n`.
    pub fn score_side(&self, n: usize) -> Option<usize> {
        let down = ConvGeom::new(4, 2, 1);
        let flat = ConvGeom::new(4, 1, 1);
        let mut s = n;
        for _ in 0..self.n_layers {
            s = down.out_dim(s)?;
        }
        flat.out_dim(flat.out_dim(s)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    conv: Conv,
    norm: bool,
    act: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<Layer>,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.base_channels == 0 || config.n_layers == 0 {
            return Err(Error::Config("discriminator needs positive width and depth".into()));
        }
        let gain = config.init_gain;
        let ndf = config.base_channels;
        let down = ConvGeom::new(4, 2, 1);
        let flat = ConvGeom::new(4, 1, 1);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let conv = Conv::new(&mut store, "d0", IMAGE_CHANNELS, ndf, down, gain, rng);
        layers.push(Layer { conv, norm: false, act: true });
        let mut mult = 1;
        for i in 1..config.n_layers {
            let next = (1 << i).min(8);
            let conv = Conv::new(&mut store, &format!("d{i}"), ndf * mult, ndf * next, down, gain, rng);
            layers.push(Layer { conv, norm: true, act: true });
            mult = next;
        }
        let next = (1 << config.n_layers).min(8);
        let n = config.n_layers;
        let conv = Conv::new(&mut store, &format!("d{n}"), ndf * mult, ndf * next, flat, gain, rng);
        layers.push(Layer { conv, norm: true, act: true });
        let conv = Conv::new(&mut store, "score", ndf * next, 1, flat, gain, rng);
        layers.push(Layer { conv, norm: false, act: false });
        Ok(Self { config, params: store, layers })
    }

    /// Score map `[N, 1, H', W']`.
    pub fn forward<E: Exec<T>>(&self, ex: &mut E, p: &[E::V], x: &E::V) -> Result<E::V> {
        let shape = ex.value(x).shape().to_vec();
        let ok = matches!(*shape, [_, IMAGE_CHANNELS, h, w]
            if self.config.score_side(h).is_some_and(|s| s > 0) && self.config.score_side(w).is_some_and(|s| s > 0));
        if !ok {
            return Err(Error::Shape {
                op: "discriminator",
                detail: format!("input {shape:?} too small for {} layers", self.config.n_layers),
            });
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = l.conv.forward(ex, p, &h)?;
            if l.norm {
                h = ex.instance_norm(&h)?;
            }
            if l.act {
                h = ex.leaky_relu(&h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    pub fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ex = Eager::default();
        let p = self.params.bind_frozen(&mut ex);
        let xv = ex.constant(x.clone());
        let y = self.forward(&mut ex, &p, &xv)?;
        Ok((*y).clone())
    }
}
