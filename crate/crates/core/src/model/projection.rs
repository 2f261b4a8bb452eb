//! Per-layer projection heads mapping sampled encoder features to unit-norm
//! embeddings for the contrastive loss.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Exec;
use crate::error::{Error, Result};
use crate::model::generator::GeneratorConfig;
use crate::model::params::{xavier_normal, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub embed_dim: usize,
    /// Encoder taps to project; empty selects the generator's defaults.
    pub layer_ids: Vec<usize>,
    pub init_gain: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { embed_dim: 256, layer_ids: Vec::new(), init_gain: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<T> {
    pub embed_dim: usize,
    pub layer_ids: Vec<usize>,
    pub params: ParamStore<T>,
    heads: Vec<Head>,
}

/// Embeddings of sampled locations for one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer {
    pub layer_id: usize,
    pub locations: Vec<usize>,
    /// `[N, S, D]` unit vectors.
    pub embeddings: Tensor<f64>,
}

/// Embeddings for every projected layer of one batch.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
}

impl<T: Real> ProjectionHeads<T> {
    pub fn new<R: Rng + ?Sized>(gen: &GeneratorConfig, cfg: &ProjectionConfig, rng: &mut R) -> Result<Self> {
        if cfg.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let layer_ids = if cfg.layer_ids.is_empty() { gen.default_layer_ids() } else { cfg.layer_ids.clone() };
        let mut store = ParamStore::new();
        let mut heads = Vec::with_capacity(layer_ids.len());
        let d = cfg.embed_dim;
        for &id in &layer_ids {
            let c = gen.layer_channels(id)?;
            heads.push(Head {
                w1: store.add(format!("mlp{id}.0.weight"), xavier_normal(&[d, c], cfg.init_gain, rng)),
                b1: store.add(format!("mlp{id}.0.bias"), Tensor::zeros(&[d])),
                w2: store.add(format!("mlp{id}.2.weight"), xavier_normal(&[d, d], cfg.init_gain, rng)),
                b2: store.add(format!("mlp{id}.2.bias"), Tensor::zeros(&[d])),
            });
        }
        Ok(Self { embed_dim: d, layer_ids, params: store, heads })
    }

    /// Project the features at `locations[l]` of `taps[l]` (`[N, C, H, W]`)
    /// into `[N, S, D]` unit vectors.
    pub fn project<E: Exec<T>>(
        &self,
        ex: &mut E,
        p: &[E::V],
        taps: &[E::V],
        locations: &[Vec<usize>],
    ) -> Result<Vec<E::V>> {
        if taps.len() != self.heads.len() || locations.len() != self.heads.len() {
            return Err(Error::Shape {
                op: "project",
                detail: format!("{} heads, {} taps, {} location sets", self.heads.len(), taps.len(), locations.len()),
            });
        }
        let mut out = Vec::with_capacity(taps.len());
        for ((head, tap), locs) in self.heads.iter().zip(taps).zip(locations) {
            let f = ex.gather_locations(tap, locs)?;
            let h = ex.linear(&f, &p[head.w1.0], Some(&p[head.b1.0]))?;
            let h = ex.relu(&h);
            let h = ex.linear(&h, &p[head.w2.0], Some(&p[head.b2.0]))?;
            out.push(ex.l2_normalize_last(&h)?);
        }
        Ok(out)
    }
}

impl FeatureStack {
    pub fn from_values<T: Real>(layer_ids: &[usize], locations: &[Vec<usize>], values: &[&Tensor<T>]) -> Self {
        let layers = layer_ids
            .iter()
            .zip(locations)
            .zip(values)
            .map(|((&layer_id, locs), v)| FeatureLayer { layer_id, locations: locs.clone(), embeddings: v.cast() })
            .collect();
        Self { layers }
    }
}
