//! Spatial attention block: a non-local operation over all positions of a
//! feature map with a residual connection.
//!
//! Given `X: [N, C, H, W]`:
//!
//! * `theta(X)` is a 1x1 projection to `C / r` channels, one query per position;
//! * `phi(X)` and `g(X)` are 1x1 projections followed by max pooling, giving
//!   `K = (H / p) (W / p)` keys and values;
//! * the relation map `P = psi * relu(theta(X)^T phi(X))` is normalised row-wise
//!   by a softmax;
//! * the attended values are projected back to `C` channels to form `S`, and
//!   the block returns `S + X`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Exec, Graph};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::model::params::{xavier_normal, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

const POINTWISE: ConvGeom = ConvGeom::new(1, 1, 0);

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention {
    pub channels: usize,
    pub inner: usize,
    pub pool: usize,
    theta: ParamId,
    phi: ParamId,
    value: ParamId,
    gate: ParamId,
    out: ParamId,
}

/// Intermediate tensors of one attention pass, for inspection.
#[derive(Clone, Debug)]
pub struct AttentionTensors<T> {
    pub input: Tensor<T>,
    /// Pre-softmax relation map `[N, HW, K]`.
    pub relation: Tensor<T>,
    /// Row-softmax of the relation map.
    pub attention: Tensor<T>,
    /// Attention read-out projected back to the input channels.
    pub attended: Tensor<T>,
    pub output: Tensor<T>,
}

impl SpatialAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        pool: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || pool == 0 {
            return Err(Error::Config("attention reduction and pooling must be positive".into()));
        }
        let inner = (channels / reduction).max(1);
        let mut conv = |name: &str, o: usize, i: usize| {
            store.add(format!("{prefix}.{name}"), xavier_normal(&[o, i, 1, 1], gain, rng))
        };
        let theta = conv("theta", inner, channels);
        let phi = conv("phi", inner, channels);
        let value = conv("g", inner, channels);
        let gate = conv("psi", 1, 1);
        let out = conv("out", channels, inner);
        Ok(Self { channels, inner, pool, theta, phi, value, gate, out })
    }

    fn check(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = match *shape {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Config(format!("attention input must be NCHW, got {shape:?}"))),
        };
        if c != self.channels {
            return Err(Error::Config(format!("attention expects {} channels, got {c}", self.channels)));
        }
        if h < self.pool || w < self.pool {
            return Err(Error::Config(format!(
                "attention input {h}x{w} is smaller than the pooling kernel {}",
                self.pool
            )));
        }
        Ok((n, h, w))
    }

    pub fn forward<T: Real, E: Exec<T>>(&self, ex: &mut E, p: &[E::V], x: &E::V) -> Result<E::V> {
        let (n, h, w) = self.check(ex.value(x).shape())?;
        let q = ex.conv2d(x, &p[self.theta.0], None, POINTWISE)?;
        let q = ex.reshape(&q, &[n, self.inner, h * w])?;
        let k = ex.conv2d(x, &p[self.phi.0], None, POINTWISE)?;
        let k = ex.max_pool2d(&k, self.pool, self.pool)?;
        let keys = ex.value(&k).numel() / (n * self.inner);
        let k = ex.reshape(&k, &[n, self.inner, keys])?;
        let v = ex.conv2d(x, &p[self.value.0], None, POINTWISE)?;
        let v = ex.max_pool2d(&v, self.pool, self.pool)?;
        let v = ex.reshape(&v, &[n, self.inner, keys])?;
        let z = ex.attention(&q, &k, &v, &p[self.gate.0])?;
        let z = ex.reshape(&z, &[n, self.inner, h, w])?;
        let s = ex.conv2d(&z, &p[self.out.0], None, POINTWISE)?;
        ex.add(&s, x)
    }

    /// Run the block step by step and return every intermediate tensor.
    pub fn inspect<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<AttentionTensors<T>> {
        let (n, h, w) = self.check(x.shape())?;
        let mut g = Graph::new();
        let p: Vec<_> = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let q = g.conv2d(&xv, &p[self.theta.0], None, POINTWISE)?;
        let q = g.reshape(&q, &[n, self.inner, h * w])?;
        let k = g.conv2d(&xv, &p[self.phi.0], None, POINTWISE)?;
        let k = g.max_pool2d(&k, self.pool, self.pool)?;
        let keys = g.value(&k).numel() / (n * self.inner);
        let k = g.reshape(&k, &[n, self.inner, keys])?;
        let v = g.conv2d(&xv, &p[self.value.0], None, POINTWISE)?;
        let v = g.max_pool2d(&v, self.pool, self.pool)?;
        let v = g.reshape(&v, &[n, self.inner, keys])?;
        let rel = g.bmm(&q, &k, true, false)?;
        let rel = g.relu(&rel);
        let rel4 = g.reshape(&rel, &[n, 1, h * w, keys])?;
        let gated = g.conv2d(&rel4, &p[self.gate.0], None, POINTWISE)?;
        let relation = g.reshape(&gated, &[n, h * w, keys])?;
        let attention = g.softmax_last(&relation)?;
        let z = g.bmm(&v, &attention, false, true)?;
        let z = g.reshape(&z, &[n, self.inner, h, w])?;
        let s = g.conv2d(&z, &p[self.out.0], None, POINTWISE)?;
        let out = g.add(&s, &xv)?;
        Ok(AttentionTensors {
            input: x.clone(),
            relation: g.value(&relation).clone(),
            attention: g.value(&attention).clone(),
            attended: g.value(&s).clone(),
            output: g.value(&out).clone(),
        })
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.theta, self.phi, self.value, self.gate, self.out]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(store: &mut ParamStore<f64>) -> SpatialAttention {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        SpatialAttention::new(store, "sab", 16, 8, 2, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_give_identity() {
        let mut store = ParamStore::new();
        let sab = block(&mut store);
        store.fill(0.0);
        let x = Tensor::randn(&[1, 16, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut e = Eager::default();
        let p = store.bind(&mut e);
        let xv = e.constant(x.clone());
        let y = sab.forward(&mut e, &p, &xv).unwrap();
        assert_eq!(*y, x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::new();
        let sab = block(&mut store);
        let x = Tensor::<f64>::zeros(&[1, 16, 4, 4]);
        let t = sab.inspect(&store, &x).unwrap();
        assert!(t.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_are_normalised() {
        let mut store = ParamStore::new();
        let sab = block(&mut store);
        let x = Tensor::randn(&[2, 16, 6, 4], 3.0, &mut ChaCha8Rng::seed_from_u64(2));
        let t = sab.inspect(&store, &x).unwrap();
        assert_eq!(t.relation.shape(), &[2, 24, 6]);
        for row in t.attention.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(t.output.shape(), x.shape());
    }

    #[test]
    fn rejects_inputs_smaller_than_pool() {
        let mut store = ParamStore::new();
        let sab = block(&mut store);
        let x = Tensor::<f64>::zeros(&[1, 16, 1, 4]);
        assert!(matches!(sab.inspect(&store, &x), Err(Error::Config(_))));
    }
}
