use alloc::format;

use rand::Rng;

use crate::autograd::Exec;
use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::model::params::{xavier_normal, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Convolution with bias; transposed convolutions carry `output_padding`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub transpose: Option<usize>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let w = store.add(format!("{name}.weight"), xavier_normal(&[cout, cin, k, k], gain, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, geom, transpose: None }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn transposed<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        output_padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let w = store.add(format!("{name}.weight"), xavier_normal(&[cin, cout, k, k], gain, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, geom, transpose: Some(output_padding) }
    }

    pub fn forward<T: Real, E: Exec<T>>(&self, ex: &mut E, p: &[E::V], x: &E::V) -> Result<E::V> {
        match self.transpose {
            None => ex.conv2d(x, &p[self.w.0], Some(&p[self.b.0]), self.geom),
            Some(op) => ex.conv_transpose2d(x, &p[self.w.0], Some(&p[self.b.0]), self.geom, op),
        }
    }
}
