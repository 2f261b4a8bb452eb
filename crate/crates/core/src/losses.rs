//! Terms of the hybrid objective: adversarial, patch-wise contrastive,
//! self-regularisation and their weighted total.

use alloc::format;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePatch, Pixels};
use crate::kernels;
use crate::model::FeatureStack;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Tolerance on the unit-norm precondition of contrastive inputs.
pub const UNIT_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    LeastSquares,
    /// Binary cross-entropy on logits.
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub lambda_sreg: f64,
    /// Weight of the generator's adversarial term.
    pub lambda_gan: f64,
    /// Temperature for the source-domain contrastive term.
    pub nce_temperature_x: f64,
    /// Temperature for the target-domain identity contrastive term.
    pub nce_temperature_y: f64,
    pub gan_mode: GanMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_y: 1.0,
            lambda_sreg: 10.0,
            lambda_gan: 1.0,
            nce_temperature_x: 0.07,
            nce_temperature_y: 0.08,
            gan_mode: GanMode::LeastSquares,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_x", self.lambda_x),
            ("lambda_y", self.lambda_y),
            ("lambda_sreg", self.lambda_sreg),
            ("lambda_gan", self.lambda_gan),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        for (name, t) in [("nce_temperature_x", self.nce_temperature_x), ("nce_temperature_y", self.nce_temperature_y)]
        {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub gan_g: f64,
    pub gan_d: f64,
    pub patchnce_x: f64,
    pub patchnce_y: f64,
    pub sreg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub patchnce_x: f64,
    pub patchnce_y: f64,
    pub sreg: f64,
    pub total: f64,
}

/// `(gan_G, gan_D)` from discriminator score maps of real and generated batches.
pub fn adversarial_losses<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, mode: GanMode) -> Result<(f64, f64)> {
    if real.numel() == 0 || fake.numel() == 0 {
        return Err(Error::Empty("discriminator score map"));
    }
    if !real.all_finite() || !fake.all_finite() {
        return Err(Error::NonFinite("discriminator scores"));
    }
    Ok(match mode {
        GanMode::LeastSquares => {
            let g = kernels::mse_to_const(fake, 1.0)?;
            let d = 0.5 * kernels::mse_to_const(real, 1.0)? + 0.5 * kernels::mse_to_const(fake, 0.0)?;
            (g, d)
        }
        GanMode::Logistic => {
            let g = kernels::bce_logits_to_const(fake, 1.0)?;
            let d = 0.5 * kernels::bce_logits_to_const(real, 1.0)? + 0.5 * kernels::bce_logits_to_const(fake, 0.0)?;
            (g, d)
        }
    })
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Invalid(format!("{what} has norm {n}, expected a unit vector")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of picking `v_plus` among `v_plus` and `v_minus` given the
/// anchor `v`, with similarities scaled by `1 / temperature`.
pub fn nce_loss(v: &[f64], v_plus: &[f64], v_minus: &[&[f64]], temperature: f64) -> Result<f64> {
    if v_minus.is_empty() {
        return Err(Error::Invalid("contrastive loss needs at least one negative".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    check_unit(v, "anchor")?;
    check_unit(v_plus, "positive")?;
    for (i, m) in v_minus.iter().enumerate() {
        if m.len() != v.len() {
            return Err(Error::Invalid(format!("negative {i} has dimension {}, anchor {}", m.len(), v.len())));
        }
        check_unit(m, "negative")?;
    }
    if v_plus.len() != v.len() {
        return Err(Error::Invalid("positive and anchor dimensions differ".into()));
    }
    let pos = dot(v, v_plus) / temperature;
    let logits: Vec<f64> = core::iter::once(pos).chain(v_minus.iter().map(|m| dot(v, m) / temperature)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (logits.iter().map(|&l| (l - max).exp()).sum::<f64>()).ln();
    Ok(lse - pos)
}

/// Check that two stacks share layers and location sets.
pub fn check_stacks(query: &FeatureStack, key: &FeatureStack) -> Result<()> {
    if query.layers.len() != key.layers.len() {
        return Err(Error::Invalid(format!(
            "query stack has {} layers, key stack {}",
            query.layers.len(),
            key.layers.len()
        )));
    }
    if query.layers.is_empty() {
        return Err(Error::Empty("feature stack"));
    }
    for (q, k) in query.layers.iter().zip(&key.layers) {
        if q.layer_id != k.layer_id || q.locations != k.locations {
            return Err(Error::Invalid(format!(
                "layer {} of the query stack does not match layer {} of the key stack",
                q.layer_id, k.layer_id
            )));
        }
        if q.embeddings.shape() != k.embeddings.shape() {
            return Err(Error::Invalid(format!("layer {} embedding shapes differ", q.layer_id)));
        }
        let (_, s, _) = q.embeddings.dims3()?;
        if s != q.locations.len() {
            return Err(Error::Invalid(format!(
                "layer {} has {s} embeddings for {} locations",
                q.layer_id,
                q.locations.len()
            )));
        }
        if s < 2 {
            return Err(Error::Invalid(format!(
                "layer {} has {s} location; at least 2 are needed for negatives",
                q.layer_id
            )));
        }
        for row in q
            .embeddings
            .data()
            .chunks(q.embeddings.shape()[2])
            .chain(k.embeddings.data().chunks(k.embeddings.shape()[2]))
        {
            check_unit(row, "embedding")?;
        }
    }
    Ok(())
}

/// Patch-wise contrastive loss. Each query location is classified against
/// every key location of the same image; the matching location is the
/// positive. Per-layer means over locations are averaged over layers.
pub fn patch_nce_loss(query: &FeatureStack, key: &FeatureStack, temperature: f64) -> Result<f64> {
    check_stacks(query, key)?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let mut total = 0.0;
    for (q, k) in query.layers.iter().zip(&key.layers) {
        total += kernels::patch_nce(&q.embeddings, &k.embeddings, temperature)?.0;
    }
    Ok(total / query.layers.len() as f64)
}

fn values(p: &ImagePatch) -> Vec<f64> {
    match p.pixels() {
        Pixels::Uint8(d) => d.iter().map(|&v| v as f64).collect(),
        Pixels::Normalized(d) => d.iter().map(|&v| v as f64).collect(),
    }
}

/// Mean absolute pixel difference.
pub fn self_regularization_loss(x: &ImagePatch, gx: &ImagePatch) -> Result<f64> {
    if (x.width, x.height) != (gx.width, gx.height) {
        return Err(Error::Shape {
            op: "self_regularization",
            detail: format!("{}x{} vs {}x{}", x.width, x.height, gx.width, gx.height),
        });
    }
    if x.value_space() != gx.value_space() {
        return Err(Error::Invalid("self-regularization inputs are in different value spaces".into()));
    }
    let (a, b) = (values(x), values(gx));
    if a.is_empty() {
        return Err(Error::Empty("image patch"));
    }
    Ok(a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum::<f64>() / a.len() as f64)
}

/// Weighted generator objective; `gan_d` is carried through for reporting.
pub fn total_loss(parts: LossParts, weights: &LossWeights) -> Result<LossReport> {
    let named = [
        ("gan_G", parts.gan_g),
        ("gan_D", parts.gan_d),
        ("patchnce_X", parts.patchnce_x),
        ("patchnce_Y", parts.patchnce_y),
        ("sreg", parts.sreg),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let total = weights.lambda_gan * parts.gan_g
        + weights.lambda_sreg * parts.sreg
        + weights.lambda_x * parts.patchnce_x
        + weights.lambda_y * parts.patchnce_y;
    if !total.is_finite() {
        return Err(Error::NonFinite("total"));
    }
    Ok(LossReport {
        gan_g: parts.gan_g,
        gan_d: parts.gan_d,
        patchnce_x: parts.patchnce_x,
        patchnce_y: parts.patchnce_y,
        sreg: parts.sreg,
        total,
    })
}
