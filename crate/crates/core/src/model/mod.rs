//! Network definitions: generator, attention block, discriminator and
//! projection heads. Parameters live in a [`ParamStore`] owned by each network
//! and are bound to an executor before every pass.

pub mod discriminator;
pub mod generator;
mod layers;
pub mod params;
pub mod projection;
pub mod sab;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, GeneratorOutput};
pub use params::{xavier_normal, ParamId, ParamStore};
pub use projection::{FeatureLayer, FeatureStack, ProjectionConfig, ProjectionHeads};
pub use sab::{AttentionTensors, SpatialAttention};
