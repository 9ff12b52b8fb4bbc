//! Neural components for address-image generation: a small reverse-mode
//! tensor library, VAE feature clustering, and gated pixel models.

pub mod tensor;
pub mod pixelgen;
pub mod vaecluster;
