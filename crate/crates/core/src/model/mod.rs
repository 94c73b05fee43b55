//! Dual-decoder flow generator and patch discriminators.

mod discriminator;
mod generator;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::{DiscriminatorCache, DiscriminatorParams, DISCRIMINATOR_STAGES};
pub use generator::{Decoder, FusionMode, GeneratorCache, GeneratorParams, TAIL_CHANNELS};
pub use layers::Conv3d;

/// Architecture hyperparameters shared by generator and discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch edge in voxels: a power of two, at least 16.
    pub patch_size: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    /// Std of the final flow convolution's weights.
    pub flow_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            base_channels: 32,
            leaky_slope: 0.2,
            flow_init_std: 1e-3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 16 || !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch size must be a power of two >= 16, got {}",
                self.patch_size
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        if !(self.flow_init_std >= 0.0 && self.flow_init_std.is_finite()) {
            return Err(Error::Config("flow_init_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        [self.patch_size; 3]
    }
}

/// Derives an independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Visitor over the learnable tensors of a network, in a fixed order.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl<T> Parameters<T> for Conv3d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub(crate) fn collect_tensors<'a, T, P: Parameters<T> + 'a>(
    items: impl IntoIterator<Item = &'a P>,
) -> Vec<&'a [T]> {
    items.into_iter().flat_map(|p| p.tensors()).collect()
}

pub(crate) fn collect_tensors_mut<'a, T, P: Parameters<T> + 'a>(
    items: impl IntoIterator<Item = &'a mut P>,
) -> Vec<&'a mut [T]> {
    items.into_iter().flat_map(|p| p.tensors_mut()).collect()
}
