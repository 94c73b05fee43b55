use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{leaky_relu_backward_inplace, leaky_relu_inplace, Conv3d};
use super::{collect_tensors, collect_tensors_mut, derive_seed, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Number of stride-2 convolution stages.
pub const DISCRIMINATOR_STAGES: usize = 6;

const CHANNEL_MULTIPLIERS: [usize; DISCRIMINATOR_STAGES] = [1, 1, 2, 2, 4, 4];

/// Six strided 3×3×3 stages with leaky ReLU, then a 1×1×1 projection to one
/// channel. When the last stage leaves more than one cell, the cell logits are
/// averaged into a single score.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: ModelConfig,
    pub stages: [Conv3d<T>; DISCRIMINATOR_STAGES],
    pub projection: Conv3d<T>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache<T> {
    input: Tensor<T>,
    stages: Vec<Tensor<T>>,
    cells: usize,
    pub logit: T,
}

impl<T: Real> DiscriminatorCache<T> {
    /// Spatial edge after each stage.
    pub fn spatial_sequence(&self) -> Vec<usize> {
        self.stages.iter().map(|t| t.dims[0]).collect()
    }

    pub fn cells(&self) -> usize {
        self.cells
    }
}

impl<T: Real> DiscriminatorParams<T> {
    /// `stream` separates the random draws of several discriminators built
    /// from the same config.
    pub fn init(config: &ModelConfig, stream: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xd15c + stream));
        let c = config.base_channels;
        let mut cin = 2;
        let stages = CHANNEL_MULTIPLIERS.map(|m| {
            let cout = c * m;
            let conv = Conv3d::random(cin, cout, 3, 2, (2.0 / (cin * 27) as f64).sqrt(), &mut rng);
            cin = cout;
            conv
        });
        let projection = Conv3d::random(cin, 1, 1, 1, (1.0 / cin as f64).sqrt(), &mut rng);
        Ok(Self {
            config: config.clone(),
            stages,
            projection,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            stages: std::array::from_fn(|i| self.stages[i].zeros_like()),
            projection: self.projection.zeros_like(),
        }
    }

    /// Scores the 2-channel concatenation of `a` and `b`.
    pub fn forward_cached(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<DiscriminatorCache<T>> {
        if a.channels != 1 || b.channels != 1 || a.dims != b.dims {
            return Err(Error::Shape(format!(
                "discriminator inputs must be matching single-channel patches, got {}x{:?} and {}x{:?}",
                a.channels, a.dims, b.channels, b.dims
            )));
        }
        let slope = T::lit(self.config.leaky_slope);
        let input = Tensor::concat(&[a, b]);
        let mut stages: Vec<Tensor<T>> = Vec::with_capacity(DISCRIMINATOR_STAGES);
        for conv in &self.stages {
            let mut out = conv.forward(stages.last().unwrap_or(&input));
            leaky_relu_inplace(&mut out, slope);
            stages.push(out);
        }
        let proj = self.projection.forward(stages.last().unwrap());
        let cells = proj.spatial_len();
        let logit = proj.data.iter().copied().sum::<T>() / T::lit(cells as f64);
        Ok(DiscriminatorCache {
            input,
            stages,
            cells,
            logit,
        })
    }

    pub fn forward(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
        Ok(self.forward_cached(a, b)?.logit)
    }

    /// Parameter gradients of `grad_logit * logit`, plus the gradient with
    /// respect to the 2-channel input when `need_input`.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        grad_logit: T,
        need_input: bool,
    ) -> (DiscriminatorParams<T>, Option<Tensor<T>>) {
        let slope = T::lit(self.config.leaky_slope);
        let mut grads = self.zeros_like();
        let last = cache.stages.last().unwrap();
        let g_proj = Tensor::from_vec(
            1,
            last.dims,
            vec![grad_logit / T::lit(cache.cells as f64); cache.cells],
        );
        let mut g = self
            .projection
            .backward(last, &g_proj, &mut grads.projection, true)
            .unwrap();
        let mut grad_input = None;
        for l in (0..DISCRIMINATOR_STAGES).rev() {
            leaky_relu_backward_inplace(&mut g, &cache.stages[l], slope);
            let input = if l == 0 { &cache.input } else { &cache.stages[l - 1] };
            let want = l > 0 || need_input;
            let gi = self.stages[l].backward(input, &g, &mut grads.stages[l], want);
            if l > 0 {
                g = gi.unwrap();
            } else {
                grad_input = gi;
            }
        }
        (grads, grad_input)
    }
}

impl<T> Parameters<T> for DiscriminatorParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = collect_tensors(self.stages.iter());
        out.extend(self.projection.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = collect_tensors_mut(self.stages.iter_mut());
        out.extend(self.projection.tensors_mut());
        out
    }
}
