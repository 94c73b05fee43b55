use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    leaky_relu_backward_inplace, leaky_relu_inplace, upsample2, upsample2_backward, Conv3d,
};
use super::{collect_tensors, collect_tensors_mut, derive_seed, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel count of the last fusion block and the first tail convolution.
pub const TAIL_CHANNELS: usize = 8;

const ENCODER_STAGES: usize = 4;
const FUSION_BLOCKS: usize = 3;

/// How a decoder merges upsampled features with the encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// `concat(u, u + skip)`
    Add,
    /// `concat(u, u - skip)`
    Subtract,
}

impl FusionMode {
    fn sign<T: Real>(self) -> T {
        match self {
            FusionMode::Add => T::one(),
            FusionMode::Subtract => -T::one(),
        }
    }
}

/// One flow decoder: an entry convolution at the bottleneck, three
/// upsample-and-fuse blocks, and two tail convolutions producing 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub mode: FusionMode,
    pub entry: Conv3d<T>,
    pub blocks: [Conv3d<T>; FUSION_BLOCKS],
    pub tail: [Conv3d<T>; 2],
}

impl<T: Real> Decoder<T> {
    fn init(config: &ModelConfig, mode: FusionMode, rng: &mut ChaCha8Rng) -> Self {
        let c = config.base_channels;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let entry = Conv3d::random(c, c, 3, 1, he(c * 27), rng);
        let outs = [c, c, TAIL_CHANNELS];
        let blocks = outs.map(|out| Conv3d::random(2 * c, out, 3, 1, he(2 * c * 27), rng));
        let tail0 = Conv3d::random(TAIL_CHANNELS, TAIL_CHANNELS, 3, 1, he(TAIL_CHANNELS * 27), rng);
        let flow = Conv3d::random(TAIL_CHANNELS, 3, 3, 1, config.flow_init_std, rng);
        Self {
            mode,
            entry,
            blocks,
            tail: [tail0, flow],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            entry: self.entry.zeros_like(),
            blocks: [
                self.blocks[0].zeros_like(),
                self.blocks[1].zeros_like(),
                self.blocks[2].zeros_like(),
            ],
            tail: [self.tail[0].zeros_like(), self.tail[1].zeros_like()],
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv3d<T>> {
        std::iter::once(&self.entry)
            .chain(self.blocks.iter())
            .chain(self.tail.iter())
    }

    fn forward(&self, enc: &[Tensor<T>; ENCODER_STAGES], slope: T) -> DecoderCache<T> {
        let sign = self.mode.sign::<T>();
        let mut entry = self.entry.forward(&enc[ENCODER_STAGES - 1]);
        leaky_relu_inplace(&mut entry, slope);
        let mut h = entry.clone();
        let mut cats = Vec::with_capacity(FUSION_BLOCKS);
        let mut outs = Vec::with_capacity(FUSION_BLOCKS);
        for (b, block) in self.blocks.iter().enumerate() {
            let skip = &enc[ENCODER_STAGES - 2 - b];
            let up = upsample2(&h);
            assert_eq!(up.dims, skip.dims, "fusion block spatial size");
            let mut fused = up.clone();
            for (f, &s) in fused.data.iter_mut().zip(&skip.data) {
                *f += sign * s;
            }
            let cat = Tensor::concat(&[&up, &fused]);
            let mut out = block.forward(&cat);
            leaky_relu_inplace(&mut out, slope);
            h = out.clone();
            cats.push(cat);
            outs.push(out);
        }
        let mut tail = self.tail[0].forward(&h);
        leaky_relu_inplace(&mut tail, slope);
        let half = self.tail[1].forward(&tail);
        let flow = upsample2(&half);
        DecoderCache {
            entry,
            cats,
            outs,
            tail,
            flow,
        }
    }

    /// Returns gradients for the four encoder outputs.
    fn backward(
        &self,
        enc: &[Tensor<T>; ENCODER_STAGES],
        cache: &DecoderCache<T>,
        grad_flow: &Tensor<T>,
        grads: &mut Decoder<T>,
        grad_enc: &mut [Tensor<T>; ENCODER_STAGES],
        slope: T,
    ) {
        let sign = self.mode.sign::<T>();
        let g_half = upsample2_backward(grad_flow);
        let mut g = self.tail[1]
            .backward(&cache.tail, &g_half, &mut grads.tail[1], true)
            .unwrap();
        leaky_relu_backward_inplace(&mut g, &cache.tail, slope);
        let last = &cache.outs[FUSION_BLOCKS - 1];
        g = self.tail[0]
            .backward(last, &g, &mut grads.tail[0], true)
            .unwrap();
        for b in (0..FUSION_BLOCKS).rev() {
            leaky_relu_backward_inplace(&mut g, &cache.outs[b], slope);
            let g_cat = self.blocks[b]
                .backward(&cache.cats[b], &g, &mut grads.blocks[b], true)
                .unwrap();
            let half = g_cat.channels / 2;
            let parts = g_cat.split(&[half, half]);
            let (mut g_up, g_fused) = (parts[0].clone(), &parts[1]);
            g_up.add_assign(g_fused);
            let skip_grad = &mut grad_enc[ENCODER_STAGES - 2 - b];
            for (d, &v) in skip_grad.data.iter_mut().zip(&g_fused.data) {
                *d += sign * v;
            }
            g = upsample2_backward(&g_up);
        }
        leaky_relu_backward_inplace(&mut g, &cache.entry, slope);
        let g_enc = self
            .entry
            .backward(&enc[ENCODER_STAGES - 1], &g, &mut grads.entry, true)
            .unwrap();
        grad_enc[ENCODER_STAGES - 1].add_assign(&g_enc);
    }
}

/// Intermediate activations of one decoder.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    entry: Tensor<T>,
    cats: Vec<Tensor<T>>,
    outs: Vec<Tensor<T>>,
    tail: Tensor<T>,
    flow: Tensor<T>,
}

/// Intermediate activations of one generator evaluation.
#[derive(Debug, Clone)]
pub struct GeneratorCache<T> {
    input: Tensor<T>,
    encoder: [Tensor<T>; ENCODER_STAGES],
    forward: DecoderCache<T>,
    backward: DecoderCache<T>,
}

impl<T: Real> GeneratorCache<T> {
    pub fn flow_forward(&self) -> &Tensor<T> {
        &self.forward.flow
    }

    pub fn flow_backward(&self) -> &Tensor<T> {
        &self.backward.flow
    }

    /// Spatial dims of each encoder stage, shallowest first.
    pub fn encoder_dims(&self) -> [[usize; 3]; ENCODER_STAGES] {
        [
            self.encoder[0].dims,
            self.encoder[1].dims,
            self.encoder[2].dims,
            self.encoder[3].dims,
        ]
    }

    /// Spatial dims of the three fusion-block outputs of the forward decoder.
    pub fn fusion_dims(&self) -> Vec<[usize; 3]> {
        self.forward.outs.iter().map(|t| t.dims).collect()
    }

    pub fn fusion_channels(&self) -> Vec<usize> {
        self.forward.outs.iter().map(|t| t.channels).collect()
    }
}

/// Shared strided encoder plus forward (additive) and backward
/// (subtractive) flow decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: ModelConfig,
    pub encoder: [Conv3d<T>; ENCODER_STAGES],
    pub forward: Decoder<T>,
    pub backward: Decoder<T>,
}

impl<T: Real> GeneratorParams<T> {
    /// Deterministic under `config.seed`. The flow convolutions start with
    /// tiny weights so initial flows are close to zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x6e6e));
        let c = config.base_channels;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let encoder = [
            Conv3d::random(2, c, 3, 2, he(2 * 27), &mut rng),
            Conv3d::random(c, c, 3, 2, he(c * 27), &mut rng),
            Conv3d::random(c, c, 3, 2, he(c * 27), &mut rng),
            Conv3d::random(c, c, 3, 2, he(c * 27), &mut rng),
        ];
        let forward = Decoder::init(config, FusionMode::Add, &mut rng);
        let backward = Decoder::init(config, FusionMode::Subtract, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            forward,
            backward,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: [
                self.encoder[0].zeros_like(),
                self.encoder[1].zeros_like(),
                self.encoder[2].zeros_like(),
                self.encoder[3].zeros_like(),
            ],
            forward: self.forward.zeros_like(),
            backward: self.backward.zeros_like(),
        }
    }

    fn slope(&self) -> T {
        T::lit(self.config.leaky_slope)
    }

    /// Runs both decoders on a `(source, target)` patch pair. Returns the
    /// cache holding the forward (source→target) and backward flows.
    pub fn forward_cached(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<GeneratorCache<T>> {
        let p = self.config.patch_size;
        for (name, t) in [("source", source), ("target", target)] {
            if t.channels != 1 || t.dims != [p, p, p] {
                return Err(Error::Shape(format!(
                    "{name} patch must be 1x{p}^3, got {}x{:?}",
                    t.channels, t.dims
                )));
            }
        }
        let slope = self.slope();
        let input = Tensor::concat(&[source, target]);
        let mut prev = &input;
        let mut encoder: Vec<Tensor<T>> = Vec::with_capacity(ENCODER_STAGES);
        for conv in &self.encoder {
            let mut e = conv.forward(prev);
            leaky_relu_inplace(&mut e, slope);
            encoder.push(e);
            prev = encoder.last().unwrap();
        }
        let encoder: [Tensor<T>; ENCODER_STAGES] = encoder.try_into().unwrap();
        let forward = self.forward.forward(&encoder, slope);
        let backward = self.backward.forward(&encoder, slope);
        Ok(GeneratorCache {
            input,
            encoder,
            forward,
            backward,
        })
    }

    /// `(flow_fwd, flow_bwd)`, each `3 x P^3`.
    pub fn forward(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let cache = self.forward_cached(source, target)?;
        Ok((cache.forward.flow, cache.backward.flow))
    }

    /// Back-propagates flow gradients. Returns parameter gradients and,
    /// when `need_input`, the gradient for the 2-channel input.
    pub fn backward(
        &self,
        cache: &GeneratorCache<T>,
        grad_flow_fwd: &Tensor<T>,
        grad_flow_bwd: &Tensor<T>,
        need_input: bool,
    ) -> (GeneratorParams<T>, Option<Tensor<T>>) {
        let slope = self.slope();
        let mut grads = self.zeros_like();
        let mut grad_enc: [Tensor<T>; ENCODER_STAGES] =
            std::array::from_fn(|i| Tensor::zeros(cache.encoder[i].channels, cache.encoder[i].dims));
        self.forward.backward(
            &cache.encoder,
            &cache.forward,
            grad_flow_fwd,
            &mut grads.forward,
            &mut grad_enc,
            slope,
        );
        self.backward.backward(
            &cache.encoder,
            &cache.backward,
            grad_flow_bwd,
            &mut grads.backward,
            &mut grad_enc,
            slope,
        );
        let mut grad_input = None;
        for l in (0..ENCODER_STAGES).rev() {
            let mut g = std::mem::replace(&mut grad_enc[l], Tensor::zeros(0, [0, 0, 0]));
            leaky_relu_backward_inplace(&mut g, &cache.encoder[l], slope);
            let input = if l == 0 { &cache.input } else { &cache.encoder[l - 1] };
            let want = l > 0 || need_input;
            let gi = self.encoder[l].backward(input, &g, &mut grads.encoder[l], want);
            if l > 0 {
                grad_enc[l - 1].add_assign(&gi.unwrap());
            } else {
                grad_input = gi;
            }
        }
        (grads, grad_input)
    }
}

impl<T> Parameters<T> for Decoder<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let convs = std::iter::once(&self.entry)
            .chain(self.blocks.iter())
            .chain(self.tail.iter());
        collect_tensors(convs)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let convs = std::iter::once(&mut self.entry)
            .chain(self.blocks.iter_mut())
            .chain(self.tail.iter_mut());
        collect_tensors_mut(convs)
    }
}

impl<T> Parameters<T> for GeneratorParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = collect_tensors(self.encoder.iter());
        out.extend(self.forward.tensors());
        out.extend(self.backward.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = collect_tensors_mut(self.encoder.iter_mut());
        out.extend(self.forward.tensors_mut());
        out.extend(self.backward.tensors_mut());
        out
    }
}

impl<T: Real> Decoder<T> {
    /// Shapes of every learnable tensor, in visiting order.
    pub fn shapes(&self) -> Vec<(usize, usize, usize, usize)> {
        self.convs()
            .map(|c| (c.out_channels, c.in_channels, c.kernel, c.stride))
            .collect()
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: usize, c: usize) -> ModelConfig {
        ModelConfig {
            patch_size: p,
            base_channels: c,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn patch(p: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let data = (0..p * p * p)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::from_vec(1, [p, p, p], data)
    }

    #[test]
    fn decoders_are_symmetric() {
        let g = GeneratorParams::<f32>::init(&cfg(16, 4)).unwrap();
        assert_eq!(g.forward.shapes(), g.backward.shapes());
        assert_eq!(g.forward.parameter_count(), g.backward.parameter_count());
        assert_eq!(g.forward.mode, FusionMode::Add);
        assert_eq!(g.backward.mode, FusionMode::Subtract);
    }

    #[test]
    fn init_is_deterministic() {
        let a = GeneratorParams::<f32>::init(&cfg(16, 4)).unwrap();
        let b = GeneratorParams::<f32>::init(&cfg(16, 4)).unwrap();
        assert_eq!(a, b);
        let c = GeneratorParams::<f32>::init(&ModelConfig { seed: 4, ..cfg(16, 4) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_patch_shape() {
        let g = GeneratorParams::<f64>::init(&cfg(16, 2)).unwrap();
        let bad = Tensor::<f64>::zeros(1, [16, 16, 8]);
        assert!(matches!(g.forward(&bad, &patch(16, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn subtractive_decoder_differs() {
        let g = GeneratorParams::<f64>::init(&cfg(16, 4)).unwrap();
        let mut twin = g.clone();
        twin.backward = Decoder {
            mode: FusionMode::Subtract,
            ..g.forward.clone()
        };
        let (s, t) = (patch(16, 1), patch(16, 2));
        let (f, b) = twin.forward(&s, &t).unwrap();
        assert_ne!(f, b);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let g = GeneratorParams::<f64>::init(&ModelConfig {
            flow_init_std: 0.1,
            ..cfg(16, 2)
        })
        .unwrap();
        let (s, t) = (patch(16, 5), patch(16, 6));
        let cache = g.forward_cached(&s, &t).unwrap();
        let pf = patch(16, 7);
        let probe_f = Tensor::concat(&[&pf, &pf, &pf]);
        let probe_b = Tensor::concat(&[&patch(16, 8), &pf, &patch(16, 9)]);
        let loss = |s: &Tensor<f64>, t: &Tensor<f64>| {
            let (f, b) = g.forward(s, t).unwrap();
            let a: f64 = f.data.iter().zip(&probe_f.data).map(|(x, y)| x * y).sum();
            let c: f64 = b.data.iter().zip(&probe_b.data).map(|(x, y)| x * y).sum();
            a + c
        };
        let (_, gi) = g.backward(&cache, &probe_f, &probe_b, true);
        let gi = gi.unwrap();
        let n = 16 * 16 * 16;
        for idx in [0, 100, 2047, n + 33, 2 * n - 1] {
            let h = 1e-6;
            let (mut sp, mut sm, mut tp, mut tm) = (s.clone(), s.clone(), t.clone(), t.clone());
            let fd = if idx < n {
                sp.data[idx] += h;
                sm.data[idx] -= h;
                (loss(&sp, &t) - loss(&sm, &t)) / (2.0 * h)
            } else {
                tp.data[idx - n] += h;
                tm.data[idx - n] -= h;
                (loss(&s, &tp) - loss(&s, &tm)) / (2.0 * h)
            };
            let an = gi.data[idx];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs {an}");
        }
    }
}
