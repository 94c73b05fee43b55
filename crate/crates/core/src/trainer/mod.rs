//! Alternating adversarial optimization over sampled patch pairs.
//!
//! Each step runs the generator, updates the target discriminator, updates
//! the source discriminator, and finally updates the generator against the
//! freshly updated (and frozen) discriminators.

mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{discriminator_loss_grad, generator_loss, LossComponents, LossConfig, PairFlows};
use crate::model::{derive_seed, DiscriminatorParams, GeneratorCache, GeneratorParams, ModelConfig};
use crate::sampler::{sample_patches, PatchRecord, PatchSpec, SamplerConfig};
use crate::tensor::Tensor;
use crate::volio::Volume;
use crate::warp::{warp_backward, warp_forward};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{parameter_hash, Adam, AdamConfig};

const PAIR_STREAM: u64 = 0x5a3e;
const EPOCH_STREAM: u64 = 0xe90c;
const D_TARGET_STREAM: u64 = 1;
const D_SOURCE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub patches_per_pair: usize,
    /// When false, discriminators are never run or updated and the
    /// adversarial weight is treated as 0.
    pub adversarial_enabled: bool,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    /// Per-network global gradient norm cap.
    pub grad_clip: f64,
    /// Drives patch sampling and batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            patches_per_pair: 2500,
            adversarial_enabled: true,
            checkpoint_every: 0,
            grad_clip: 10.0,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patches_per_pair == 0 {
            return Err(Error::Config("patches_per_pair must be >= 1".into()));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {lr}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if self.sampler.patch_size != self.model.patch_size {
            return Err(Error::Config(format!(
                "sampler patch size {} differs from model patch size {}",
                self.sampler.patch_size, self.model.patch_size
            )));
        }
        Ok(())
    }

    /// Whether the adversarial terms take part in this run.
    pub fn adversarial_active(&self) -> bool {
        self.adversarial_enabled && self.loss.lambda_adv > 0.0
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Co-located source and target patches, each `1 x P^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl PatchPair {
    pub fn from_slices(size: usize, source: &[f32], target: &[f32]) -> Self {
        let dims = [size; 3];
        Self {
            source: Tensor::from_vec(1, dims, source.to_vec()),
            target: Tensor::from_vec(1, dims, target.to_vec()),
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed steps.
    pub iteration: u64,
    pub generator: GeneratorParams<f32>,
    /// Judges `S∘φ_ST` against the target.
    pub d_target: DiscriminatorParams<f32>,
    /// Judges `T∘φ_TS` against the source.
    pub d_source: DiscriminatorParams<f32>,
    pub opt_generator: Adam,
    pub opt_d_target: Adam,
    pub opt_d_source: Adam,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = GeneratorParams::init(&config.model)?;
        let d_target = DiscriminatorParams::init(&config.model, D_TARGET_STREAM)?;
        let d_source = DiscriminatorParams::init(&config.model, D_SOURCE_STREAM)?;
        Ok(Self {
            opt_generator: Adam::new(config.adam(config.lr_generator), &generator),
            opt_d_target: Adam::new(config.adam(config.lr_discriminator), &d_target),
            opt_d_source: Adam::new(config.adam(config.lr_discriminator), &d_source),
            config: config.clone(),
            iteration: 0,
            generator,
            d_target,
            d_source,
        })
    }

    pub fn generator_hash(&self) -> String {
        parameter_hash(&self.generator)
    }

    pub fn discriminator_hashes(&self) -> (String, String) {
        (parameter_hash(&self.d_target), parameter_hash(&self.d_source))
    }
}

/// Per-step log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss: LossComponents,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_target_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_source_loss: Option<f64>,
    /// Generator gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Generator outputs for one batch element.
pub struct SampleForward {
    pub cache: GeneratorCache<f32>,
    /// `S∘φ_ST`
    pub warped_source: Tensor<f32>,
    /// `T∘φ_TS`
    pub warped_target: Tensor<f32>,
}

fn check_batch(batch: &[PatchPair], p: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    for pair in batch {
        for t in [&pair.source, &pair.target] {
            if t.channels != 1 || t.dims != [p; 3] {
                return Err(Error::Shape(format!(
                    "batch patches must be 1x{p}^3, got {}x{:?}",
                    t.channels, t.dims
                )));
            }
        }
    }
    Ok(())
}

/// Phase 1: flows and warped patches for every batch element.
pub fn generator_forward(generator: &GeneratorParams<f32>, batch: &[PatchPair]) -> Result<Vec<SampleForward>> {
    batch
        .par_iter()
        .map(|pair| {
            let cache = generator.forward_cached(&pair.source, &pair.target)?;
            let dims = pair.source.dims;
            let ws = warp_forward(&pair.source.data, 1, dims, &cache.flow_forward().data);
            let wt = warp_forward(&pair.target.data, 1, dims, &cache.flow_backward().data);
            Ok(SampleForward {
                cache,
                warped_source: Tensor::from_vec(1, dims, ws),
                warped_target: Tensor::from_vec(1, dims, wt),
            })
        })
        .collect()
}

/// One discriminator update: real pairs `(reference, reference)` against
/// generated pairs `(reference, candidate)`. Returns the loss before the update.
pub fn update_discriminator<'a>(
    disc: &mut DiscriminatorParams<f32>,
    opt: &mut Adam,
    pairs: &[(&'a Tensor<f32>, &'a Tensor<f32>)],
    grad_clip: f64,
) -> Result<f64> {
    let d = &*disc;
    let caches = pairs
        .par_iter()
        .map(|&(reference, candidate)| Ok((d.forward_cached(reference, reference)?, d.forward_cached(reference, candidate)?)))
        .collect::<Result<Vec<_>>>()?;
    let real: Vec<f32> = caches.iter().map(|c| c.0.logit).collect();
    let fake: Vec<f32> = caches.iter().map(|c| c.1.logit).collect();
    let (loss, g_real, g_fake) = discriminator_loss_grad(&real, &fake)?;
    let loss = loss as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("discriminator loss {loss}, logits real {real:?} fake {fake:?}")));
    }
    let parts: Vec<DiscriminatorParams<f32>> = caches
        .par_iter()
        .enumerate()
        .map(|(i, (cr, cf))| {
            let (mut g, _) = d.backward(cr, g_real[i], false);
            let (gf, _) = d.backward(cf, g_fake[i], false);
            optim::accumulate(&mut g, &gf, 1.0);
            g
        })
        .collect();
    let mut grads = d.zeros_like();
    for g in &parts {
        optim::accumulate(&mut grads, g, 1.0);
    }
    optim::clip_global_norm(&mut grads, grad_clip);
    opt.update(disc, &grads);
    Ok(loss)
}

/// Gradient of the total loss for the candidate channel of a discriminator
/// input, given the gradient at its logit.
fn candidate_gradient(
    disc: &DiscriminatorParams<f32>,
    reference: &Tensor<f32>,
    candidate: &Tensor<f32>,
    grad_logit: f32,
) -> Result<Vec<f32>> {
    let cache = disc.forward_cached(reference, candidate)?;
    let (_, gi) = disc.backward(&cache, grad_logit, true);
    Ok(gi.expect("input gradient requested").channel(1).to_vec())
}

/// Phase 4: generator update on similarity + cycle (+ adversarial when
/// active). Returns mean components and the pre-clip gradient norm.
pub fn update_generator(
    state: &mut TrainState,
    batch: &[PatchPair],
    forward: &[SampleForward],
) -> Result<(LossComponents, f64)> {
    let adversarial = state.config.adversarial_active();
    let mut loss_cfg = state.config.loss.clone();
    if !adversarial {
        loss_cfg.lambda_adv = 0.0;
    }
    let inv_b = 1.0 / batch.len() as f32;
    let (gen, d_t, d_s) = (&state.generator, &state.d_target, &state.d_source);
    let per_sample = batch
        .par_iter()
        .zip(forward.par_iter())
        .map(|(pair, fw)| -> Result<(LossComponents, GeneratorParams<f32>)> {
            let dims = pair.source.dims;
            let flow_st = &fw.cache.flow_forward().data;
            let flow_ts = &fw.cache.flow_backward().data;
            let (d_s_fake, d_t_fake) = if adversarial {
                (
                    vec![d_s.forward(&pair.source, &fw.warped_target)?],
                    vec![d_t.forward(&pair.target, &fw.warped_source)?],
                )
            } else {
                (Vec::new(), Vec::new())
            };
            let flows = PairFlows {
                source: &pair.source.data,
                target: &pair.target.data,
                dims,
                flow_st,
                flow_ts,
            };
            let mut out = generator_loss(flows, &d_s_fake, &d_t_fake, &loss_cfg)?;
            if adversarial {
                let g_ws = candidate_gradient(d_t, &pair.target, &fw.warped_source, out.grad_d_t_logits[0])?;
                let (_, g) = warp_backward(&pair.source.data, 1, dims, flow_st, &g_ws);
                out.grad_flow_st.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                let g_wt = candidate_gradient(d_s, &pair.source, &fw.warped_target, out.grad_d_s_logits[0])?;
                let (_, g) = warp_backward(&pair.target.data, 1, dims, flow_ts, &g_wt);
                out.grad_flow_ts.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
            let scale = |mut v: Vec<f32>| {
                v.iter_mut().for_each(|x| *x *= inv_b);
                Tensor::from_vec(3, dims, v)
            };
            let (grads, _) = gen.backward(&fw.cache, &scale(out.grad_flow_st), &scale(out.grad_flow_ts), false);
            Ok((out.components, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let components = LossComponents::mean(&per_sample.iter().map(|p| p.0).collect::<Vec<_>>());
    if !components.is_finite() {
        return Err(Error::NonFinite(format!(
            "generator loss at iteration {}: {components:?}",
            state.iteration
        )));
    }
    let mut grads = state.generator.zeros_like();
    for (_, g) in &per_sample {
        optim::accumulate(&mut grads, g, 1.0);
    }
    let norm = optim::clip_global_norm(&mut grads, state.config.grad_clip);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "generator gradient norm at iteration {}: {norm}",
            state.iteration
        )));
    }
    state.opt_generator.update(&mut state.generator, &grads);
    Ok((components, norm))
}

/// One full optimization step on a batch.
pub fn train_step(state: &mut TrainState, batch: &[PatchPair]) -> Result<StepMetrics> {
    check_batch(batch, state.config.model.patch_size)?;
    let forward = generator_forward(&state.generator, batch)?;
    let (mut d_target_loss, mut d_source_loss) = (None, None);
    if state.config.adversarial_active() {
        let clip = state.config.grad_clip;
        let t_pairs: Vec<_> = batch.iter().zip(&forward).map(|(p, f)| (&p.target, &f.warped_source)).collect();
        d_target_loss = Some(update_discriminator(&mut state.d_target, &mut state.opt_d_target, &t_pairs, clip)?);
        let s_pairs: Vec<_> = batch.iter().zip(&forward).map(|(p, f)| (&p.source, &f.warped_target)).collect();
        d_source_loss = Some(update_discriminator(&mut state.d_source, &mut state.opt_d_source, &s_pairs, clip)?);
    }
    let (loss, grad_norm) = update_generator(state, batch, &forward)?;
    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        loss,
        d_target_loss,
        d_source_loss,
        grad_norm,
        wall_time_s: 0.0,
    })
}

enum Storage {
    Volumes {
        volumes: Vec<Volume>,
        pairs: Vec<(usize, usize)>,
        /// `(pair index, window)`
        items: Vec<(usize, PatchSpec)>,
    },
    Archive(Vec<PatchRecord>),
}

/// Deterministic supply of training batches. Item order is reshuffled every
/// epoch from the seed, so the batch for a given iteration never depends on
/// what was drawn before it.
pub struct PatchPool {
    storage: Storage,
    patch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl PatchPool {
    /// Every ordered pair `(i, j)`, `i != j`, contributes `patches_per_pair`
    /// sampled windows.
    pub fn from_volumes(volumes: Vec<Volume>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if volumes.len() < 2 {
            return Err(Error::Validation(format!(
                "training needs at least two volumes, got {}",
                volumes.len()
            )));
        }
        let n = volumes.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let mut items = Vec::with_capacity(pairs.len() * config.patches_per_pair);
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let sampler = SamplerConfig {
                seed: derive_seed(config.seed, PAIR_STREAM + p as u64),
                ..config.sampler.clone()
            };
            let specs = sample_patches(&volumes[i], &volumes[j], config.patches_per_pair, &sampler)?;
            items.extend(specs.into_iter().map(|s| (p, s)));
        }
        Ok(Self {
            storage: Storage::Volumes { volumes, pairs, items },
            patch_size: config.model.patch_size,
            seed: config.seed,
            epoch: None,
        })
    }

    /// Uses pre-extracted patch pairs as they are.
    pub fn from_archive(records: Vec<PatchRecord>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::Validation("patch archive holds no records".into()));
        }
        let p = config.model.patch_size;
        if let Some(bad) = records.iter().find(|r| r.spec.size != p) {
            return Err(Error::Shape(format!(
                "archive patch size {} differs from model patch size {p}",
                bad.spec.size
            )));
        }
        Ok(Self {
            storage: Storage::Archive(records),
            patch_size: p,
            seed: config.seed,
            epoch: None,
        })
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::Volumes { items, .. } => items.len(),
            Storage::Archive(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ordered volume index pairs, empty for archives.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        match &self.storage {
            Storage::Volumes { pairs, .. } => pairs.clone(),
            Storage::Archive(_) => Vec::new(),
        }
    }

    /// Ordered pairs visited during one epoch, in first-visit order.
    pub fn epoch_pairs(&mut self, epoch: u64) -> Vec<(usize, usize)> {
        let order = self.order(epoch).to_vec();
        match &self.storage {
            Storage::Volumes { pairs, items, .. } => {
                let mut seen = Vec::new();
                for idx in order {
                    let p = pairs[items[idx].0];
                    if !seen.contains(&p) {
                        seen.push(p);
                    }
                }
                seen
            }
            Storage::Archive(_) => Vec::new(),
        }
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, EPOCH_STREAM + epoch)));
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().unwrap().1
    }

    fn item(&mut self, global: u64) -> Result<PatchPair> {
        let len = self.len() as u64;
        let idx = self.order(global / len)[(global % len) as usize];
        let p = self.patch_size;
        match &self.storage {
            Storage::Volumes { volumes, pairs, items } => {
                let (pair, spec) = items[idx];
                let (i, j) = pairs[pair];
                let source = volumes[i].extract_patch(spec.origin, p)?;
                let target = volumes[j].extract_patch(spec.origin, p)?;
                Ok(PatchPair::from_slices(p, &source, &target))
            }
            Storage::Archive(records) => {
                let r = &records[idx];
                Ok(PatchPair::from_slices(p, &r.source, &r.target))
            }
        }
    }

    /// Batch used at `iteration` (0-based).
    pub fn batch(&mut self, iteration: u64, batch_size: usize) -> Result<Vec<PatchPair>> {
        let start = iteration * batch_size as u64;
        (0..batch_size as u64).map(|b| self.item(start + b)).collect()
    }
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints; none means nothing is written.
    pub out_dir: Option<PathBuf>,
    /// Line-delimited JSON metrics file.
    pub metrics_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    /// Last checkpoint written, if any.
    pub checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:08}.ivc"))
}

/// Runs from `state.iteration` up to `state.config.iterations`.
pub fn train(mut state: TrainState, pool: &mut PatchPool, options: &TrainOptions) -> Result<TrainOutcome> {
    state.config.validate()?;
    let config = state.config.clone();
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics_file = match &options.metrics_path {
        Some(path) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some((path.clone(), std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut last_checkpoint = None;
    while state.iteration < config.iterations {
        let batch = pool.batch(state.iteration, config.batch_size)?;
        let step = match train_step(&mut state, &batch) {
            Ok(m) => m,
            Err(Error::NonFinite(msg)) => {
                let mut msg = msg;
                if let Some(dir) = &options.out_dir {
                    let snap = dir.join(format!("nonfinite-{:08}.ivc", state.iteration));
                    if save_checkpoint(&state, &snap).is_ok() {
                        msg = format!("{msg}; state saved to {}", snap.display());
                    }
                }
                return Err(Error::NonFinite(msg));
            }
            Err(e) => return Err(e),
        };
        let step = StepMetrics {
            wall_time_s: started.elapsed().as_secs_f64(),
            ..step
        };
        if let Some((path, w)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&step).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.push(step);
        let due = config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0;
        if let Some(dir) = &options.out_dir {
            if due || state.iteration == config.iterations {
                let path = checkpoint_path(dir, state.iteration);
                save_checkpoint(&state, &path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    if let Some((path, mut w)) = metrics_file {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        checkpoint: last_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_pair, SynthConfig};

    pub(crate) fn tiny_config(adversarial: bool) -> TrainConfig {
        TrainConfig {
            iterations: 4,
            batch_size: 2,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            patches_per_pair: 6,
            adversarial_enabled: adversarial,
            model: ModelConfig {
                patch_size: 16,
                base_channels: 2,
                seed: 3,
                ..ModelConfig::default()
            },
            sampler: SamplerConfig {
                patch_size: 16,
                ..SamplerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn volumes(n: usize) -> Vec<Volume> {
        (0..n)
            .map(|s| {
                make_pair(&SynthConfig {
                    dims: [24, 24, 24],
                    blob_count: 600,
                    seed: s as u64,
                    ..SynthConfig::default()
                })
                .unwrap()
                .target
            })
            .collect()
    }

    #[test]
    fn three_volumes_give_six_ordered_pairs() {
        let mut pool = PatchPool::from_volumes(volumes(3), &tiny_config(true)).unwrap();
        assert_eq!(pool.ordered_pairs().len(), 6);
        assert_eq!(pool.len(), 36);
        let mut visited = pool.epoch_pairs(0);
        visited.sort();
        assert_eq!(visited, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn batches_are_a_function_of_iteration() {
        let cfg = tiny_config(true);
        let mut a = PatchPool::from_volumes(volumes(2), &cfg).unwrap();
        let mut b = PatchPool::from_volumes(volumes(2), &cfg).unwrap();
        let late = a.batch(9, 2).unwrap();
        a.batch(0, 2).unwrap();
        assert_eq!(late, b.batch(9, 2).unwrap());
    }

    #[test]
    fn mismatched_patch_sizes_rejected() {
        let mut cfg = tiny_config(true);
        cfg.sampler.patch_size = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn phases_touch_only_their_network() {
        let cfg = tiny_config(true);
        let mut pool = PatchPool::from_volumes(volumes(2), &cfg).unwrap();
        let batch = pool.batch(0, 2).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        let forward = generator_forward(&state.generator, &batch).unwrap();
        let g0 = state.generator_hash();
        let (dt0, ds0) = state.discriminator_hashes();

        let pairs: Vec<_> = batch.iter().zip(&forward).map(|(p, f)| (&p.target, &f.warped_source)).collect();
        update_discriminator(&mut state.d_target, &mut state.opt_d_target, &pairs, 10.0).unwrap();
        let (dt1, ds1) = state.discriminator_hashes();
        assert_eq!(state.generator_hash(), g0);
        assert_ne!(dt1, dt0);
        assert_eq!(ds1, ds0);

        update_generator(&mut state, &batch, &forward).unwrap();
        assert_ne!(state.generator_hash(), g0);
        assert_eq!(state.discriminator_hashes(), (dt1, ds1));
    }

    #[test]
    fn disabled_adversary_leaves_discriminators_alone() {
        let cfg = tiny_config(false);
        let mut pool = PatchPool::from_volumes(volumes(2), &cfg).unwrap();
        let state = TrainState::new(&cfg).unwrap();
        let before = (state.d_target.clone(), state.d_source.clone());
        let out = train(state, &mut pool, &TrainOptions::default()).unwrap();
        assert_eq!((out.state.d_target, out.state.d_source), before);
        assert!(out.metrics.iter().all(|m| m.d_target_loss.is_none() && m.loss.adversarial == 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny_config(true);
        let run = || {
            let mut pool = PatchPool::from_volumes(volumes(2), &cfg).unwrap();
            train(TrainState::new(&cfg).unwrap(), &mut pool, &TrainOptions::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.state, b.state);
        assert!(a.metrics.iter().all(|m| m.loss.is_finite()));
    }

    #[test]
    fn bad_batch_shape_rejected() {
        let cfg = tiny_config(true);
        let mut state = TrainState::new(&cfg).unwrap();
        let bad = PatchPair::from_slices(8, &[0.0; 512], &[0.0; 512]);
        assert!(matches!(train_step(&mut state, &[bad]), Err(Error::Shape(_))));
        assert!(train_step(&mut state, &[]).is_err());
    }
}
