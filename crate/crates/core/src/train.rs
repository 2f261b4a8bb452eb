//! One-directional unpaired training: per iteration, one discriminator update
//! followed by one generator and projection-head update.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Exec, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss, GanMode, LossParts, LossReport, LossWeights};
use crate::model::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ParamStore, ProjectionConfig, ProjectionHeads,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Constant until `decay_start_epoch`, then linear decay reaching zero
    /// one epoch after the last.
    Linear { decay_start_epoch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Feature locations sampled per image and layer for the contrastive loss.
    pub num_patches: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Encoder taps used by the contrastive loss; empty selects the defaults.
    pub layer_ids: Vec<usize>,
    pub embed_dim: usize,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub lr_schedule: LrSchedule,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 5,
            batch_size: 1,
            num_patches: 512,
            seed: 0,
            loss_weights: LossWeights::default(),
            layer_ids: Vec::new(),
            embed_dim: 256,
            checkpoint_every: 0,
            lr_schedule: LrSchedule::Constant,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.num_patches < 2 {
            return Err(Error::Config("num_patches must be >= 2".into()));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        for &id in &self.layer_ids {
            self.generator.check_layer(id)?;
        }
        Ok(())
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            embed_dim: self.embed_dim,
            layer_ids: self.layer_ids.clone(),
            init_gain: self.generator.init_gain,
        }
    }

    pub fn iterations_per_epoch(&self, n_source: usize, n_target: usize) -> usize {
        n_source.min(n_target) / self.batch_size
    }

    pub fn total_iterations(&self, n_source: usize, n_target: usize) -> u64 {
        (self.epochs * self.iterations_per_epoch(n_source, n_target)) as u64
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear { decay_start_epoch } => {
                if epoch < decay_start_epoch {
                    self.lr
                } else {
                    let span = self.epochs.saturating_sub(decay_start_epoch) + 1;
                    self.lr * (1.0 - (epoch - decay_start_epoch + 1) as f64 / span as f64).max(0.0)
                }
            }
        }
    }
}

/// Adam with bias correction; moments are kept per tensor of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1, beta2, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Apply one update. Missing gradients are treated as zero.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - self.beta2.powi(self.step as i32)).sqrt();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else {
                for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()) {
                    *mi = T::of(b1 * mi.as_f64());
                    *vi = T::of(b2 * vi.as_f64());
                    let denom = vi.as_f64().sqrt() / bc2_sqrt + eps;
                    *pi = T::of(pi.as_f64() - lr / bc1 * mi.as_f64() / denom);
                }
                continue;
            };
            if g.shape() != p.shape() {
                return Err(Error::Invalid(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi.as_f64();
                *mi = T::of(b1 * mi.as_f64() + (1.0 - b1) * gi);
                *vi = T::of(b2 * vi.as_f64() + (1.0 - b2) * gi * gi);
                let denom = vi.as_f64().sqrt() / bc2_sqrt + eps;
                *pi = T::of(pi.as_f64() - lr / bc1 * mi.as_f64() / denom);
            }
        }
        Ok(())
    }
}

/// Exact position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() as u64 }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos as u128);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub iteration: u64,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub heads: ProjectionHeads<T>,
    pub opt_g: Adam<T>,
    pub opt_f: Adam<T>,
    pub opt_d: Adam<T>,
    pub rng: ChaCha8Rng,
}

/// Flat, named view of a [`TrainState`] for persistence.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub iteration: u64,
    pub rng: RngState,
    /// Adam step counters for the generator, projection heads and discriminator.
    pub adam_steps: [u64; 3],
    pub tensors: Vec<(String, Tensor<T>)>,
}

const GROUPS: [&str; 3] = ["G", "F", "D"];

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(cfg.generator.clone(), &mut rng)?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), &mut rng)?;
        let heads = ProjectionHeads::new(&cfg.generator, &cfg.projection(), &mut rng)?;
        let opt_g = Adam::new(&generator.params, cfg.beta1, cfg.beta2);
        let opt_f = Adam::new(&heads.params, cfg.beta1, cfg.beta2);
        let opt_d = Adam::new(&discriminator.params, cfg.beta1, cfg.beta2);
        Ok(Self { iteration: 0, generator, discriminator, heads, opt_g, opt_f, opt_d, rng })
    }

    fn groups(&self) -> [(&ParamStore<T>, &Adam<T>); 3] {
        [
            (&self.generator.params, &self.opt_g),
            (&self.heads.params, &self.opt_f),
            (&self.discriminator.params, &self.opt_d),
        ]
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        let mut tensors = Vec::new();
        for (group, (store, adam)) in GROUPS.iter().zip(self.groups()) {
            for (i, (name, t)) in store.iter().enumerate() {
                tensors.push((format!("{group}/{name}"), t.clone()));
                tensors.push((format!("{group}.adam_m/{name}"), adam.m[i].clone()));
                tensors.push((format!("{group}.adam_v/{name}"), adam.v[i].clone()));
            }
        }
        Snapshot {
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            adam_steps: [self.opt_g.step, self.opt_f.step, self.opt_d.step],
            tensors,
        }
    }

    /// Rebuild a state for `cfg` and overwrite it with the snapshot contents.
    pub fn from_snapshot(cfg: &TrainConfig, snap: Snapshot<T>) -> Result<Self> {
        let mut state = Self::new(cfg)?;
        let mut by_name: BTreeMap<String, Tensor<T>> = snap.tensors.into_iter().collect();
        let mut take = |name: String, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = by_name.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let stores = [
            (&mut state.generator.params, &mut state.opt_g),
            (&mut state.heads.params, &mut state.opt_f),
            (&mut state.discriminator.params, &mut state.opt_d),
        ];
        for ((group, (store, adam)), step) in GROUPS.iter().zip(stores).zip(snap.adam_steps) {
            let names = store.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                let p = take(format!("{group}/{name}"), &store.tensors()[i])?;
                adam.m[i] = take(format!("{group}.adam_m/{name}"), &store.tensors()[i])?;
                adam.v[i] = take(format!("{group}.adam_v/{name}"), &store.tensors()[i])?;
                store.tensors_mut()[i] = p;
            }
            adam.step = step;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        state.iteration = snap.iteration;
        state.rng = snap.rng.restore();
        Ok(state)
    }
}

/// `count` distinct indices drawn uniformly from `0..available`, in random order.
pub fn sample_locations<R: Rng + ?Sized>(available: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count > available {
        return Err(Error::SampleCount { requested: count, available });
    }
    Ok(rand::seq::index::sample(rng, available, count).into_vec())
}

/// Per-epoch permutation of a dataset; `domain` separates the two sets.
pub fn epoch_order(seed: u64, domain: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + 2 * epoch + domain);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn param_grads<T: Real>(g: &crate::autograd::Gradients<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
    vars.iter().map(|v| g.get(*v).cloned()).collect()
}

fn gan_term<T: Real>(g: &mut Graph<T>, scores: Var, target: f64, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::LeastSquares => g.mse_to_const(scores, target),
        GanMode::Logistic => g.bce_to_const(scores, target),
    }
}

/// One discriminator update on `real` versus the (constant) `fake` batch.
/// Returns the discriminator loss before the update.
pub fn discriminator_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let dp = state.discriminator.params.bind(&mut g);
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let sr = state.discriminator.forward(&mut g, &dp, &rv)?;
    let sf = state.discriminator.forward(&mut g, &dp, &fv)?;
    let mode = cfg.loss_weights.gan_mode;
    let lr_term = gan_term(&mut g, sr, 1.0, mode)?;
    let lf_term = gan_term(&mut g, sf, 0.0, mode)?;
    let loss = g.weighted_sum(&[(lr_term, 0.5), (lf_term, 0.5)])?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("gan_D"));
    }
    let grads = g.backward(loss)?;
    state.opt_d.update(&mut state.discriminator.params, &param_grads(&grads, &dp), lr)?;
    Ok(value)
}

/// Contrastive term between a translated image's taps (queries) and the
/// source taps (keys, detached), averaged over layers.
#[allow(clippy::too_many_arguments)]
fn nce_term<T: Real>(
    g: &mut Graph<T>,
    state: &mut TrainState<T>,
    gp: &[Var],
    fp: &[Var],
    source_taps: &[Var],
    translated: Var,
    num_patches: usize,
    temperature: f64,
) -> Result<Var> {
    let ids = state.heads.layer_ids.clone();
    let mut locs = Vec::with_capacity(ids.len());
    for t in source_taps {
        let (_, _, h, w) = g.value(t).dims4()?;
        locs.push(sample_locations(h * w, num_patches.min(h * w), &mut state.rng)?);
    }
    let keys = state.heads.project(g, fp, source_taps, &locs)?;
    let keys: Vec<Var> = keys.iter().map(|k| g.detach(k)).collect();
    let q_taps = state.generator.run(g, gp, &translated, &ids, true)?.taps;
    let queries = state.heads.project(g, fp, &q_taps, &locs)?;
    let mut terms = Vec::with_capacity(ids.len());
    let w = 1.0 / ids.len() as f64;
    for (q, k) in queries.into_iter().zip(keys) {
        terms.push((g.patch_nce(q, k, temperature)?, w));
    }
    g.weighted_sum(&terms)
}

/// One full iteration on a source batch `x` and a target batch `y`, both
/// normalized `[B, 3, H, W]`.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
) -> Result<LossReport> {
    let weights = &cfg.loss_weights;
    let mut g = Graph::new();
    let gp = state.generator.params.bind(&mut g);
    let fp = state.heads.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let ids = state.heads.layer_ids.clone();
    let out_x = state.generator.run(&mut g, &gp, &xv, &ids, false)?;
    let fake = out_x.image.expect("full pass");
    let out_y = state.generator.run(&mut g, &gp, &yv, &ids, false)?;
    let idt = out_y.image.expect("full pass");

    let fake_value = g.value(&fake).clone();
    let gan_d = discriminator_step(state, cfg, y, &fake_value, lr)?;

    let dp = state.discriminator.params.bind_frozen(&mut g);
    let sf = state.discriminator.forward(&mut g, &dp, &fake)?;
    let gan_g = gan_term(&mut g, sf, 1.0, weights.gan_mode)?;
    let sreg = g.l1_mean(xv, fake)?;
    let nce_x = nce_term(&mut g, state, &gp, &fp, &out_x.taps, fake, cfg.num_patches, weights.nce_temperature_x)?;
    let nce_y = nce_term(&mut g, state, &gp, &fp, &out_y.taps, idt, cfg.num_patches, weights.nce_temperature_y)?;

    let parts = LossParts {
        gan_g: g.scalar(gan_g),
        gan_d,
        patchnce_x: g.scalar(nce_x),
        patchnce_y: g.scalar(nce_y),
        sreg: g.scalar(sreg),
    };
    let report = total_loss(parts, weights)?;
    let total = g.weighted_sum(&[
        (gan_g, weights.lambda_gan),
        (sreg, weights.lambda_sreg),
        (nce_x, weights.lambda_x),
        (nce_y, weights.lambda_y),
    ])?;
    let grads = g.backward(total)?;
    state.opt_g.update(&mut state.generator.params, &param_grads(&grads, &gp), lr)?;
    state.opt_f.update(&mut state.heads.params, &param_grads(&grads, &fp), lr)?;
    state.iteration += 1;
    Ok(report)
}

/// Indexed access to a set of normalized `[1, 3, H, W]` images.
pub trait Dataset<T> {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Tensor<T>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> Dataset<T> for [Tensor<T>] {
    fn len(&self) -> usize {
        <[Tensor<T>]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Tensor<T>> {
        Ok(self[index].clone())
    }
}

impl<T: Real> Dataset<T> for Vec<Tensor<T>> {
    fn len(&self) -> usize {
        <[Tensor<T>]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Tensor<T>> {
        Ok(self[index].clone())
    }
}

fn stack<T: Real>(items: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    if items.len() == 1 {
        return Ok(items.into_iter().next().expect("one item"));
    }
    let first = items.first().ok_or(Error::Empty("batch"))?.shape().to_vec();
    let mut data = Vec::new();
    for t in &items {
        if t.shape() != first.as_slice() {
            return Err(Error::Invalid(format!("batch item shape {:?} vs {:?}", t.shape(), first)));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = first;
    shape[0] *= items.len();
    Tensor::from_vec(&shape, data)
}

/// Source and target batches fed at `iteration`.
pub fn batch_at<T: Real, X: Dataset<T> + ?Sized, Y: Dataset<T> + ?Sized>(
    cfg: &TrainConfig,
    source: &X,
    target: &Y,
    iteration: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let per_epoch = cfg.iterations_per_epoch(source.len(), target.len()) as u64;
    if per_epoch == 0 {
        return Err(Error::Empty("training set smaller than one batch"));
    }
    let epoch = iteration / per_epoch;
    let pos = (iteration % per_epoch) as usize * cfg.batch_size;
    let ox = epoch_order(cfg.seed, 0, epoch, source.len());
    let oy = epoch_order(cfg.seed, 1, epoch, target.len());
    let xs = (pos..pos + cfg.batch_size).map(|i| source.get(ox[i])).collect::<Result<Vec<_>>>()?;
    let ys = (pos..pos + cfg.batch_size).map(|i| target.get(oy[i])).collect::<Result<Vec<_>>>()?;
    Ok((stack(xs)?, stack(ys)?))
}

/// Hooks called by [`fit`] after every iteration and at the end.
pub trait TrainObserver<T> {
    fn on_step(&mut self, _state: &TrainState<T>, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn on_finish(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainObserver<T> for () {}

/// Collects every report.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub reports: Vec<LossReport>,
}

impl<T> TrainObserver<T> for Recorder {
    fn on_step(&mut self, _state: &TrainState<T>, report: &LossReport) -> Result<()> {
        self.reports.push(*report);
        Ok(())
    }
}

/// Train from scratch.
pub fn fit<T: Real, X: Dataset<T> + ?Sized, Y: Dataset<T> + ?Sized, O: TrainObserver<T>>(
    source: &X,
    target: &Y,
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<TrainState<T>> {
    let state = TrainState::new(cfg)?;
    resume(state, source, target, cfg, observer)
}

/// Continue training `state` until the configured number of iterations.
pub fn resume<T: Real, X: Dataset<T> + ?Sized, Y: Dataset<T> + ?Sized, O: TrainObserver<T>>(
    mut state: TrainState<T>,
    source: &X,
    target: &Y,
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<TrainState<T>> {
    if source.is_empty() {
        return Err(Error::Empty("source training set"));
    }
    if target.is_empty() {
        return Err(Error::Empty("target training set"));
    }
    let per_epoch = cfg.iterations_per_epoch(source.len(), target.len()) as u64;
    let total = cfg.total_iterations(source.len(), target.len());
    while state.iteration < total {
        let (x, y) = batch_at(cfg, source, target, state.iteration)?;
        let lr = cfg.lr_at((state.iteration / per_epoch) as usize);
        let report = train_step(&mut state, cfg, &x, &y, lr)?;
        observer.on_step(&state, &report)?;
    }
    observer.on_finish(&state)?;
    Ok(state)
}

/// Build a tiny configuration suitable for unit tests and smoke runs.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 1,
        num_patches: 16,
        embed_dim: 16,
        generator: GeneratorConfig { n_res_blocks: 1, base_channels: 4, ..Default::default() },
        discriminator: DiscriminatorConfig { base_channels: 4, n_layers: 1, ..Default::default() },
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, side: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::rand_uniform(&[1, 3, side, side], -1.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = sample_locations(16, 16, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        let a = sample_locations(100, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_locations(100, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_locations(4, 5, &mut rng), Err(Error::SampleCount { requested: 5, available: 4 }));
    }

    #[test]
    fn single_location_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            counts[sample_locations(16, 1, &mut rng).unwrap()[0]] += 1;
        }
        let p = 1.0 / 16.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "count {c} vs {mean} +- {sigma}");
        }
    }

    #[test]
    fn adam_matches_closed_form_first_step() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.5, 0.999);
        let g = Tensor::from_vec(&[2], vec![0.3, -2.0]).unwrap();
        adam.update(&mut store, &[Some(g)], 0.1).unwrap();
        let p = store.tensors()[0].data();
        // First step moves each coordinate by lr * sign(g) up to eps.
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn iteration_count_and_lr_schedule() {
        let cfg = TrainConfig { epochs: 1, ..tiny_config(0) };
        let x = data(10, 8, 1);
        let y = data(12, 8, 2);
        let mut rec = Recorder::default();
        let state = fit(&x, &y, &cfg, &mut rec).unwrap();
        assert_eq!(state.iteration, 10);
        assert_eq!(rec.reports.len(), 10);
        let lin = TrainConfig { epochs: 4, lr_schedule: LrSchedule::Linear { decay_start_epoch: 2 }, ..cfg };
        let lrs: Vec<f64> = (0..4).map(|e| lin.lr_at(e)).collect();
        assert!(lrs[0] == lin.lr && lrs[1] == lin.lr && lrs[2] < lrs[1] && lrs[3] < lrs[2] && lrs[3] > 0.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let cfg = tiny_config(0);
        let x = data(2, 8, 1);
        let none: Vec<Tensor<f32>> = Vec::new();
        assert!(matches!(fit(&none, &x, &cfg, &mut ()), Err(Error::Empty(_))));
        assert!(matches!(fit(&x, &none, &cfg, &mut ()), Err(Error::Empty(_))));
    }

    #[test]
    fn report_total_matches_weights() {
        let cfg = tiny_config(3);
        let mut state = TrainState::<f32>::new(&cfg).unwrap();
        let x = data(1, 16, 4).remove(0);
        let y = data(1, 16, 5).remove(0);
        let r = train_step(&mut state, &cfg, &x, &y, cfg.lr).unwrap();
        let w = &cfg.loss_weights;
        let expect = r.gan_g + w.lambda_sreg * r.sreg + w.lambda_x * r.patchnce_x + w.lambda_y * r.patchnce_y;
        assert!((r.total - expect).abs() < 1e-6);
        assert!(r.patchnce_x > 0.0 && r.patchnce_y > 0.0 && r.gan_d > 0.0);
    }

    #[test]
    fn snapshot_roundtrip_restores_everything() {
        let cfg = tiny_config(11);
        let x = data(3, 8, 1);
        let y = data(3, 8, 2);
        let state = fit(&x, &y, &cfg, &mut ()).unwrap();
        let snap = state.snapshot();
        let back = TrainState::<f32>::from_snapshot(&cfg, snap.clone()).unwrap();
        assert_eq!(back.snapshot(), snap);
        let mut broken = snap;
        broken.tensors.pop();
        assert!(matches!(TrainState::<f32>::from_snapshot(&cfg, broken), Err(Error::Checkpoint(_))));
    }
}
