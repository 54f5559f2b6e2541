//! Pose-conditioned GAN training: losses, same-identity pair sampling and
//! the alternating discriminator/generator optimization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalPoseSet;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::networks::{ArchConfig, Discriminator, Generator};
use crate::nn::{Adam, Parameters};
use crate::pose::{rasterize_pose, LimbSchema};
use crate::raster::{Image, PersonImage, PoseImage};
use crate::tensor::{stack_samples, Real, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// `log(1 - D(G(x)))`, minimized by the generator.
    Original,
    /// `-log D(G(x))`.
    #[default]
    NonSaturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossConfig {
    pub lambda1: f64,
    pub generator_adv_mode: AdversarialMode,
    /// When false the generator is trained on the L1 term alone.
    pub adversarial: bool,
}

impl Default for GanLossConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            generator_adv_mode: AdversarialMode::NonSaturating,
            adversarial: true,
        }
    }
}

impl GanLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub include_self_pairs: bool,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub loss: GanLossConfig,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            include_self_pairs: true,
            checkpoint_every: 0,
            loss: GanLossConfig::default(),
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "gan learning_rate and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!(
                "gan beta1 must be in [0, 1), got {}",
                self.beta1
            )));
        }
        self.loss.validate()
    }
}

/// Mean absolute elementwise difference.
pub fn l1_loss(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("l1_loss: {} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(sum / a.len() as f64)
}

pub fn image_l1(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("l1_loss: {:?} vs {:?}", a.dims(), b.dims())));
    }
    l1_loss(a.data(), b.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialLosses {
    /// `mean log D(real) + mean log(1 - D(fake))`
    pub l_gan: f64,
    pub gen_adv: f64,
    /// `-l_gan`
    pub l_d: f64,
}

/// Batch-averaged adversarial terms. Probabilities must lie strictly inside
/// (0, 1); callers clamp first.
pub fn adversarial_losses(d_real: &[f64], d_fake: &[f64], cfg: &GanLossConfig) -> Result<AdversarialLosses> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Domain(
            "adversarial_losses needs at least one probability".into(),
        ));
    }
    if let Some(p) = d_real.iter().chain(d_fake).find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain(format!("discriminator probability {p} outside (0, 1)")));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(p)).sum::<f64>() / v.len() as f64;
    let real_term = mean(d_real, &|p| p.ln());
    let fake_term = mean(d_fake, &|p| (1.0 - p).ln());
    let l_gan = real_term + fake_term;
    let gen_adv = match cfg.generator_adv_mode {
        AdversarialMode::Original => fake_term,
        AdversarialMode::NonSaturating => mean(d_fake, &|p| -p.ln()),
    };
    Ok(AdversarialLosses {
        l_gan,
        gen_adv,
        l_d: -l_gan,
    })
}

/// `gen_adv + lambda1 * l1`
pub fn generator_loss(gen_adv: f64, l1: f64, cfg: &GanLossConfig) -> f64 {
    gen_adv + cfg.lambda1 * l1
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c == p)
}

/// Images, rasterized poses and labels of the samples used for training.
#[derive(Clone, Debug)]
pub struct PairData {
    pub ids: Vec<String>,
    pub images: Vec<PersonImage>,
    pub poses: Vec<PoseImage>,
    pub labels: Vec<usize>,
}

impl PairData {
    pub fn from_samples(samples: &[&Sample], schema: &LimbSchema) -> Result<Self> {
        let mut out = Self {
            ids: Vec::with_capacity(samples.len()),
            images: Vec::with_capacity(samples.len()),
            poses: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            out.poses.push(rasterize_pose(&s.keypoints, schema, s.image.dims())?);
            out.images.push(s.image.clone());
            out.labels.push(s.identity);
            out.ids.push(s.id.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A (source, target) index pair of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: usize,
    pub target: usize,
    pub label: usize,
}

/// Uniform over identities that have a valid pair, then uniform over that
/// identity's ordered pairs.
#[derive(Clone, Debug)]
pub struct PairSampler {
    groups: Vec<(usize, Vec<usize>)>,
    include_self_pairs: bool,
}

impl PairSampler {
    pub fn new(labels: &[usize], include_self_pairs: bool) -> Result<Self> {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        let min = if include_self_pairs { 1 } else { 2 };
        let groups: Vec<(usize, Vec<usize>)> = by_label.into_iter().filter(|(_, v)| v.len() >= min).collect();
        if groups.is_empty() {
            return Err(Error::Sampling("no valid pairs".into()));
        }
        Ok(Self {
            groups,
            include_self_pairs,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainingPair {
        let (label, members) = &self.groups[rng.random_range(0..self.groups.len())];
        let n = members.len();
        let (i, j) = if self.include_self_pairs {
            (rng.random_range(0..n), rng.random_range(0..n))
        } else {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n - 1);
            (i, if j >= i { j + 1 } else { j })
        };
        TrainingPair {
            source: members[i],
            target: members[j],
            label: *label,
        }
    }

    /// Every ordered pair the sampler can produce, grouped by identity.
    pub fn all_pairs(&self) -> Vec<TrainingPair> {
        let mut out = Vec::new();
        for (label, members) in &self.groups {
            for &s in members {
                for &t in members {
                    if s != t || self.include_self_pairs {
                        out.push(TrainingPair {
                            source: s,
                            target: t,
                            label: *label,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Stacked `[3, N, H, W]` tensors of a batch of pairs.
pub struct PairBatch<T> {
    pub sources: Tensor<T>,
    pub poses: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Real> PairBatch<T> {
    pub fn assemble(data: &PairData, pairs: &[TrainingPair]) -> Result<Self> {
        let stack = |imgs: Vec<&Image>| -> Result<Tensor<T>> {
            let ts: Vec<Tensor<T>> = imgs.iter().map(|i| i.to_tensor()).collect();
            stack_samples(&ts.iter().collect::<Vec<_>>())
        };
        Ok(Self {
            sources: stack(pairs.iter().map(|p| &data.images[p.source]).collect())?,
            poses: stack(pairs.iter().map(|p| &data.poses[p.target]).collect())?,
            targets: stack(pairs.iter().map(|p| &data.images[p.target]).collect())?,
        })
    }
}

/// Discriminator loss `L_D = -(mean log D(real) + mean log(1 - D(fake)))`
/// and its parameter gradient.
#[allow(clippy::type_complexity)]
pub fn discriminator_objective<T: Real>(
    disc: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(AdversarialLosses, Discriminator<T>, Vec<f64>, Vec<f64>)> {
    let mut grad = disc.zeros_like();
    let real_trace = disc.forward(real)?;
    let fake_trace = disc.forward(fake)?;
    let p_real: Vec<f64> = real_trace.probs.iter().map(|p| p.to_f64().unwrap()).collect();
    let p_fake: Vec<f64> = fake_trace.probs.iter().map(|p| p.to_f64().unwrap()).collect();
    let cr: Vec<(f64, bool)> = p_real.iter().map(|&p| clamp_prob(p)).collect();
    let cf: Vec<(f64, bool)> = p_fake.iter().map(|&p| clamp_prob(p)).collect();
    let losses = adversarial_losses(
        &cr.iter().map(|c| c.0).collect::<Vec<_>>(),
        &cf.iter().map(|c| c.0).collect::<Vec<_>>(),
        &GanLossConfig::default(),
    )?;
    let (nr, nf) = (cr.len() as f64, cf.len() as f64);
    let d_real: Vec<T> = cr
        .iter()
        .map(|&(p, live)| T::lit(if live { -1.0 / (nr * p) } else { 0.0 }))
        .collect();
    let d_fake: Vec<T> = cf
        .iter()
        .map(|&(p, live)| T::lit(if live { 1.0 / (nf * (1.0 - p)) } else { 0.0 }))
        .collect();
    disc.backward(&real_trace, &d_real, &mut grad, false);
    disc.backward(&fake_trace, &d_fake, &mut grad, false);
    Ok((losses, grad, p_real, p_fake))
}

/// Generator terms for an existing forward pass: returns
/// `(gen_adv, l1, gradient)`.
fn generator_terms<T: Real>(
    gen: &Generator<T>,
    trace: &crate::networks::GeneratorTrace<T>,
    disc: &Discriminator<T>,
    targets: &Tensor<T>,
    cfg: &GanLossConfig,
) -> Result<(f64, f64, Generator<T>, Vec<f64>)> {
    let fake = &trace.output;
    if fake.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "generated {:?} vs targets {:?}",
            fake.shape(),
            targets.shape()
        )));
    }
    let n_elem = fake.len() as f64;
    let mut l1 = 0.0;
    let scale = cfg.lambda1 / n_elem;
    let mut d_out = Tensor::zeros(fake.shape());
    for ((d, &f), &t) in d_out.data_mut().iter_mut().zip(fake.data()).zip(targets.data()) {
        let diff = (f - t).to_f64().unwrap();
        l1 += diff.abs();
        // subgradient 0 at equality
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *d = T::lit(scale * sign);
    }
    l1 /= n_elem;

    let fake_trace = disc.forward(fake)?;
    let probs: Vec<f64> = fake_trace.probs.iter().map(|p| p.to_f64().unwrap()).collect();
    let clamped: Vec<(f64, bool)> = probs.iter().map(|&p| clamp_prob(p)).collect();
    let n = clamped.len() as f64;
    let gen_adv = match cfg.generator_adv_mode {
        AdversarialMode::Original => clamped.iter().map(|c| (1.0 - c.0).ln()).sum::<f64>() / n,
        AdversarialMode::NonSaturating => clamped.iter().map(|c| -c.0.ln()).sum::<f64>() / n,
    };
    if cfg.adversarial {
        let d_probs: Vec<T> = clamped
            .iter()
            .map(|&(p, live)| {
                let g = match cfg.generator_adv_mode {
                    AdversarialMode::Original => -1.0 / (n * (1.0 - p)),
                    AdversarialMode::NonSaturating => -1.0 / (n * p),
                };
                T::lit(if live { g } else { 0.0 })
            })
            .collect();
        let mut scratch = disc.zeros_like();
        let d_fake = disc
            .backward(&fake_trace, &d_probs, &mut scratch, true)
            .expect("input gradient requested");
        d_out.add_assign(&d_fake);
    }
    let mut grad = gen.zeros_like();
    gen.backward(trace, &d_out, &mut grad, false);
    Ok((gen_adv, l1, grad, probs))
}

/// Generator objective (adversarial term plus `lambda1` times L1) and its
/// gradient with respect to the generator parameters.
pub fn generator_objective<T: Real>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    batch: &PairBatch<T>,
    cfg: &GanLossConfig,
) -> Result<(f64, Generator<T>)> {
    let trace = gen.forward(&batch.sources, &batch.poses)?;
    let (adv, l1, grad, _) = generator_terms(gen, &trace, disc, &batch.targets, cfg)?;
    let adv = if cfg.adversarial { adv } else { 0.0 };
    Ok((generator_loss(adv, l1, cfg), grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateTarget {
    Discriminator,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_d: f64,
    pub gen_adv: f64,
    pub l1: f64,
    pub l_g: f64,
    pub d_real: f64,
    pub d_fake: f64,
    /// The order in which the two networks were updated this step.
    pub update_order: Vec<UpdateTarget>,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,l_d,gen_adv,l1,l_g";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_d, self.gen_adv, self.l1, self.l_g)
    }
}

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
}

impl GanState {
    pub fn new(generator: Generator<f32>, discriminator: Discriminator<f32>, cfg: &GanTrainConfig) -> Self {
        Self {
            gen_opt: Adam::new(&generator, cfg.learning_rate, cfg.beta1),
            disc_opt: Adam::new(&discriminator, cfg.learning_rate, cfg.beta1),
            generator,
            discriminator,
        }
    }
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut GanState,
    batch: &PairBatch<f32>,
    cfg: &GanLossConfig,
    step: usize,
) -> Result<StepMetrics> {
    let trace = state.generator.forward(&batch.sources, &batch.poses)?;
    let (d_losses, d_grad, p_real, p_fake) =
        discriminator_objective(&state.discriminator, &batch.targets, &trace.output)?;
    if !d_losses.l_d.is_finite() {
        return Err(Error::NonFinite {
            step,
            loss: "L_D".into(),
        });
    }
    state.disc_opt.update(&mut state.discriminator, &d_grad);

    // The generator sees the freshly updated discriminator.
    let (gen_adv, l1, g_grad, _) =
        generator_terms(&state.generator, &trace, &state.discriminator, &batch.targets, cfg)?;
    let adv = if cfg.adversarial { gen_adv } else { 0.0 };
    let l_g = generator_loss(adv, l1, cfg);
    for (name, v) in [("gen_adv", gen_adv), ("L1", l1), ("L_G", l_g)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                loss: name.into(),
            });
        }
    }
    if !g_grad.all_finite() || !d_grad.all_finite() {
        return Err(Error::NonFinite {
            step,
            loss: "gradient".into(),
        });
    }
    state.gen_opt.update(&mut state.generator, &g_grad);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(StepMetrics {
        step,
        l_d: d_losses.l_d,
        gen_adv,
        l1,
        l_g,
        d_real: mean(&p_real),
        d_fake: mean(&p_fake),
        update_order: vec![UpdateTarget::Discriminator, UpdateTarget::Generator],
    })
}

/// Resumable training loop. The pair-sampling RNG position is part of the
/// state so a resumed run continues the same batch sequence.
#[derive(Clone, Debug)]
pub struct GanTrainer {
    pub config: GanTrainConfig,
    pub state: GanState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub history: Vec<StepMetrics>,
}

impl GanTrainer {
    pub fn new(arch: &ArchConfig, config: &GanTrainConfig) -> Result<Self> {
        config.validate()?;
        let (g, d) = crate::networks::init_params::<f32>(arch, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Self {
            state: GanState::new(g, d, config),
            config: config.clone(),
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn next_batch(&mut self, data: &PairData, sampler: &PairSampler) -> Result<PairBatch<f32>> {
        let pairs: Vec<TrainingPair> = (0..self.config.batch_size)
            .map(|_| sampler.sample(&mut self.rng))
            .collect();
        PairBatch::assemble(data, &pairs)
    }

    /// Runs until `config.steps`, calling `on_step` after every step (for
    /// logging and checkpointing).
    pub fn run(
        &mut self,
        data: &PairData,
        mut on_step: impl FnMut(&GanTrainer, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        if self.step >= self.config.steps {
            return Ok(());
        }
        let sampler = PairSampler::new(&data.labels, self.config.include_self_pairs)?;
        while self.step < self.config.steps {
            let batch = self.next_batch(data, &sampler)?;
            let metrics = train_step(&mut self.state, &batch, &self.config.loss, self.step + 1)?;
            self.step += 1;
            self.history.push(metrics.clone());
            on_step(self, &metrics)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final state and loss history.
pub fn train_pn_gan(data: &PairData, arch: &ArchConfig, cfg: &GanTrainConfig) -> Result<(GanState, Vec<StepMetrics>)> {
    let mut trainer = GanTrainer::new(arch, cfg)?;
    trainer.run(data, |_, _| Ok(()))?;
    Ok((trainer.state, trainer.history))
}

/// The person rendered in each canonical pose, in canonical-set order.
pub fn synthesize_normalized(
    img: &PersonImage,
    canon: &CanonicalPoseSet,
    gen: &Generator<f32>,
) -> Result<Vec<PersonImage>> {
    if let Some(p) = canon.poses.iter().find(|p| p.dims() != img.dims()) {
        return Err(Error::Shape(format!(
            "person image {:?} vs canonical pose {:?}",
            img.dims(),
            p.dims()
        )));
    }
    let sources: Vec<&Image> = vec![img; canon.len()];
    let poses: Vec<&Image> = canon.poses.iter().collect();
    gen.generate_batch(&sources, &poses)
}

/// Mean L1 between generated and target images over the given pairs.
pub fn mean_reconstruction_l1(
    gen: &Generator<f32>,
    data: &PairData,
    pairs: &[TrainingPair],
    chunk: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for group in pairs.chunks(chunk.max(1)) {
        let sources: Vec<&Image> = group.iter().map(|p| &data.images[p.source]).collect();
        let poses: Vec<&Image> = group.iter().map(|p| &data.poses[p.target]).collect();
        for (out, p) in gen.generate_batch(&sources, &poses)?.iter().zip(group) {
            total += image_l1(out, &data.images[p.target])?;
        }
    }
    Ok(total / pairs.len().max(1) as f64)
}
