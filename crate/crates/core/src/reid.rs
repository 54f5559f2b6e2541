//! Identity-classification backbones and multi-stage feature extraction.
//!
//! Four residual stages, each halving the resolution. The pooled outputs of
//! the tapped stages are concatenated and projected to the feature vector;
//! a classifier head on top of the (dropped-out) feature is used only for
//! training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalPoseSet;
use crate::error::{Error, Result};
use crate::gan::synthesize_normalized;
use crate::networks::Generator;
use crate::nn::{self, Adam, Conv2d, ConvCache, Linear, Parameters};
use crate::raster::{Image, PersonImage};
use crate::tensor::{stack_samples, MapShape, Real, Tensor};

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneArch {
    /// Channels of the first stage; stage `i` has `base_channels * 2^i`.
    pub base_channels: usize,
    pub feature_dim: usize,
    /// Stages whose pooled outputs feed the projection.
    pub tap_stages: Vec<usize>,
    /// `[height, width]`
    pub input_dims: [usize; 2],
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            base_channels: 8,
            feature_dim: 256,
            tap_stages: vec![1, 2, 3],
            input_dims: [64, 32],
        }
    }
}

impl BackboneArch {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "backbone base_channels and feature_dim must be positive".into(),
            ));
        }
        if self.tap_stages.is_empty() {
            return Err(Error::Config("tap_stages must be non-empty".into()));
        }
        if let Some(s) = self.tap_stages.iter().find(|&&s| s >= NUM_STAGES) {
            return Err(Error::Config(format!("tap stage {s} out of range (0..{NUM_STAGES})")));
        }
        let mut sorted = self.tap_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.tap_stages.len() {
            return Err(Error::Config("tap_stages contains duplicates".into()));
        }
        let [h, w] = self.input_dims;
        if h == 0 || w == 0 {
            return Err(Error::Config("backbone input_dims must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Length of the concatenated tap vector.
    pub fn tap_width(&self) -> usize {
        self.tap_stages.iter().map(|&s| self.stage_channels(s)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidTrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    /// Applied to the feature vector before the classifier head.
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Backbone B also trains on the original images when set.
    pub include_originals: bool,
}

impl Default for ReidTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3.5e-4,
            beta1: 0.9,
            batch_size: 16,
            dropout: 0.5,
            epochs: 30,
            seed: 0,
            include_originals: false,
        }
    }
}

impl ReidTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "reid learning_rate and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!(
                "reid beta1 must be in [0, 1), got {}",
                self.beta1
            )));
        }
        Ok(())
    }
}

/// Strided downsampling conv followed by a residual pair of convs, all with
/// bias and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub down: Conv2d<T>,
    pub first: Conv2d<T>,
    pub second: Conv2d<T>,
}

struct StageTrace<T> {
    down: ConvCache<T>,
    h: Tensor<T>,
    first: ConvCache<T>,
    a: Tensor<T>,
    second: ConvCache<T>,
    out: Tensor<T>,
}

impl<T: Real> Stage<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: Conv2d::new(cin, cout, 3, 2, 1, true, 2.0, rng),
            first: Conv2d::new(cout, cout, 3, 1, 1, true, 2.0, rng),
            // small residual branch at init keeps activations bounded without norms
            second: Conv2d::new(cout, cout, 3, 1, 1, true, 0.5, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> StageTrace<T> {
        let (h, down) = self.down.forward(x);
        let h = nn::relu(&h);
        let (a, first) = self.first.forward(&h);
        let a = nn::relu(&a);
        let (r, second) = self.second.forward(&a);
        let out = nn::relu(&nn::add(&h, &r));
        StageTrace {
            down,
            h,
            first,
            a,
            second,
            out,
        }
    }

    fn backward(&self, t: &StageTrace<T>, d_out: &Tensor<T>, grad: &mut Self, need_input: bool) -> Option<Tensor<T>> {
        let d_sum = nn::relu_backward(&t.out, d_out);
        let da = self.second.backward(&t.second, &d_sum, &mut grad.second, true).unwrap();
        let da = nn::relu_backward(&t.a, &da);
        let mut dh = self.first.backward(&t.first, &da, &mut grad.first, true).unwrap();
        dh.add_assign(&d_sum);
        let dh = nn::relu_backward(&t.h, &dh);
        self.down.backward(&t.down, &dh, &mut grad.down, need_input)
    }
}

impl<T: Real> Parameters<T> for Stage<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.down.visit(&format!("{prefix}down."), f);
        self.first.visit(&format!("{prefix}first."), f);
        self.second.visit(&format!("{prefix}second."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.down.visit_mut(&format!("{prefix}down."), f);
        self.first.visit_mut(&format!("{prefix}first."), f);
        self.second.visit_mut(&format!("{prefix}second."), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub arch: BackboneArch,
    pub stages: Vec<Stage<T>>,
    pub projection: Linear<T>,
    pub classifier: Linear<T>,
}

pub type BackboneParams = Backbone<f32>;

pub struct BackboneTrace<T> {
    stages: Vec<StageTrace<T>>,
    taps: Tensor<T>,
    /// `[feature_dim, N]`
    pub features: Tensor<T>,
    dropped: Tensor<T>,
    mask: Option<Vec<T>>,
    /// `[num_classes, N]`
    pub logits: Tensor<T>,
}

impl<T: Real> Backbone<T> {
    pub fn new(arch: &BackboneArch, num_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = 3;
        for s in 0..NUM_STAGES {
            let cout = arch.stage_channels(s);
            stages.push(Stage::new(cin, cout, &mut rng));
            cin = cout;
        }
        Ok(Self {
            projection: Linear::new(arch.tap_width(), arch.feature_dim, 1.0, &mut rng),
            // near-zero head: logits start almost uniform
            classifier: Linear::new(arch.feature_dim, num_classes, 1e-4, &mut rng),
            stages,
            arch: arch.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_features()
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Backbone {
            arch: self.arch.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: crate::networks::cast_conv(&s.down),
                    first: crate::networks::cast_conv(&s.first),
                    second: crate::networks::cast_conv(&s.second),
                })
                .collect(),
            projection: lin(&self.projection),
            classifier: lin(&self.classifier),
        }
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let ms = MapShape::of(images);
        let [h, w] = self.arch.input_dims;
        if (ms.channels, ms.height, ms.width) != (3, h, w) {
            return Err(Error::Shape(format!(
                "backbone expects [3, N, {h}, {w}], got {:?}",
                images.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass on `[3, N, H, W]`. `mask` (length `feature_dim * N`)
    /// applies dropout before the classifier; `None` is evaluation mode.
    pub fn forward(&self, images: &Tensor<T>, mask: Option<Vec<T>>) -> Result<BackboneTrace<T>> {
        self.check_input(images)?;
        let mut stages: Vec<StageTrace<T>> = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            let t = stage.forward(stages.last().map_or(images, |s| &s.out));
            stages.push(t);
        }
        let n = MapShape::of(images).batch;
        let mut taps = Vec::with_capacity(self.arch.tap_width() * n);
        for &s in &self.arch.tap_stages {
            taps.extend_from_slice(nn::global_avg_pool(&stages[s].out).data());
        }
        let taps = Tensor::from_vec(&[self.arch.tap_width(), n], taps)?;
        let features = self.projection.forward(&taps);
        let dropped = match &mask {
            Some(m) => {
                if m.len() != features.len() {
                    return Err(Error::Shape(format!(
                        "dropout mask has {} entries, expected {}",
                        m.len(),
                        features.len()
                    )));
                }
                let mut d = features.clone();
                d.data_mut().iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
                d
            }
            None => features.clone(),
        };
        let logits = self.classifier.forward(&dropped);
        Ok(BackboneTrace {
            stages,
            taps,
            features,
            dropped,
            mask,
            logits,
        })
    }

    /// Accumulates parameter gradients for `d_logits` into `grad`.
    pub fn backward(&self, trace: &BackboneTrace<T>, d_logits: &Tensor<T>, grad: &mut Self) {
        let mut d_feat = self.classifier.backward(&trace.dropped, d_logits, &mut grad.classifier);
        if let Some(m) = &trace.mask {
            d_feat.data_mut().iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        let d_taps = self.projection.backward(&trace.taps, &d_feat, &mut grad.projection);
        let n = trace.features.shape()[1];
        let mut tap_grads: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        let mut offset = 0;
        for &s in &self.arch.tap_stages {
            let c = self.arch.stage_channels(s);
            let slice = d_taps.data()[offset * n..(offset + c) * n].to_vec();
            offset += c;
            let dy = Tensor::from_vec(&[c, n], slice).expect("tap slice");
            tap_grads.insert(s, nn::global_avg_pool_backward(&dy, MapShape::of(&trace.stages[s].out)));
        }
        let last_needed = *self.arch.tap_stages.iter().max().unwrap();
        let mut d: Option<Tensor<T>> = None;
        for s in (0..=last_needed).rev() {
            let mut d_out = d.take().unwrap_or_else(|| Tensor::zeros(trace.stages[s].out.shape()));
            if let Some(g) = tap_grads.get(&s) {
                d_out.add_assign(g);
            }
            d = self.stages[s].backward(&trace.stages[s], &d_out, &mut grad.stages[s], s > 0);
        }
    }
}

impl<T: Real> Parameters<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("{prefix}stage{i}."), f);
        }
        self.projection.visit(&format!("{prefix}projection."), f);
        self.classifier.visit(&format!("{prefix}classifier."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}stage{i}."), f);
        }
        self.projection.visit_mut(&format!("{prefix}projection."), f);
        self.classifier.visit_mut(&format!("{prefix}classifier."), f);
    }
}

impl Backbone<f32> {
    /// Feature vectors of `images` in evaluation mode.
    pub fn extract_features(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let ts: Vec<Tensor<f32>> = chunk.iter().map(|i| i.to_tensor()).collect();
            let batch = stack_samples(&ts.iter().collect::<Vec<_>>())?;
            let trace = self.forward(&batch, None)?;
            let (f, n) = (trace.features.shape()[0], trace.features.shape()[1]);
            let data = trace.features.data();
            out.extend((0..n).map(|j| (0..f).map(|i| data[i * n + j]).collect::<Vec<f32>>()));
        }
        Ok(out)
    }

    pub fn extract_feature(&self, image: &Image) -> Result<Vec<f32>> {
        Ok(self.extract_features(&[image])?.remove(0))
    }
}

/// Softmax cross-entropy of one logit vector.
pub fn identity_ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let t = Tensor::from_vec(&[logits.len(), 1], logits.to_vec())?;
    Ok(nn::softmax_cross_entropy(&t, &[label]).0)
}

/// Batch cross-entropy objective and parameter gradient.
pub fn classification_objective<T: Real>(
    backbone: &Backbone<T>,
    images: &Tensor<T>,
    classes: &[usize],
    mask: Option<Vec<T>>,
) -> Result<(T, Backbone<T>)> {
    let trace = backbone.forward(images, mask)?;
    if let Some(c) = classes.iter().find(|&&c| c >= backbone.num_classes()) {
        return Err(Error::Domain(format!("class {c} out of range")));
    }
    let (loss, d_logits) = nn::softmax_cross_entropy(&trace.logits, classes);
    let mut grad = backbone.zeros_like();
    backbone.backward(&trace, &d_logits, &mut grad);
    Ok((loss, grad))
}

/// Maps arbitrary identity labels to dense class indices (sorted order).
pub fn label_map(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut uniq: Vec<usize> = labels.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    uniq.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReidTrainReport {
    /// Evaluation-mode training accuracy after each epoch.
    pub accuracy_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub first_batch_loss: Option<f64>,
}

pub fn training_accuracy(backbone: &Backbone<f32>, images: &[&Image], classes: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (chunk, labels) in images.chunks(32).zip(classes.chunks(32)) {
        let ts: Vec<Tensor<f32>> = chunk.iter().map(|i| i.to_tensor()).collect();
        let trace = backbone.forward(&stack_samples(&ts.iter().collect::<Vec<_>>())?, None)?;
        let (c, n) = (trace.logits.shape()[0], trace.logits.shape()[1]);
        let x = trace.logits.data();
        for (j, &label) in labels.iter().enumerate() {
            let best = (0..c).fold(0, |b, i| if x[i * n + j] > x[b * n + j] { i } else { b });
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / images.len().max(1) as f64)
}

/// Mini-batch identity classification training.
pub fn train_identity_classifier(
    images: &[&PersonImage],
    labels: &[usize],
    arch: &BackboneArch,
    cfg: &ReidTrainConfig,
) -> Result<(Backbone<f32>, ReidTrainReport)> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let map = label_map(labels);
    if map.len() < 2 {
        return Err(Error::Config(format!(
            "identity classification needs at least 2 identities, got {}",
            map.len()
        )));
    }
    let classes: Vec<usize> = labels.iter().map(|l| map[l]).collect();
    let mut backbone = Backbone::<f32>::new(arch, map.len(), cfg.seed)?;
    let mut opt = Adam::new(&backbone, cfg.learning_rate, cfg.beta1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let tensors: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    let mut report = ReidTrainReport::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = stack_samples(&idx.iter().map(|&i| &tensors[i]).collect::<Vec<_>>())?;
            let batch_classes: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            let mask =
                (cfg.dropout > 0.0).then(|| nn::dropout_mask(arch.feature_dim * idx.len(), cfg.dropout, &mut rng));
            let (loss, grad) = classification_objective(&backbone, &batch, &batch_classes, mask)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    loss: "identity cross-entropy".into(),
                });
            }
            report.first_batch_loss.get_or_insert(loss);
            epoch_loss += loss;
            batches += 1;
            opt.update(&mut backbone, &grad);
        }
        report.loss_history.push(epoch_loss / batches.max(1) as f64);
        report
            .accuracy_history
            .push(training_accuracy(&backbone, images, &classes)?);
    }
    Ok((backbone, report))
}

/// Pose-normalized training set: the 8 canonical-pose syntheses of every
/// image, each labeled with its source identity.
pub fn synthesize_training_set(
    images: &[&PersonImage],
    labels: &[usize],
    generator: &Generator<f32>,
    canon: &CanonicalPoseSet,
) -> Result<(Vec<PersonImage>, Vec<usize>)> {
    let mut out_images = Vec::with_capacity(images.len() * canon.len());
    let mut out_labels = Vec::with_capacity(images.len() * canon.len());
    for (img, &label) in images.iter().zip(labels) {
        for s in synthesize_normalized(img, canon, generator)? {
            out_images.push(s);
            out_labels.push(label);
        }
    }
    Ok((out_images, out_labels))
}

/// Trains backbone B on pose-normalized syntheses of the training images.
pub fn train_backbone_b(
    images: &[&PersonImage],
    labels: &[usize],
    generator: &Generator<f32>,
    canon: &CanonicalPoseSet,
    arch: &BackboneArch,
    cfg: &ReidTrainConfig,
) -> Result<(Backbone<f32>, ReidTrainReport)> {
    let (mut synth, mut synth_labels) = synthesize_training_set(images, labels, generator, canon)?;
    if cfg.include_originals {
        synth.extend(images.iter().map(|i| (*i).clone()));
        synth_labels.extend_from_slice(labels);
    }
    let refs: Vec<&PersonImage> = synth.iter().collect();
    train_identity_classifier(&refs, &synth_labels, arch, cfg)
}
