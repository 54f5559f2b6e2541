//! Pose-conditioned generator and patch discriminator.
//!
//! Generator: 6-channel input (person image ‖ pose image) → stem conv →
//! two stride-2 down convs → residual blocks at the bottleneck → two
//! nearest-upsample convs → output conv with `tanh`. Every conv except the
//! output one is followed by instance normalization and ReLU.
//!
//! Discriminator: a stack of stride-2 convs with leaky ReLU, a 1-channel
//! head conv, a logistic per patch, then the spatial mean per sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvCache, InstanceNorm, NormCache, Parameters};
use crate::raster::Image;
use crate::tensor::{concat_channels, stack_samples, unstack_samples, MapShape, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    /// `[height, width]`
    pub input_dims: [usize; 2],
    pub discriminator_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            n_res_blocks: 9,
            input_dims: [64, 32],
            discriminator_layers: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_dims;
        if self.n_res_blocks == 0 {
            return Err(Error::Config("n_res_blocks must be at least 1".into()));
        }
        if self.base_channels == 0 || self.discriminator_layers == 0 {
            return Err(Error::Config(
                "base_channels and discriminator_layers must be positive".into(),
            ));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input dims {h}x{w} must be positive and divisible by 4"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.input_dims[0], self.input_dims[1])
    }
}

/// Convolution → instance norm → optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm<T> {
    pub conv: Conv2d<T>,
    pub norm: InstanceNorm<T>,
}

struct ConvNormTrace<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    out: Tensor<T>,
}

impl<T: Real> ConvNorm<T> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, stride, 1, false, 2.0, rng),
            norm: InstanceNorm::new(cout),
        }
    }

    fn forward(&self, x: &Tensor<T>, relu: bool) -> ConvNormTrace<T> {
        let (h, conv) = self.conv.forward(x);
        let (n, norm) = self.norm.forward(&h);
        let out = if relu { nn::relu(&n) } else { n };
        ConvNormTrace { conv, norm, out }
    }

    fn backward(
        &self,
        trace: &ConvNormTrace<T>,
        dy: &Tensor<T>,
        relu: bool,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let dn = if relu {
            nn::relu_backward(&trace.out, dy)
        } else {
            dy.clone()
        };
        let dh = self.norm.backward(&trace.norm, &dn, &mut grad.norm);
        self.conv.backward(&trace.conv, &dh, &mut grad.conv, need_input_grad)
    }
}

impl<T: Real> Parameters<T> for ConvNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.conv.visit(&format!("{prefix}conv."), f);
        self.norm.visit(&format!("{prefix}norm."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_mut(&format!("{prefix}conv."), f);
        self.norm.visit_mut(&format!("{prefix}norm."), f);
    }
}

/// `y = x + norm(conv(relu(norm(conv(x)))))`
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub first: ConvNorm<T>,
    pub second: ConvNorm<T>,
}

impl<T: Real> Parameters<T> for ResidualBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.first.visit(&format!("{prefix}first."), f);
        self.second.visit(&format!("{prefix}second."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.first.visit_mut(&format!("{prefix}first."), f);
        self.second.visit_mut(&format!("{prefix}second."), f);
    }
}

impl<T: Real> ResidualBlock<T> {
    /// Residual branch only, for inspection and tests.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.first.forward(x, true);
        let b = self.second.forward(&a.out, false);
        nn::add(x, &b.out)
    }
}

/// Parameters of the conditional generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub stem: ConvNorm<T>,
    pub down: Vec<ConvNorm<T>>,
    pub res: Vec<ResidualBlock<T>>,
    pub up: Vec<ConvNorm<T>>,
    pub output: Conv2d<T>,
    pub dims: (usize, usize),
}

pub type GeneratorParams = Generator<f32>;

/// Intermediate values of a generator pass, needed by [`Generator::backward`].
pub struct GeneratorTrace<T> {
    stem: ConvNormTrace<T>,
    down: Vec<ConvNormTrace<T>>,
    res: Vec<(ConvNormTrace<T>, ConvNormTrace<T>)>,
    up: Vec<ConvNormTrace<T>>,
    output_conv: ConvCache<T>,
    pub output: Tensor<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let c = arch.base_channels;
        Ok(Self {
            stem: ConvNorm::new(6, c, 1, rng),
            down: vec![ConvNorm::new(c, 2 * c, 2, rng), ConvNorm::new(2 * c, 4 * c, 2, rng)],
            res: (0..arch.n_res_blocks)
                .map(|_| ResidualBlock {
                    first: ConvNorm::new(4 * c, 4 * c, 1, rng),
                    second: ConvNorm::new(4 * c, 4 * c, 1, rng),
                })
                .collect(),
            up: vec![ConvNorm::new(4 * c, 2 * c, 1, rng), ConvNorm::new(2 * c, c, 1, rng)],
            output: Conv2d::new(c, 3, 3, 1, 1, true, 1.0, rng),
            dims: arch.dims(),
        })
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            stem: cast_convnorm(&self.stem),
            down: self.down.iter().map(cast_convnorm).collect(),
            res: self
                .res
                .iter()
                .map(|b| ResidualBlock {
                    first: cast_convnorm(&b.first),
                    second: cast_convnorm(&b.second),
                })
                .collect(),
            up: self.up.iter().map(cast_convnorm).collect(),
            output: cast_conv(&self.output),
            dims: self.dims,
        }
    }

    fn check_batch(&self, images: &Tensor<T>, poses: &Tensor<T>) -> Result<()> {
        let (mi, mp) = (MapShape::of(images), MapShape::of(poses));
        let expected = (3, self.dims.0, self.dims.1);
        if (mi.channels, mi.height, mi.width) != expected
            || (mp.channels, mp.height, mp.width) != expected
            || mi.batch != mp.batch
        {
            return Err(Error::Shape(format!(
                "generator expects image and pose batches of [3, N, {}, {}], got image {:?} and pose {:?}",
                self.dims.0,
                self.dims.1,
                images.shape(),
                poses.shape()
            )));
        }
        Ok(())
    }

    /// Batched forward pass on `[3, N, H, W]` images and poses.
    pub fn forward(&self, images: &Tensor<T>, poses: &Tensor<T>) -> Result<GeneratorTrace<T>> {
        self.check_batch(images, poses)?;
        let x = concat_channels(images, poses)?;
        let stem = self.stem.forward(&x, true);
        let mut down = Vec::with_capacity(self.down.len());
        let mut h = &stem.out;
        for layer in &self.down {
            down.push(layer.forward(h, true));
            h = &down.last().unwrap().out;
        }
        let mut res = Vec::with_capacity(self.res.len());
        let mut cur = h.clone();
        for block in &self.res {
            let a = block.first.forward(&cur, true);
            let b = block.second.forward(&a.out, false);
            cur = nn::add(&cur, &b.out);
            res.push((a, b));
        }
        let mut up = Vec::with_capacity(self.up.len());
        for layer in &self.up {
            let u = nn::upsample2x(&cur);
            let t = layer.forward(&u, true);
            cur = t.out.clone();
            up.push(t);
        }
        let (logits, output_conv) = self.output.forward(&cur);
        let output = nn::tanh(&logits);
        Ok(GeneratorTrace {
            stem,
            down,
            res,
            up,
            output_conv,
            output,
        })
    }

    /// Accumulates parameter gradients for `d_output` (same shape as the
    /// generated batch) into `grad`. Returns the gradient with respect to the
    /// person-image input when requested.
    pub fn backward(
        &self,
        trace: &GeneratorTrace<T>,
        d_output: &Tensor<T>,
        grad: &mut Self,
        need_image_grad: bool,
    ) -> Option<Tensor<T>> {
        let d_logits = nn::tanh_backward(&trace.output, d_output);
        let mut d = self
            .output
            .backward(&trace.output_conv, &d_logits, &mut grad.output, true)
            .unwrap();
        for ((layer, t), g) in self.up.iter().zip(&trace.up).zip(grad.up.iter_mut()).rev() {
            let du = layer.backward(t, &d, true, g, true).unwrap();
            d = nn::upsample2x_backward(&du);
        }
        for ((block, (a, b)), g) in self.res.iter().zip(&trace.res).zip(grad.res.iter_mut()).rev() {
            let da = block.second.backward(b, &d, false, &mut g.second, true).unwrap();
            let dx = block.first.backward(a, &da, true, &mut g.first, true).unwrap();
            d.add_assign(&dx);
        }
        for ((layer, t), g) in self.down.iter().zip(&trace.down).zip(grad.down.iter_mut()).rev() {
            d = layer.backward(t, &d, true, g, true).unwrap();
        }
        let dx = self
            .stem
            .backward(&trace.stem, &d, true, &mut grad.stem, need_image_grad)?;
        // The first three input channels are the person image.
        let ms = MapShape::of(&dx);
        let keep = 3 * ms.batch * ms.plane();
        Tensor::from_vec(&[3, ms.batch, ms.height, ms.width], dx.data()[..keep].to_vec()).ok()
    }
}

impl Generator<f32> {
    /// Generates one image of the person in `image` under `pose`.
    pub fn generate(&self, image: &Image, pose: &Image) -> Result<Image> {
        if image.dims() != pose.dims() {
            return Err(Error::Shape(format!(
                "person image {:?} and pose image {:?} differ",
                image.dims(),
                pose.dims()
            )));
        }
        Ok(self.generate_batch(&[image], &[pose])?.remove(0))
    }

    pub fn generate_batch(&self, images: &[&Image], poses: &[&Image]) -> Result<Vec<Image>> {
        let it: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
        let pt: Vec<Tensor<f32>> = poses.iter().map(|i| i.to_tensor()).collect();
        let ib = stack_samples(&it.iter().collect::<Vec<_>>())?;
        let pb = stack_samples(&pt.iter().collect::<Vec<_>>())?;
        let trace = self.forward(&ib, &pb)?;
        unstack_samples(&trace.output).iter().map(Image::from_tensor).collect()
    }
}

impl<T: Real> Parameters<T> for Generator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.stem.visit(&format!("{prefix}stem."), f);
        for (i, l) in self.down.iter().enumerate() {
            l.visit(&format!("{prefix}down{i}."), f);
        }
        for (i, b) in self.res.iter().enumerate() {
            b.visit(&format!("{prefix}res{i}."), f);
        }
        for (i, l) in self.up.iter().enumerate() {
            l.visit(&format!("{prefix}up{i}."), f);
        }
        self.output.visit(&format!("{prefix}output."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_mut(&format!("{prefix}stem."), f);
        for (i, l) in self.down.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}down{i}."), f);
        }
        for (i, b) in self.res.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}res{i}."), f);
        }
        for (i, l) in self.up.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}up{i}."), f);
        }
        self.output.visit_mut(&format!("{prefix}output."), f);
    }
}

/// Parameters of the patch discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub layers: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
    pub dims: (usize, usize),
}

pub type DiscriminatorParams = Discriminator<f32>;

pub struct DiscriminatorTrace<T> {
    caches: Vec<ConvCache<T>>,
    activations: Vec<Tensor<T>>,
    head: ConvCache<T>,
    patch_probs: Tensor<T>,
    /// Per-sample probability of being real.
    pub probs: Vec<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.discriminator_layers);
        let mut cin = 3;
        for i in 0..arch.discriminator_layers {
            let cout = arch.base_channels << i;
            layers.push(Conv2d::new(
                cin,
                cout,
                3,
                2,
                1,
                true,
                2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE),
                rng,
            ));
            cin = cout;
        }
        Ok(Self {
            layers,
            head: Conv2d::new(cin, 1, 3, 1, 1, true, 1.0, rng),
            dims: arch.dims(),
        })
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            layers: self.layers.iter().map(cast_conv).collect(),
            head: cast_conv(&self.head),
            dims: self.dims,
        }
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<DiscriminatorTrace<T>> {
        let ms = MapShape::of(images);
        if (ms.channels, ms.height, ms.width) != (3, self.dims.0, self.dims.1) {
            return Err(Error::Shape(format!(
                "discriminator expects [3, N, {}, {}], got {:?}",
                self.dims.0,
                self.dims.1,
                images.shape()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = activations.last().unwrap_or(images);
            let (h, cache) = layer.forward(input);
            caches.push(cache);
            activations.push(nn::leaky_relu(&h, LEAKY_SLOPE));
        }
        let (logits, head) = self.head.forward(activations.last().unwrap());
        let patch_probs = nn::sigmoid(&logits);
        let patches = MapShape::of(&patch_probs).plane();
        let probs = patch_probs
            .data()
            .chunks(patches)
            .map(average_patch_probabilities)
            .collect();
        Ok(DiscriminatorTrace {
            caches,
            activations,
            head,
            patch_probs,
            probs,
        })
    }

    /// Backpropagates `d_probs` (one value per sample) and optionally returns
    /// the gradient with respect to the input images.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<T>,
        d_probs: &[T],
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let ms = MapShape::of(&trace.patch_probs);
        let m = T::from_usize(ms.plane()).unwrap();
        let mut d_mean = Tensor::zeros(trace.patch_probs.shape());
        for (p, &g) in d_mean.data_mut().chunks_mut(ms.plane()).zip(d_probs) {
            p.fill(g / m);
        }
        let d_logits = nn::sigmoid_backward(&trace.patch_probs, &d_mean);
        let mut d = self
            .head
            .backward(&trace.head, &d_logits, &mut grad.head, true)
            .unwrap();
        for i in (0..self.layers.len()).rev() {
            let dh = nn::leaky_relu_backward(&trace.activations[i], &d, LEAKY_SLOPE);
            let need = i > 0 || need_input_grad;
            d = self.layers[i].backward(&trace.caches[i], &dh, &mut grad.layers[i], need)?;
        }
        Some(d)
    }

    pub fn probability(&self, image: &Image) -> Result<T> {
        let t = stack_samples(&[&image.to_tensor::<T>()])?;
        Ok(self.forward(&t)?.probs[0])
    }
}

impl<T: Real> Parameters<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layer{i}."), f);
        }
        self.head.visit_mut(&format!("{prefix}head."), f);
    }
}

/// Spatial mean of per-patch probabilities.
pub fn average_patch_probabilities<T: Real>(patches: &[T]) -> T {
    let sum = patches.iter().fold(T::zero(), |a, &v| a + v);
    sum / T::from_usize(patches.len()).unwrap()
}

/// Deterministically initializes both networks from `seed`.
pub fn init_params<T: Real>(arch: &ArchConfig, seed: u64) -> Result<(Generator<T>, Discriminator<T>)> {
    arch.validate()?;
    let mut g_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d_rng = ChaCha8Rng::seed_from_u64(seed);
    d_rng.set_stream(1);
    Ok((Generator::new(arch, &mut g_rng)?, Discriminator::new(arch, &mut d_rng)?))
}

pub(crate) fn cast_conv<T: Real, U: Real>(c: &Conv2d<T>) -> Conv2d<U> {
    Conv2d {
        weight: c.weight.cast(),
        bias: c.bias.as_ref().map(|b| b.cast()),
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
    }
}

fn cast_convnorm<T: Real, U: Real>(c: &ConvNorm<T>) -> ConvNorm<U> {
    ConvNorm {
        conv: cast_conv(&c.conv),
        norm: InstanceNorm {
            scale: c.norm.scale.cast(),
            offset: c.norm.offset.cast(),
            eps: c.norm.eps,
        },
    }
}
