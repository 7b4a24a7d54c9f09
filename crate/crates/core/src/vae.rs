//! Convolutional variational autoencoder.
//!
//! Encoder: three 3x3 convolutions (stride 2, 2, 1) with ReLU, then two linear
//! heads for the posterior mean and log-variance. Decoder mirrors it with a
//! linear layer and three transposed convolutions ending in a sigmoid.
//! Loss per image is pixelwise binary cross-entropy plus the KL term.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::latent::{EncoderOutput, LatentVector};
use crate::nn::layers::{relu_backward_in_place, relu_in_place, ConvCache, ConvTransposeCache};
use crate::nn::{named, Adam, Conv2d, ConvTranspose2d, Linear, Parameters, Scalar, Tensor};

/// Clipping applied to decoder probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Latent coordinates are clamped to this magnitude before decoding; the
/// decoder output is saturated long before it.
pub const DECODE_CLAMP: f64 = 1e4;

const BATCH_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub latent_dim: usize,
    /// Encoder convolution widths; the decoder uses them in reverse.
    pub channels: [usize; 3],
}

impl VaeArch {
    pub fn new(latent_dim: usize) -> Self {
        VaeArch {
            latent_dim,
            channels: [32, 64, 64],
        }
    }

    fn bottleneck(&self) -> usize {
        self.channels[2] * 7 * 7
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv: [Conv2d<T>; 3],
    pub mean: Linear<T>,
    pub log_var: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub fc: Linear<T>,
    pub deconv: [ConvTranspose2d<T>; 3],
    channels: [usize; 3],
}

/// Intermediate values of an encoder pass needed for backprop.
pub struct EncoderTape<T> {
    caches: Vec<ConvCache<T>>,
    acts: Vec<Vec<T>>,
    dims: Vec<(usize, usize)>,
}

pub struct DecoderTape<T> {
    hidden: Vec<T>,
    caches: Vec<ConvTransposeCache<T>>,
    acts: Vec<Vec<T>>,
    dims: Vec<(usize, usize)>,
}

impl<T: Scalar> Encoder<T> {
    fn new(arch: &VaeArch, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, c2] = arch.channels;
        Encoder {
            conv: [
                Conv2d::new(1, c0, 3, 2, 1, rng),
                Conv2d::new(c0, c1, 3, 2, 1, rng),
                Conv2d::new(c1, c2, 3, 1, 1, rng),
            ],
            mean: Linear::new(arch.bottleneck(), arch.latent_dim, rng),
            log_var: Linear::new(arch.bottleneck(), arch.latent_dim, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Encoder {
            conv: [
                self.conv[0].zeros_like(),
                self.conv[1].zeros_like(),
                self.conv[2].zeros_like(),
            ],
            mean: self.mean.zeros_like(),
            log_var: self.log_var.zeros_like(),
        }
    }

    /// Returns `(mean, log_var, tape)`, each `n x latent_dim`.
    pub fn forward(&self, x: &[T], n: usize) -> (Vec<T>, Vec<T>, EncoderTape<T>) {
        let mut tape = EncoderTape {
            caches: Vec::with_capacity(3),
            acts: Vec::with_capacity(3),
            dims: Vec::with_capacity(3),
        };
        let (mut h, mut w) = (IMAGE_SIDE, IMAGE_SIDE);
        for conv in &self.conv {
            let input = tape.acts.last().map(Vec::as_slice).unwrap_or(x);
            let (mut y, cache) = conv.forward(input, n, h, w);
            relu_in_place(&mut y);
            tape.dims.push((h, w));
            (h, w) = conv.out_size(h, w);
            tape.caches.push(cache);
            tape.acts.push(y);
        }
        let flat = tape.acts.last().unwrap();
        let mean = self.mean.forward(flat, n);
        let log_var = self.log_var.forward(flat, n);
        (mean, log_var, tape)
    }

    pub fn infer(&self, x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
        let (mut h, mut w) = (IMAGE_SIDE, IMAGE_SIDE);
        let mut act = x.to_vec();
        for conv in &self.conv {
            act = conv.infer(&act, n, h, w);
            relu_in_place(&mut act);
            (h, w) = conv.out_size(h, w);
        }
        (self.mean.forward(&act, n), self.log_var.forward(&act, n))
    }

    pub fn backward(&self, tape: &EncoderTape<T>, d_mean: &[T], d_log_var: &[T], n: usize, grad: &mut Self) {
        let flat = tape.acts.last().unwrap();
        let mut d = self.mean.backward(flat, d_mean, n, &mut grad.mean, true).unwrap();
        let d_lv = self.log_var.backward(flat, d_log_var, n, &mut grad.log_var, true).unwrap();
        d.iter_mut().zip(&d_lv).for_each(|(a, &b)| *a += b);
        for i in (0..3).rev() {
            relu_backward_in_place(&tape.acts[i], &mut d);
            match self.conv[i].backward(&tape.caches[i], &d, n, &mut grad.conv[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.outputs()
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, conv) in self.conv.iter().enumerate() {
            out.extend(named(&format!("{prefix}.conv{i}"), conv.tensors()));
        }
        out.extend(named(&format!("{prefix}.mean"), self.mean.tensors()));
        out.extend(named(&format!("{prefix}.log_var"), self.log_var.tensors()));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        let [a, b, c] = &mut self.conv;
        out.extend(a.tensors_mut());
        out.extend(b.tensors_mut());
        out.extend(c.tensors_mut());
        out.extend(self.mean.tensors_mut());
        out.extend(self.log_var.tensors_mut());
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.push_named("encoder", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

impl<T: Scalar> Decoder<T> {
    fn new(arch: &VaeArch, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, c2] = arch.channels;
        Decoder {
            fc: Linear::new(arch.latent_dim, arch.bottleneck(), rng),
            deconv: [
                ConvTranspose2d::new(c2, c1, 3, 1, 1, 0, rng),
                ConvTranspose2d::new(c1, c0, 3, 2, 1, 1, rng),
                ConvTranspose2d::new(c0, 1, 3, 2, 1, 1, rng),
            ],
            channels: arch.channels,
        }
    }

    fn zeros_like(&self) -> Self {
        Decoder {
            fc: self.fc.zeros_like(),
            deconv: [
                self.deconv[0].zeros_like(),
                self.deconv[1].zeros_like(),
                self.deconv[2].zeros_like(),
            ],
            channels: self.channels,
        }
    }

    /// Returns pre-sigmoid logits, `n x 784`.
    pub fn forward(&self, z: &[T], n: usize) -> (Vec<T>, DecoderTape<T>) {
        let mut hidden = self.fc.forward(z, n);
        relu_in_place(&mut hidden);
        let mut tape = DecoderTape {
            hidden,
            caches: Vec::with_capacity(3),
            acts: Vec::with_capacity(3),
            dims: Vec::with_capacity(3),
        };
        let (mut h, mut w) = (7, 7);
        for (i, layer) in self.deconv.iter().enumerate() {
            let input = tape.acts.last().unwrap_or(&tape.hidden);
            let (mut y, cache) = layer.forward(input, n, h, w);
            if i < 2 {
                relu_in_place(&mut y);
            }
            tape.dims.push((h, w));
            (h, w) = layer.out_size(h, w);
            tape.caches.push(cache);
            tape.acts.push(y);
        }
        (tape.acts.pop().unwrap(), tape)
    }

    pub fn infer(&self, z: &[T], n: usize) -> Vec<T> {
        let mut act = self.fc.forward(z, n);
        relu_in_place(&mut act);
        let (mut h, mut w) = (7, 7);
        for (i, layer) in self.deconv.iter().enumerate() {
            act = layer.infer(&act, n, h, w);
            if i < 2 {
                relu_in_place(&mut act);
            }
            (h, w) = layer.out_size(h, w);
        }
        act
    }

    /// Accumulates gradients given `dL/dlogits` and returns `dL/dz`.
    pub fn backward(&self, tape: &DecoderTape<T>, z: &[T], d_logits: &[T], n: usize, grad: &mut Self) -> Vec<T> {
        let mut d = d_logits.to_vec();
        for i in (0..3).rev() {
            if i < 2 {
                relu_backward_in_place(&tape.acts[i], &mut d);
            }
            d = self.deconv[i]
                .backward(&tape.caches[i], &d, n, &mut grad.deconv[i], true)
                .unwrap();
        }
        relu_backward_in_place(&tape.hidden, &mut d);
        self.fc.backward(z, &d, n, &mut grad.fc, true).unwrap()
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.extend(named(&format!("{prefix}.fc"), self.fc.tensors()));
        for (i, layer) in self.deconv.iter().enumerate() {
            out.extend(named(&format!("{prefix}.deconv{i}"), layer.tensors()));
        }
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.extend(self.fc.tensors_mut());
        let [a, b, c] = &mut self.deconv;
        out.extend(a.tensors_mut());
        out.extend(b.tensors_mut());
        out.extend(c.tensors_mut());
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per-pixel clipped BCE and its derivative with respect to the logit.
fn bce_with_grad<T: Scalar>(target: T, logit: T) -> (T, T) {
    let eps = T::of(BCE_EPS);
    let p = sigmoid(logit);
    let clipped = p.max(eps).min(T::one() - eps);
    let loss = -(target * clipped.ln() + (T::one() - target) * (T::one() - clipped).ln());
    let grad = if clipped == p { p - target } else { T::zero() };
    (loss, grad)
}

/// Summed loss terms over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeNet<T> {
    pub arch: VaeArch,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

/// The `f32` model used for training and inference.
pub type Vae = VaeNet<f32>;

impl<T: Scalar> VaeNet<T> {
    pub fn new(arch: VaeArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VaeNet {
            arch,
            encoder: Encoder::new(&arch, &mut rng),
            decoder: Decoder::new(&arch, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        VaeNet {
            arch: self.arch,
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Loss summed over the batch for fixed reparameterization noise `eps`
    /// (`n x latent_dim`). Gradients of `scale * loss` are added to `grad`.
    pub fn loss_and_grad(&self, x: &[T], eps: &[T], n: usize, scale: T, grad: &mut Self) -> LossTerms {
        let d = self.latent_dim();
        let (mean, log_var, enc_tape) = self.encoder.forward(x, n);
        let half = T::of(0.5);
        let std: Vec<T> = log_var.iter().map(|&lv| (half * lv).exp()).collect();
        let z: Vec<T> = mean
            .iter()
            .zip(&std)
            .zip(eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let (logits, dec_tape) = self.decoder.forward(&z, n);

        let mut terms = LossTerms::default();
        let mut d_logits = vec![T::zero(); logits.len()];
        for ((&target, &logit), g) in x.iter().zip(&logits).zip(&mut d_logits) {
            let (l, dl) = bce_with_grad(target, logit);
            terms.reconstruction += l.as_f64();
            *g = scale * dl;
        }
        let dz = self.decoder.backward(&dec_tape, &z, &d_logits, n, &mut grad.decoder);

        let mut d_mean = vec![T::zero(); n * d];
        let mut d_log_var = vec![T::zero(); n * d];
        for i in 0..n * d {
            let (m, lv) = (mean[i], log_var[i]);
            terms.kl += (half * (m * m + lv.exp() - T::one() - lv)).as_f64();
            d_mean[i] = dz[i] + scale * m;
            d_log_var[i] = dz[i] * half * std[i] * eps[i] + scale * half * (lv.exp() - T::one());
        }
        self.encoder.backward(&enc_tape, &d_mean, &d_log_var, n, &mut grad.encoder);
        terms
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, x: &[T], eps: &[T], n: usize) -> LossTerms {
        let (mean, log_var) = self.encoder.infer(x, n);
        let half = T::of(0.5);
        let z: Vec<T> = mean
            .iter()
            .zip(&log_var)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        let logits = self.decoder.infer(&z, n);
        let mut terms = LossTerms::default();
        for (&t, &l) in x.iter().zip(&logits) {
            terms.reconstruction += bce_with_grad(t, l).0.as_f64();
        }
        for (&m, &lv) in mean.iter().zip(&log_var) {
            terms.kl += (half * (m * m + lv.exp() - T::one() - lv)).as_f64();
        }
        terms
    }
}

impl<T: Scalar> Parameters<T> for VaeNet<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.encoder.push_named("encoder", &mut out);
        self.decoder.push_named("decoder", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.encoder.push_mut(&mut out);
        self.decoder.push_mut(&mut out);
        out
    }
}

pub(crate) fn stack_images<T: Scalar>(images: &[Image]) -> Vec<T> {
    images
        .iter()
        .flat_map(|img| img.pixels().iter().map(|&p| T::of(p as f64)))
        .collect()
}

fn to_latent(values: &[f32]) -> LatentVector {
    LatentVector::new(values.iter().map(|&v| v as f64).collect())
        .expect("encoder produced a non-finite latent")
}

impl Vae {
    /// Posterior parameters for one image. The mean is the deterministic embedding.
    pub fn encode(&self, image: &Image) -> EncoderOutput {
        self.encode_batch(std::slice::from_ref(image)).pop().unwrap()
    }

    pub fn encode_batch(&self, images: &[Image]) -> Vec<EncoderOutput> {
        let d = self.latent_dim();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(BATCH_CHUNK) {
            let x = stack_images::<f32>(chunk);
            let (mean, log_var) = self.encoder.infer(&x, chunk.len());
            for (m, lv) in mean.chunks_exact(d).zip(log_var.chunks_exact(d)) {
                out.push(EncoderOutput {
                    mean: to_latent(m),
                    log_variance: to_latent(lv),
                });
            }
        }
        out
    }

    /// Raw pixel version of [`Vae::encode`] that rejects malformed input.
    pub fn encode_pixels(&self, pixels: &[f32]) -> Result<EncoderOutput> {
        Ok(self.encode(&Image::new(pixels.to_vec())?))
    }

    pub fn decode(&self, z: &LatentVector) -> Result<Image> {
        Ok(self.decode_batch(std::slice::from_ref(z))?.pop().unwrap())
    }

    pub fn decode_batch(&self, latents: &[LatentVector]) -> Result<Vec<Image>> {
        let d = self.latent_dim();
        for z in latents {
            z.check_dim(d)?;
        }
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(BATCH_CHUNK) {
            let z: Vec<f32> = chunk
                .iter()
                .flat_map(|z| z.values().iter().map(|v| v.clamp(-DECODE_CLAMP, DECODE_CLAMP) as f32))
                .collect();
            let logits = self.decoder.infer(&z, chunk.len());
            for img in logits.chunks_exact(IMAGE_PIXELS) {
                let pixels = img
                    .iter()
                    .map(|&l| if l.is_nan() { 0.5 } else { sigmoid(l) })
                    .collect();
                out.push(Image::from_unit_pixels(pixels));
            }
        }
        Ok(out)
    }

    /// Reconstruction BCE plus KL for one reparameterized sample drawn with `seed`.
    pub fn vae_loss(&self, image: &Image, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f32> = (0..self.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        self.loss(image.pixels(), &eps, 1).total()
    }

    /// Mean per-image BCE of `decode(encode(x).mean)` over `images`.
    pub fn mean_reconstruction_error(&self, images: &[Image]) -> f64 {
        if images.is_empty() {
            return 0.0;
        }
        let means: Vec<LatentVector> = self.encode_batch(images).into_iter().map(|e| e.mean).collect();
        let recon = self.decode_batch(&means).expect("encoder output has the model's latent dim");
        images
            .iter()
            .zip(&recon)
            .map(|(x, xh)| reconstruction_loss(x, xh).unwrap())
            .sum::<f64>()
            / images.len() as f64
    }
}

/// Pixelwise binary cross-entropy summed over the image, with `x_hat` clipped to `(eps, 1 - eps)`.
pub fn reconstruction_loss(x: &Image, x_hat: &Image) -> Result<f64> {
    if x.pixels().len() != x_hat.pixels().len() {
        return Err(Error::shape(x.pixels().len(), x_hat.pixels().len()));
    }
    Ok(x.pixels()
        .iter()
        .zip(x_hat.pixels())
        .map(|(&t, &p)| {
            let (t, p) = (t as f64, (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS));
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub latent_dim: usize,
    pub seed: u64,
}

impl VaeTrainConfig {
    pub fn for_dataset(name: crate::data::DatasetName) -> Self {
        VaeTrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            latent_dim: name.latent_dim(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainReport {
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh VAE on `dataset`. Deterministic for a fixed config.
pub fn train_vae_model(dataset: &Dataset, config: &VaeTrainConfig) -> Result<(Vae, VaeTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Argument("epochs and batch size must be positive".into()));
    }
    let arch = VaeArch::new(config.latent_dim);
    let mut model = Vae::new(arch, config.seed);
    let mut grad = model.zeros_like();
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<Image> = batch.iter().map(|&i| dataset.images()[i].clone()).collect();
            let x = stack_images::<f32>(&images);
            let eps: Vec<f32> = (0..batch.len() * arch.latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            grad.zero_all();
            let terms = model.loss_and_grad(&x, &eps, batch.len(), 1.0 / batch.len() as f32, &mut grad);
            total += terms.total();
            adam.step(model.tensors_mut(), grad.tensors());
        }
        let mean = total / dataset.len() as f64;
        log::info!("vae epoch {}/{}: mean loss {mean:.3}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }
    Ok((model, VaeTrainReport { epoch_losses }))
}
