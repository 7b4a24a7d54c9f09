//! The model-under-investigation.
//!
//! Everything downstream treats a classifier as a black box through
//! [`ImageClassifier`]: images in, class scores out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::layers::{max_pool2, max_pool2_backward, relu_backward_in_place, relu_in_place, ConvCache};
use crate::nn::{named, Adam, Conv2d, Linear, Parameters, Scalar, Tensor};
use crate::vae::{stack_images, Encoder, Vae};

const BATCH_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub class_scores: Vec<f64>,
}

impl Prediction {
    /// Softmax over `logits`; the label is the first maximal score.
    pub fn from_logits(logits: &[f32]) -> Self {
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
        let exp: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let class_scores: Vec<f64> = exp.iter().map(|e| e / sum).collect();
        Prediction {
            label: argmax(&class_scores),
            class_scores,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Black-box access to a classifier.
pub trait ImageClassifier: Send + Sync {
    fn predict_batch(&self, images: &[Image]) -> Vec<Prediction>;

    fn predict(&self, image: &Image) -> Prediction {
        self.predict_batch(std::slice::from_ref(image)).pop().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Misprediction {
    pub dataset_index: usize,
    #[serde(skip)]
    pub image: Option<Image>,
    pub true_label: usize,
    pub predicted_label: usize,
}

/// Misclassified items of `dataset` in index order, at most `limit`.
pub fn find_mispredictions(dataset: &Dataset, classifier: &dyn ImageClassifier, limit: usize) -> Vec<Misprediction> {
    let mut out = Vec::new();
    for (chunk_idx, chunk) in dataset.images().chunks(BATCH_CHUNK).enumerate() {
        if out.len() >= limit {
            break;
        }
        let preds = classifier.predict_batch(chunk);
        for (offset, pred) in preds.into_iter().enumerate() {
            let index = chunk_idx * BATCH_CHUNK + offset;
            let truth = dataset.labels()[index] as usize;
            if pred.label != truth {
                out.push(Misprediction {
                    dataset_index: index,
                    image: Some(chunk[offset].clone()),
                    true_label: truth,
                    predicted_label: pred.label,
                });
                if out.len() >= limit {
                    break;
                }
            }
        }
    }
    out
}

pub fn accuracy(dataset: &Dataset, classifier: &dyn ImageClassifier) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let correct: usize = dataset
        .images()
        .chunks(BATCH_CHUNK)
        .zip(dataset.labels().chunks(BATCH_CHUNK))
        .map(|(imgs, labels)| {
            classifier
                .predict_batch(imgs)
                .iter()
                .zip(labels)
                .filter(|(p, &l)| p.label == l as usize)
                .count()
        })
        .sum();
    correct as f64 / dataset.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierArch {
    /// conv-relu-pool, conv-relu-pool, linear head on raw pixels.
    Cnn { channels: [usize; 2] },
    /// Linear head on the (frozen) VAE posterior mean.
    LatentLinear { latent_dim: usize },
}

impl Default for ClassifierArch {
    fn default() -> Self {
        ClassifierArch::Cnn { channels: [16, 32] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnNet<T> {
    pub conv: [Conv2d<T>; 2],
    pub head: Linear<T>,
}

pub struct CnnTape<T> {
    caches: Vec<ConvCache<T>>,
    relu_out: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    flat: Vec<T>,
}

impl<T: Scalar> CnnNet<T> {
    pub fn new(channels: [usize; 2], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = IMAGE_SIDE / 4;
        CnnNet {
            conv: [
                Conv2d::new(1, channels[0], 3, 1, 1, &mut rng),
                Conv2d::new(channels[0], channels[1], 3, 1, 1, &mut rng),
            ],
            head: Linear::new(channels[1] * side * side, NUM_CLASSES, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CnnNet {
            conv: [self.conv[0].zeros_like(), self.conv[1].zeros_like()],
            head: self.head.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> (Vec<T>, CnnTape<T>) {
        let mut tape = CnnTape {
            caches: Vec::new(),
            relu_out: Vec::new(),
            argmax: Vec::new(),
            flat: Vec::new(),
        };
        let mut act = x.to_vec();
        let mut side = IMAGE_SIDE;
        for conv in &self.conv {
            let (mut y, cache) = conv.forward(&act, n, side, side);
            relu_in_place(&mut y);
            let (pooled, idx) = max_pool2(&y, n * conv.out_channels(), side, side);
            tape.caches.push(cache);
            tape.relu_out.push(y);
            tape.argmax.push(idx);
            act = pooled;
            side /= 2;
        }
        let logits = self.head.forward(&act, n);
        tape.flat = act;
        (logits, tape)
    }

    pub fn infer(&self, x: &[T], n: usize) -> Vec<T> {
        let mut act = x.to_vec();
        let mut side = IMAGE_SIDE;
        for conv in &self.conv {
            let mut y = conv.infer(&act, n, side, side);
            relu_in_place(&mut y);
            act = max_pool2(&y, n * conv.out_channels(), side, side).0;
            side /= 2;
        }
        self.head.forward(&act, n)
    }

    pub fn backward(&self, tape: &CnnTape<T>, d_logits: &[T], n: usize, grad: &mut Self) {
        let mut d = self.head.backward(&tape.flat, d_logits, n, &mut grad.head, true).unwrap();
        for i in (0..2).rev() {
            let mut d_relu = max_pool2_backward(&tape.argmax[i], &d, tape.relu_out[i].len());
            relu_backward_in_place(&tape.relu_out[i], &mut d_relu);
            match self.conv[i].backward(&tape.caches[i], &d_relu, n, &mut grad.conv[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl<T: Scalar> Parameters<T> for CnnNet<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        out.extend(named("conv0", self.conv[0].tensors()));
        out.extend(named("conv1", self.conv[1].tensors()));
        out.extend(named("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [a, b] = &mut self.conv;
        a.tensors_mut()
            .into_iter()
            .chain(b.tensors_mut())
            .chain(self.head.tensors_mut())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Cnn(CnnNet<f32>),
    LatentLinear { encoder: Encoder<f32>, head: Linear<f32> },
}

impl Classifier {
    pub fn new(arch: ClassifierArch, seed: u64, vae: Option<&Vae>) -> Result<Self> {
        match arch {
            ClassifierArch::Cnn { channels } => Ok(Classifier::Cnn(CnnNet::new(channels, seed))),
            ClassifierArch::LatentLinear { latent_dim } => {
                let vae = vae.ok_or_else(|| {
                    Error::Argument("a latent-linear classifier needs a trained VAE".into())
                })?;
                if vae.latent_dim() != latent_dim {
                    return Err(Error::shape(latent_dim, vae.latent_dim()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Classifier::LatentLinear {
                    encoder: vae.encoder.clone(),
                    head: Linear::new(latent_dim, NUM_CLASSES, &mut rng),
                })
            }
        }
    }

    pub fn arch(&self) -> ClassifierArch {
        match self {
            Classifier::Cnn(net) => ClassifierArch::Cnn {
                channels: [net.conv[0].out_channels(), net.conv[1].out_channels()],
            },
            Classifier::LatentLinear { head, .. } => ClassifierArch::LatentLinear {
                latent_dim: head.inputs(),
            },
        }
    }

    pub fn logits(&self, images: &[Image]) -> Vec<f32> {
        let x = stack_images::<f32>(images);
        match self {
            Classifier::Cnn(net) => net.infer(&x, images.len()),
            Classifier::LatentLinear { encoder, head } => {
                let (mean, _) = encoder.infer(&x, images.len());
                head.forward(&mean, images.len())
            }
        }
    }
}

impl ImageClassifier for Classifier {
    fn predict_batch(&self, images: &[Image]) -> Vec<Prediction> {
        images
            .chunks(BATCH_CHUNK)
            .flat_map(|chunk| {
                self.logits(chunk)
                    .chunks_exact(NUM_CLASSES)
                    .map(Prediction::from_logits)
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

impl Parameters<f32> for Classifier {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        match self {
            Classifier::Cnn(net) => net.named_tensors(),
            Classifier::LatentLinear { encoder, head } => {
                let mut out = encoder.named_tensors();
                out.extend(named("head", head.tensors()));
                out
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        match self {
            Classifier::Cnn(net) => net.tensors_mut(),
            Classifier::LatentLinear { encoder, head } => {
                let mut out = encoder.tensors_mut();
                out.extend(head.tensors_mut());
                out
            }
        }
    }
}

/// Softmax cross-entropy summed over the batch; writes `scale * dL/dlogits`.
fn cross_entropy<T: Scalar>(logits: &[T], labels: &[u8], scale: T, d_logits: &mut [T]) -> f64 {
    let mut total = 0.0;
    for ((row, &label), d) in logits
        .chunks_exact(NUM_CLASSES)
        .zip(labels)
        .zip(d_logits.chunks_exact_mut(NUM_CLASSES))
    {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exp: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exp.iter().copied().sum();
        total += (sum.ln() + max - row[label as usize]).as_f64();
        for (k, (g, e)) in d.iter_mut().zip(&exp).enumerate() {
            let target = if k == label as usize { T::one() } else { T::zero() };
            *g = scale * (*e / sum - target);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            arch: ClassifierArch::default(),
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains a classifier. The latent-linear variant trains only its head on frozen VAE means.
pub fn train_classifier_model(
    dataset: &Dataset,
    config: &ClassifierTrainConfig,
    vae: Option<&Vae>,
) -> Result<(Classifier, ClassifierTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Argument("epochs and batch size must be positive".into()));
    }
    let mut model = Classifier::new(config.arch, config.seed, vae)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5_5e55);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::new();

    // Frozen-encoder features are computed once.
    let features: Option<Vec<f32>> = match &model {
        Classifier::LatentLinear { encoder, .. } => Some(
            dataset
                .images()
                .chunks(BATCH_CHUNK)
                .flat_map(|c| encoder.infer(&stack_images::<f32>(c), c.len()).0)
                .collect(),
        ),
        Classifier::Cnn(_) => None,
    };

    let mut adam = Adam::new(config.learning_rate);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let n = batch.len();
            let labels: Vec<u8> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let mut d_logits = vec![0.0f32; n * NUM_CLASSES];
            let scale = 1.0 / n as f32;
            match &mut model {
                Classifier::Cnn(net) => {
                    let images: Vec<Image> = batch.iter().map(|&i| dataset.images()[i].clone()).collect();
                    let x = stack_images::<f32>(&images);
                    let (logits, tape) = net.forward(&x, n);
                    total += cross_entropy(&logits, &labels, scale, &mut d_logits);
                    let mut grad = net.zeros_like();
                    net.backward(&tape, &d_logits, n, &mut grad);
                    adam.step(net.tensors_mut(), grad.tensors());
                }
                Classifier::LatentLinear { head, .. } => {
                    let feats = features.as_ref().unwrap();
                    let d = head.inputs();
                    let x: Vec<f32> = batch.iter().flat_map(|&i| feats[i * d..(i + 1) * d].iter().copied()).collect();
                    let logits = head.forward(&x, n);
                    total += cross_entropy(&logits, &labels, scale, &mut d_logits);
                    let mut grad = head.zeros_like();
                    head.backward(&x, &d_logits, n, &mut grad, false);
                    adam.step(head.tensors_mut().into(), grad.tensors().into());
                }
            }
        }
        let mean = total / dataset.len() as f64;
        log::info!("classifier epoch {}/{}: mean loss {mean:.4}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }
    Ok((model, ClassifierTrainReport { epoch_losses }))
}
