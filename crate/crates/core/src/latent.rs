use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the VAE embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("latent vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("latent vector entries must be finite".into()));
        }
        Ok(LatentVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn l1_distance(&self, other: &LatentVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    /// `(1 - t) * a + t * b`, exact at `t = 0` and `t = 1`.
    pub fn lerp(a: &LatentVector, b: &LatentVector, t: f64) -> LatentVector {
        LatentVector(
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| (1.0 - t) * x + t * y)
                .collect(),
        )
    }

    /// A copy with `delta` added to coordinate `axis`.
    pub fn offset(&self, axis: usize, delta: f64) -> LatentVector {
        let mut v = self.0.clone();
        v[axis] += delta;
        LatentVector(v)
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::shape(
                format!("latent of length {dim}"),
                format!("length {}", self.dim()),
            ));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for LatentVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        LatentVector::new(values)
    }
}

impl From<LatentVector> for Vec<f64> {
    fn from(v: LatentVector) -> Self {
        v.0
    }
}

/// Diagonal-Gaussian posterior parameters produced by the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    pub mean: LatentVector,
    pub log_variance: LatentVector,
}

/// Closed-form `KL(N(mean, exp(log_variance)) || N(0, I))`.
pub fn kl_divergence(enc: &EncoderOutput) -> f64 {
    enc.mean
        .values()
        .iter()
        .zip(enc.log_variance.values())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        .max(0.0)
}
