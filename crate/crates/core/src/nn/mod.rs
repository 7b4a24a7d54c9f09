//! Minimal CPU neural-network building blocks used by the VAE and the classifier.

mod adam;
pub mod layers;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use layers::{Conv2d, ConvTranspose2d, Linear};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

/// Networks expose their parameters by name in a fixed order; checkpoints,
/// optimizers and gradient checks all rely on that order.
pub trait Parameters<T: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_all(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::fill_zero);
    }
}

/// `(name, tensor)` pairs for a two-tensor layer under `prefix`.
pub(crate) fn named<'a, T>(prefix: &str, pair: [&'a Tensor<T>; 2]) -> [(String, &'a Tensor<T>); 2] {
    [(format!("{prefix}.weight"), pair[0]), (format!("{prefix}.bias"), pair[1])]
}
