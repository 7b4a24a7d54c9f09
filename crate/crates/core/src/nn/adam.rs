use super::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must list tensors in the same order every call.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = T::of(self.learning_rate * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - lr * *m / (v.sqrt() + eps);
            }
        }
    }
}
