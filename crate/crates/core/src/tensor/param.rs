use super::{Scalar, Tensor};
use rand::Rng;

/// A trainable tensor with its gradient accumulator and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate(&mut self, delta: &Tensor<T>) {
        debug_assert_eq!(delta.shape(), self.grad.shape());
        for (g, &d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + d;
        }
    }

    /// Same parameter at another precision. Optimizer state is carried over.
    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            adam_m: self.adam_m.cast(),
            adam_v: self.adam_v.cast(),
            step_count: self.step_count,
        }
    }
}

/// Uniform initialization in `±sqrt(6 / fan_in)`.
#[derive(Debug, Clone, Copy)]
pub struct UniformInit {
    pub fan_in: usize,
}

impl UniformInit {
    pub fn bound(&self) -> f64 {
        (6.0 / self.fan_in as f64).sqrt()
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let b = self.bound();
        Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-b..b)))
    }
}
