//! Named trainable parameters and their initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

/// One learnable tensor. `grad` always matches `value` in shape; frozen
/// params keep their gradient at zero and are skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value: value.with_requires_grad(),
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }
}

/// Zero-mean Gaussian draw with the given standard deviation.
pub fn gaussian_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

/// Xavier (Glorot) uniform draw over [-limit, limit] with
/// limit = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform_tensor(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}
