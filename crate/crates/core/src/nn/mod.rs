//! Tensors, layer kernels, random streams and the gradient oracle.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use ops::Mode;
pub use rng::RngStream;
pub use tensor::Tensor;

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Glorot-uniform weights: U(−a, a) with a = sqrt(6/(fan_in+fan_out)).
    pub fn glorot(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-a, a)).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("glorot shape"))
    }
}
