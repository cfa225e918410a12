//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The substrate for every model in this crate. A [`Tensor`] is a plain
//! row-major value; differentiable computation happens on a [`Tape`], which
//! records primitive operations and replays them in reverse to accumulate
//! gradients. One tape per forward/backward pass; parameters live outside
//! the tape as `Tensor`s and are registered as leaves each pass.
//!
//! Everything is 64-bit. Broadcasting is restricted to scalar-tensor and
//! row-vector bias so that shape errors stay loud.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};

use crate::error::{FtError, Result};

/// Seeded RNG used everywhere randomness is needed (dropout, Gumbel noise,
/// parameter init, shuffles). One concrete type keeps runs bit-reproducible.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate RNG from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// A dense row-major f64 tensor. Immutable during evaluation; `grad` is
/// populated by reading back from a tape after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FtError::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Matrix filled uniformly from [-1/sqrt(fan), 1/sqrt(fan)].
    pub fn uniform_init(shape: Vec<usize>, fan: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let bound = 1.0 / (fan as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of rows when viewed as 2-D (1-D tensors are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Tensor::uniform_init(vec![3, 3], 3, &mut rng_from_seed(7));
        let b = Tensor::uniform_init(vec![3, 3], 3, &mut rng_from_seed(7));
        assert_eq!(a.data, b.data);
    }
}
