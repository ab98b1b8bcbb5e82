use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Affine map over the last dimension: `y = x W + b`, with `W` stored
/// `(c_in, c_out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

impl LinearMap {
    pub fn new(weight: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::invalid(format!(
                "linear weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weight.shape()[1] {
                return Err(Error::shape("linear bias", weight.shape(), &[b.len()]));
            }
        }
        Ok(Self { weight, bias })
    }

    /// Weights uniform in `±1/sqrt(c_in)`; bias zero when requested.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, with_bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[c_in, c_out], -bound, bound, rng),
            bias: with_bias.then(|| vec![0.0; c_out]),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }),
            bias: None,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[c_in, c_out]),
            bias: with_bias.then(|| vec![0.0; c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Maps a `(..., c_in)` tensor to `(..., c_out)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (ci, co) = (self.c_in(), self.c_out());
        if x.last_dim() != ci {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        }
        let rows = x.rows();
        let w = self.weight.data();
        let mut out = Vec::with_capacity(rows * co);
        for r in 0..rows {
            let xr = x.row(r);
            let mut acc = match &self.bias {
                Some(b) => b.clone(),
                None => vec![0.0; co],
            };
            for (p, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (a, &wv) in acc.iter_mut().zip(&w[p * co..(p + 1) * co]) {
                    *a += xv * wv;
                }
            }
            out.extend(acc);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = co;
        Tensor::new(shape, out)
    }

    /// Gradient with respect to the input: `dx = dy Wᵀ`.
    pub fn backward_input(&self, dy: &Tensor) -> Result<Tensor> {
        let (ci, co) = (self.c_in(), self.c_out());
        if dy.last_dim() != co {
            return Err(Error::shape("linear_backward", dy.shape(), self.weight.shape()));
        }
        let w = self.weight.data();
        let rows = dy.rows();
        let mut out = vec![0.0; rows * ci];
        for r in 0..rows {
            let g = dy.row(r);
            for p in 0..ci {
                out[r * ci + p] = w[p * co..(p + 1) * co]
                    .iter()
                    .zip(g)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let mut shape = dy.shape().to_vec();
        *shape.last_mut().unwrap() = ci;
        Tensor::new(shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_leading_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = LinearMap::init(4, 6, true, &mut rng);
        let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        assert_eq!(map.apply(&x).unwrap().shape(), &[2, 3, 6]);
        assert!(map.apply(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn identity_map() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 - 2.0);
        assert_eq!(LinearMap::identity(4).apply(&x).unwrap(), x);
    }

    #[test]
    fn bias_is_added() {
        let map = LinearMap::new(Tensor::zeros(&[2, 2]), Some(vec![1.5, -2.0])).unwrap();
        let y = map.apply(&Tensor::ones(&[1, 2])).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0]);
    }
}
