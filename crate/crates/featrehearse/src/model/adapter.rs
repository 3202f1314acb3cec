//! Feature adaptation network.
//!
//! A small MLP that maps descriptors extracted under an older feature space
//! into the current one: d -> hidden -> hidden -> d with rectifiers after
//! the two hidden layers and a linear output.

use super::init::fan_in_uniform;
use super::layers::Dense;
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AdapterNetwork<F> {
    pub l1: Dense<F>,
    pub l2: Dense<F>,
    pub l3: Dense<F>,
}

pub struct AdapterCache<F> {
    x: Array2<F>,
    z1: Array2<F>,
    h1: Array2<F>,
    z2: Array2<F>,
    h2: Array2<F>,
}

fn relu<F: Real>(z: &Array2<F>) -> Array2<F> {
    z.map(|&v| if v > F::zero() { v } else { F::zero() })
}

impl<F: Real> AdapterNetwork<F> {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let dense = |inputs: usize, outputs: usize, rng: &mut ChaCha8Rng| Dense {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || {
                fan_in_uniform::<F>(inputs, rng)
            }),
            bias: Array1::zeros(outputs),
        };
        Self {
            l1: dense(dim, hidden, rng),
            l2: dense(hidden, hidden, rng),
            l3: dense(hidden, dim, rng),
        }
    }

    /// Initialize as a near-identity map: `relu(x) - relu(-x) = x` is routed
    /// through the first `2 * dim` hidden units of each layer, with the usual
    /// fan-in noise damped to a tenth so spare units stay trainable. Cosine
    /// objectives are scale free, and a plain small-weight start (output norm
    /// far below one) makes their gradients large enough that the first
    /// momentum steps blow the output norm up and freeze the directions; a
    /// unit-norm identity start keeps the updates well conditioned and encodes
    /// the prior that adjacent feature spaces are close. Falls back to [`new`]
    /// when `hidden < 2 * dim`.
    ///
    /// [`new`]: Self::new
    pub fn new_near_identity(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut net = Self::new(dim, hidden, rng);
        if hidden < 2 * dim {
            return net;
        }
        let damp = F::from_f64(0.1);
        let one = F::one();
        for layer in [&mut net.l1, &mut net.l2, &mut net.l3] {
            layer.weight.mapv_inplace(|w| w * damp);
        }
        for j in 0..dim {
            net.l1.weight[(j, j)] += one;
            net.l1.weight[(dim + j, j)] -= one;
            net.l3.weight[(j, j)] += one;
            net.l3.weight[(j, dim + j)] -= one;
        }
        for j in 0..2 * dim {
            net.l2.weight[(j, j)] += one;
        }
        net
    }

    pub fn dim(&self) -> usize {
        self.l1.weight.ncols()
    }
    pub fn hidden(&self) -> usize {
        self.l1.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let h1 = relu(&self.l1.forward(x));
        let h2 = relu(&self.l2.forward(&h1));
        self.l3.forward(&h2)
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, AdapterCache<F>) {
        let z1 = self.l1.forward(x);
        let h1 = relu(&z1);
        let z2 = self.l2.forward(&h1);
        let h2 = relu(&z2);
        let y = self.l3.forward(&h2);
        (
            y,
            AdapterCache {
                x: x.clone(),
                z1,
                h1,
                z2,
                h2,
            },
        )
    }

    /// Parameter gradients for the cached pass, flattened in
    /// [`read_params`](Self::read_params) order.
    pub fn backward(&self, cache: &AdapterCache<F>, grad_y: &Array2<F>) -> Vec<F> {
        let (gh2, gw3, gb3) = self.l3.backward(&cache.h2, grad_y);
        let gz2 = mask(gh2, &cache.z2);
        let (gh1, gw2, gb2) = self.l2.backward(&cache.h1, &gz2);
        let gz1 = mask(gh1, &cache.z1);
        let (_, gw1, gb1) = self.l1.backward(&cache.x, &gz1);
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(gw1.iter().copied());
        out.extend(gb1.iter().copied());
        out.extend(gw2.iter().copied());
        out.extend(gb2.iter().copied());
        out.extend(gw3.iter().copied());
        out.extend(gb3.iter().copied());
        out
    }

    pub fn param_count(&self) -> usize {
        [&self.l1, &self.l2, &self.l3]
            .iter()
            .map(|d| d.weight.len() + d.bias.len())
            .sum()
    }

    pub fn read_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for d in [&self.l1, &self.l2, &self.l3] {
            out.extend(d.weight.iter().copied());
            out.extend(d.bias.iter().copied());
        }
        out
    }

    pub fn write_params(&mut self, vals: &[F]) -> Result<()> {
        if vals.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "adapter has {} parameters, got {}",
                self.param_count(),
                vals.len()
            )));
        }
        let mut at = 0;
        for d in [&mut self.l1, &mut self.l2, &mut self.l3] {
            for w in d.weight.iter_mut() {
                *w = vals[at];
                at += 1;
            }
            for b in d.bias.iter_mut() {
                *b = vals[at];
                at += 1;
            }
        }
        Ok(())
    }
}

fn mask<F: Real>(mut grad: Array2<F>, pre: &Array2<F>) -> Array2<F> {
    ndarray::Zip::from(&mut grad).and(pre).for_each(|g, &z| {
        if z <= F::zero() {
            *g = F::zero();
        }
    });
    grad
}
