//! Small building blocks composed from graph primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Additive attention mask value. Finite so masked logits stay finite, and
/// large enough that `exp` of it underflows to exactly zero.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(w: Var, b: Option<Var>) -> Self {
        Self { w, b }
    }

    /// `x · W + b` over the last axis.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

/// Inverted dropout: zeroes each element with probability `rate` and scales
/// survivors by `1 / (1 − rate)`. A zero rate is the identity and draws no
/// random numbers.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn off() -> Self {
        Self::new(0.0, 0)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let data = (0..g.value(x).numel())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = g.constant(Tensor::new(shape, data)?);
        g.mul(x, mask)
    }
}

/// Repeats a `(..., n)` tensor along a new trailing axis of length `k`,
/// giving `(..., n, k)`, via a product with a row of ones.
pub fn repeat_last(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    let mut col = g.shape(x).to_vec();
    col.push(1);
    let col = g.reshape(x, col)?;
    let ones = g.constant(Tensor::full(vec![1, k], 1.0));
    g.matmul(col, ones)
}

/// Numerically stable log-softmax over the last axis.
///
/// Each slice is shifted by its (constant) maximum, then the log-sum-exp is
/// subtracted.
pub fn log_softmax(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = *shape.last().expect("rank >= 1");
    let mut shifted_max = g.value(x).clone();
    for row in shifted_max.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.fill(m);
    }
    let max = g.constant(shifted_max);
    let z = g.sub(x, max)?;
    let e = g.exp(z)?;
    let s = g.sum(e, shape.len() - 1)?;
    let lse = g.log(s)?;
    let lse = repeat_last(g, lse, n)?;
    g.sub(z, lse)
}

/// Index of the largest value, ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
