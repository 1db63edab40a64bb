//! Position-embedded projection, the shared MLP head, and the channel
//! correlation objective that makes the pair's representations agree
//! channel-by-channel while decorrelating distinct channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::Tensor;

/// Default weight of the off-diagonal term.
pub const DEFAULT_ALPHA: f64 = 0.003;

#[derive(Debug, Clone, Copy)]
pub struct EncoderWeights {
    /// Per-position (1×1 convolution) map from feature channels to `D`.
    pub proj: Linear,
    /// Learnable `(H·W, D)` position table.
    pub pos: Var,
    /// Two-layer head; `None` makes the head the identity.
    pub mlp: Option<(Linear, Linear)>,
}

/// Which samples the correlation is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationSamples {
    /// Every (image, position) pair is a sample: `N = B·H·W`.
    #[default]
    Flattened,
    /// Positions are mean-pooled first: `N = B`.
    Pooled,
}

/// `grid · W_proj + b + pos` for each position. Accepts `(H·W, C)` or
/// `(B, H·W, C)`.
pub fn project_embed(g: &mut Graph, grid: Var, w: &EncoderWeights) -> Result<Var> {
    let channels = *g.shape(grid).last().expect("rank >= 1");
    let expected = g.shape(w.proj.w)[0];
    if channels != expected {
        return Err(Error::dim(
            "project_embed",
            g.shape(grid),
            g.shape(w.proj.w),
        ));
    }
    let y = w.proj.forward(g, grid)?;
    g.add(y, w.pos)
}

pub fn mlp_head(g: &mut Graph, features: Var, w: &EncoderWeights) -> Result<Var> {
    match &w.mlp {
        None => Ok(features),
        Some((l1, l2)) => {
            let h = l1.forward(g, features)?;
            let h = g.relu(h)?;
            l2.forward(g, h)
        }
    }
}

/// Reshapes a batch of embeddings into the `(N, D)` sample matrix.
pub fn correlation_samples(g: &mut Graph, y: Var, mode: CorrelationSamples) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let d = *shape.last().expect("rank >= 1");
    match mode {
        CorrelationSamples::Flattened => {
            let n = g.value(y).numel() / d;
            g.reshape(y, vec![n, d])
        }
        CorrelationSamples::Pooled if shape.len() == 3 => g.mean(y, 1),
        CorrelationSamples::Pooled => {
            let m = g.mean(y, 0)?;
            g.reshape(m, vec![1, d])
        }
    }
}

fn column_log_norms(g: &mut Graph, y: Var, side: &str) -> Result<Var> {
    let d = g.shape(y)[1];
    let v = g.value(y);
    for j in 0..d {
        if (0..v.shape()[0]).all(|n| v.at(&[n, j]) == 0.0) {
            return Err(Error::Numeric(format!(
                "{side} embedding channel {j} has zero norm"
            )));
        }
    }
    let sq = g.square(y)?;
    let norm2 = g.sum(sq, 0)?;
    let log = g.log(norm2)?;
    g.scale(log, 0.5)
}

/// `C_ij = Σ_n yb_ni · ya_nj / (‖yb_·i‖ ‖ya_·j‖)` for `(N, D)` inputs.
///
/// No mean-centering. The normalization is `exp(-(log‖yb_·i‖ + log‖ya_·j‖))`
/// so only graph primitives are involved.
pub fn correlation_matrix(g: &mut Graph, y_bef: Var, y_aft: Var) -> Result<Var> {
    let sb = g.shape(y_bef).to_vec();
    let sa = g.shape(y_aft).to_vec();
    if sb.len() != 2 || sb != sa {
        return Err(Error::dim("correlation_matrix", &sb, &sa));
    }
    let d = sb[1];
    let lb = column_log_norms(g, y_bef, "before")?;
    let la = column_log_norms(g, y_aft, "after")?;
    let ybt = g.transpose(y_bef)?;
    let cross = g.matmul(ybt, y_aft)?;
    let lb = g.reshape(lb, vec![d, 1])?;
    let la = g.reshape(la, vec![1, d])?;
    let ones_row = g.constant(Tensor::full(vec![1, d], 1.0));
    let ones_col = g.constant(Tensor::full(vec![d, 1], 1.0));
    let rows = g.matmul(lb, ones_row)?;
    let cols = g.matmul(ones_col, la)?;
    let log_denom = g.add(rows, cols)?;
    let neg = g.scale(log_denom, -1.0)?;
    let inv = g.exp(neg)?;
    g.mul(cross, inv)
}

/// `Σ_i (1 − C_ii)² + α Σ_{i≠j} C_ij²`.
pub fn dirl_loss(g: &mut Graph, c: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
    }
    let shape = g.shape(c).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("dirl_loss", &shape, &shape));
    }
    let d = shape[0];
    let eye = g.constant(Tensor::eye(d));
    let off_mask = g.constant(Tensor::eye(d).map(|x| 1.0 - x));
    let diag_only = g.mul(c, eye)?;
    let diag = g.sum(diag_only, 1)?;
    let ones = g.constant(Tensor::full(vec![d], 1.0));
    let gap = g.sub(ones, diag)?;
    let gap2 = g.square(gap)?;
    let on = g.sum(gap2, 0)?;
    let off = g.mul(c, off_mask)?;
    let off2 = g.square(off)?;
    let off = g.sum_all(off2)?;
    let off = g.scale(off, alpha)?;
    g.add(on, off)
}

/// Mean diagonal entry and mean absolute off-diagonal entry of `C`.
pub fn correlation_summary(c: &Tensor) -> (f64, f64) {
    let d = c.shape()[0];
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                diag += c.at(&[i, j]);
            } else {
                off += c.at(&[i, j]).abs();
            }
        }
    }
    let off_count = (d * d - d).max(1) as f64;
    (diag / d as f64, off / off_count)
}
