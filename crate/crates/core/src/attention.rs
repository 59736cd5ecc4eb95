//! Spatial self-attention over a `D×H×W` feature map.
//!
//! With `x` flattened to `D×N` (`N = H·W`):
//! `f = W_f x`, `g = W_g x`, `a = softmax_rows(fᵀ g)`, `o = (W_h x) aᵀ`,
//! `y = γ·o + x`. The projections are bias-free 1×1 convolutions and `γ`
//! starts at zero, so a fresh block is the identity.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Result, Scalar, Tensor, TensorError, Var};

/// Channel count of the query/key projections: `D/8`, at least 1.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = f32> {
    /// `D′×D×1×1`
    pub w_f: Tensor<T>,
    /// `D′×D×1×1`
    pub w_g: Tensor<T>,
    /// `D×D×1×1`
    pub w_h: Tensor<T>,
    /// one element
    pub gamma: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Fan-in scaled normal projections and `γ = 0`.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let reduced = reduced_channels(channels);
        let std = (2.0 / channels as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut draw = |rows: usize| {
            Tensor::from_fn(vec![rows, channels, 1, 1], |_| T::from_f64_lossy(normal.sample(rng)))
                .with_grad()
        };
        let w_f = draw(reduced);
        let w_g = draw(reduced);
        let w_h = draw(channels);
        Self {
            w_f,
            w_g,
            w_h,
            gamma: Tensor::zeros(vec![1]).with_grad(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_h.shape()[0]
    }

    /// Shape consistency of the four parameters.
    pub fn validate(&self) -> Result<()> {
        let d = self.w_h.shape().first().copied().unwrap_or(0);
        let dr = reduced_channels(d);
        let ok = self.w_h.shape() == [d, d, 1, 1]
            && self.w_f.shape() == [dr, d, 1, 1]
            && self.w_g.shape() == [dr, d, 1, 1]
            && self.gamma.numel() == 1;
        if ok {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!(
                    "inconsistent parameters w_f {:?}, w_g {:?}, w_h {:?}, gamma {:?}",
                    self.w_f.shape(),
                    self.w_g.shape(),
                    self.w_h.shape(),
                    self.gamma.shape()
                ),
            })
        }
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<AttentionVars> {
        Ok(AttentionVars {
            w_f: g.leaf(self.w_f.clone())?,
            w_g: g.leaf(self.w_g.clone())?,
            w_h: g.leaf(self.w_h.clone())?,
            gamma: g.leaf(self.gamma.clone())?,
        })
    }
}

/// Attention parameters recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_f: Var,
    pub w_g: Var,
    pub w_h: Var,
    pub gamma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `B×D×H×W`, same shape as the input.
    pub y: Var,
    /// `B×N×N` row-stochastic attention maps.
    pub map: Var,
}

/// Applies the block to a batch `x: B×D×H×W`.
pub fn attention_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &AttentionVars) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("expected B×D×H×W, got {shape:?}"),
        });
    }
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let wh_shape = g.shape(p.w_h).to_vec();
    if wh_shape.get(1) != Some(&d) || g.shape(p.w_f).get(1) != Some(&d) || g.shape(p.w_g).get(1) != Some(&d) {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("input has {d} channels, projections expect {:?}", wh_shape.get(1)),
        });
    }
    let n = h * w;
    let f = g.conv2d(x, p.w_f, None, 1, 0)?;
    let gk = g.conv2d(x, p.w_g, None, 1, 0)?;
    let hv = g.conv2d(x, p.w_h, None, 1, 0)?;
    let dr = g.shape(f)[1];
    let f = g.reshape(f, vec![b, dr, n])?;
    let gk = g.reshape(gk, vec![b, dr, n])?;
    let hv = g.reshape(hv, vec![b, d, n])?;
    let logits = g.matmul_t(f, gk, true, false)?;
    let map = g.softmax(logits, 2)?;
    let o = g.matmul_t(hv, map, false, true)?;
    let o = g.reshape(o, vec![b, d, h, w])?;
    let y = g.add_scaled(o, x, p.gamma)?;
    Ok(AttentionOutput { y, map })
}

/// One `N×N` attention map; row `i` holds the weights position `i` assigns
/// to every position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T = f32> {
    positions: usize,
    weights: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(positions: usize, weights: Vec<T>) -> Result<Self> {
        if weights.len() != positions * positions {
            return Err(TensorError::DataLength {
                shape: vec![positions, positions],
                len: weights.len(),
            });
        }
        Ok(Self { positions, weights })
    }

    /// Uniform map (every entry `1/N`).
    pub fn uniform(positions: usize) -> Self {
        let v = T::one() / T::from_usize(positions).expect("fits");
        Self {
            positions,
            weights: vec![v; positions * positions],
        }
    }

    /// Extracts sample `index` of a recorded `B×N×N` map.
    pub fn from_graph(g: &Graph<T>, map: Var, index: usize) -> Result<Self> {
        let value = g.value(map);
        let s = value.shape();
        if s.len() != 3 || s[1] != s[2] || index >= s[0] {
            return Err(TensorError::InvalidArgument {
                op: "attention_map",
                detail: format!("sample {index} of map shaped {s:?}"),
            });
        }
        Self::new(s[1], value.outer(index).to_vec())
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.positions..(i + 1) * self.positions]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.positions)
            .map(|i| (self.row(i).iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Attention row of the query pixel `(row, col)` reshaped to `H×W`.
pub fn query_attention_row<T: Scalar>(
    map: &AttentionMap<T>,
    (row, col): (usize, usize),
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    if height * width != map.positions() {
        return Err(TensorError::ShapeMismatch {
            op: "query_attention_row",
            detail: format!("{height}×{width} grid for a map over {} positions", map.positions()),
        });
    }
    if row >= height || col >= width {
        return Err(TensorError::InvalidArgument {
            op: "query_attention_row",
            detail: format!("query ({row}, {col}) outside {height}×{width}"),
        });
    }
    Tensor::new(vec![height, width], map.row(row * width + col).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_channels_floors_at_one() {
        assert_eq!(reduced_channels(128), 16);
        assert_eq!(reduced_channels(8), 1);
        assert_eq!(reduced_channels(5), 1);
    }

    #[test]
    fn one_hot_row_renders_single_pixel() {
        let mut w = vec![0.0f32; 16];
        w[4 * 2 + 3] = 1.0; // row 2 attends only to position 3
        w[0] = 1.0;
        w[5] = 1.0;
        w[15] = 1.0;
        let map = AttentionMap::new(4, w).unwrap();
        let img = query_attention_row(&map, (1, 0), 2, 2).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn query_out_of_bounds_is_rejected() {
        let map = AttentionMap::<f32>::uniform(4);
        assert!(query_attention_row(&map, (2, 0), 2, 2).is_err());
        assert!(query_attention_row(&map, (0, 0), 4, 2).is_err());
    }
}
