use super::InferenceError;
use crate::attention::{query_attention_row, AttentionMap};
use crate::datapipe::SamplePair;
use crate::network::Network;
use crate::tensor::resize_bilinear;

/// Attention of one query rendered at patch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatRaster {
    pub size: usize,
    /// Min-max normalized to `[0, 1]`; all zeros for a flat map.
    pub values: Vec<f32>,
    /// Attention-grid cell the query falls in.
    pub cell: (usize, usize),
    /// Raw attention row on the grid, row-major.
    pub row: Vec<f32>,
}

impl HeatRaster {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.size + c]
    }
}

/// Attention heat map of the patch pixel `query = (row, col)`.
pub fn export_attention(net: &Network, sample: &SamplePair, query: (usize, usize)) -> Result<HeatRaster, InferenceError> {
    let grid = net.attention_grid().ok_or(InferenceError::NoAttention(net.variant()))?;
    let size = net.config().input_size;
    let (qr, qc) = query;
    if qr >= size || qc >= size {
        return Err(InferenceError::QueryOutOfBounds { row: qr, col: qc, size });
    }
    let pred = net.predict(&sample.pre, &sample.post)?;
    let maps = pred.attention.expect("attention variant");
    let map = AttentionMap::new(grid * grid, maps.outer(0).to_vec()).map_err(crate::network::NetworkError::from)?;
    let factor = size / grid;
    let cell = (qr / factor, qc / factor);
    let row = query_attention_row(&map, cell, grid, grid).map_err(crate::network::NetworkError::from)?;
    let up = resize_bilinear(row.data(), 1, (grid, grid), (size, size));
    let (lo, hi) = up.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if hi > lo {
        up.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; up.len()]
    };
    Ok(HeatRaster {
        size,
        values,
        cell,
        row: row.into_data(),
    })
}
