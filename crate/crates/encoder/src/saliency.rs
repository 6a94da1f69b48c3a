//! Gradient-based token saliency and the input highlighting it drives.

use dcmil_core::{Bound, Matrix, Tape, Tile};

use crate::branch::BranchLayout;
use crate::error::{EncoderError, Result};
use crate::forward::{aggregate_tokens, classify, Dropout};

/// Binary token mask with the normalized relevance it was thresholded from.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub grid: usize,
    pub values: Vec<bool>,
    pub relevance: Vec<f64>,
    /// True when no token passed the threshold and the mask fell back to all ones.
    pub fallback: bool,
}

impl SaliencyMask {
    pub fn all_ones(grid: usize) -> Self {
        Self {
            grid,
            values: vec![true; grid * grid],
            relevance: vec![0.0; grid * grid],
            fallback: true,
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Mask from token gradients `alpha` and token embeddings `z` (both n x d).
pub fn saliency_from_gradient(alpha: &Matrix, z: &Matrix, iota: f64) -> Result<SaliencyMask> {
    if alpha.shape() != z.shape() {
        return Err(EncoderError::Shape(format!(
            "gradient {:?} and tokens {:?} differ",
            alpha.shape(),
            z.shape()
        )));
    }
    let n = z.rows();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(EncoderError::Shape(format!("{n} tokens do not form a square grid")));
    }
    let raw: Vec<f64> = (0..n)
        .map(|t| {
            let s: f64 = alpha.row(t).iter().zip(z.row(t)).map(|(a, b)| a * b).sum();
            s.max(0.0)
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let relevance: Vec<f64> = if max > 0.0 {
        raw.iter().map(|r| r / max).collect()
    } else {
        vec![0.0; n]
    };
    let values: Vec<bool> = relevance.iter().map(|&r| max > 0.0 && r >= iota).collect();
    if values.iter().any(|&v| v) {
        Ok(SaliencyMask {
            grid,
            values,
            relevance,
            fallback: false,
        })
    } else {
        Ok(SaliencyMask {
            relevance,
            ..SaliencyMask::all_ones(grid)
        })
    }
}

/// Saliency of the high-risk probability with respect to the tokens `z`.
///
/// Aggregation and classification are replayed on a private tape with `z` as
/// the differentiable input, so the caller's graph is left untouched.
pub fn saliency_mask(
    params: &dcmil_core::ParamSet,
    layout: &BranchLayout,
    z: &Matrix,
    g_prev: Option<&Matrix>,
    iota: f64,
) -> Result<SaliencyMask> {
    let mut tape = Tape::new();
    let bound: Bound = params.bind_frozen(&mut tape);
    let zv = tape.param(z.clone());
    let gp = g_prev.map(|g| tape.constant(g.clone()));
    let (g, _) = aggregate_tokens(&mut tape, &bound, layout, zv, gp)?;
    let p = classify(&mut tape, &bound, layout, g, &mut Dropout::off());
    let high = tape.col_slice(p, 1, 1);
    let grads = tape.backward(high);
    let alpha = grads.wrt_or_zeros(zv, z.shape());
    saliency_from_gradient(&alpha, z, iota)
}

/// Multiplies `tile` by `mask` upsampled to pixels; `None` (first branch) passes it through.
pub fn highlight_input(tile: &Tile, mask: Option<&SaliencyMask>) -> Result<Tile> {
    let Some(mask) = mask else {
        return Ok(tile.clone());
    };
    let side = tile.side();
    if mask.grid == 0 || side % mask.grid != 0 {
        return Err(EncoderError::Shape(format!(
            "a {0}x{0} mask cannot tile a {side}-pixel image",
            mask.grid
        )));
    }
    if mask.values.iter().all(|&v| v) {
        return Ok(tile.clone());
    }
    let cell = side / mask.grid;
    let px: Vec<f32> = tile
        .pixels()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (r, c) = (k / side, k % side);
            if mask.values[(r / cell) * mask.grid + c / cell] {
                v
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tile::new(side, px)?)
}

/// Tile with non-salient regions dimmed, for visual inspection.
pub fn overlay(tile: &Tile, mask: &SaliencyMask) -> Result<Tile> {
    let side = tile.side();
    if mask.grid == 0 || side % mask.grid != 0 {
        return Err(EncoderError::Shape("mask does not divide the tile".into()));
    }
    let cell = side / mask.grid;
    let px = tile
        .pixels()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (r, c) = (k / side, k % side);
            let t = (r / cell) * mask.grid + c / cell;
            if mask.values[t] {
                v
            } else {
                0.25 * v
            }
        })
        .collect();
    Ok(Tile::new(side, px)?)
}
