//! Parameter layout of one magnification branch.

use dcmil_core::{Matrix, ParamId, ParamSet, RunConfig, TOKEN_SIDE};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};

pub const PATCH_PIXELS: usize = TOKEN_SIDE * TOKEN_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub magnifications: usize,
    /// Side of the level-0 (coarsest) tile.
    pub tile_side_coarse: usize,
}

impl EncoderDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            token_dim: cfg.token_dim,
            n_blocks: cfg.n_blocks,
            n_heads: cfg.n_heads,
            magnifications: cfg.magnifications,
            tile_side_coarse: cfg.tile_side_coarse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return Err(EncoderError::Invalid(format!(
                "token_dim {} must be a positive multiple of n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        if self.magnifications == 0 {
            return Err(EncoderError::Invalid("need at least one magnification".into()));
        }
        // Branch s constrains its first s-1 blocks, so the finest branch needs S-1 of them plus its own.
        if self.n_blocks < self.magnifications {
            return Err(EncoderError::Invalid(format!(
                "n_blocks {} must be at least the number of magnifications {}",
                self.n_blocks, self.magnifications
            )));
        }
        if self.tile_side_coarse == 0 || self.tile_side_coarse % TOKEN_SIDE != 0 {
            return Err(EncoderError::Invalid(format!(
                "coarse tile side {} is not a multiple of {TOKEN_SIDE}",
                self.tile_side_coarse
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.token_dim
    }

    pub fn tile_side(&self, level: usize) -> usize {
        self.tile_side_coarse << level
    }

    /// Tokens per side at `level`.
    pub fn grid(&self, level: usize) -> usize {
        self.tile_side(level) / TOKEN_SIDE
    }

    pub fn n_tokens(&self, level: usize) -> usize {
        self.grid(level) * self.grid(level)
    }
}

/// Parameter ids of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockIds {
    pub fn all(&self) -> [ParamId; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo,
            self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// Parameter ids shared by every branch (the insertion order is identical).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLayout {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub agg_ln_g: ParamId,
    pub agg_ln_b: ParamId,
    pub agg_w1: ParamId,
    pub agg_b1: ParamId,
    pub agg_w2: ParamId,
    pub agg_b2: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::xavier(rows, cols, rng)
}

fn small<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Builds a freshly initialized branch for `level` and the matching layout.
pub fn init_branch<R: Rng + ?Sized>(dims: &EncoderDims, level: usize, rng: &mut R) -> (ParamSet, BranchLayout) {
    let d = dims.token_dim;
    let h = dims.mlp_hidden();
    let mut p = ParamSet::new();
    let patch_w = p.insert("patch.w", xavier(PATCH_PIXELS, d, rng));
    let patch_b = p.insert("patch.b", Matrix::zeros(1, d));
    let pos = p.insert("pos", small(dims.n_tokens(level), d, 0.02, rng));
    let mut blocks = Vec::with_capacity(dims.n_blocks);
    for b in 0..dims.n_blocks {
        let name = |s: &str| format!("block{b}.{s}");
        blocks.push(BlockIds {
            ln1_g: p.insert(name("ln1.g"), Matrix::filled(1, d, 1.0)),
            ln1_b: p.insert(name("ln1.b"), Matrix::zeros(1, d)),
            wq: p.insert(name("wq"), xavier(d, d, rng)),
            bq: p.insert(name("bq"), Matrix::zeros(1, d)),
            wk: p.insert(name("wk"), xavier(d, d, rng)),
            bk: p.insert(name("bk"), Matrix::zeros(1, d)),
            wv: p.insert(name("wv"), xavier(d, d, rng)),
            bv: p.insert(name("bv"), Matrix::zeros(1, d)),
            wo: p.insert(name("wo"), xavier(d, d, rng)),
            bo: p.insert(name("bo"), Matrix::zeros(1, d)),
            ln2_g: p.insert(name("ln2.g"), Matrix::filled(1, d, 1.0)),
            ln2_b: p.insert(name("ln2.b"), Matrix::zeros(1, d)),
            w1: p.insert(name("mlp.w1"), xavier(d, h, rng)),
            b1: p.insert(name("mlp.b1"), Matrix::zeros(1, h)),
            w2: p.insert(name("mlp.w2"), xavier(h, d, rng)),
            b2: p.insert(name("mlp.b2"), Matrix::zeros(1, d)),
        });
    }
    let layout = BranchLayout {
        patch_w,
        patch_b,
        pos,
        blocks,
        agg_ln_g: p.insert("agg.ln.g", Matrix::filled(1, d, 1.0)),
        agg_ln_b: p.insert("agg.ln.b", Matrix::zeros(1, d)),
        agg_w1: p.insert("agg.w1", xavier(d, h, rng)),
        agg_b1: p.insert("agg.b1", Matrix::zeros(1, h)),
        agg_w2: p.insert("agg.w2", xavier(h, 1, rng)),
        agg_b2: p.insert("agg.b2", Matrix::zeros(1, 1)),
        head_w: p.insert("head.w", xavier(d, 2, rng)),
        head_b: p.insert("head.b", Matrix::zeros(1, 2)),
    };
    (p, layout)
}

/// Nearest-neighbour upsampling of a positional table laid out on a `grid x grid` token grid.
pub fn upsample_positions(pos: &Matrix, grid: usize, factor: usize) -> Matrix {
    let new_grid = grid * factor;
    Matrix::from_fn(new_grid * new_grid, pos.cols(), |t, j| {
        let (r, c) = (t / new_grid, t % new_grid);
        pos.get((r / factor) * grid + c / factor, j)
    })
}

/// Copies every tensor of `source` into a branch at `level`, resizing the positional table.
pub fn share_into(source: &ParamSet, layout: &BranchLayout, dims: &EncoderDims, source_level: usize, level: usize) -> ParamSet {
    let mut out = source.clone();
    let factor = 1 << (level - source_level);
    let pos = upsample_positions(source.value(layout.pos), dims.grid(source_level), factor);
    *out.value_mut(layout.pos) = pos;
    out
}
