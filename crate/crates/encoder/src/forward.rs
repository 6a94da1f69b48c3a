//! Branch forward pass: token embedding, transformer blocks, token
//! aggregation and the two-class head.

use dcmil_core::{Bound, Matrix, Tape, Tile, Var, TOKEN_SIDE};
use rand::{Rng, RngCore};

use crate::branch::{BlockIds, BranchLayout, PATCH_PIXELS};
use crate::error::{EncoderError, Result};

/// Inverted dropout; a zero rate or a missing RNG leaves activations untouched.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut dyn RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let rate = self.rate;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| rate > 0.0) else {
            return x;
        };
        let (r, c) = tape.shape(x);
        let keep = 1.0 - rate;
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
        tape.mul_const(x, mask)
    }
}

/// Non-overlapping 16x16 token pixels in row-major grid order, one row per token.
pub fn patchify(tile: &Tile) -> Matrix {
    let grid = tile.grid();
    let side = tile.side();
    let px = tile.pixels();
    Matrix::from_fn(grid * grid, PATCH_PIXELS, |t, k| {
        let (gr, gc) = (t / grid, t % grid);
        let (r, c) = (gr * TOKEN_SIDE + k / TOKEN_SIDE, gc * TOKEN_SIDE + k % TOKEN_SIDE);
        f64::from(px[r * side + c])
    })
}

/// Linear token projection plus the branch's learned positional table.
pub fn patchify_embed(tape: &mut Tape, params: &Bound, layout: &BranchLayout, tile: &Tile) -> Result<Var> {
    let patches = patchify(tile);
    let pos_shape = tape.shape(params.var(layout.pos));
    if pos_shape.0 != patches.rows() {
        return Err(EncoderError::Shape(format!(
            "tile of side {} has {} tokens but the branch expects {}",
            tile.side(),
            patches.rows(),
            pos_shape.0
        )));
    }
    let x = tape.constant(patches);
    let proj = tape.matmul(x, params.var(layout.patch_w));
    let proj = tape.add_row(proj, params.var(layout.patch_b));
    Ok(tape.add(proj, params.var(layout.pos)))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn block_forward(tape: &mut Tape, p: &Bound, ids: &BlockIds, n_heads: usize, x: Var, dropout: &mut Dropout) -> Var {
    let d = tape.shape(x).1;
    let dh = d / n_heads;
    let h = tape.layer_norm(x, p.var(ids.ln1_g), p.var(ids.ln1_b));
    let q = linear(tape, h, p.var(ids.wq), p.var(ids.bq));
    let k = linear(tape, h, p.var(ids.wk), p.var(ids.bk));
    let v = linear(tape, h, p.var(ids.wv), p.var(ids.bv));
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qh = tape.col_slice(q, head * dh, dh);
        let kh = tape.col_slice(k, head * dh, dh);
        let vh = tape.col_slice(v, head * dh, dh);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = if n_heads == 1 { heads[0] } else { tape.hconcat(&heads) };
    let o = linear(tape, cat, p.var(ids.wo), p.var(ids.bo));
    let x = tape.add(x, o);
    let h2 = tape.layer_norm(x, p.var(ids.ln2_g), p.var(ids.ln2_b));
    let m = linear(tape, h2, p.var(ids.w1), p.var(ids.b1));
    let m = tape.gelu(m);
    let m = dropout.apply(tape, m);
    let m = linear(tape, m, p.var(ids.w2), p.var(ids.b2));
    tape.add(x, m)
}

/// Pre-norm transformer blocks with residual connections; shape-preserving.
pub fn transformer_forward(
    tape: &mut Tape,
    params: &Bound,
    layout: &BranchLayout,
    n_heads: usize,
    tokens: Var,
    dropout: &mut Dropout,
) -> Var {
    layout
        .blocks
        .iter()
        .fold(tokens, |x, ids| block_forward(tape, params, ids, n_heads, x, dropout))
}

/// Attention pooling of tokens plus the skip connection from the previous branch.
/// Returns the representation (1 x d) and the token attention (1 x n).
pub fn aggregate_tokens(
    tape: &mut Tape,
    params: &Bound,
    layout: &BranchLayout,
    z: Var,
    g_prev: Option<Var>,
) -> Result<(Var, Var)> {
    let d = tape.shape(z).1;
    if let Some(gp) = g_prev {
        if tape.shape(gp) != (1, d) {
            return Err(EncoderError::Shape(format!(
                "previous representation is {:?}, expected (1, {d})",
                tape.shape(gp)
            )));
        }
    }
    let n = tape.layer_norm(z, params.var(layout.agg_ln_g), params.var(layout.agg_ln_b));
    let hidden = linear(tape, n, params.var(layout.agg_w1), params.var(layout.agg_b1));
    let hidden = tape.tanh(hidden);
    let scores = linear(tape, hidden, params.var(layout.agg_w2), params.var(layout.agg_b2));
    let scores = tape.transpose(scores);
    let attn = tape.softmax_rows(scores);
    let g = tape.matmul(attn, z);
    let g = match g_prev {
        Some(gp) => tape.add(g, gp),
        None => g,
    };
    Ok((g, attn))
}

/// Two-class probabilities (low, high) as a 1 x 2 node.
pub fn classify(tape: &mut Tape, params: &Bound, layout: &BranchLayout, g: Var, dropout: &mut Dropout) -> Var {
    let g = dropout.apply(tape, g);
    let logits = linear(tape, g, params.var(layout.head_w), params.var(layout.head_b));
    tape.softmax_rows(logits)
}
