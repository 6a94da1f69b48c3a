//! Finite-difference checks of every Curriculum I gradient path on small
//! random problems. Each check reports the relative error between the
//! analytic and the central-difference gradient.

use dcmil_core::{finite_difference, relative_error, Matrix, ParamId, Tape, Tile, TilePyramid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::branch::{init_branch, EncoderDims};
use crate::forward::{aggregate_tokens, transformer_forward, Dropout};
use crate::losses::{bce_node, loss_c1_node, loss_ranking, loss_structural};
use crate::model::{C1Model, LabeledInstance};

pub const FD_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn check_unary(name: &str, x: &Matrix, build: impl Fn(&mut Tape, dcmil_core::Var) -> dcmil_core::Var) -> GradCheck {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = build(&mut tape, v);
    let analytic = tape.backward(out).wrt_or_zeros(v, x.shape());
    let numeric = finite_difference(x, FD_STEP, |p| {
        let mut t = Tape::new();
        let v = t.param(p.clone());
        let o = build(&mut t, v);
        t.scalar(o)
    });
    GradCheck {
        name: name.to_string(),
        rel_error: relative_error(&analytic, &numeric, FLOOR),
    }
}

pub fn tiny_dims() -> EncoderDims {
    EncoderDims {
        token_dim: 8,
        n_blocks: 3,
        n_heads: 2,
        magnifications: 3,
        tile_side_coarse: 16,
    }
}

/// Random three-level pyramid with sides 16/32/64.
pub fn random_pyramid(rng: &mut ChaCha8Rng) -> TilePyramid {
    let fine: Vec<f32> = (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let mid: Vec<f32> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    let coarse: Vec<f32> = (0..16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    TilePyramid::new(
        vec![
            Tile::new(16, coarse).unwrap(),
            Tile::new(32, mid).unwrap(),
            Tile::new(64, fine).unwrap(),
        ],
        (0, 0),
    )
    .unwrap()
}

/// Perturbs up to `max_entries` entries of one parameter tensor and compares
/// the objective's analytic gradient at those entries.
fn check_model_param(
    name: &str,
    model: &C1Model,
    branch: usize,
    id: ParamId,
    objective: &dyn Fn(&C1Model) -> (f64, Vec<dcmil_core::ParamSet>),
    max_entries: usize,
) -> GradCheck {
    let (_, grads) = objective(model);
    let n = model.branches[branch].value(id).len();
    let stride = n.div_ceil(max_entries).max(1);
    let picks: Vec<usize> = (0..n).step_by(stride).collect();
    let analytic: Vec<f64> = picks.iter().map(|&k| grads[branch].value(id).data()[k]).collect();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&k| {
            let mut m = model.clone();
            let orig = m.branches[branch].value(id).data()[k];
            m.branches[branch].value_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = objective(&m).0;
            m.branches[branch].value_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = objective(&m).0;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    GradCheck {
        name: name.to_string(),
        rel_error: relative_error(
            &Matrix::row_vector(&analytic),
            &Matrix::row_vector(&numeric),
            FLOOR,
        ),
    }
}

/// Runs every Curriculum I gradient check.
pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = tiny_dims();
    let mut out = Vec::new();

    let (params, layout) = init_branch(&dims, 1, &mut rng);
    let x = random(&mut rng, 4, 8, 1.0);
    let probe = random(&mut rng, 4, 8, 1.0);
    out.push(check_unary("transformer input", &x, |t, v| {
        let b = params.bind_frozen(t);
        let z = transformer_forward(t, &b, &layout, dims.n_heads, v, &mut Dropout::off());
        let p = t.constant(probe.clone());
        t.dot(z, p)
    }));

    let g_prev = random(&mut rng, 1, 8, 1.0);
    let probe_g = random(&mut rng, 1, 8, 1.0);
    out.push(check_unary("aggregator tokens", &x, |t, v| {
        let b = params.bind_frozen(t);
        let gp = t.constant(g_prev.clone());
        let (g, _) = aggregate_tokens(t, &b, &layout, v, Some(gp)).unwrap();
        let p = t.constant(probe_g.clone());
        t.dot(g, p)
    }));
    out.push(check_unary("aggregator skip input", &g_prev, |t, v| {
        let b = params.bind_frozen(t);
        let z = t.constant(x.clone());
        let (g, _) = aggregate_tokens(t, &b, &layout, z, Some(v)).unwrap();
        let p = t.constant(probe_g.clone());
        t.dot(g, p)
    }));

    for y in [0u8, 1] {
        let p = Matrix::scalar(rng.random_range(0.05..0.95));
        out.push(check_unary(&format!("empirical loss (y={y})"), &p, |t, v| bce_node(t, v, y)));
        let pair = Matrix::row_vector(&[rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]);
        // Margin large enough that the hinge is active.
        out.push(check_unary(&format!("ranking loss (y={y})"), &pair, |t, v| {
            let a = t.col_slice(v, 0, 1);
            let b = t.col_slice(v, 1, 1);
            loss_ranking(t, a, b, y, 5.0)
        }));
    }

    let a = random(&mut rng, 3, 4, 1.0);
    let b = random(&mut rng, 3, 4, 1.0);
    let c = random(&mut rng, 1, 5, 1.0);
    let d = random(&mut rng, 1, 5, 1.0);
    let packed = Matrix::from_vec(1, 34, [a.data(), b.data(), c.data(), d.data()].concat());
    out.push(check_unary("structural loss", &packed, |t, v| {
        let flat_a = t.col_slice(v, 0, 12);
        let flat_b = t.col_slice(v, 12, 12);
        let ma = t.reshape(flat_a, 3, 4);
        let mb = t.reshape(flat_b, 3, 4);
        let pc = t.col_slice(v, 24, 5);
        let pd = t.col_slice(v, 29, 5);
        loss_structural(t, &[ma, pc], &[mb, pd]).unwrap()
    }));

    let parts = Matrix::row_vector(&[0.7, 1.3, 0.4]);
    out.push(check_unary("hybrid loss", &parts, |t, v| {
        let l = t.col_slice(v, 0, 1);
        let o = t.col_slice(v, 1, 1);
        let r = t.col_slice(v, 2, 1);
        loss_c1_node(t, l, o, r, 1e-5, 1.0).unwrap()
    }));

    // Full objective through all three branches, including the saliency-highlighted inputs.
    let mut model = C1Model::new(dims, 0.4, &mut rng).unwrap();
    for s in 1..3 {
        for (_, m) in model.branches[s].iter_mut() {
            for v in m.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let pyramids: Vec<TilePyramid> = (0..2).map(|_| random_pyramid(&mut rng)).collect();
    let objective = |m: &C1Model| {
        let inst: Vec<LabeledInstance> = pyramids
            .iter()
            .zip([1u8, 0])
            .map(|(p, y)| LabeledInstance {
                pyramid: p,
                label: y,
                weight: 1.0 / 6.0,
            })
            .collect();
        let e = m.instances_objective(&inst, 3, 0.5, 1.0, &mut Dropout::off()).unwrap();
        let s = m.structural_objective(3, 1e-2).unwrap();
        let mut grads = e.grads;
        for (g, sg) in grads.iter_mut().zip(&s.grads) {
            g.add_assign(sg);
        }
        (e.loss + s.loss, grads)
    };
    let l = model.layout.clone();
    let targets = [
        ("objective: head weights, finest branch", 2, l.head_w),
        ("objective: aggregator, middle branch", 1, l.agg_w1),
        ("objective: constrained block, finest branch", 2, l.blocks[1].wq),
        ("objective: shared block, coarsest branch", 0, l.blocks[0].w1),
        ("objective: token projection, coarsest branch", 0, l.patch_w),
        ("objective: positional table, middle branch", 1, l.pos),
        ("objective: layer norm, finest branch", 2, l.blocks[2].ln2_g),
    ];
    for (name, b, id) in targets {
        out.push(check_model_param(name, &model, b, id, &objective, 24));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradients_match_finite_differences() {
        for c in gradient_suite(7) {
            assert!(c.rel_error < 1e-4, "{}: {}", c.name, c.rel_error);
        }
    }
}
