//! Finite-difference checks of every Curriculum II gradient path on small
//! random problems.

use dcmil_core::{finite_difference, relative_error, Matrix, ParamId, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gumbel::gumbel_topk;
use crate::model::{C2Dims, C2Model, IndicatorMode};
use crate::objective::{batch_objective, BagRole, BatchBag, ObjectiveOptions};
use crate::ops::{
    aggregate_k, constrained_self_attention, log_bilinear_logit, loss_adc, loss_c2_node, loss_cox, loss_tcl,
    project_bag, select_instances, AdcTerm, LossWeights,
};

pub const FD_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn check_unary(name: &str, x: &Matrix, build: impl Fn(&mut Tape, Var) -> Var) -> GradCheck {
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

pub fn tiny_dims() -> C2Dims {
    C2Dims {
        input_dim: 6,
        bag_dim: 5,
        soft_bag_dim: 4,
        attention_dim: 3,
        selector_hidden: 4,
        aggregator_hidden: 3,
        soft_bag_size: 3,
    }
}

pub const PAPER_WEIGHTS: LossWeights = LossWeights {
    beta_tcl: 1.0,
    beta_adc: 0.1,
    beta_s: 1e-4,
    kappa: 1.0,
};

fn rows(tape: &mut Tape, v: Var, k: usize, width: usize) -> Vec<Var> {
    (0..k)
        .map(|i| {
            let s = tape.col_slice(v, i * width, width);
            s
        })
        .collect()
}

/// Runs every Curriculum II gradient check.
pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = tiny_dims();
    let model = C2Model::new(dims, 0.5, false, &mut rng).expect("valid dims");
    let l = model.layout;
    let mut out = Vec::new();

    let g = random(&mut rng, 6, dims.input_dim);
    let probe = random(&mut rng, 6, dims.bag_dim);
    out.push(check_unary("projection input", &g, |t, v| {
        let p = model.bind(t, false);
        let e = project_bag(t, &p, &l, v).unwrap();
        let c = t.constant(probe.clone());
        t.dot(e, c)
    }));

    let e = random(&mut rng, 6, dims.bag_dim);
    let logits = random(&mut rng, 6, dims.soft_bag_size);
    let h = Matrix::column_vector(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let sel = [true, false, true, true, false, false];
    let probe_sel = random(&mut rng, dims.soft_bag_size, dims.bag_dim);
    for literal in [false, true] {
        let tag = if literal { "literal" } else { "masked" };
        out.push(check_unary(&format!("selection ({tag}) wrt instances"), &e, |t, v| {
            let hv = t.constant(h.clone());
            let lv = t.constant(logits.clone());
            let s = select_instances(t, v, hv, lv, &sel, literal).unwrap();
            let c = t.constant(probe_sel.clone());
            t.dot(s, c)
        }));
        out.push(check_unary(&format!("selection ({tag}) wrt logits"), &logits, |t, v| {
            let hv = t.constant(h.clone());
            let ev = t.constant(e.clone());
            let s = select_instances(t, ev, hv, v, &sel, literal).unwrap();
            let c = t.constant(probe_sel.clone());
            t.dot(s, c)
        }));
        out.push(check_unary(&format!("selection ({tag}) wrt indicator"), &h, |t, v| {
            let lv = t.constant(logits.clone());
            let ev = t.constant(e.clone());
            let s = select_instances(t, ev, v, lv, &sel, literal).unwrap();
            let c = t.constant(probe_sel.clone());
            t.dot(s, c)
        }));
    }

    let scores = random(&mut rng, 6, 1);
    let probe_w = random(&mut rng, 6, 1);
    out.push(check_unary("relaxed top-k wrt scores", &scores, |t, v| {
        let top = gumbel_topk(t, v, 3, 0.5, None, IndicatorMode::Relaxed).unwrap();
        let c = t.constant(probe_w.clone());
        t.dot(top.soft, c)
    }));

    let e_sel = random(&mut rng, dims.soft_bag_size, dims.bag_dim);
    let probe_b = random(&mut rng, 1, dims.soft_bag_dim);
    out.push(check_unary("constrained self-attention input", &e_sel, |t, v| {
        let p = model.bind(t, false);
        let (b, _) = constrained_self_attention(t, &p, &l, v);
        let c = t.constant(probe_b.clone());
        t.dot(b, c)
    }));

    let x = random(&mut rng, 4, dims.soft_bag_dim);
    out.push(check_unary("aggregation network input", &x, |t, v| {
        let p = model.bind(t, false);
        let a = aggregate_k(t, &p, &l.k1, v).unwrap();
        let c = t.constant(probe_b.clone());
        t.dot(a, c)
    }));

    let db = dims.soft_bag_dim;
    let packed = random(&mut rng, 1, 4 * db);
    let (wl, vl) = (random(&mut rng, db, db), random(&mut rng, db, db));
    out.push(check_unary("log-bilinear vectors", &packed, |t, v| {
        let r = rows(t, v, 4, db);
        let (w, vv) = (t.constant(wl.clone()), t.constant(vl.clone()));
        log_bilinear_logit(t, r[0], r[1], r[2], r[3], w, vv)
    }));
    let bil = Matrix::from_vec(1, 2 * db * db, [wl.data(), vl.data()].concat());
    out.push(check_unary("log-bilinear matrices", &bil, |t, v| {
        let vecs = t.constant(packed.clone());
        let r = rows(t, vecs, 4, db);
        let w = t.col_slice(v, 0, db * db);
        let w = t.reshape(w, db, db);
        let vv = t.col_slice(v, db * db, db * db);
        let vv = t.reshape(vv, db, db);
        log_bilinear_logit(t, r[0], r[1], r[2], r[3], w, vv)
    }));

    let logits9 = random(&mut rng, 1, 9);
    out.push(check_unary("contrastive loss", &logits9, |t, v| {
        let s: Vec<Var> = rows(t, v, 9, 1);
        let pos = vec![s[0], s[3], s[6]];
        let negs = vec![vec![s[1], s[2]], vec![s[4], s[5]], vec![s[7], s[8]]];
        loss_tcl(t, &pos, &negs).unwrap()
    }));

    let vecs = random(&mut rng, 1, 10 * db);
    out.push(check_unary("distance constraint", &vecs, |t, v| {
        let r = rows(t, v, 10, db);
        let terms = [
            AdcTerm {
                b: r[0],
                tilde: r[1],
                hat: r[2],
                bar: r[3],
                under: r[4],
            },
            AdcTerm {
                b: r[5],
                tilde: r[6],
                hat: r[7],
                bar: r[8],
                under: r[9],
            },
        ];
        let mut zeros = 0;
        loss_adc(t, &terms, 1.0, &mut zeros).unwrap()
    }));

    let risks = random(&mut rng, 1, 7);
    let times = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0];
    let events = [true, true, false, true, false, true, true];
    out.push(check_unary("Cox partial likelihood", &risks, |t, v| {
        let r = rows(t, v, 7, 1);
        loss_cox(t, &r, &times, &events).unwrap().unwrap()
    }));

    let parts = Matrix::row_vector(&[1.1, 0.7, 2.3, 5.0]);
    out.push(check_unary("combined loss", &parts, |t, v| {
        let r = rows(t, v, 4, 1);
        loss_c2_node(t, r[0], r[1], r[2], r[3], &PAPER_WEIGHTS).unwrap()
    }));

    // Whole minibatch objective with the relaxed indicator.
    let gs: Vec<Matrix> = (0..7).map(|i| random(&mut rng, 5 + i % 3, dims.input_dim)).collect();
    let roles = [
        BagRole::Labeled(1),
        BagRole::Labeled(1),
        BagRole::Labeled(0),
        BagRole::Labeled(0),
        BagRole::Labeled(0),
        BagRole::Unlabeled,
        BagRole::Normal,
    ];
    let times = [10.0, 20.0, 50.0, 40.0, 60.0, 30.0, 0.0];
    let events = [true, true, false, true, true, false, false];
    let buffer = vec![random(&mut rng, 1, db).data().to_vec()];
    let objective = |m: &C2Model, gs: &[Matrix]| {
        let bags: Vec<BatchBag> = (0..gs.len())
            .map(|i| BatchBag {
                g: &gs[i],
                role: roles[i],
                time: times[i],
                event: events[i],
            })
            .collect();
        batch_objective(
            m,
            &bags,
            &buffer,
            ObjectiveOptions {
                weights: PAPER_WEIGHTS,
                mode: IndicatorMode::Relaxed,
                noise: None,
                with_grads: true,
            },
        )
        .expect("objective")
    };
    let base = objective(&model, &gs);
    let grads = base.grads.expect("gradients");
    let names: Vec<String> = model.params.names().to_vec();
    for name in names {
        let id: ParamId = model.params.id(&name).expect("known");
        let n = model.params.value(id).len();
        let stride = n.div_ceil(12).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        let analytic: Vec<f64> = picks.iter().map(|&k| grads.value(id).data()[k]).collect();
        let numeric: Vec<f64> = picks
            .iter()
            .map(|&k| {
                let mut m = model.clone();
                let orig = m.params.value(id).data()[k];
                m.params.value_mut(id).data_mut()[k] = orig + FD_STEP;
                let up = objective(&m, &gs).loss;
                m.params.value_mut(id).data_mut()[k] = orig - FD_STEP;
                let down = objective(&m, &gs).loss;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        out.push(GradCheck {
            name: format!("objective: {name}"),
            rel_error: relative_error(
                &Matrix::row_vector(&analytic),
                &Matrix::row_vector(&numeric),
                FLOOR,
            ),
        });
    }
    out
}
