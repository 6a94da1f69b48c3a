//! Forward pass of one bag: projection, instance selection, constrained
//! self-attention, risk, and the aggregate of the discarded instances.

use dcmil_core::{Bound, Matrix, Tape, Var};
use rand::RngCore;

use crate::error::{Result, SoftBagError};
use crate::gumbel::gumbel_topk;
use crate::model::{C2Model, IndicatorMode};
use crate::ops::{
    aggregate_k, constrained_self_attention, infer_risk, masked_mix, project_bag, select_instances,
    selector_logits, singleton_embed,
};

pub struct BagTrace {
    pub e: Var,
    /// Per-instance selection scores (n x 1), before noise.
    pub scores: Var,
    pub selected: Vec<bool>,
    pub e_sel: Var,
    pub attention: Var,
    /// Soft-bag representation (1 x D_B).
    pub b: Var,
    pub risk: Var,
    /// Aggregate of the discarded instances (1 x D_B).
    pub b_bar: Var,
    /// True when the bag had no instance to discard.
    pub degenerate: bool,
}

pub fn bag_forward(
    model: &C2Model,
    tape: &mut Tape,
    p: &Bound,
    g: &Matrix,
    mode: IndicatorMode,
    noise: Option<&mut dyn RngCore>,
) -> Result<BagTrace> {
    let n = g.rows();
    if n == 0 {
        return Err(SoftBagError::Invalid("empty bag".into()));
    }
    let l = &model.layout;
    let nb = model.dims.soft_bag_size;
    let gv = tape.constant(g.clone());
    let e = project_bag(tape, p, l, gv)?;
    let single = singleton_embed(tape, p, l, e);
    let scores = infer_risk(tape, p, l, single);
    let logits = selector_logits(tape, p, l, e);

    let (selected, h) = if n > nb {
        let top = gumbel_topk(tape, scores, nb, model.temperature, noise, mode)?;
        (top.hard, top.indicator)
    } else {
        (vec![true; n], tape.constant(Matrix::filled(n, 1, 1.0)))
    };
    let e_sel = select_instances(tape, e, h, logits, &selected, model.literal_selection)?;
    let (b, attention) = constrained_self_attention(tape, p, l, e_sel);
    let risk = infer_risk(tape, p, l, b);

    let degenerate = selected.iter().all(|&s| s);
    let e_disc = if degenerate {
        log::debug!("bag of {n} instances has nothing to discard; using its mean");
        tape.mean_rows(e)
    } else {
        let neg = tape.scale(h, -1.0);
        let h_disc = tape.offset(neg, 1.0);
        let discarded: Vec<bool> = selected.iter().map(|&s| !s).collect();
        masked_mix(tape, e, h_disc, logits, &discarded, model.literal_selection)?
    };
    let disc_single = singleton_embed(tape, p, l, e_disc);
    let b_bar = aggregate_k(tape, p, &l.k2, disc_single)?;
    Ok(BagTrace {
        e,
        scores,
        selected,
        e_sel,
        attention,
        b,
        risk,
        b_bar,
        degenerate,
    })
}

/// Noise-free inference output of one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagInference {
    pub risk: f64,
    pub b: Vec<f64>,
    pub scores: Vec<f64>,
    pub selected: Vec<bool>,
}

pub fn infer_bag(model: &C2Model, g: &Matrix) -> Result<BagInference> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let t = bag_forward(model, &mut tape, &p, g, IndicatorMode::StraightThrough, None)?;
    Ok(BagInference {
        risk: tape.scalar(t.risk),
        b: tape.value(t.b).data().to_vec(),
        scores: tape.value(t.scores).data().to_vec(),
        selected: t.selected,
    })
}
