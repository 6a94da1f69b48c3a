//! Minibatch objective of the second curriculum: Cox partial likelihood,
//! triple-tier contrast, distance constraint and the attention sparsity term.

use dcmil_core::{Matrix, ParamSet, Tape, Var};
use rand::RngCore;

use crate::bag::{bag_forward, BagTrace};
use crate::error::{Result, SoftBagError};
use crate::model::{C2Model, IndicatorMode};
use crate::ops::{
    aggregate_list, log_bilinear_logit, loss_adc, loss_c2_node, loss_cox, loss_tcl, sparsity_penalty, AdcTerm,
    LossWeights,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagRole {
    /// Tumor bag with a defined risk status (1 = high, 0 = low).
    Labeled(u8),
    /// Tumor bag whose risk status is undefined; it only enters the Cox term.
    Unlabeled,
    /// Normal-tissue bag.
    Normal,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchBag<'a> {
    pub g: &'a Matrix,
    pub role: BagRole,
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct C2Step {
    pub loss: f64,
    pub cox: f64,
    pub tcl: f64,
    pub adc: f64,
    pub sparsity: f64,
    pub grads: Option<ParamSet>,
    /// Detached representations of the normal bags of this batch.
    pub normal_reps: Vec<Vec<f64>>,
    pub zero_cosines: usize,
    pub degenerate_bags: usize,
}

pub struct ObjectiveOptions<'r> {
    pub weights: LossWeights,
    pub mode: IndicatorMode,
    pub noise: Option<&'r mut dyn RngCore>,
    pub with_grads: bool,
}

/// Evaluates the objective over `bags`; `normal_buffer` holds detached normal
/// representations from earlier batches that join the normal aggregate.
pub fn batch_objective(
    model: &C2Model,
    bags: &[BatchBag],
    normal_buffer: &[Vec<f64>],
    mut opts: ObjectiveOptions,
) -> Result<C2Step> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, opts.with_grads);
    let mut traces: Vec<BagTrace> = Vec::with_capacity(bags.len());
    for bag in bags {
        let noise = opts.noise.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        traces.push(bag_forward(model, &mut tape, &p, bag.g, opts.mode, noise)?);
    }
    let degenerate_bags = traces.iter().filter(|t| t.degenerate).count();

    let tumor: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].role != BagRole::Normal).collect();
    let risks: Vec<Var> = tumor.iter().map(|&i| traces[i].risk).collect();
    let times: Vec<f64> = tumor.iter().map(|&i| bags[i].time).collect();
    let events: Vec<bool> = tumor.iter().map(|&i| bags[i].event).collect();
    let cox = match loss_cox(&mut tape, &risks, &times, &events)? {
        Some(v) => v,
        None => {
            log::warn!("batch without events; Cox term is zero");
            tape.constant(Matrix::scalar(0.0))
        }
    };

    let labeled: Vec<(usize, u8)> = (0..bags.len())
        .filter_map(|i| match bags[i].role {
            BagRole::Labeled(y) => Some((i, y)),
            _ => None,
        })
        .collect();
    let mut normals: Vec<Var> = (0..bags.len())
        .filter(|&i| bags[i].role == BagRole::Normal)
        .map(|i| traces[i].b)
        .collect();
    let normal_reps: Vec<Vec<f64>> = normals.iter().map(|&v| tape.value(v).data().to_vec()).collect();
    for rep in normal_buffer {
        normals.push(tape.constant(Matrix::row_vector(rep)));
    }

    let l = &model.layout;
    let mut zero_cosines = 0;
    let (tcl, adc) = if labeled.is_empty() {
        let z = tape.constant(Matrix::scalar(0.0));
        (z, z)
    } else {
        let under = if normals.is_empty() {
            log::warn!("no normal bags available; normal aggregate is zero");
            tape.constant(Matrix::zeros(1, model.dims.soft_bag_dim))
        } else {
            aggregate_list(&mut tape, &p, &l.k1, &normals)?
        };
        let (w_l, v_l) = (p.var(l.w_l), p.var(l.v_l));
        let mut pos = Vec::with_capacity(labeled.len());
        let mut negs = Vec::with_capacity(labeled.len());
        let mut adc_terms = Vec::with_capacity(labeled.len());
        for &(n, y) in &labeled {
            let others: Vec<Var> = labeled.iter().filter(|&&(i, _)| i != n).map(|&(i, _)| traces[i].b).collect();
            let same: Vec<Var> = labeled
                .iter()
                .filter(|&&(i, yi)| i != n && yi == y)
                .map(|&(i, _)| traces[i].b)
                .collect();
            if same.is_empty() {
                return Err(SoftBagError::State(format!(
                    "bag {n} has no same-source partner in the batch"
                )));
            }
            let tilde = aggregate_list(&mut tape, &p, &l.k1, &others)?;
            let hat = aggregate_list(&mut tape, &p, &l.k1, &same)?;
            let (b, bar) = (traces[n].b, traces[n].b_bar);
            pos.push(log_bilinear_logit(&mut tape, b, tilde, hat, bar, w_l, v_l));
            let mut ns = Vec::with_capacity(labeled.len() - 1);
            for &(i, _) in labeled.iter().filter(|&&(i, _)| i != n) {
                ns.push(log_bilinear_logit(&mut tape, traces[i].b, under, hat, bar, w_l, v_l));
            }
            negs.push(ns);
            adc_terms.push(AdcTerm {
                b,
                tilde,
                hat,
                bar,
                under,
            });
        }
        let tcl = loss_tcl(&mut tape, &pos, &negs)?;
        let adc = loss_adc(&mut tape, &adc_terms, opts.weights.kappa, &mut zero_cosines)?;
        (tcl, adc)
    };
    if zero_cosines > 0 {
        log::warn!("{zero_cosines} cosine terms involved a zero vector");
    }
    let sparsity = sparsity_penalty(&mut tape, &p, l);
    let total = loss_c2_node(&mut tape, cox, tcl, adc, sparsity, &opts.weights)?;
    let grads = if opts.with_grads {
        let g = tape.backward(total);
        Some(model.params.gradients(&g, &p))
    } else {
        None
    };
    Ok(C2Step {
        loss: tape.scalar(total),
        cox: tape.scalar(cox),
        tcl: tape.scalar(tcl),
        adc: tape.scalar(adc),
        sparsity: tape.scalar(sparsity),
        grads,
        normal_reps,
        zero_cosines,
        degenerate_bags,
    })
}
