//! Top-k instance indicator: hard Gumbel top-k in the forward pass and an
//! iterated-softmax relaxation for gradients.

use dcmil_core::{Matrix, Tape, Var};
use rand::RngCore;
use rand_distr::{Distribution, Gumbel};

use crate::error::{Result, SoftBagError};
use crate::model::IndicatorMode;

/// Floor inside the log of the relaxation's exclusion factor.
const EXCLUSION_FLOOR: f64 = 1e-30;

/// Indicator of the `k` largest values; ties go to the lowest index.
pub fn hard_topk(values: &[f64], k: usize) -> Result<Vec<bool>> {
    if k > values.len() {
        return Err(SoftBagError::Invalid(format!(
            "cannot select {k} of {} instances",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie and fall back to index order.
    order.sort_by(|&a, &b| (values[b] + 0.0).total_cmp(&(values[a] + 0.0)).then(a.cmp(&b)));
    let mut out = vec![false; values.len()];
    for &i in &order[..k] {
        out[i] = true;
    }
    Ok(out)
}

pub fn gumbel_noise(n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// Relaxed top-k weights of a 1 x n row of perturbed scores: `k` rounds of
/// tempered softmax, each round down-weighting (in unscaled score space) what
/// the previous ones picked.
fn relaxed_row(tape: &mut Tape, perturbed: Var, k: usize, temperature: f64) -> Var {
    let mut s = perturbed;
    let mut w: Option<Var> = None;
    for round in 0..k {
        let scaled = tape.scale(s, 1.0 / temperature);
        let a = tape.softmax_rows(scaled);
        w = Some(match w {
            Some(acc) => tape.add(acc, a),
            None => a,
        });
        if round + 1 < k {
            let keep = tape.scale(a, -1.0);
            let keep = tape.offset(keep, 1.0);
            let keep = tape.clamp(keep, EXCLUSION_FLOOR, 1.0);
            let lk = tape.log(keep);
            s = tape.add(s, lk);
        }
    }
    w.expect("k >= 1")
}

pub struct TopK {
    pub hard: Vec<bool>,
    /// Relaxed weights (n x 1).
    pub soft: Var,
    /// The node entering selection: the hard indicator with relaxed gradients,
    /// or the relaxed weights themselves.
    pub indicator: Var,
    /// Perturbed scores the hard selection was taken from.
    pub perturbed: Vec<f64>,
}

/// Top-k indicator over the n x 1 `scores` node.
pub fn gumbel_topk(
    tape: &mut Tape,
    scores: Var,
    k: usize,
    temperature: f64,
    noise: Option<&mut dyn RngCore>,
    mode: IndicatorMode,
) -> Result<TopK> {
    let (n, c) = tape.shape(scores);
    if c != 1 {
        return Err(SoftBagError::Shape(format!("scores must be a column, got {n}x{c}")));
    }
    if k == 0 || k > n {
        return Err(SoftBagError::Invalid(format!("cannot select {k} of {n} instances")));
    }
    if !(temperature > 0.0) {
        return Err(SoftBagError::Invalid(format!("temperature {temperature} must be positive")));
    }
    let g = match noise {
        Some(rng) => gumbel_noise(n, rng),
        None => vec![0.0; n],
    };
    let perturbed: Vec<f64> = tape.value(scores).data().iter().zip(&g).map(|(s, g)| s + g).collect();
    let hard = hard_topk(&perturbed, k)?;

    let row = tape.transpose(scores);
    let row = tape.add_const(row, &Matrix::row_vector(&g));
    let w = relaxed_row(tape, row, k, temperature);
    let soft = tape.transpose(w);
    let indicator = match mode {
        IndicatorMode::Relaxed => soft,
        IndicatorMode::StraightThrough => {
            let sv = tape.value(soft).clone();
            let shift = Matrix::from_fn(n, 1, |i, _| f64::from(u8::from(hard[i])) - sv.get(i, 0));
            tape.add_const(soft, &shift)
        }
    };
    Ok(TopK {
        hard,
        soft,
        indicator,
        perturbed,
    })
}

/// Relaxed weights for plain scores without noise.
pub fn relaxed_topk_weights(scores: &[f64], k: usize, temperature: f64) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let s = t.constant(Matrix::column_vector(scores));
    let top = gumbel_topk(&mut t, s, k, temperature, None, IndicatorMode::Relaxed)?;
    Ok(t.value(top.soft).data().to_vec())
}
