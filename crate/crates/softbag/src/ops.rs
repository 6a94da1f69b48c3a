//! Tape-level building blocks of the soft-bag network and its losses.

use dcmil_core::{Bound, Matrix, ParamId, Tape, Var};

use crate::error::{Result, SoftBagError};
use crate::model::{AggregatorIds, C2Layout};

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    let half = tape.scale(x, 0.5);
    let t = tape.tanh(half);
    let t = tape.offset(t, 1.0);
    tape.scale(t, 0.5)
}

/// Row-wise linear projection of instance representations `g` (N_n x C) to `E` (N_n x D).
pub fn project_bag(tape: &mut Tape, p: &Bound, l: &C2Layout, g: Var) -> Result<Var> {
    let w = p.var(l.proj_w);
    let (c, _) = tape.shape(w);
    if tape.shape(g).1 != c {
        return Err(SoftBagError::Shape(format!(
            "instance width {} does not match projection input {c}",
            tape.shape(g).1
        )));
    }
    Ok(linear(tape, g, w, p.var(l.proj_b)))
}

/// Selection logits `W_n` (N_n x N_B) from two linear layers. The second has no
/// bias: a per-slot constant cancels in the softmax over instances.
pub fn selector_logits(tape: &mut Tape, p: &Bound, l: &C2Layout, e: Var) -> Var {
    let h = linear(tape, e, p.var(l.sel_w1), p.var(l.sel_b1));
    let h = tape.tanh(h);
    tape.matmul(h, p.var(l.sel_w2))
}

/// Representation of each row of `rows` taken as a one-instance soft bag.
///
/// Attention over a single row is the identity, so this is the value
/// projection followed by the pooling layer.
pub fn singleton_embed(tape: &mut Tape, p: &Bound, l: &C2Layout, rows: Var) -> Var {
    let v = tape.matmul(rows, p.var(l.wv));
    linear(tape, v, p.var(l.pool_w), p.var(l.pool_b))
}

/// Relative risk `B W_S` (no bias); one risk per row of `b`.
pub fn infer_risk(tape: &mut Tape, p: &Bound, l: &C2Layout, b: Var) -> Var {
    tape.matmul(b, p.var(l.w_s))
}

fn broadcast_cols(tape: &mut Tape, h: Var, cols: usize) -> Var {
    let ones = tape.constant(Matrix::filled(1, cols, 1.0));
    tape.matmul(h, ones)
}

/// Softmax over instances of the (masked) logits for every output slot, then
/// a weighted sum of the indicator-scaled instances.
pub(crate) fn masked_mix(
    tape: &mut Tape,
    e: Var,
    h: Var,
    logits: Var,
    selected: &[bool],
    literal: bool,
) -> Result<Var> {
    let (n, d) = tape.shape(e);
    let (ln, nb) = tape.shape(logits);
    if ln != n || tape.shape(h) != (n, 1) || selected.len() != n {
        return Err(SoftBagError::Shape(format!(
            "instances {n}, logits {ln}x{nb}, indicator {:?}, mask {}",
            tape.shape(h),
            selected.len()
        )));
    }
    if !selected.iter().any(|&s| s) {
        return Err(SoftBagError::Invalid("indicator selects no instance".into()));
    }
    let hd = broadcast_cols(tape, h, d);
    let eh = tape.mul(e, hd);
    let weights = if literal {
        let hb = broadcast_cols(tape, h, nb);
        let masked = tape.mul(logits, hb);
        let t = tape.transpose(masked);
        tape.softmax_rows(t)
    } else {
        let mask = Matrix::from_fn(nb, n, |_, i| if selected[i] { 0.0 } else { f64::NEG_INFINITY });
        let t = tape.transpose(logits);
        let t = tape.add_const(t, &mask);
        tape.softmax_rows(t)
    };
    Ok(tape.matmul(weights, eh))
}

/// Selected-instance representation `Ê` (N_B x D) from `E`, the indicator
/// node `h` (N_n x 1, whose forward value is the hard indicator) and the logits.
pub fn select_instances(
    tape: &mut Tape,
    e: Var,
    h: Var,
    logits: Var,
    selected: &[bool],
    literal: bool,
) -> Result<Var> {
    let nb = tape.shape(logits).1;
    let n = tape.shape(e).0;
    let count = selected.iter().filter(|&&s| s).count();
    if count != nb.min(n) {
        return Err(SoftBagError::Invalid(format!(
            "indicator selects {count} instances, soft-bag size is {nb}"
        )));
    }
    masked_mix(tape, e, h, logits, selected, literal)
}

/// Query/key/value attention over the selected instances, mean pooling and a
/// linear map to the soft-bag width. Returns `(B, attention)`.
pub fn constrained_self_attention(tape: &mut Tape, p: &Bound, l: &C2Layout, e_sel: Var) -> (Var, Var) {
    let q = tape.matmul(e_sel, p.var(l.wq));
    let k = tape.matmul(e_sel, p.var(l.wk));
    let v = tape.matmul(e_sel, p.var(l.wv));
    let da = tape.shape(q).1;
    let s = tape.matmul_t(q, k);
    let s = tape.scale(s, 1.0 / (da as f64).sqrt());
    let attn = tape.softmax_rows(s);
    let attended = tape.matmul(attn, v);
    let pooled = tape.mean_rows(attended);
    (linear(tape, pooled, p.var(l.pool_w), p.var(l.pool_b)), attn)
}

/// L1 norms of the query, key and value maps.
pub fn sparsity_penalty(tape: &mut Tape, p: &Bound, l: &C2Layout) -> Var {
    let ids: [ParamId; 3] = [l.wq, l.wk, l.wv];
    let mut total: Option<Var> = None;
    for id in ids {
        let a = tape.abs(p.var(id));
        let s = tape.sum(a);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    total.expect("three maps")
}

/// Gated-attention aggregate of the rows of `x` (m x D_B) into one 1 x D_B vector.
pub fn aggregate_k(tape: &mut Tape, p: &Bound, ids: &AggregatorIds, x: Var) -> Result<Var> {
    if tape.shape(x).0 == 0 {
        return Err(SoftBagError::State("aggregation over an empty collection".into()));
    }
    let a = linear(tape, x, p.var(ids.u), p.var(ids.u_b));
    let a = tape.tanh(a);
    let g = linear(tape, x, p.var(ids.gate), p.var(ids.gate_b));
    let g = sigmoid(tape, g);
    let h = tape.mul(a, g);
    let s = tape.matmul(h, p.var(ids.w));
    let s = tape.transpose(s);
    let w = tape.softmax_rows(s);
    Ok(tape.matmul(w, x))
}

/// Aggregates a list of 1 x D_B nodes.
pub fn aggregate_list(tape: &mut Tape, p: &Bound, ids: &AggregatorIds, items: &[Var]) -> Result<Var> {
    if items.is_empty() {
        return Err(SoftBagError::State("aggregation over an empty collection".into()));
    }
    let x = tape.vconcat(items);
    aggregate_k(tape, p, ids, x)
}

fn bilinear(tape: &mut Tape, a: Var, m: Var, b: Var) -> Var {
    let am = tape.matmul(a, m);
    tape.dot(am, b)
}

/// Logarithm of the log-bilinear density-ratio model.
pub fn log_bilinear_logit(tape: &mut Tape, b: Var, tilde: Var, hat: Var, bar: Var, w_l: Var, v_l: Var) -> Var {
    let t1 = bilinear(tape, b, w_l, tilde);
    let t2 = bilinear(tape, b, w_l, hat);
    let t3 = bilinear(tape, b, v_l, bar);
    let s = tape.add(t1, t2);
    tape.add(s, t3)
}

/// Value of the log-bilinear model on plain vectors.
pub fn log_bilinear(b: &[f64], tilde: &[f64], hat: &[f64], bar: &[f64], w_l: &Matrix, v_l: &Matrix) -> f64 {
    let mut t = Tape::new();
    let row = |t: &mut Tape, v: &[f64]| t.constant(Matrix::row_vector(v));
    let (vb, vt, vh, vr) = (row(&mut t, b), row(&mut t, tilde), row(&mut t, hat), row(&mut t, bar));
    let (w, v) = (t.constant(w_l.clone()), t.constant(v_l.clone()));
    let l = log_bilinear_logit(&mut t, vb, vt, vh, vr, w, v);
    t.scalar(l).exp()
}

/// Contrastive loss from log-space scores: anchor `n` has positive `pos[n]`
/// and negatives `negs[n]`. The mean over anchors of `logsumexp − pos`.
pub fn loss_tcl(tape: &mut Tape, pos: &[Var], negs: &[Vec<Var>]) -> Result<Var> {
    if pos.is_empty() || pos.len() != negs.len() {
        return Err(SoftBagError::Shape(format!(
            "{} anchors with {} negative lists",
            pos.len(),
            negs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, ns) in pos.iter().zip(negs) {
        let term = if ns.is_empty() {
            tape.scale(p, 0.0)
        } else {
            let mut all = Vec::with_capacity(ns.len() + 1);
            all.push(p);
            all.extend_from_slice(ns);
            let cat = tape.hconcat(&all);
            let lse = tape.logsumexp(cat);
            tape.sub(lse, p)
        };
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), 1.0 / pos.len() as f64))
}

/// [`loss_tcl`] on plain log-scores.
pub fn tcl_value(pos: &[f64], negs: &[Vec<f64>]) -> Result<f64> {
    let mut t = Tape::new();
    let p: Vec<Var> = pos.iter().map(|&x| t.constant(Matrix::scalar(x))).collect();
    let n: Vec<Vec<Var>> = negs
        .iter()
        .map(|ns| ns.iter().map(|&x| t.constant(Matrix::scalar(x))).collect())
        .collect();
    let l = loss_tcl(&mut t, &p, &n)?;
    Ok(t.scalar(l))
}

pub const COSINE_EPS: f64 = 1e-12;

/// Cosine similarity of two 1 x k nodes. A zero vector yields a constant 0
/// and bumps `zero_count`.
pub fn cosine(tape: &mut Tape, a: Var, b: Var, zero_count: &mut usize) -> Var {
    let na = tape.norm2(a);
    let nb = tape.norm2(b);
    if tape.scalar(na) < COSINE_EPS || tape.scalar(nb) < COSINE_EPS {
        *zero_count += 1;
        return tape.constant(Matrix::scalar(0.0));
    }
    let d = tape.dot(a, b);
    let den = tape.mul(na, nb);
    tape.div(d, den)
}

/// Vectors entering the distance constraint for one bag.
#[derive(Clone, Copy, Debug)]
pub struct AdcTerm {
    pub b: Var,
    pub tilde: Var,
    pub hat: Var,
    pub bar: Var,
    pub under: Var,
}

/// Sum over bags of the margin hinge between the tumor and normal aggregates
/// plus the two cosine distances to the same-source and discarded aggregates.
pub fn loss_adc(tape: &mut Tape, terms: &[AdcTerm], kappa: f64, zero_count: &mut usize) -> Result<Var> {
    if kappa < 0.0 {
        return Err(SoftBagError::Invalid(format!("margin {kappa} must be nonnegative")));
    }
    let mut total = tape.constant(Matrix::scalar(0.0));
    for t in terms {
        let c_under = cosine(tape, t.b, t.under, zero_count);
        let c_tilde = cosine(tape, t.b, t.tilde, zero_count);
        let c_hat = cosine(tape, t.b, t.hat, zero_count);
        let c_bar = cosine(tape, t.b, t.bar, zero_count);
        let gap = tape.sub(c_under, c_tilde);
        let gap = tape.offset(gap, kappa);
        let hinge = tape.relu(gap);
        let d_hat = tape.scale(c_hat, -1.0);
        let d_hat = tape.offset(d_hat, 1.0);
        let d_bar = tape.scale(c_bar, -1.0);
        let d_bar = tape.offset(d_bar, 1.0);
        let s = tape.add(hinge, d_hat);
        let s = tape.add(s, d_bar);
        total = tape.add(total, s);
    }
    Ok(total)
}

/// Negative log partial likelihood with Breslow risk sets (`T_j ≥ T_n`).
/// Returns `None` when no event is present.
pub fn loss_cox(tape: &mut Tape, risks: &[Var], times: &[f64], events: &[bool]) -> Result<Option<Var>> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(SoftBagError::Shape(format!(
            "{} risks, {} times, {} events",
            risks.len(),
            times.len(),
            events.len()
        )));
    }
    let mut total: Option<Var> = None;
    for n in (0..risks.len()).filter(|&n| events[n]) {
        let set: Vec<Var> = (0..risks.len()).filter(|&j| times[j] >= times[n]).map(|j| risks[j]).collect();
        let cat = tape.hconcat(&set);
        let lse = tape.logsumexp(cat);
        let term = tape.sub(lse, risks[n]);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total)
}

/// [`loss_cox`] on plain risks; zero without events.
pub fn cox_value(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let mut t = Tape::new();
    let r: Vec<Var> = risks.iter().map(|&x| t.constant(Matrix::scalar(x))).collect();
    Ok(loss_cox(&mut t, &r, times, events)?.map_or(0.0, |v| t.scalar(v)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta_tcl: f64,
    pub beta_adc: f64,
    pub beta_s: f64,
    pub kappa: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &dcmil_core::RunConfig) -> Self {
        Self {
            beta_tcl: cfg.beta_tcl,
            beta_adc: cfg.beta_adc,
            beta_s: cfg.beta_s,
            kappa: cfg.adc_margin,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beta_tcl < 0.0 || self.beta_adc < 0.0 || self.beta_s < 0.0 {
            return Err(SoftBagError::Invalid("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn loss_c2(cox: f64, tcl: f64, adc: f64, s: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(cox + w.beta_tcl * tcl + w.beta_adc * adc + w.beta_s * s)
}

pub fn loss_c2_node(tape: &mut Tape, cox: Var, tcl: Var, adc: Var, s: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = tape.scale(tcl, w.beta_tcl);
    let b = tape.scale(adc, w.beta_adc);
    let c = tape.scale(s, w.beta_s);
    let x = tape.add(cox, a);
    let x = tape.add(x, b);
    Ok(tape.add(x, c))
}
