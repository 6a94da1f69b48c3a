//! Curriculum I objectives: empirical cross-entropy, structural alignment of
//! shared transformer blocks, and the cross-scale ranking hinge.

use dcmil_core::{Tape, Var};

use crate::error::{EncoderError, Result};

pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy of one high-risk probability.
pub fn bce(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `max(0, η − y log(p_s/p_prev) − (1−y) log((1−p_s)/(1−p_prev)))`.
pub fn ranking(p_s: f64, p_prev: f64, y: u8, eta: f64) -> f64 {
    let (a, b) = (clamp_prob(p_s), clamp_prob(p_prev));
    let gain = if y == 1 {
        (a / b).ln()
    } else {
        ((1.0 - a) / (1.0 - b)).ln()
    };
    (eta - gain).max(0.0)
}

pub fn loss_c1(empirical: f64, structural: f64, ranking: f64, beta_omega: f64, beta_r: f64) -> Result<f64> {
    if beta_omega < 0.0 || beta_r < 0.0 {
        return Err(EncoderError::Invalid("loss weights must be nonnegative".into()));
    }
    Ok(empirical + beta_omega * structural + beta_r * ranking)
}

/// Cross-entropy of a 1x1 high-risk probability node.
pub fn bce_node(tape: &mut Tape, p_high: Var, y: u8) -> Var {
    let p = tape.clamp(p_high, PROB_EPS, 1.0 - PROB_EPS);
    let target = if y == 1 {
        p
    } else {
        let neg = tape.scale(p, -1.0);
        tape.offset(neg, 1.0)
    };
    let l = tape.log(target);
    tape.scale(l, -1.0)
}

/// Weighted sum of cross-entropy terms `(p_high, y, weight)`.
pub fn loss_empirical(tape: &mut Tape, terms: &[(Var, u8, f64)]) -> Option<Var> {
    let mut total: Option<Var> = None;
    for &(p, y, w) in terms {
        let l = bce_node(tape, p, y);
        let l = tape.scale(l, w);
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    total
}

/// Ranking hinge between a finer and a coarser high-risk probability node.
pub fn loss_ranking(tape: &mut Tape, p_s: Var, p_prev: Var, y: u8, eta: f64) -> Var {
    let a = tape.clamp(p_s, PROB_EPS, 1.0 - PROB_EPS);
    let b = tape.clamp(p_prev, PROB_EPS, 1.0 - PROB_EPS);
    let (num, den) = if y == 1 {
        (a, b)
    } else {
        let na = tape.scale(a, -1.0);
        let na = tape.offset(na, 1.0);
        let nb = tape.scale(b, -1.0);
        let nb = tape.offset(nb, 1.0);
        (na, nb)
    };
    let ln_num = tape.log(num);
    let ln_den = tape.log(den);
    let gain = tape.sub(ln_num, ln_den);
    let neg = tape.scale(gain, -1.0);
    let margin = tape.offset(neg, eta);
    tape.relu(margin)
}

/// 2-norm of the concatenated differences between paired parameter nodes.
pub fn loss_structural(tape: &mut Tape, finer: &[Var], coarser: &[Var]) -> Result<Var> {
    if finer.len() != coarser.len() {
        return Err(EncoderError::Shape(format!(
            "{} vs {} constrained tensors",
            finer.len(),
            coarser.len()
        )));
    }
    if finer.is_empty() {
        return Ok(tape.constant(dcmil_core::Matrix::scalar(0.0)));
    }
    let mut flat = Vec::with_capacity(finer.len());
    for (&a, &b) in finer.iter().zip(coarser) {
        if tape.shape(a) != tape.shape(b) {
            return Err(EncoderError::Shape(format!(
                "tensor shapes {:?} and {:?} differ",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        let d = tape.sub(a, b);
        let n = tape.value(d).len();
        flat.push(tape.reshape(d, 1, n));
    }
    let cat = tape.hconcat(&flat);
    Ok(tape.norm2(cat))
}

/// `ℓ + β_Ω Ω + β_R R` on the tape.
pub fn loss_c1_node(tape: &mut Tape, empirical: Var, structural: Var, ranking: Var, beta_omega: f64, beta_r: f64) -> Result<Var> {
    if beta_omega < 0.0 || beta_r < 0.0 {
        return Err(EncoderError::Invalid("loss weights must be nonnegative".into()));
    }
    let o = tape.scale(structural, beta_omega);
    let r = tape.scale(ranking, beta_r);
    let s = tape.add(empirical, o);
    Ok(tape.add(s, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcmil_core::Matrix;

    #[test]
    fn bce_reference_values() {
        assert!(bce(1.0, 1) < 1e-6);
        assert!((bce(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.9, 1) - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn ranking_reference_values() {
        assert!((ranking(0.3, 0.3, 1, 1e-3) - 1e-3).abs() < 1e-15);
        assert!((ranking(0.3, 0.3, 0, 1e-3) - 1e-3).abs() < 1e-15);
        assert_eq!(ranking(0.9, 0.5, 1, 1e-3), 0.0);
        assert!((ranking(0.9, 0.5, 0, 1e-3) - (1e-3 + 5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn hybrid_loss_combination() {
        assert_eq!(loss_c1(1.5, 2.0, 3.0, 0.0, 0.0).unwrap(), 1.5);
        assert!((loss_c1(1.0, 2.0, 3.0, 1e-5, 1.0).unwrap() - 4.00002).abs() < 1e-12);
        assert!(loss_c1(1.0, 2.0, 3.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn nodes_agree_with_scalar_versions() {
        for &(ps, pp, y) in &[(0.2, 0.7, 1u8), (0.9, 0.5, 0), (0.6, 0.4, 1)] {
            let mut t = Tape::new();
            let a = t.param(Matrix::scalar(ps));
            let b = t.param(Matrix::scalar(pp));
            let r = loss_ranking(&mut t, a, b, y, 1e-3);
            assert!((t.scalar(r) - ranking(ps, pp, y, 1e-3)).abs() < 1e-12);
            let e = bce_node(&mut t, a, y);
            assert!((t.scalar(e) - bce(ps, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_single_scalar_difference() {
        let mut t = Tape::new();
        let a = t.param(Matrix::scalar(1.25));
        let b = t.param(Matrix::scalar(-0.5));
        let s = loss_structural(&mut t, &[a], &[b]).unwrap();
        assert!((t.scalar(s) - 1.75).abs() < 1e-15);
        let same = loss_structural(&mut t, &[a], &[a]).unwrap();
        assert_eq!(t.scalar(same), 0.0);
    }
}
