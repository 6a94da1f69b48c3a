//! The multi-branch instance encoder and its training objective.

use dcmil_core::{Bound, Matrix, ParamSet, RunConfig, Tape, TilePyramid, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{init_branch, share_into, BranchLayout, EncoderDims};
use crate::error::{EncoderError, Result};
use crate::forward::{aggregate_tokens, classify, patchify_embed, transformer_forward, Dropout};
use crate::losses::{bce, loss_ranking, loss_structural, bce_node};
use crate::saliency::{highlight_input, saliency_mask, SaliencyMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C1Model {
    pub dims: EncoderDims,
    pub layout: BranchLayout,
    pub branches: Vec<ParamSet>,
    pub iota: f64,
}

/// Tape handles produced by one instance's forward pass.
pub struct InstanceTrace {
    /// Per active branch, the (low, high) probability node.
    pub probs: Vec<Var>,
    pub p_high: Vec<Var>,
    pub g: Vec<Var>,
    /// Mask derived at branch `s` (used to highlight the input of branch `s + 1`).
    pub masks: Vec<SaliencyMask>,
}

/// Detached per-branch outputs of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRepresentation {
    pub g: Vec<Vec<f64>>,
    pub p: Vec<[f64; 2]>,
    pub masks: Vec<SaliencyMask>,
}

impl InstanceRepresentation {
    /// Representation of the finest branch, which carries every coarser one through the skip path.
    pub fn g_final(&self) -> &[f64] {
        self.g.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn p_high_final(&self) -> f64 {
        self.p.last().map_or(0.5, |p| p[1])
    }
}

/// One labeled instance's contribution to a minibatch objective.
pub struct LabeledInstance<'a> {
    pub pyramid: &'a TilePyramid,
    pub label: u8,
    /// Multiplier of this instance's summed cross-entropy terms.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub empirical: f64,
    pub ranking: f64,
    pub grads: Vec<ParamSet>,
}

impl C1Model {
    pub fn new<R: Rng + ?Sized>(dims: EncoderDims, iota: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        if !(0.0..=1.0).contains(&iota) {
            return Err(EncoderError::Invalid(format!("saliency threshold {iota} outside [0, 1]")));
        }
        let mut branches = Vec::with_capacity(dims.magnifications);
        let mut layout = None;
        for level in 0..dims.magnifications {
            let (p, l) = init_branch(&dims, level, rng);
            branches.push(p);
            layout = Some(l);
        }
        Ok(Self {
            dims,
            layout: layout.expect("at least one branch"),
            branches,
            iota,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        Self::new(EncoderDims::from_config(cfg), cfg.saliency_threshold, rng)
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Copies the first (pre-trained) branch into every finer branch.
    pub fn share_first_branch(&mut self) {
        for level in 1..self.branches.len() {
            self.branches[level] = share_into(&self.branches[0], &self.layout, &self.dims, 0, level);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Bound> {
        self.branches
            .iter()
            .map(|p| if trainable { p.bind(tape) } else { p.bind_frozen(tape) })
            .collect()
    }

    fn check_pyramid(&self, pyramid: &TilePyramid, active: usize) -> Result<()> {
        if active == 0 || active > self.branches.len() {
            return Err(EncoderError::Invalid(format!(
                "{active} active branches requested of {}",
                self.branches.len()
            )));
        }
        if pyramid.levels() < active {
            return Err(EncoderError::Shape(format!(
                "instance has {} magnifications, {active} needed",
                pyramid.levels()
            )));
        }
        Ok(())
    }

    /// Forward pass through the first `active` branches.
    ///
    /// With `final_mask` the finest active branch also emits a saliency mask
    /// (for visualization); otherwise masks are only derived where a finer branch uses them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bounds: &[Bound],
        pyramid: &TilePyramid,
        active: usize,
        dropout: &mut Dropout,
        final_mask: bool,
    ) -> Result<InstanceTrace> {
        self.check_pyramid(pyramid, active)?;
        let mut trace = InstanceTrace {
            probs: Vec::with_capacity(active),
            p_high: Vec::with_capacity(active),
            g: Vec::with_capacity(active),
            masks: Vec::with_capacity(active),
        };
        for s in 0..active {
            let input = highlight_input(pyramid.tile(s), trace.masks.last())?;
            let x = patchify_embed(tape, &bounds[s], &self.layout, &input)?;
            let z = transformer_forward(tape, &bounds[s], &self.layout, self.dims.n_heads, x, dropout);
            let g_prev = trace.g.last().copied();
            let (g, _) = aggregate_tokens(tape, &bounds[s], &self.layout, z, g_prev)?;
            let p = classify(tape, &bounds[s], &self.layout, g, dropout);
            if s + 1 < active || final_mask {
                let gp = g_prev.map(|v| tape.value(v).clone());
                trace.masks.push(saliency_mask(
                    &self.branches[s],
                    &self.layout,
                    tape.value(z),
                    gp.as_ref(),
                    self.iota,
                )?);
            }
            trace.probs.push(p);
            trace.p_high.push(tape.col_slice(p, 1, 1));
            trace.g.push(g);
        }
        Ok(trace)
    }

    /// Inference without dropout across all branches.
    pub fn encode(&self, pyramid: &TilePyramid) -> Result<InstanceRepresentation> {
        self.encode_with(pyramid, &mut Dropout::off())
    }

    pub fn encode_with(&self, pyramid: &TilePyramid, dropout: &mut Dropout) -> Result<InstanceRepresentation> {
        let mut tape = Tape::new();
        let bounds = self.bind(&mut tape, false);
        let trace = self.forward(&mut tape, &bounds, pyramid, self.branches.len(), dropout, true)?;
        Ok(InstanceRepresentation {
            g: trace.g.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            p: trace
                .probs
                .iter()
                .map(|&v| {
                    let m = tape.value(v);
                    [m.get(0, 0), m.get(0, 1)]
                })
                .collect(),
            masks: trace.masks,
        })
    }

    /// High-risk probability of each active branch.
    pub fn high_risk_probs(&self, pyramid: &TilePyramid, active: usize, dropout: &mut Dropout) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bounds = self.bind(&mut tape, false);
        let trace = self.forward(&mut tape, &bounds, pyramid, active, dropout, false)?;
        Ok(trace.p_high.iter().map(|&v| tape.scalar(v)).collect())
    }

    /// Mean cross-entropy over the active branches, the per-instance loss used for pacing.
    pub fn instance_loss(&self, pyramid: &TilePyramid, label: u8, active: usize) -> Result<f64> {
        let probs = self.high_risk_probs(pyramid, active, &mut Dropout::off())?;
        Ok(probs.iter().map(|&p| bce(p, label)).sum::<f64>() / probs.len() as f64)
    }

    /// Cross-entropy plus ranking terms over `instances`, with parameter gradients.
    pub fn instances_objective(
        &self,
        instances: &[LabeledInstance],
        active: usize,
        eta: f64,
        beta_r: f64,
        dropout: &mut Dropout,
    ) -> Result<StepOutput> {
        let mut grads: Vec<ParamSet> = self.branches.iter().map(ParamSet::zeros_like).collect();
        let (mut empirical, mut ranking) = (0.0, 0.0);
        for inst in instances {
            let mut tape = Tape::new();
            let bounds = self.bind(&mut tape, true);
            let trace = self.forward(&mut tape, &bounds, inst.pyramid, active, dropout, false)?;
            let mut e_terms = Vec::with_capacity(active);
            for &p in &trace.p_high {
                let l = bce_node(&mut tape, p, inst.label);
                e_terms.push(tape.scale(l, inst.weight));
            }
            let mut total = e_terms[0];
            for &t in &e_terms[1..] {
                total = tape.add(total, t);
            }
            empirical += tape.scalar(total);
            for s in 1..active {
                let r = loss_ranking(&mut tape, trace.p_high[s], trace.p_high[s - 1], inst.label, eta);
                ranking += tape.scalar(r);
                let r = tape.scale(r, beta_r);
                total = tape.add(total, r);
            }
            let g = tape.backward(total);
            for (acc, (p, b)) in grads.iter_mut().zip(self.branches.iter().zip(&bounds)) {
                acc.add_assign(&p.gradients(&g, b));
            }
        }
        Ok(StepOutput {
            loss: empirical + beta_r * ranking,
            empirical,
            ranking,
            grads,
        })
    }

    /// Structural term summed over branches 2..=active, with gradients.
    pub fn structural_objective(&self, active: usize, beta_omega: f64) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let bounds = self.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for s in 1..active {
            let mut finer = Vec::new();
            let mut coarser = Vec::new();
            for blk in &self.layout.blocks[..s] {
                for id in blk.all() {
                    finer.push(bounds[s].var(id));
                    coarser.push(bounds[s - 1].var(id));
                }
            }
            let term = loss_structural(&mut tape, &finer, &coarser)?;
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        let Some(total) = total else {
            return Ok(StepOutput {
                loss: 0.0,
                empirical: 0.0,
                ranking: 0.0,
                grads: self.branches.iter().map(ParamSet::zeros_like).collect(),
            });
        };
        let omega = tape.scalar(total);
        let scaled = tape.scale(total, beta_omega);
        let g = tape.backward(scaled);
        Ok(StepOutput {
            loss: beta_omega * omega,
            empirical: 0.0,
            ranking: 0.0,
            grads: self
                .branches
                .iter()
                .zip(&bounds)
                .map(|(p, b)| p.gradients(&g, b))
                .collect(),
        })
    }

    /// Unweighted structural value (for reporting).
    pub fn structural_value(&self, active: usize) -> f64 {
        let mut total = 0.0;
        for s in 1..active {
            let mut sq = 0.0;
            for blk in &self.layout.blocks[..s] {
                for id in blk.all() {
                    let d = self.branches[s].value(id).zip_map(self.branches[s - 1].value(id), |a, b| a - b);
                    sq += d.data().iter().map(|x| x * x).sum::<f64>();
                }
            }
            total += sq.sqrt();
        }
        total
    }

    /// Every parameter scalar of every branch, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        self.branches.iter().flat_map(ParamSet::flatten).collect()
    }
}

/// Copies `value` into parameter `name` of branch `b` (test and tooling helper).
pub fn set_param(model: &mut C1Model, b: usize, name: &str, value: Matrix) -> Result<()> {
    let slot = model.branches[b]
        .get_mut(name)
        .ok_or_else(|| EncoderError::Invalid(format!("no parameter {name}")))?;
    if slot.shape() != value.shape() {
        return Err(EncoderError::Shape(format!(
            "{name} is {:?}, got {:?}",
            slot.shape(),
            value.shape()
        )));
    }
    *slot = value;
    Ok(())
}
