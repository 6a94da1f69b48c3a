//! Parameters of the soft-bag network, the two aggregation networks and the
//! contrastive bilinear forms.

use dcmil_core::{Bound, Matrix, ParamId, ParamSet, RunConfig, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoftBagError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2Dims {
    /// Width C of the instance representations from the first curriculum.
    pub input_dim: usize,
    /// Width D of the projected instances.
    pub bag_dim: usize,
    /// Width D_B of a soft-bag representation.
    pub soft_bag_dim: usize,
    /// Width of the query/key/value spaces.
    pub attention_dim: usize,
    pub selector_hidden: usize,
    pub aggregator_hidden: usize,
    /// Soft-bag size N_B.
    pub soft_bag_size: usize,
}

impl C2Dims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            input_dim: cfg.token_dim,
            bag_dim: cfg.bag_dim,
            soft_bag_dim: cfg.soft_bag_dim,
            attention_dim: cfg.attention_dim,
            selector_hidden: cfg.selector_hidden,
            aggregator_hidden: cfg.aggregator_hidden,
            soft_bag_size: cfg.soft_bag_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.input_dim,
            self.bag_dim,
            self.soft_bag_dim,
            self.attention_dim,
            self.selector_hidden,
            self.aggregator_hidden,
            self.soft_bag_size,
        ];
        if all.contains(&0) {
            return Err(SoftBagError::Invalid(format!("all widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Gated-attention aggregation network parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorIds {
    pub u: ParamId,
    pub u_b: ParamId,
    pub gate: ParamId,
    pub gate_b: ParamId,
    pub w: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2Layout {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub sel_w1: ParamId,
    pub sel_b1: ParamId,
    pub sel_w2: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub pool_w: ParamId,
    pub pool_b: ParamId,
    pub k1: AggregatorIds,
    pub k2: AggregatorIds,
    pub w_l: ParamId,
    pub v_l: ParamId,
    pub w_s: ParamId,
}

/// How the indicator enters the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorMode {
    /// Hard top-k forward, relaxed weights in the backward pass.
    StraightThrough,
    /// Relaxed weights in both passes (differentiable end to end).
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2Model {
    pub dims: C2Dims,
    pub layout: C2Layout,
    pub params: ParamSet,
    pub temperature: f64,
    /// Unmasked softmax of the selection equation instead of −∞ masking.
    pub literal_selection: bool,
}

fn init_aggregator<R: Rng + ?Sized>(p: &mut ParamSet, prefix: &str, d: usize, h: usize, rng: &mut R) -> AggregatorIds {
    AggregatorIds {
        u: p.insert(format!("{prefix}.u"), Matrix::xavier(d, h, rng)),
        u_b: p.insert(format!("{prefix}.u_b"), Matrix::zeros(1, h)),
        gate: p.insert(format!("{prefix}.gate"), Matrix::xavier(d, h, rng)),
        gate_b: p.insert(format!("{prefix}.gate_b"), Matrix::zeros(1, h)),
        w: p.insert(format!("{prefix}.w"), Matrix::xavier(h, 1, rng)),
    }
}

impl C2Model {
    pub fn new<R: Rng + ?Sized>(dims: C2Dims, temperature: f64, literal_selection: bool, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        if !(temperature > 0.0) {
            return Err(SoftBagError::Invalid(format!("temperature {temperature} must be positive")));
        }
        let (c, d, db, da) = (dims.input_dim, dims.bag_dim, dims.soft_bag_dim, dims.attention_dim);
        let mut p = ParamSet::new();
        let proj_w = p.insert("proj.w", Matrix::xavier(c, d, rng));
        let proj_b = p.insert("proj.b", Matrix::zeros(1, d));
        let sel_w1 = p.insert("sel.w1", Matrix::xavier(d, dims.selector_hidden, rng));
        let sel_b1 = p.insert("sel.b1", Matrix::zeros(1, dims.selector_hidden));
        let sel_w2 = p.insert("sel.w2", Matrix::xavier(dims.selector_hidden, dims.soft_bag_size, rng));
        let wq = p.insert("attn.wq", Matrix::xavier(d, da, rng));
        let wk = p.insert("attn.wk", Matrix::xavier(d, da, rng));
        let wv = p.insert("attn.wv", Matrix::xavier(d, da, rng));
        let pool_w = p.insert("pool.w", Matrix::xavier(da, db, rng));
        let pool_b = p.insert("pool.b", Matrix::zeros(1, db));
        let k1 = init_aggregator(&mut p, "k1", db, dims.aggregator_hidden, rng);
        let k2 = init_aggregator(&mut p, "k2", db, dims.aggregator_hidden, rng);
        let w_l = p.insert("contrast.w", Matrix::xavier(db, db, rng).scale(0.1));
        let v_l = p.insert("contrast.v", Matrix::xavier(db, db, rng).scale(0.1));
        let w_s = p.insert("risk.w", Matrix::xavier(db, 1, rng));
        Ok(Self {
            dims,
            layout: C2Layout {
                proj_w,
                proj_b,
                sel_w1,
                sel_b1,
                sel_w2,
                wq,
                wk,
                wv,
                pool_w,
                pool_b,
                k1,
                k2,
                w_l,
                v_l,
                w_s,
            },
            params: p,
            temperature,
            literal_selection,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        Self::new(
            C2Dims::from_config(cfg),
            cfg.gumbel_temperature,
            cfg.literal_selection,
            rng,
        )
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        }
    }
}
