//! Second training curriculum: soft-bag selection over instance
//! representations, constrained self-attention, the contrastive and distance
//! objectives, and Cox prognosis inference.

pub mod bag;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod gumbel;
pub mod model;
pub mod objective;
pub mod ops;

pub use bag::{bag_forward, infer_bag, BagInference, BagTrace};
pub use error::{Result, SoftBagError};
pub use export::{load_checkpoint, save_checkpoint, write_indicator_csv};
pub use gumbel::{gumbel_noise, gumbel_topk, hard_topk, relaxed_topk_weights, TopK};
pub use model::{AggregatorIds, C2Dims, C2Layout, C2Model, IndicatorMode};
pub use objective::{batch_objective, BagRole, BatchBag, C2Step, ObjectiveOptions};
pub use ops::{
    aggregate_k, aggregate_list, constrained_self_attention, cosine, cox_value, infer_risk, log_bilinear,
    log_bilinear_logit, loss_adc, loss_c2, loss_c2_node, loss_cox, loss_tcl, project_bag, select_instances,
    selector_logits, singleton_embed, sparsity_penalty, tcl_value, AdcTerm, LossWeights,
};
