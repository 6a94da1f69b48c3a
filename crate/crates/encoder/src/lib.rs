//! Saliency-guided weakly-supervised instance encoding over several
//! magnifications: per-branch vision transformers, token attention pooling,
//! a risk-status head, and the losses that train them.

pub mod branch;
pub mod checkpoint;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod saliency;
pub mod selfpaced;
mod uncertainty;

pub use branch::{init_branch, upsample_positions, BranchLayout, EncoderDims};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{EncoderError, Result};
pub use forward::{aggregate_tokens, classify, patchify, patchify_embed, transformer_forward, Dropout};
pub use losses::{bce, loss_c1, loss_empirical, loss_ranking, loss_structural, ranking};
pub use model::{set_param, C1Model, InstanceRepresentation, InstanceTrace, LabeledInstance, StepOutput};
pub use saliency::{highlight_input, overlay, saliency_from_gradient, saliency_mask, SaliencyMask};
pub use selfpaced::{self_paced_select, PaceSchedule};
