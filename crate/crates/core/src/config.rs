//! Run configuration. Serialized as a flat `key = value` file whose keys use
//! the short hyperparameter names (`N_B`, `T_r`, `iota`, `beta_tcl`, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::kv::{KvFile, KvWriter};
use crate::types::TOKEN_SIDE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Number of magnifications (branches).
    pub magnifications: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Side of the coarsest tile; level `s` has side `tile_side_coarse * 2^s`.
    pub tile_side_coarse: usize,

    /// Soft-bag size N_B.
    pub soft_bag_size: usize,
    /// Width D of the projected instance features.
    pub bag_dim: usize,
    /// Width D_B of the soft-bag representation.
    pub soft_bag_dim: usize,
    /// Width of the Q/K/V spaces.
    pub attention_dim: usize,
    pub selector_hidden: usize,
    pub aggregator_hidden: usize,

    /// Risk threshold T_r in months.
    pub risk_threshold_months: f64,

    /// Saliency threshold ι.
    pub saliency_threshold: f64,
    /// Ranking margin η.
    pub ranking_margin: f64,
    pub beta_omega: f64,
    pub beta_r: f64,
    pub lr_c1: f64,
    pub batch_c1: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub self_paced: bool,
    /// Quantile of the first-epoch instance losses where the pace λ starts.
    pub self_paced_quantile: f64,

    /// Contrast margin κ.
    pub adc_margin: f64,
    pub beta_tcl: f64,
    pub beta_adc: f64,
    pub beta_s: f64,
    pub gumbel_temperature: f64,
    pub lr_c2: f64,
    pub momentum_c2: f64,
    pub batch_c2: usize,
    pub epochs_c2: usize,
    pub patience_c2: usize,
    /// Global gradient-norm cap for the second curriculum; 0 disables clipping.
    pub grad_clip_c2: f64,
    /// Use the unmasked softmax of the selection equation instead of −∞ masking.
    pub literal_selection: bool,

    pub mc_passes: usize,
    pub mc_dropout: f64,
    pub folds: usize,
    pub val_fraction: f64,
    pub rng_seed: u64,
    pub dataset: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small CPU-sized configuration used by the tests and the default CLI run.
    pub fn desk() -> Self {
        Self {
            magnifications: 3,
            token_dim: 64,
            n_blocks: 4,
            n_heads: 4,
            tile_side_coarse: 32,
            soft_bag_size: 8,
            bag_dim: 32,
            soft_bag_dim: 16,
            attention_dim: 16,
            selector_hidden: 16,
            aggregator_hidden: 16,
            risk_threshold_months: 36.0,
            saliency_threshold: 0.4,
            ranking_margin: 1e-3,
            beta_omega: 1e-5,
            beta_r: 1.0,
            lr_c1: 1e-4,
            batch_c1: 12,
            pretrain_epochs: 6,
            joint_epochs: 2,
            patience: 5,
            dropout: 0.1,
            self_paced: false,
            self_paced_quantile: 0.25,
            adc_margin: 1.0,
            beta_tcl: 1.0,
            beta_adc: 0.1,
            beta_s: 1e-4,
            gumbel_temperature: 0.5,
            lr_c2: 1e-2,
            momentum_c2: 0.9,
            batch_c2: 24,
            epochs_c2: 60,
            patience_c2: 20,
            grad_clip_c2: 5.0,
            literal_selection: false,
            mc_passes: 30,
            mc_dropout: 0.1,
            folds: 5,
            val_fraction: 0.2,
            rng_seed: 20240601,
            dataset: "synthetic".into(),
        }
    }

    /// Hyperparameters reported for the full-scale setting.
    pub fn full_scale() -> Self {
        Self {
            token_dim: 768,
            n_heads: 12,
            tile_side_coarse: 128,
            soft_bag_size: 30,
            bag_dim: 256,
            soft_bag_dim: 128,
            attention_dim: 128,
            selector_hidden: 128,
            aggregator_hidden: 128,
            lr_c1: 1e-5,
            batch_c1: 12,
            pretrain_epochs: 200,
            joint_epochs: 50,
            patience: 5,
            self_paced: true,
            lr_c2: 1e-5,
            batch_c2: 64,
            epochs_c2: 1000,
            patience_c2: 1000,
            grad_clip_c2: 0.0,
            ..Self::desk()
        }
    }

    /// Tile side at zero-based level `level` (0 = coarsest).
    pub fn tile_side(&self, level: usize) -> usize {
        self.tile_side_coarse << level
    }

    pub fn tokens_at(&self, level: usize) -> usize {
        let g = self.tile_side(level) / TOKEN_SIDE;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(CoreError::ConfigValue {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.magnifications == 0 {
            return bad("S", "need at least one magnification");
        }
        if self.tile_side_coarse == 0 || self.tile_side_coarse % TOKEN_SIDE != 0 {
            return bad("tile_side_coarse", "must be a positive multiple of 16");
        }
        if self.token_dim == 0 || self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return bad("n_heads", "token_dim must be a positive multiple of n_heads");
        }
        if self.n_blocks == 0 {
            return bad("n_blocks", "need at least one block");
        }
        if self.soft_bag_size == 0 {
            return bad("N_B", "soft-bag size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.saliency_threshold) {
            return bad("iota", "must lie in [0, 1]");
        }
        if !(self.gumbel_temperature > 0.0) {
            return bad("gumbel_temperature", "must be positive");
        }
        if !(self.risk_threshold_months > 0.0) {
            return bad("T_r", "must be positive");
        }
        for (k, v) in [
            ("beta_omega", self.beta_omega),
            ("beta_R", self.beta_r),
            ("beta_tcl", self.beta_tcl),
            ("beta_adc", self.beta_adc),
            ("beta_s", self.beta_s),
            ("eta", self.ranking_margin),
            ("kappa", self.adc_margin),
            ("grad_clip_c2", self.grad_clip_c2),
        ] {
            if !(v >= 0.0) {
                return bad(k, "must be nonnegative");
            }
        }
        for (k, v) in [("dropout", self.dropout), ("mc_dropout", self.mc_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return bad(k, "must lie in [0, 1)");
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.self_paced_quantile) {
            return bad("self_paced_quantile", "must lie in [0, 1]");
        }
        if self.folds < 2 {
            return bad("folds", "need at least two folds");
        }
        if self.batch_c1 == 0 {
            return bad("batch_c1", "must be positive");
        }
        if self.batch_c2 < 2 {
            return bad("batch_c2", "need at least two bags per batch");
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        w.put("S", self.magnifications)
            .put("token_dim", self.token_dim)
            .put("n_blocks", self.n_blocks)
            .put("n_heads", self.n_heads)
            .put("tile_side_coarse", self.tile_side_coarse)
            .put("N_B", self.soft_bag_size)
            .put("D", self.bag_dim)
            .put("D_B", self.soft_bag_dim)
            .put("D_hat", self.attention_dim)
            .put("selector_hidden", self.selector_hidden)
            .put("aggregator_hidden", self.aggregator_hidden)
            .put("T_r", self.risk_threshold_months)
            .put("iota", self.saliency_threshold)
            .put("eta", self.ranking_margin)
            .put("beta_omega", self.beta_omega)
            .put("beta_R", self.beta_r)
            .put("lr_c1", self.lr_c1)
            .put("batch_c1", self.batch_c1)
            .put("pretrain_epochs", self.pretrain_epochs)
            .put("joint_epochs", self.joint_epochs)
            .put("patience", self.patience)
            .put("dropout", self.dropout)
            .put("self_paced", self.self_paced)
            .put("self_paced_quantile", self.self_paced_quantile)
            .put("kappa", self.adc_margin)
            .put("beta_tcl", self.beta_tcl)
            .put("beta_adc", self.beta_adc)
            .put("beta_s", self.beta_s)
            .put("gumbel_temperature", self.gumbel_temperature)
            .put("lr_c2", self.lr_c2)
            .put("momentum_c2", self.momentum_c2)
            .put("batch_c2", self.batch_c2)
            .put("epochs_c2", self.epochs_c2)
            .put("patience_c2", self.patience_c2)
            .put("grad_clip_c2", self.grad_clip_c2)
            .put("literal_selection", self.literal_selection)
            .put("mc_passes", self.mc_passes)
            .put("mc_dropout", self.mc_dropout)
            .put("folds", self.folds)
            .put("val_fraction", self.val_fraction)
            .put("rng_seed", self.rng_seed)
            .put("dataset", &self.dataset);
        w.finish()
    }

    /// Consumes the run keys from `kv`, starting from the desk defaults.
    /// Keys belonging to other sections are left in place.
    pub fn take_from(kv: &mut KvFile) -> Result<Self> {
        let d = Self::desk();
        let cfg = Self {
            magnifications: kv.take("S", d.magnifications)?,
            token_dim: kv.take("token_dim", d.token_dim)?,
            n_blocks: kv.take("n_blocks", d.n_blocks)?,
            n_heads: kv.take("n_heads", d.n_heads)?,
            tile_side_coarse: kv.take("tile_side_coarse", d.tile_side_coarse)?,
            soft_bag_size: kv.take("N_B", d.soft_bag_size)?,
            bag_dim: kv.take("D", d.bag_dim)?,
            soft_bag_dim: kv.take("D_B", d.soft_bag_dim)?,
            attention_dim: kv.take("D_hat", d.attention_dim)?,
            selector_hidden: kv.take("selector_hidden", d.selector_hidden)?,
            aggregator_hidden: kv.take("aggregator_hidden", d.aggregator_hidden)?,
            risk_threshold_months: kv.take("T_r", d.risk_threshold_months)?,
            saliency_threshold: kv.take("iota", d.saliency_threshold)?,
            ranking_margin: kv.take("eta", d.ranking_margin)?,
            beta_omega: kv.take("beta_omega", d.beta_omega)?,
            beta_r: kv.take("beta_R", d.beta_r)?,
            lr_c1: kv.take("lr_c1", d.lr_c1)?,
            batch_c1: kv.take("batch_c1", d.batch_c1)?,
            pretrain_epochs: kv.take("pretrain_epochs", d.pretrain_epochs)?,
            joint_epochs: kv.take("joint_epochs", d.joint_epochs)?,
            patience: kv.take("patience", d.patience)?,
            dropout: kv.take("dropout", d.dropout)?,
            self_paced: kv.take("self_paced", d.self_paced)?,
            self_paced_quantile: kv.take("self_paced_quantile", d.self_paced_quantile)?,
            adc_margin: kv.take("kappa", d.adc_margin)?,
            beta_tcl: kv.take("beta_tcl", d.beta_tcl)?,
            beta_adc: kv.take("beta_adc", d.beta_adc)?,
            beta_s: kv.take("beta_s", d.beta_s)?,
            gumbel_temperature: kv.take("gumbel_temperature", d.gumbel_temperature)?,
            lr_c2: kv.take("lr_c2", d.lr_c2)?,
            momentum_c2: kv.take("momentum_c2", d.momentum_c2)?,
            batch_c2: kv.take("batch_c2", d.batch_c2)?,
            epochs_c2: kv.take("epochs_c2", d.epochs_c2)?,
            patience_c2: kv.take("patience_c2", d.patience_c2)?,
            grad_clip_c2: kv.take("grad_clip_c2", d.grad_clip_c2)?,
            literal_selection: kv.take("literal_selection", d.literal_selection)?,
            mc_passes: kv.take("mc_passes", d.mc_passes)?,
            mc_dropout: kv.take("mc_dropout", d.mc_dropout)?,
            folds: kv.take("folds", d.folds)?,
            val_fraction: kv.take("val_fraction", d.val_fraction)?,
            rng_seed: kv.take("rng_seed", d.rng_seed)?,
            dataset: kv.take("dataset", d.dataset)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file containing only run keys.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization; stamped into checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
