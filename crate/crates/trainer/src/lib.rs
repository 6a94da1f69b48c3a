//! End-to-end training: both curricula, k-fold cross-validation, Monte-Carlo
//! dropout confidence and run-directory artifacts.

pub mod crossval;
pub mod curriculum1;
pub mod curriculum2;
pub mod error;
pub mod folds;
pub mod uncertainty;

pub use crossval::{
    aggregate, crossval_run, encode_fold, evaluate_fold, fold_sets, mean_std, run_fold, shuffle_labels, write_evaluation, write_run,
    CrossvalReport, EncodedFold, FoldEvaluation, FoldOutput, FoldSets, PatientRisk,
};
pub use curriculum1::{encode_bag, train_curriculum1, C1Epoch, C1Outcome, C1Phase};
pub use curriculum2::{
    clip_gradients, plan_batches, predict, train_curriculum2, C2Bag, C2Epoch, C2Outcome, FeatureScaler,
};
pub use error::{Result, TrainError};
pub use folds::{id_hash, validation_split, FoldPlan};
pub use uncertainty::{uncertainty_run, UncertaintyOutcome};
